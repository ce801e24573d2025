import re


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    number, name = match.groups()
    verdict = "PASS" if report.passed else "FAIL"
    print(f"\n[ACCEPTANCE] criterion {int(number):2d} "
          f"({name.replace('_', ' ')}): {verdict}", flush=True)
