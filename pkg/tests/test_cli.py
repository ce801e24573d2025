"""End-to-end command-line tests, all through subprocesses."""

import csv
import json
import subprocess
import sys

import pytest

TINY = {
    "seed": 0,
    "data": {"n_public_classes": 3, "n_private_classes": 2, "per_class": 12,
             "channels": 2, "window_len": 32, "noise_std": 0.1},
    "vae": {"widths": [24, 12], "latent_dim": 8, "epochs": 6},
    "contrastive": {"embed_dim": 4, "epochs": 4, "negatives": 8},
    "ldm": {"steps": 60, "channels": [8, 12, 16], "t_dim": 8, "groups": 2},
    "aux": {"widths": [16, 12], "epochs": 10},
    "classifier": {"conv_channels": [4, 6, 8, 8], "fc_widths": [16, 12],
                   "epochs": 6},
    "mine": {"width": 16, "steps": 60, "batch_size": 64},
    "sweep": {"w_u_grid": [0, 3], "w_s_grid": [0.0, 0.03]},
}


def run_cli(*args, check=False):
    proc = subprocess.run([sys.executable, "-m", "obfusion.cli", *args],
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"command {args} failed rc={proc.returncode}\n"
                             f"stdout: {proc.stdout}\nstderr: {proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny corpus trained end to end once, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    out = root / "run"
    base = ("--config", str(cfg_path), "--out-dir", str(out))
    run_cli(*base, "gen-data", check=True)
    for stage in ("vae", "contrastive", "ldm", "aux"):
        run_cli(*base, "train", stage, check=True)
    run_cli(*base, "obfuscate", "--w-u", "3", "--w-s", "amp_class=0.03",
            "--seed", "5", check=True)
    return {"base": base, "out": out, "cfg": cfg_path}


class TestGenData:
    def test_default_corpus_is_512_segments(self, tmp_path):
        run_cli("--out-dir", str(tmp_path / "d"), "gen-data", check=True)
        schema = json.loads((tmp_path / "d" / "schema.json").read_text())
        assert schema["n_train"] + schema["n_test"] == 512

    def test_seed_repeat_gives_identical_digests(self, workspace, tmp_path):
        digests = []
        for sub in ("a", "b"):
            run_cli("--config", str(workspace["cfg"]), "--seed", "3",
                    "--out-dir", str(tmp_path / sub), "gen-data", check=True)
            schema = json.loads((tmp_path / sub / "schema.json").read_text())
            digests.append(schema["digests"])
        assert digests[0] == digests[1]

    def test_different_seed_changes_data(self, workspace, tmp_path):
        digests = []
        for seed in ("3", "4"):
            run_cli("--config", str(workspace["cfg"]), "--seed", seed,
                    "--out-dir", str(tmp_path / seed), "gen-data", check=True)
            schema = json.loads((tmp_path / seed / "schema.json").read_text())
            digests.append(schema["digests"])
        assert digests[0] != digests[1]

    def test_unknown_config_key_exits_2_naming_it(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"vae": {"nope": 1}}))
        proc = run_cli("--config", str(bad), "--out-dir",
                       str(tmp_path / "x"), "gen-data")
        assert proc.returncode == 2
        assert "vae.nope" in proc.stderr

    def test_invalid_json_exits_4(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        proc = run_cli("--config", str(bad), "--out-dir",
                       str(tmp_path / "x"), "gen-data")
        assert proc.returncode == 4


class TestTrain:
    def test_ldm_before_vae_exits_3_naming_stage(self, workspace, tmp_path):
        out = tmp_path / "fresh"
        run_cli("--config", str(workspace["cfg"]), "--out-dir", str(out),
                "gen-data", check=True)
        proc = run_cli("--config", str(workspace["cfg"]), "--out-dir",
                       str(out), "train", "ldm")
        assert proc.returncode == 3
        assert "vae" in proc.stderr

    def test_refuses_overwrite_without_force(self, workspace):
        proc = run_cli(*workspace["base"], "train", "vae")
        assert proc.returncode == 2
        assert "--force" in proc.stderr

    def test_force_overwrites(self, workspace):
        run_cli(*workspace["base"], "train", "vae", "--force", check=True)

    def test_loss_csv_has_one_row_per_step(self, workspace):
        with open(workspace["out"] / "ldm_loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == TINY["ldm"]["steps"]
        assert list(rows[0]) == ["step", "loss"]

    def test_manifest_lists_all_checkpoints(self, workspace):
        manifest = json.loads((workspace["out"] / "manifest.json").read_text())
        assert set(manifest["checkpoints"]) == {
            "vae", "contrastive", "ldm", "aux:amp_class"}
        for entry in manifest["checkpoints"].values():
            assert len(entry["digest"]) == 64


class TestObfuscate:
    def test_output_count_and_sidecar(self, workspace):
        sidecar = json.loads(
            (workspace["out"] / "obfuscated.clk.json").read_text())
        schema = json.loads((workspace["out"] / "schema.json").read_text())
        assert sidecar["n_segments"] == schema["n_test"]
        assert sidecar["flags"]["w_u"] == 3.0
        assert sidecar["flags"]["w_s"] == ["amp_class=0.03"]
        assert sidecar["flags"]["seed"] == 5
        assert set(sidecar["checkpoint_digests"]) >= {"vae", "ldm"}

    def test_zero_weight_equals_omitting_flag(self, workspace):
        out = workspace["out"]
        run_cli(*workspace["base"], "obfuscate", "--seed", "9",
                "--output", str(out / "plain.clk"), check=True)
        run_cli(*workspace["base"], "obfuscate", "--seed", "9",
                "--w-s", "amp_class=0",
                "--output", str(out / "zeroed.clk"), check=True)
        assert (out / "plain.clk").read_bytes() == \
            (out / "zeroed.clk").read_bytes()

    def test_unknown_attribute_exits_4(self, workspace):
        proc = run_cli(*workspace["base"], "obfuscate",
                       "--w-s", "height=0.5")
        assert proc.returncode == 4
        assert "height" in proc.stderr

    def test_malformed_ws_exits_2(self, workspace):
        proc = run_cli(*workspace["base"], "obfuscate", "--w-s", "amp_class")
        assert proc.returncode == 2

    def test_missing_bundle_exits_3(self, workspace, tmp_path):
        proc = run_cli("--config", str(workspace["cfg"]), "--out-dir",
                       str(tmp_path / "empty"), "obfuscate")
        assert proc.returncode == 3


class TestEvaluate:
    def test_writes_report_and_figure(self, workspace):
        run_cli(*workspace["base"], "evaluate", check=True)
        report = json.loads((workspace["out"] / "report.json").read_text())
        assert set(report["metrics"]) == {"freq_class", "amp_class"}
        assert report["metrics"]["amp_class"]["privacy_loss"] >= 0
        assert report["guidance"]["w_u"] == 3.0
        assert (workspace["out"] / "report.png").stat().st_size > 0

    def test_raw_input_reproduces_raw_metrics(self, workspace):
        """Scoring the untouched test split twice is bit-stable."""
        out = workspace["out"]
        run_cli(*workspace["base"], "evaluate", "--input",
                str(out / "test.clk"), check=True)
        first = json.loads((out / "report.json").read_text())["metrics"]
        run_cli(*workspace["base"], "evaluate", "--input",
                str(out / "test.clk"), check=True)
        second = json.loads((out / "report.json").read_text())["metrics"]
        assert first == second

    def test_missing_input_exits_3(self, workspace):
        proc = run_cli(*workspace["base"], "evaluate", "--input",
                       str(workspace["out"] / "nothing.clk"))
        assert proc.returncode == 3


class TestSweep:
    def test_row_count_header_and_outputs(self, workspace):
        run_cli(*workspace["base"], "sweep", check=True)
        out = workspace["out"]
        with open(out / "sweep.csv") as fh:
            text = fh.read()
        assert text.splitlines()[0] == \
            "w_u,w_s,utility_acc,utility_f1,intrusive_acc,privacy_loss"
        rows = list(csv.DictReader(text.splitlines()))
        grid = TINY["sweep"]
        assert len(rows) == len(grid["w_u_grid"]) * len(grid["w_s_grid"])
        assert (out / "tradeoff.png").stat().st_size > 0
        sidecar = json.loads((out / "sweep.json").read_text())
        assert sidecar["n_rows"] == len(rows)
        assert set(sidecar["checkpoint_digests"]) >= {"vae", "ldm"}


@pytest.fixture(scope="module")
def audited(tmp_path_factory):
    """Corpus big enough for the MI estimator's pairing minimum."""
    root = tmp_path_factory.mktemp("audit")
    cfg = dict(TINY)
    cfg["data"] = dict(TINY["data"], per_class=209)
    cfg["contrastive"] = dict(TINY["contrastive"], epochs=3)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    out = root / "run"
    base = ("--config", str(cfg_path), "--out-dir", str(out))
    run_cli(*base, "gen-data", check=True)
    run_cli(*base, "train", "contrastive", check=True)
    run_cli(*base, "audit", check=True)
    return out, cfg


class TestAudit:
    def test_mi_csv_has_epochs_times_attributes_rows(self, audited):
        out, cfg = audited
        with open(out / "mi_curves.csv") as fh:
            text = fh.read()
        assert text.splitlines()[0] == "epoch,attribute,mi_nats"
        rows = list(csv.DictReader(text.splitlines()))
        n_snapshots = cfg["contrastive"]["epochs"] + 1
        assert len(rows) == n_snapshots * 2
        assert (out / "mi_curves.png").stat().st_size > 0

    def test_audit_without_snapshots_exits_3(self, workspace, tmp_path):
        proc = run_cli("--config", str(workspace["cfg"]), "--out-dir",
                       str(tmp_path / "none"), "audit")
        assert proc.returncode == 3


class TestBench:
    def test_component_rows(self, workspace):
        run_cli(*workspace["base"], "bench", "--segments", "4",
                "--batches", "1", check=True)
        with open(workspace["out"] / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["component"] for r in rows] == \
            ["unet", "decoder", "aux-u", "aux-s", "total"]
        for row in rows:
            assert float(row["mean_ms_per_segment"]) > 0
        assert (workspace["out"] / "bench.png").stat().st_size > 0
