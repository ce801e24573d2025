"""Figure rendering for reports: trade-off curves, MI trajectories, losses.

Everything draws through the Agg backend and writes straight to disk, so
the CLI can emit figures next to its CSV/JSON outputs on headless boxes.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402


def plot_tradeoff(rows: list[dict], path: str | os.PathLike) -> str:
    """Utility and intrusive accuracy versus w_u, one series per w_s."""
    if not rows:
        raise ConfigError("no sweep rows to plot")
    by_ws: dict[float, list[dict]] = {}
    for row in rows:
        by_ws.setdefault(float(row["w_s"]), []).append(row)

    fig, (ax_u, ax_s) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    for w_s in sorted(by_ws):
        series = sorted(by_ws[w_s], key=lambda r: float(r["w_u"]))
        xs = [float(r["w_u"]) for r in series]
        label = f"w_s = {w_s:g}"
        ax_u.plot(xs, [float(r["utility_acc"]) for r in series],
                  marker="o", label=label)
        ax_s.plot(xs, [float(r["intrusive_acc"]) for r in series],
                  marker="o", label=label)
    ax_u.set_ylabel("utility accuracy")
    ax_s.set_ylabel("intrusive accuracy")
    ax_s.set_xlabel("public guidance weight w_u")
    ax_u.set_title("privacy-utility trade-off")
    ax_u.grid(alpha=0.3)
    ax_s.grid(alpha=0.3)
    ax_u.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return os.fspath(path)


def plot_mi_curves(rows: list[dict], path: str | os.PathLike) -> str:
    """Per-attribute mutual information across training epochs."""
    if not rows:
        raise ConfigError("no MI rows to plot")
    by_attr: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        by_attr.setdefault(str(row["attribute"]), []).append(
            (int(row["epoch"]), float(row["mi_nats"])))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for attr in sorted(by_attr):
        series = sorted(by_attr[attr])
        ax.plot([e for e, _ in series], [v for _, v in series],
                marker="o", markersize=3, label=attr)
    ax.set_xlabel("epoch")
    ax.set_ylabel("estimated MI (nats)")
    ax.set_title("embedding information by attribute")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return os.fspath(path)


def plot_bars(items: dict[str, float], path: str | os.PathLike,
              ylabel: str, title: str = "") -> str:
    if not items:
        raise ConfigError("nothing to plot")
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(items)), 4))
    names = list(items)
    ax.bar(names, [items[n] for n in names], color="tab:blue", alpha=0.85)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return os.fspath(path)


def plot_loss_history(losses: list[float], path: str | os.PathLike,
                      label: str = "loss") -> str:
    if not losses:
        raise ConfigError("no loss history to plot")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(1, len(losses) + 1), losses)
    ax.set_xlabel("step")
    ax.set_ylabel(label)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return os.fspath(path)
