"""Figure rendering for the CLI report path.

Each eval/diagnose report written as JSON+CSV gets a PNG rendered next to
it. Rendering is deterministic: fixed size/dpi, Agg backend, no embedded
software metadata, so re-runs produce byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalharness import AttentionReport, ModeReport, PositionReport, ShiftProfile  # noqa: E402
from .tasks import MODES  # noqa: E402

_SAVE_KW = dict(dpi=150, metadata={"Software": None})


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _position_labels(positions) -> list[str]:
    return ["-".join(str(x) for x in p) if isinstance(p, (list, tuple)) else str(p) for p in positions]


def plot_position_report(report: PositionReport, path, title: str = "accuracy by gold position") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    labels = _position_labels(report.positions)
    ax.bar(range(len(labels)), report.accuracy, color="#4878a8")
    ax.axhline(report.avg, color="#c44e52", linestyle="--", linewidth=1, label=f"avg {report.avg:.3f}")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("gold position")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{title} (gap {report.gap:.3f})")
    ax.legend(loc="lower right")
    return _finish(fig, path)


def plot_mode_report(report: ModeReport, path, title: str = "two-hop accuracy by placement mode") -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.6))
    offset = 0
    colors = {"connected": "#4878a8", "disconnected": "#6acc64", "reversed": "#d65f5f"}
    ticks, labels = [], []
    for mode in MODES:
        rep = report.reports[mode]
        xs = [offset + i for i in range(len(rep.accuracy))]
        ax.bar(xs, rep.accuracy, color=colors[mode], label=mode)
        ticks.extend(xs)
        labels.extend(_position_labels(rep.positions))
        offset += len(rep.accuracy) + 1
    ax.set_xticks(ticks, labels, rotation=45, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(f"{title} (cross-mode gap {report.cross_mode_gap:.3f})")
    ax.legend(loc="lower right", fontsize=8)
    return _finish(fig, path)


def plot_shift_profiles(profiles: list[ShiftProfile], path, title: str = "per-token divergence profiles") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for i, profile in enumerate(profiles):
        ax.plot(profile.values, marker="o", markersize=3, linewidth=1, label=f"profile {i}" if len(profiles) <= 6 else None)
    ax.set_xlabel("response token index")
    ax.set_ylabel("KL (nats)")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_title(title)
    if len(profiles) <= 6:
        ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_attention_report(report: AttentionReport, path, title: str = "gold-document attention mass") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(report.positions, report.gold_mass, marker="s", color="#4878a8")
    ax.set_xlabel("gold position")
    ax.set_ylabel("mean attention mass on gold doc")
    ax.set_ylim(0, max(report.gold_mass) * 1.2 + 1e-6)
    ax.set_title(title)
    return _finish(fig, path)


def plot_history(history: dict, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = [e["epoch"] for e in history.get("epochs", [])]
    plotted = False
    for key, label in (
        ("act_loss", "activation"),
        ("anchor_loss", "anchoring"),
        ("ce_loss", "cross-entropy"),
        ("trajectory_loss", "trajectory"),
    ):
        series = [e[key] for e in history.get("epochs", []) if key in e]
        if series and len(series) == len(epochs):
            ax.plot(epochs, series, marker="o", label=label)
            plotted = True
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if plotted:
        ax.legend(fontsize=8)
    return _finish(fig, path)
