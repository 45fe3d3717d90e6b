"""Static line charts from record files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_curves(curves: dict, path, xlabel: str, ylabel: str, title: str = "") -> None:
    """``curves`` maps a label to a list of y values (x = index)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label in sorted(curves):
        ys = curves[label]
        ax.plot(range(len(ys)), ys, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_bars(values: dict, errors: dict, path, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = sorted(values)
    ax.bar(names, [values[n] for n in names], yerr=[errors.get(n, 0.0) for n in names], capsize=4)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.0)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def plot_record(record: dict, path) -> None:
    """Pick a chart from the record kind written by the CLI."""
    kind = record.get("kind")
    if kind == "active":
        plot_curves(record["mean_curves"], path, "acquisition iteration", "target accuracy", "active learning")
    elif kind == "continual":
        res = record["result"]
        plot_curves({"multi-head": res["accumulated_multi"], "single-head": res["accumulated_single"]},
                    path, "tasks observed - 1", "accumulated accuracy", "continual learning")
    elif kind == "metatrain":
        plot_curves({"train loss": [h["loss"] for h in record["history"]]}, path, "step", "episode loss",
                    "meta-training")
    elif kind == "pretrain":
        plot_curves({"loss": [h["loss"] for h in record["history"]],
                     "accuracy": [h["accuracy"] for h in record["history"]]}, path, "epoch", "value", "pretraining")
    elif kind is None and "families" in record:
        fams = record["families"]
        plot_bars({k: v["accuracy"] for k, v in fams.items()}, {k: v["ci95"] for k, v in fams.items()}, path,
                  "accuracy", f"evaluation {record.get('label', '')}".strip())
    else:
        raise ValueError(f"no plot for record kind {kind!r}")
