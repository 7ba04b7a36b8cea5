"""Delimited report files and rendered figures.

Tab-separated values are the interchange format everywhere: floats carry
six fractional digits, everything else is written verbatim. Figures are
rendered headlessly to PNG next to the tables they illustrate.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError


def format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_tsv(path: str | os.PathLike, columns: list[str], rows: list[dict]) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise ValidationError(f"row missing columns {missing}")
        lines.append("\t".join(format_cell(row[c]) for c in columns))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def roc_points(labels: list[int] | np.ndarray,
               scores: list[float] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ROC curve as (fpr, tpr) arrays, one point per distinct score threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise ValidationError("ROC curve needs both classes present")
    order = np.argsort(-scores, kind="stable")
    fpr, tpr = [0.0], [0.0]
    tp = fp = 0
    for i, idx in enumerate(order):
        if labels[idx] == 1:
            tp += 1
        else:
            fp += 1
        last = i + 1 == len(order)
        if last or scores[order[i + 1]] != scores[idx]:
            tpr.append(tp / pos)
            fpr.append(fp / neg)
    return np.array(fpr), np.array(tpr)


def render_history(history: list[dict], columns: list[str], path: str | os.PathLike) -> None:
    """Loss curves on the left axis, bounded validation metrics on the right."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    for col in columns:
        if col.endswith("loss"):
            ax.plot(epochs, [row[col] for row in history], label=col)
    metric_cols = [c for c in columns if c != "epoch" and not c.endswith("loss")]
    if metric_cols:
        ax2 = ax.twinx()
        ax2.set_ylabel("metric")
        for col in metric_cols:
            ax2.plot(epochs, [row[col] for row in history],
                     linestyle="--", label=col)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="best", fontsize=8)
    else:
        ax.legend(loc="best", fontsize=8)
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_roc(labels, scores, path: str | os.PathLike) -> None:
    fpr, tpr = roc_points(labels, scores)
    fig, ax = plt.subplots(figsize=(4.8, 4.8))
    ax.plot(fpr, tpr, drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_risk(times, events, risks, path: str | os.PathLike) -> None:
    """Predicted risk against the recorded time bin, split by event status."""
    times = np.asarray(times)
    events = np.asarray(events)
    risks = np.asarray(risks, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for status, marker in (("observed", "o"), ("censored", "x")):
        mask = events == status
        if mask.any():
            ax.scatter(times[mask], risks[mask], marker=marker, label=status)
    ax.set_xlabel("time bin")
    ax.set_ylabel("predicted risk")
    ax.set_title("risk vs. follow-up")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_bench(lengths, medians, path: str | os.PathLike) -> None:
    lengths = np.asarray(lengths, dtype=np.float64)
    medians = np.asarray(medians, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    ax.loglog(lengths, medians, marker="o", label="measured")
    # linear reference anchored at the first measurement
    ax.loglog(lengths, medians[0] * lengths / lengths[0],
              linestyle=":", color="gray", label="linear")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median seconds")
    ax.set_title("scan wall time")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
