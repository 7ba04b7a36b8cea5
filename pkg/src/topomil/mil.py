"""Bag-level pooling, task losses, and evaluation metrics.

The pooling layer scores every instance with a small tanh attention
network and returns the softmax-weighted average of the instance
representations. Losses cover both tasks: softmax cross entropy for
classification, and a discrete-time hazard likelihood for survival where
each time bin's logit models the conditional event probability given
survival so far.

Metrics are plain floats over numpy arrays, not differentiated. A metric
whose value does not exist for the given inputs (AUC with one class,
concordance with no comparable pairs) raises `UndefinedMetricError`; the
reporting layer omits it rather than printing a placeholder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import DimensionError, UndefinedMetricError, ValidationError
from .numerics import Tensor

EVENT_OBSERVED = "observed"
EVENT_CENSORED = "censored"


@dataclass
class AttentionPool:
    """Gated instance attention: score = tanh(h V) w, softmax over the bag."""

    v: Tensor  # (D, A)
    w: Tensor  # (A, 1)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, attn_dim: int,
             dtype=np.float64) -> "AttentionPool":
        return cls(
            v=nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, attn_dim)), dtype=dtype),
            w=nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=(attn_dim, 1)), dtype=dtype),
        )

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.v": self.v, f"{prefix}.w": self.w}


def attention_pool(h: Tensor, pool: AttentionPool) -> tuple[Tensor, Tensor]:
    """Pool (M, D) instance features into one (1, D) bag vector.

    Returns (bag_vector, attention) where attention is the (M, 1) softmax
    over instances; it sums to one and is worth inspecting per bag.
    """
    if h.data.ndim != 2 or h.data.shape[1] != pool.v.data.shape[0]:
        raise DimensionError(
            f"attention_pool: h{h.data.shape} does not match V{pool.v.data.shape}"
        )
    scores = nm.matmul(nm.tanh(nm.matmul(h, pool.v)), pool.w)  # (M, 1)
    alpha = nm.softmax(scores, axis=0)
    m = h.data.shape[0]
    z = nm.matmul(nm.reshape(alpha, (1, m)), h)
    return z, alpha


# === losses ===

def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax negative log likelihood of one label: lse(logits) - logits[label]."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy: need 1-D logits, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= label < n:
        raise ValidationError(f"cross_entropy: label {label} outside {n} classes")
    picked = nm.sum_all(nm.gather_rows(logits, [label]))
    return nm.sub(nm.logsumexp(logits), picked)


def survival_nll(logits: Tensor, time_bin: int, event: str) -> Tensor:
    """Discrete-time hazard negative log likelihood for one bag.

    Each logit is the hazard logit of its time bin. An observed event at
    bin t means surviving every earlier bin and failing at t:

        sum_{tau < t} softplus(logit_tau) + softplus(-logit_t)

    A censored bag is only known to survive through bin t:

        sum_{tau <= t} softplus(logit_tau)
    """
    if logits.data.ndim != 1:
        raise DimensionError(f"survival_nll: need 1-D logits, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= time_bin < n:
        raise ValidationError(f"survival_nll: time bin {time_bin} outside {n} bins")
    if event == EVENT_OBSERVED:
        survived = nm.sum_all(nm.softplus(nm.gather_rows(logits, np.arange(time_bin))))
        failed = nm.sum_all(nm.softplus(nm.neg(nm.gather_rows(logits, [time_bin]))))
        return nm.add(survived, failed)
    if event == EVENT_CENSORED:
        return nm.sum_all(nm.softplus(nm.gather_rows(logits, np.arange(time_bin + 1))))
    raise ValidationError(f"survival_nll: unknown event kind {event!r}")


def survival_risk(hazards: np.ndarray) -> float:
    """Expected lifetime risk from per-bin hazards: sum_t (1 - S(t)).

    S(t) is the survival curve prod_{tau <= t} (1 - h_tau); higher risk
    means earlier expected failure.
    """
    h = np.asarray(hazards, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise DimensionError(f"survival_risk: need non-empty 1-D hazards, got shape {h.shape}")
    if (h < 0).any() or (h > 1).any():
        raise ValidationError("survival_risk: hazards must lie in [0, 1]")
    survival = np.cumprod(1.0 - h)
    return float((1.0 - survival).sum())


# === metrics ===

def accuracy(prob_matrix: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of correct predictions.

    Two classes: positive iff the class-1 probability reaches the
    threshold (exactly hitting it counts positive). More classes: argmax.
    """
    probs = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != y.shape[0]:
        raise DimensionError(f"accuracy: probs{probs.shape} vs {y.shape[0]} labels")
    if y.size == 0:
        raise ValidationError("accuracy: no labels")
    if probs.shape[1] == 2:
        preds = (probs[:, 1] >= threshold).astype(y.dtype)
    else:
        preds = probs.argmax(axis=1).astype(y.dtype)
    return float((preds == y).mean())


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary ranking AUC by the average-rank form of Mann-Whitney U.

    Tied scores receive their averaged rank, so a tied positive/negative
    pair contributes one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise DimensionError(f"auc: scores{s.shape} vs labels{y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("auc: labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auc undefined with {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def classification_auc(prob_matrix: np.ndarray, labels: np.ndarray) -> float:
    """AUC of the class-1 probability for two classes; otherwise the macro
    one-vs-rest average. Undefined whenever any needed class is absent."""
    probs = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != y.shape[0]:
        raise DimensionError(f"classification_auc: probs{probs.shape} vs {y.shape[0]} labels")
    if probs.shape[1] == 2:
        return auc(probs[:, 1], y)
    per_class = [auc(probs[:, c], (y == c).astype(int)) for c in range(probs.shape[1])]
    return float(np.mean(per_class))


def c_index(risks: np.ndarray, time_bins: np.ndarray, events) -> float:
    """Concordance of risk scores with outcome order.

    A pair (i, j) is comparable when bag i failed strictly earlier
    (time_i < time_j) and its event was observed; it is concordant when
    the earlier failure got the higher risk, tied risks counting half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(time_bins)
    observed = np.asarray([_as_observed(e) for e in events], dtype=bool)
    if r.ndim != 1 or r.shape != t.shape or r.shape != observed.shape:
        raise DimensionError(
            f"c_index: risks{r.shape}, times{t.shape}, events({observed.shape[0]},) must align"
        )
    num = 0.0
    den = 0
    for i in range(r.size):
        if not observed[i]:
            continue
        later = t > t[i]
        den += int(later.sum())
        num += float((r[i] > r[later]).sum()) + 0.5 * float((r[i] == r[later]).sum())
    if den == 0:
        raise UndefinedMetricError("c_index undefined: no comparable pairs")
    return num / den


def _as_observed(event) -> bool:
    if isinstance(event, str):
        if event == EVENT_OBSERVED:
            return True
        if event == EVENT_CENSORED:
            return False
        raise ValidationError(f"c_index: unknown event kind {event!r}")
    return bool(event)


# === reporting ===

@dataclass
class MetricsReport:
    """Named metric values in a fixed order, rendered as two-column TSV."""

    values: dict[str, float] = field(default_factory=dict)

    def set(self, name: str, value: float) -> None:
        self.values[name] = float(value)

    def get(self, name: str) -> float:
        return self.values[name]

    def to_tsv(self) -> str:
        lines = ["metric\tvalue"]
        for name, value in self.values.items():
            lines.append(f"{name}\t{value:.6f}")
        return "\n".join(lines) + "\n"
