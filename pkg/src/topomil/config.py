"""Model and training configuration with validated defaults.

Both configs are plain dataclasses that round-trip through dicts so they
can live inside checkpoint headers. Validation happens in __post_init__,
so an object that exists is a usable one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .blocks import STRATEGY_BRANCHES
from .errors import ValidationError

TASKS = ("classification", "survival")
AGGREGATIONS = ("gia", "none")
COORD_METRICS = ("cosine", "euclidean")
PRECISIONS = ("f64", "f32")


@dataclass
class ModelConfig:
    input_dim: int
    model_dim: int = 128
    num_heads: int = 4
    head_dim: int = 32
    state_dim: int = 32
    expand: int = 2
    knn_k: int = 8
    scanning: str = "topology_aware"
    aggregation: str = "gia"
    residual: bool = False
    task: str = "classification"
    num_classes: int = 2
    num_bins: int = 4
    coord_metric: str = "cosine"
    precision: str = "f64"
    attn_dim: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be positive, got {self.input_dim}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ValidationError(
                f"model_dim {self.model_dim} must equal num_heads {self.num_heads} "
                f"* head_dim {self.head_dim}"
            )
        if self.state_dim < 1:
            raise ValidationError(f"state_dim must be positive, got {self.state_dim}")
        if self.expand < 1:
            raise ValidationError(f"expand must be at least 1, got {self.expand}")
        if self.knn_k < 1:
            raise ValidationError(f"knn_k must be at least 1, got {self.knn_k}")
        if self.scanning not in STRATEGY_BRANCHES:
            raise ValidationError(
                f"unknown scanning strategy {self.scanning!r}; "
                f"choose from {sorted(STRATEGY_BRANCHES)}"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.num_bins < 2:
            raise ValidationError(f"num_bins must be at least 2, got {self.num_bins}")
        if self.coord_metric not in COORD_METRICS:
            raise ValidationError(f"unknown coord_metric {self.coord_metric!r}")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"unknown precision {self.precision!r}")
        if self.attn_dim is None:
            self.attn_dim = self.model_dim // 2
        if self.attn_dim < 1:
            raise ValidationError(f"attn_dim must be positive, got {self.attn_dim}")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task == "classification" else self.num_bins

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return _build(cls, raw)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    max_epochs: int = 250
    patience: int = 20
    monitor: str | None = None  # filled from the task when left unset
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValidationError(
                f"patience {self.patience} must lie in [1, max_epochs={self.max_epochs}]"
            )
        if self.monitor is not None and self.monitor not in ("val_loss", "val_c_index"):
            raise ValidationError(f"unknown monitor {self.monitor!r}")

    def resolved_monitor(self, task: str) -> str:
        if self.monitor is not None:
            return self.monitor
        return "val_loss" if task == "classification" else "val_c_index"

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return _build(cls, raw)


def _build(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ValidationError(f"{cls.__name__}: unknown fields {sorted(extra)}")
    return cls(**raw)
