"""Training loop, rectified-Adam optimizer, and checkpoint files.

Training processes one bag per step. The optimizer follows the rectified
Adam schedule: while the variance estimate is too young to trust
(rectification term rho_t at or below four) the step is plain momentum
lr * m_hat, afterwards the variance-rectified Adam step. Weight decay is
decoupled from the gradient and applied uniformly to every parameter.

A checkpoint is a single binary file:

    b"TMCK" | u32 version | u32 header_len | header JSON | raw payload

where the header records the model config, tensor names, shapes, dtypes,
and any extra metadata, and the payload is the concatenation of the
tensor buffers in header order, little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import ModelConfig, TrainConfig
from .data import DatasetManifest, load_bag
from .errors import FormatError, NumericError, ValidationError
from .model import (
    GraphCache,
    Model,
    bag_loss,
    build_model,
    evaluate_model,
    forward_bag,
    set_parameters,
)
from .numerics import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"TMCK"
CHECKPOINT_VERSION = 1


class RAdam:
    """Rectified Adam over a fixed dict of named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        if lr < 0 or weight_decay < 0:
            raise ValidationError(
                f"RAdam: lr {lr} and weight_decay {weight_decay} must be non-negative"
            )
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.rho_inf = 2.0 / (1.0 - BETA2) - 1.0

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        beta2_t = BETA2 ** t
        rho_t = self.rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
        rectified = rho_t > 4.0
        if rectified:
            r_num = (rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
            r_den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t
            rect = np.sqrt(r_num / r_den)
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            m_hat = m / (1.0 - BETA1 ** t)
            if rectified:
                v_hat = np.sqrt(v / (1.0 - beta2_t))
                update = self.lr * rect * m_hat / (v_hat + ADAM_EPS)
            else:
                update = self.lr * m_hat
            if self.weight_decay > 0.0:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update


@dataclass
class EarlyStopper:
    """Stop after `patience` epochs without strict improvement."""

    patience: int
    mode: str  # "min" or "max"
    best: float | None = None
    best_epoch: int = 0
    _stale: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("min", "max"):
            raise ValidationError(f"EarlyStopper: unknown mode {self.mode!r}")
        if self.patience < 1:
            raise ValidationError(f"EarlyStopper: patience must be >= 1, got {self.patience}")

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch's monitored value; True when it improved."""
        improved = (
            np.isfinite(value)
            and (
                self.best is None
                or (value < self.best if self.mode == "min" else value > self.best)
            )
        )
        if improved:
            self.best = float(value)
            self.best_epoch = epoch
            self._stale = 0
        else:
            self._stale += 1
        return bool(improved)

    @property
    def should_stop(self) -> bool:
        return self._stale >= self.patience


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_value: float = float("nan")
    epochs_run: int = 0
    stopped_early: bool = False
    monitor: str = ""


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.named_parameters().items()}


def train(model: Model, manifest: DatasetManifest, train_cfg: TrainConfig) -> TrainResult:
    """Fit the model on the train split, monitoring the val split.

    One optimizer step per bag, bags reshuffled each epoch. The best
    parameters by the monitored metric are restored into the model when
    training ends. History carries one row per epoch with fixed columns
    for the task.
    """
    task = model.config.task
    monitor = train_cfg.resolved_monitor(task)
    mode = "min" if monitor == "val_loss" else "max"
    train_records = manifest.split("train")
    if not train_records:
        raise ValidationError("train: the train split is empty")
    if not manifest.split("val"):
        raise ValidationError("train: the val split is empty")

    rng = np.random.default_rng(train_cfg.seed)
    cache: GraphCache = {}
    # keep the training bags resident; val is read through evaluate_model
    # and the test split is never touched here
    bags = {r.bag_id: load_bag(manifest, r) for r in train_records}
    optimizer = RAdam(model.named_parameters(), train_cfg.lr, train_cfg.weight_decay)
    stopper = EarlyStopper(patience=train_cfg.patience, mode=mode)
    result = TrainResult(monitor=monitor)
    best = _snapshot(model)
    metric_columns = (
        ("val_accuracy", "val_auc") if task == "classification" else ("val_c_index",)
    )

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_records))
        epoch_losses = []
        for idx in order:
            bag = bags[train_records[idx].bag_id]
            tape = nm.Tape()
            with nm.recording(tape):
                out = forward_bag(model, bag, rng, cache)
                loss = bag_loss(out, bag, task)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"train: non-finite loss on bag {bag.bag_id!r} in epoch {epoch}"
                )
            epoch_losses.append(value)
            optimizer.zero_grads()
            nm.backward(loss, tape)
            optimizer.step()

        val_report, _ = evaluate_model(model, manifest, "val", cache)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_report.get("loss"),
        }
        for column in metric_columns:
            metric = column[len("val_"):]
            row[column] = val_report.values.get(metric, float("nan"))
        result.history.append(row)

        if stopper.update(row[monitor], epoch):
            best = _snapshot(model)
        if stopper.should_stop:
            result.stopped_early = True
            break

    result.epochs_run = len(result.history)
    result.best_epoch = stopper.best_epoch
    result.best_value = float("nan") if stopper.best is None else stopper.best
    set_parameters(model, best)
    return result


# === checkpoints ===

def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    params = model.named_parameters()
    tensors = []
    payload = bytearray()
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data)
        code = {"float64": "<f8", "float32": "<f4"}.get(arr.dtype.name)
        if code is None:
            raise ValidationError(f"save_checkpoint: {name} has unsupported dtype {arr.dtype}")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payload += arr.astype(code).tobytes()
    header = {
        "model_config": model.config.as_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
        + header_bytes
        + bytes(payload)
    )
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[Model, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated checkpoint, {len(blob)} bytes of 12")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: header claims {header_len} bytes, file too short")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    try:
        config = ModelConfig.from_dict(header["model_config"])
        tensor_meta = header["tensors"]
        extra = header.get("extra", {})
    except (KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc

    arrays = {}
    offset = 12 + header_len
    for meta in tensor_meta:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: payload ends inside tensor {meta['name']!r}")
        arrays[meta["name"]] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")

    model = build_model(config)
    try:
        set_parameters(model, arrays)
    except ValidationError as exc:
        raise FormatError(f"{path}: checkpoint does not match its config: {exc}") from exc
    return model, extra


def evaluate_checkpoint(checkpoint_path, manifest: DatasetManifest, split: str):
    """Load a checkpoint and score one split; returns (report, rows, model)."""
    model, _ = load_checkpoint(checkpoint_path)
    report, rows = evaluate_model(model, manifest, split)
    return report, rows, model
