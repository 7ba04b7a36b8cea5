"""Bag files, dataset manifests, and the synthetic witness generator.

A bag file is a small binary container:

    b"MMB1" | u32 M | u32 D | M*D float32 features | M*2 float32 coords

with all integers and floats little-endian. A dataset is a directory of
bag files plus a JSON manifest listing id, relative path, split, and the
task target of every bag. Manifests are written with sorted keys and a
fixed indent so regeneration is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .graphs import InstanceBag

BAG_MAGIC = b"MMB1"
SPLITS = ("train", "val", "test")


def write_bag(path, features: np.ndarray, coords: np.ndarray) -> None:
    features = np.asarray(features)
    coords = np.asarray(coords)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValidationError(f"write_bag: bad feature shape {features.shape}")
    if coords.shape != (features.shape[0], 2):
        raise ValidationError(
            f"write_bag: coords{coords.shape} do not match {features.shape[0]} instances"
        )
    if not (np.isfinite(features).all() and np.isfinite(coords).all()):
        raise ValidationError("write_bag: features and coords must be finite")
    m, d = features.shape
    blob = (
        BAG_MAGIC
        + struct.pack("<II", m, d)
        + np.ascontiguousarray(features, dtype="<f4").tobytes()
        + np.ascontiguousarray(coords, dtype="<f4").tobytes()
    )
    Path(path).write_bytes(blob)


def read_bag(path) -> tuple[np.ndarray, np.ndarray]:
    """Read one bag file back as (features (M, D), coords (M, 2)), float32."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes of 12")
    if blob[:4] != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {BAG_MAGIC!r}")
    m, d = struct.unpack("<II", blob[4:12])
    if m < 1 or d < 1:
        raise FormatError(f"{path}: degenerate shape ({m}, {d}) in header")
    expected = 12 + 4 * m * d + 8 * m
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    feat = np.frombuffer(blob, dtype="<f4", count=m * d, offset=12).reshape(m, d)
    coords = np.frombuffer(blob, dtype="<f4", count=m * 2, offset=12 + 4 * m * d).reshape(m, 2)
    return feat.copy(), coords.copy()


@dataclass
class BagRecord:
    bag_id: str
    file: str  # path relative to the manifest
    split: str
    label: int | None = None
    time_bin: int | None = None
    event: str | None = None


@dataclass
class DatasetManifest:
    dim: int
    bags: list[BagRecord]
    root: Path

    def split(self, name: str) -> list[BagRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}; choose from {SPLITS}")
        return [b for b in self.bags if b.split == name]

    def bag_path(self, record: BagRecord) -> Path:
        return self.root / record.file


def _record_payload(record: BagRecord) -> dict:
    entry = {"id": record.bag_id, "file": record.file, "split": record.split}
    if record.label is not None:
        entry["label"] = record.label
    if record.time_bin is not None:
        entry["time_bin"] = record.time_bin
        entry["event"] = record.event
    return entry


def write_manifest(path, dim: int, records: list[BagRecord]) -> None:
    payload = {"dim": int(dim), "bags": [_record_payload(r) for r in records]}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    text = path.read_text()  # a missing file is a caller error, not bad data
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(payload, dict) or "dim" not in payload or "bags" not in payload:
        raise FormatError(f"{path}: manifest must carry 'dim' and 'bags'")
    dim = payload["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise FormatError(f"{path}: bad dim {dim!r}")
    records = []
    seen = set()
    for i, entry in enumerate(payload["bags"]):
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: bag entry {i} is not an object")
        try:
            record = BagRecord(
                bag_id=entry["id"],
                file=entry["file"],
                split=entry["split"],
                label=entry.get("label"),
                time_bin=entry.get("time_bin"),
                event=entry.get("event"),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: bag entry {i} is missing {exc}") from exc
        if record.split not in SPLITS:
            raise FormatError(f"{path}: bag {record.bag_id!r} has unknown split {record.split!r}")
        if record.bag_id in seen:
            raise FormatError(f"{path}: duplicate bag id {record.bag_id!r}")
        if (record.time_bin is None) != (record.event is None):
            raise FormatError(
                f"{path}: bag {record.bag_id!r} must carry time_bin and event together"
            )
        if record.event is not None and record.event not in ("observed", "censored"):
            raise FormatError(f"{path}: bag {record.bag_id!r} has unknown event {record.event!r}")
        if record.label is None and record.time_bin is None:
            raise FormatError(f"{path}: bag {record.bag_id!r} carries no target")
        seen.add(record.bag_id)
        records.append(record)
    return DatasetManifest(dim=dim, bags=records, root=path.parent)


def load_bag(manifest: DatasetManifest, record: BagRecord) -> InstanceBag:
    features, coords = read_bag(manifest.bag_path(record))
    if features.shape[1] != manifest.dim:
        raise FormatError(
            f"{record.file}: feature width {features.shape[1]} does not match "
            f"manifest dim {manifest.dim}"
        )
    return InstanceBag(
        bag_id=record.bag_id,
        features=features.astype(np.float64),
        coords=coords.astype(np.float64),
        label=record.label,
        time_bin=record.time_bin,
        event=record.event,
    )


# === synthetic data ===

WITNESS_DIMS = 8          # leading feature dimensions the witnesses shift
MAX_WITNESSES = 5
JITTER = 0.25
MIN_INSTANCES = 50
MAX_INSTANCES = 200


def _bag_geometry(rng: np.random.Generator, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    m = int(rng.integers(MIN_INSTANCES, MAX_INSTANCES + 1))
    side = int(np.ceil(np.sqrt(m)))
    cells = np.arange(m)
    grid = np.stack([cells // side, cells % side], axis=1).astype(np.float64)
    coords = grid + 1.0 + rng.uniform(-JITTER, JITTER, size=(m, 2))
    features = rng.standard_normal((m, input_dim))
    return features, coords


def _plant_witnesses(rng: np.random.Generator, features: np.ndarray,
                     count: int, shift: float) -> None:
    if count == 0:
        return
    idx = rng.choice(features.shape[0], size=count, replace=False)
    features[idx, : min(WITNESS_DIMS, features.shape[1])] += shift


def synth_generate(
    out_dir,
    task: str = "classification",
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 100,
    input_dim: int = 32,
    witness_shift: float = 3.0,
    seed: int = 0,
    num_bins: int = 4,
    censor_fraction: float = 0.25,
) -> Path:
    """Generate a synthetic witness dataset and return the manifest path.

    Positive bags (or early-failing bags for survival) hide a handful of
    witness instances whose leading features are shifted by
    `witness_shift`; at shift zero the dataset carries no signal at all,
    which makes a clean null control.
    """
    if task not in ("classification", "survival"):
        raise ValidationError(f"synth_generate: unknown task {task!r}")
    if min(n_train, n_val, n_test) < 1:
        raise ValidationError("synth_generate: every split needs at least 1 bag")
    if n_train + n_val + n_test < 4:
        raise ValidationError("synth_generate: need at least 4 bags overall")
    if input_dim < 1:
        raise ValidationError(f"synth_generate: bad input_dim {input_dim}")
    if not 0.0 <= censor_fraction < 1.0:
        raise ValidationError(f"synth_generate: bad censor_fraction {censor_fraction}")
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    records: list[BagRecord] = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if task == "classification":
            labels = np.zeros(count, dtype=int)
            labels[: count // 2] = 1
            labels = labels[rng.permutation(count)]
        for i in range(count):
            bag_id = f"{split}_{i:04d}"
            features, coords = _bag_geometry(rng, input_dim)
            if task == "classification":
                label = int(labels[i])
                n_w = int(rng.integers(1, MAX_WITNESSES + 1)) if label == 1 else 0
                _plant_witnesses(rng, features, n_w, witness_shift)
                record = BagRecord(bag_id, f"bags/{bag_id}.bag", split, label=label)
            else:
                n_w = int(rng.integers(0, MAX_WITNESSES + 1))
                _plant_witnesses(rng, features, n_w, witness_shift)
                raw = (num_bins - 1) * (1.0 - n_w / MAX_WITNESSES) + rng.normal(0.0, 0.45)
                time_bin = int(np.clip(np.round(raw), 0, num_bins - 1))
                event = "censored" if rng.uniform() < censor_fraction else "observed"
                record = BagRecord(
                    bag_id, f"bags/{bag_id}.bag", split, time_bin=time_bin, event=event
                )
            write_bag(bag_dir / f"{bag_id}.bag", features, coords)
            records.append(record)

    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, input_dim, records)
    return manifest_path
