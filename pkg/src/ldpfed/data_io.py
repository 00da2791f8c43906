"""Datasets, IDX files, IID partitioning and metrics persistence."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ldpfed.errors import ConfigError, DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"features must be a 2-d matrix, got shape {x.shape}")
        if x.shape[0] != y.size:
            raise DataError(f"{x.shape[0]} feature rows but {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("features must be normalized to [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for IDX magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - header
    if have < need:
        raise FormatError(f"{what}: expected {need} data bytes, found {have}", offset=len(raw))
    if have > need:
        raise FormatError(f"{what}: {have - need} trailing bytes after data", offset=header + need)
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Load an IDX image/label pair (optionally gzip-compressed).

    Pixels are unsigned bytes scaled by 1/255 and each image is flattened to
    one feature row.  ``class_count`` defaults to ``max(label) + 1``.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}", offset=4
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, class_count)


def write_idx(data: Dataset, images_path, labels_path, shape: tuple[int, ...] | None = None):
    """Write ``data`` as an IDX pair.  Features must sit on the k/255 grid."""
    pixels = np.rint(data.features * 255.0)
    if not np.allclose(pixels / 255.0, data.features, rtol=0, atol=1e-12):
        raise DataError("features are not representable as unsigned bytes")
    if shape is None:
        shape = (data.dim,)
    if int(np.prod(shape)) != data.dim:
        raise DataError(f"image shape {shape} does not match feature width {data.dim}")
    n = len(data)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", 0x800 | (1 + len(shape))))
        f.write(struct.pack(f">{1 + len(shape)}I", n, *shape))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


# -- synthetic data ----------------------------------------------------------


def synth_dataset(classes: int, per_class: int, d: int, separation: float, seed: int) -> Dataset:
    """Gaussian blobs with class means on a sphere of radius ``separation``.

    Features have unit variance around their class mean, then go through the
    fixed affine map x -> 0.5 + x / (2 * (separation + 4)) and are clipped to
    [0, 1].  Examples are returned in a seeded random order.
    """
    if min(classes, per_class, d) < 1 or separation < 0:
        raise ConfigError("synthetic dataset sizes must be positive and separation >= 0")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.standard_normal((labels.size, d))
    x = np.clip(0.5 + x / (2.0 * (separation + 4.0)), 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    n_test = int(round(len(data) * test_fraction))
    if n_test < 1 or n_test >= len(data):
        raise ConfigError(f"test_fraction {test_fraction} leaves an empty split")
    order = np.random.default_rng(seed).permutation(len(data))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# -- partitioning ------------------------------------------------------------


def partition_indices(n: int, num_shards: int, seed: int) -> list[np.ndarray]:
    if num_shards < 1:
        raise ConfigError("number of shards must be >= 1")
    if num_shards > n:
        raise ConfigError(f"cannot split {n} examples into {num_shards} non-empty shards")
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, num_shards)


def partition(data: Dataset, num_shards: int, seed: int) -> list[Dataset]:
    """IID split: seeded shuffle, then contiguous shards differing in size by at most one."""
    return [data.subset(idx) for idx in partition_indices(len(data), num_shards, seed)]


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    round: int
    arm: str
    test_accuracy: float
    test_loss: float
    alpha_spent: float
    wall_ms: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def metrics_jsonl(rows) -> str:
    return "".join(json.dumps(asdict(r)) + "\n" for r in rows)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_metrics(rows, directory, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.jsonl`` and ``<stem>.csv`` under ``directory``."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    jsonl_path = directory / f"{stem}.jsonl"
    csv_path = directory / f"{stem}.csv"
    jsonl_path.write_text(metrics_jsonl(rows))
    csv_path.write_text(metrics_csv(rows))
    return jsonl_path, csv_path


def read_metrics_jsonl(path) -> list[MetricsRow]:
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(MetricsRow(**json.loads(line)))
    return rows
