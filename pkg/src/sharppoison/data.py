"""Desk-scale datasets: synthetic generators plus CSV and IDX readers.

Every generated feature lies in [0, 1] and splits are deterministic in the
source seed.
"""

from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import LabeledBatch


class DataFormatError(ValueError):
    """Malformed dataset file; the message carries the byte offset."""


@dataclass(frozen=True)
class DatasetSource:
    """What to load or generate.

    ``kind`` is one of ``gaussians``, ``two_moons``, ``spirals``, ``csv`` or
    ``idx_images``; ``params`` holds the kind-specific knobs (see
    :func:`gen_dataset`).
    """

    kind: str = "gaussians"
    n_train: int = 200
    n_test: int = 200
    seed: int = 0
    params: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {"kind": self.kind, "n_train": self.n_train, "n_test": self.n_test, "seed": self.seed, **self.params}


# moons live in x in [-1, 2], y in [-0.5, 1]; a fixed map keeps the arcs recoverable
MOONS_OFFSET = np.array([1.5, 1.0])
MOONS_SCALE = np.array([4.0, 2.5])


def moons_to_unit(points: np.ndarray) -> np.ndarray:
    return (points + MOONS_OFFSET) / MOONS_SCALE


def unit_to_moons(points: np.ndarray) -> np.ndarray:
    return points * MOONS_SCALE - MOONS_OFFSET


def _balanced_labels(n, classes, rng):
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def _gaussians(n, rng, classes=2, dim=10, separation=3.0):
    """Unit-variance blobs; class means spaced ``separation`` apart on random directions."""
    labels = _balanced_labels(n, classes, rng)
    means_rng = np.random.default_rng(rng.integers(2**63))
    if classes == 2:
        direction = means_rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        means = np.stack([-0.5 * separation * direction, 0.5 * separation * direction])
    else:
        raw = means_rng.standard_normal((classes, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        means = raw * separation / np.sqrt(2.0)
    x = means[labels] + rng.standard_normal((n, dim))
    return x, labels


def _two_moons(n, rng, noise=0.1, dim=2, pad_low=0.25, pad_high=0.75):
    labels = _balanced_labels(n, 2, rng)
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    pts = np.where(labels[:, None] == 0, upper, lower)
    if noise:
        pts = pts + noise * rng.standard_normal(pts.shape)
    x = np.clip(moons_to_unit(pts), 0.0, 1.0)
    if dim > 2:
        # uninformative extra features
        x = np.concatenate([x, rng.uniform(pad_low, pad_high, size=(n, dim - 2))], axis=1)
    return x, labels


def _spirals(n, rng, turns=1.5, noise=0.05):
    labels = _balanced_labels(n, 2, rng)
    r = rng.uniform(0.1, 1.0, size=n)
    angle = 2 * np.pi * turns * r + np.pi * labels
    pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    pts = pts + noise * rng.standard_normal(pts.shape)
    return np.clip((pts + 1.25) / 2.5, 0.0, 1.0), labels


def _minmax(x):
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((x - lo) / span, 0.0, 1.0)


def _split(x, labels, n_train, n_test, rng):
    n = len(labels)
    if n_train + n_test > n:
        raise ValueError(f"requested {n_train}+{n_test} samples but only {n} available")
    order = rng.permutation(n)
    tr, te = order[:n_train], order[n_train : n_train + n_test]
    return LabeledBatch(x[tr], labels[tr]), LabeledBatch(x[te], labels[te])


def gen_dataset(source: DatasetSource) -> tuple[LabeledBatch, LabeledBatch]:
    """Generate or load ``(train, test)`` for ``source``; disjoint and deterministic."""
    rng = np.random.default_rng(source.seed)
    n = source.n_train + source.n_test
    p = dict(source.params)
    if source.kind == "gaussians":
        x, y = _gaussians(n, rng, **p)
        x = _minmax(x)
    elif source.kind == "two_moons":
        x, y = _two_moons(n, rng, **p)
    elif source.kind == "spirals":
        x, y = _spirals(n, rng, **p)
    elif source.kind == "csv":
        data = load_csv(p["path"])
        x, y = data.inputs, data.labels
    elif source.kind == "idx_images":
        images = read_idx(p["path"]).astype(np.float64) / 255.0
        labels = read_idx(p["labels_path"]).astype(np.int64)
        if len(images) != len(labels):
            raise DataFormatError("image and label files disagree in length")
        x = images[:, None, :, :] if images.ndim == 3 else images
        y = labels
    else:
        raise ValueError(f"unknown dataset kind {source.kind!r}")
    if source.kind in ("gaussians", "two_moons", "spirals"):
        return LabeledBatch(x[: source.n_train], y[: source.n_train]), LabeledBatch(x[source.n_train :], y[source.n_train :])
    return _split(x, y, source.n_train, source.n_test, rng)


# ---------------------------------------------------------------------------
# CSV: one sample per row, features then an integer label; no header


def save_csv(batch: LabeledBatch, path) -> None:
    x = batch.inputs.reshape(len(batch), -1)
    with open(path, "w", newline="") as fh:
        for row, label in zip(x, batch.labels):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{int(label)}\n")


def load_csv(path) -> LabeledBatch:
    raw = Path(path).read_bytes()
    rows, labels = [], []
    offset = 0
    width = None
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text and not text.startswith(b"#"):
            fields = text.split(b",")
            try:
                values = [float(f) for f in fields[:-1]]
                label = int(fields[-1])
            except ValueError:
                raise DataFormatError(f"{path}: unparsable row at byte offset {offset}") from None
            if width is None:
                width = len(values)
            if len(values) != width or width == 0:
                raise DataFormatError(f"{path}: row at byte offset {offset} has {len(values)} features, expected {width}")
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise DataFormatError(f"{path}: feature outside [0, 1] at byte offset {offset}")
            rows.append(values)
            labels.append(label)
        offset += len(line)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    return LabeledBatch(np.array(rows), np.array(labels))


# ---------------------------------------------------------------------------
# IDX (the MNIST container format), unsigned-byte payloads only


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset 0")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataFormatError(f"{path}: bad magic at byte offset 0 (only unsigned-byte IDX is supported)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension list at byte offset 4")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) != header + size:
        raise DataFormatError(f"{path}: payload ends at byte offset {len(raw)}, expected {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(array: np.ndarray, path) -> None:
    array = np.asarray(array, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(struct.pack(">HBB", 0, 0x08, array.ndim))
    buf.write(struct.pack(">" + "I" * array.ndim, *array.shape))
    buf.write(array.tobytes())
    Path(path).write_bytes(buf.getvalue())
