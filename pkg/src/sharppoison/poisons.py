"""Perturbation sets, L-inf budget projection and their on-disk format.

All projections are exact in floating point: after projection
``|delta| <= eps`` holds elementwise as computed, and so do
``0 <= x + delta <= 1`` and ``|(x + delta) - x| <= eps``. The last one is not
implied by the first, since the sum rounds. Budget checks run after every
optimizer step, not only at the end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn

FORMAT = "sharppoison.perturbations/1"


class BudgetViolation(AssertionError):
    pass


def delta_bounds(x0: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-element bounds on delta so that ``|delta| <= eps`` and ``x0 + delta`` stays in [0, 1]."""
    lo = np.maximum(-eps, -x0)
    hi = np.minimum(eps, 1.0 - x0)
    return lo, hi


def _violations(x0, delta, eps):
    x = x0 + delta
    return (np.abs(delta) > eps) | (np.abs(x - x0) > eps) | (x < 0.0) | (x > 1.0)


def project_delta(delta: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    lo, hi = delta_bounds(x0, eps)
    delta = np.minimum(np.maximum(delta, lo), hi)
    # x0 + delta can round one ulp past the ball or the range; walk those inputs
    # toward x0 one ulp at a time (ulps of x, so every step changes the sum)
    bad = _violations(x0, delta, eps)
    if bad.any():
        x0 = np.broadcast_to(x0, delta.shape)
        x = x0 + delta
        while bad.any():
            x[bad] = np.nextafter(x[bad], x0[bad])
            delta[bad] = x[bad] - x0[bad]
            bad = _violations(x0, delta, eps)
    return delta


def project_linf(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Project ``x`` onto ``{x : |x - x0|_inf <= eps, 0 <= x <= 1}``.

    Clipping to ``x0 +- eps`` can land one ulp outside the ball once the
    difference is re-computed, so offending entries are stepped toward ``x0``.
    """
    x = np.clip(x, np.maximum(x0 - eps, 0.0), np.minimum(x0 + eps, 1.0))
    while True:
        over = (x - x0) > eps
        under = (x0 - x) > eps
        if not (over.any() or under.any()):
            return x
        x[over] = np.nextafter(x[over], -np.inf)
        x[under] = np.nextafter(x[under], np.inf)


def check_budget(x0: np.ndarray, delta: np.ndarray, eps: float) -> None:
    """Raise :class:`BudgetViolation` unless ``|delta| <= eps`` and ``x0 + delta`` lies in [0, 1]
    and within ``eps`` of ``x0``, all as computed in floating point."""
    if delta.shape != x0.shape:
        raise BudgetViolation(f"delta shape {delta.shape} != input shape {x0.shape}")
    if not delta.size:
        return
    worst = float(np.max(np.abs(delta)))
    if worst > eps:
        raise BudgetViolation(f"|delta|_inf = {worst!r} exceeds eps = {eps!r}")
    x = x0 + delta
    applied = float(np.max(np.abs(x - x0)))
    if applied > eps:
        raise BudgetViolation(f"perturbed input is {applied!r} from the original, eps = {eps!r}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise BudgetViolation(f"perturbed input leaves [0, 1]: [{x.min()!r}, {x.max()!r}]")


def check_perturbed(x0: np.ndarray, x: np.ndarray, eps: float) -> None:
    """Input-space form of :func:`check_budget`: ``|x - x0| <= eps`` and ``x`` in [0, 1]."""
    if x.shape != x0.shape:
        raise BudgetViolation(f"input shape {x.shape} != original shape {x0.shape}")
    if not x.size:
        return
    worst = float(np.max(np.abs(x - x0)))
    if worst > eps:
        raise BudgetViolation(f"perturbed input is {worst!r} from the original, eps = {eps!r}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise BudgetViolation(f"perturbed input leaves [0, 1]: [{x.min()!r}, {x.max()!r}]")


def random_delta(x0: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-eps, eps], then clipped so ``x0 + delta`` stays a valid input."""
    return project_delta(rng.uniform(-eps, eps, size=x0.shape), x0, eps)


def num_poisons(n: int, ratio: float) -> int:
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    # guard against 0.02 * 100 = 1.9999999999999998
    return int(np.floor(n * ratio + 1e-9))


def select_indices(n: int, ratio: float, rng: np.random.Generator, eligible=None) -> np.ndarray:
    """Sorted random subset of size ``floor(ratio * n)`` drawn from ``eligible`` (default all)."""
    k = num_poisons(n, ratio)
    pool = np.arange(n) if eligible is None else np.asarray(eligible)
    if k > len(pool):
        raise ValueError(f"need {k} poisons but only {len(pool)} eligible samples")
    return np.sort(rng.choice(pool, size=k, replace=False))


@dataclass(eq=False)
class PoisonSet:
    """Clean-label perturbations ``deltas[i]`` for training samples ``indices[i]``.

    Also used for the un-targeted (unlearnable) perturbation sets, where
    ``ratio`` is the perturbed portion.
    """

    indices: np.ndarray
    deltas: np.ndarray
    epsilon: float
    mode: str = "targeted"
    ratio: float = 0.0
    seed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("poison indices must be distinct")
        if self.deltas.shape[:1] != self.indices.shape:
            raise ValueError("one delta per index required")

    def __len__(self) -> int:
        return len(self.indices)

    def check(self, train: nn.LabeledBatch) -> None:
        check_budget(train.inputs[self.indices], self.deltas, self.epsilon)

    def apply(self, train: nn.LabeledBatch) -> nn.LabeledBatch:
        """Training set with the perturbed samples swapped in; labels untouched."""
        x = train.inputs.copy()
        if len(self.indices):
            x[self.indices] = np.clip(x[self.indices] + self.deltas, 0.0, 1.0)
        return nn.LabeledBatch(x, train.labels)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (manifest) and ``<path>.f64`` (little-endian deltas)."""
        path = Path(path)
        manifest_path = path.with_suffix(".json")
        data_path = path.with_suffix(".f64")
        data_path.write_bytes(np.ascontiguousarray(self.deltas, dtype="<f8").tobytes())
        manifest = {
            "format": FORMAT,
            "mode": self.mode,
            "epsilon": self.epsilon,
            "ratio": self.ratio,
            "seed": self.seed,
            "indices": [int(i) for i in self.indices],
            "shape": list(self.deltas.shape),
            "dtype": "<f8",
            "data": data_path.name,
            "info": _jsonable(self.info),
        }
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest_path, data_path

    @classmethod
    def load(cls, path) -> "PoisonSet":
        path = Path(path)
        manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
        meta = json.loads(manifest_path.read_text())
        if meta.get("format") != FORMAT:
            raise ValueError(f"{manifest_path}: not a perturbation manifest")
        raw = (manifest_path.parent / meta["data"]).read_bytes()
        shape = tuple(meta["shape"])
        expected = int(np.prod(shape)) * 8
        if len(raw) != expected:
            raise ValueError(f"{meta['data']}: expected {expected} bytes, found {len(raw)}")
        deltas = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return cls(
            indices=np.asarray(meta["indices"], dtype=np.int64),
            deltas=deltas,
            epsilon=float(meta["epsilon"]),
            mode=meta["mode"],
            ratio=float(meta["ratio"]),
            seed=int(meta["seed"]),
            info=meta.get("info", {}),
        )


PerturbationSet = PoisonSet


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
