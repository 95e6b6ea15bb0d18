"""Two-dimensional loss-landscape slices around a parameter point."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import nn
from .sharpness import Objective, TrainingLoss


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    direction_a: np.ndarray
    direction_b: np.ndarray
    coords: np.ndarray  # shared 1-d coordinates for both axes
    losses: np.ndarray  # losses[i, j] at coords[i] * direction_a + coords[j] * direction_b

    @property
    def extent(self) -> float:
        return float(self.coords[-1])

    @property
    def resolution(self) -> int:
        return len(self.coords)

    @property
    def center(self) -> float:
        mid = self.resolution // 2
        return float(self.losses[mid, mid])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("a,b,loss\n")
        for i, a in enumerate(self.coords):
            for j, b in enumerate(self.coords):
                out.write(f"{a:.17g},{b:.17g},{self.losses[i, j]:.17g}\n")
        return out.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Load ``(coords, losses)`` back from :meth:`LandscapeGrid.to_csv` output."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    r = int(round(np.sqrt(len(data))))
    return data[::r, 0].copy(), data[:, 2].reshape(r, r)


def filter_normalized_direction(params: nn.ModelParams, rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction with each parameter block rescaled to that block's norm."""
    d = rng.standard_normal(params.flat.shape[0])
    for b in params.layout:
        sl = slice(b.offset, b.offset + b.size)
        dn = np.linalg.norm(d[sl])
        pn = np.linalg.norm(params.flat[sl])
        d[sl] = d[sl] * (pn / dn) if dn > 0 else 0.0
    return d


def probe_objective(objective: Objective, params: nn.ModelParams, extent: float, resolution: int, seed) -> LandscapeGrid:
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be a positive odd number")
    if extent < 0:
        raise ValueError("extent must be nonnegative")
    rng = np.random.default_rng(seed)
    da = filter_normalized_direction(params, rng)
    db = filter_normalized_direction(params, rng)
    coords = extent * np.linspace(-1.0, 1.0, resolution)
    coords[resolution // 2] = 0.0
    losses = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            if a == 0 and b == 0:
                point = params
            else:
                point = nn.perturb_params(params, a * da + b * db)
            losses[i, j] = objective.value(point)
    return LandscapeGrid(da, db, coords, losses)


def landscape_probe(spec, params, data: nn.LabeledBatch, extent: float, resolution: int, seed) -> LandscapeGrid:
    """Training loss on a filter-normalized 2-d slice centered at ``params``."""
    return probe_objective(TrainingLoss(spec, data), params, extent, resolution, seed)
