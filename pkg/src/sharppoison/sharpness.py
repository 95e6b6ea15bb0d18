"""Sharpness of a loss around a parameter point.

The sharpness of ``L`` at ``theta`` is ``max_{||v||_p <= rho} L(theta + v) - L(theta)``.
Everything here works on an :class:`Objective`: a callable returning
``(value, gradient)`` at a :class:`~sharppoison.nn.ModelParams`. Network losses,
attack objectives and analytic test surrogates all share that interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import nn


class DegenerateGradientError(ArithmeticError):
    """A zero gradient where a direction was required."""


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float = 0.05
    p: float = 2.0

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if not (self.p == math.inf or self.p > 1):
            raise ValueError(f"p must be > 1 or inf, got {self.p}")

    @property
    def q(self) -> float:
        """Conjugate exponent, 1/p + 1/q = 1."""
        if self.p == math.inf:
            return 1.0
        return self.p / (self.p - 1.0)


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """Scalar function of the parameters with its gradient."""

    def __call__(self, params: nn.ModelParams) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, params: nn.ModelParams) -> float:
        return self(params)[0]


class TrainingLoss(Objective):
    """Mean cross-entropy of a model on a fixed batch."""

    def __init__(self, spec: nn.ModelSpec, batch: nn.LabeledBatch):
        self.spec = spec
        self.batch = batch

    def __call__(self, params):
        loss, grad, _ = nn.loss_and_grads(self.spec, params, self.batch)
        return loss, grad

    def value(self, params):
        return nn.loss(self.spec, params, self.batch)


class FunctionObjective(Objective):
    """Wrap plain ``value(flat)`` / ``grad(flat)`` callables, e.g. analytic surrogates."""

    def __init__(self, value: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray]):
        self._value = value
        self._grad = grad

    def __call__(self, params):
        return float(self._value(params.flat)), np.asarray(self._grad(params.flat), dtype=np.float64)

    def value(self, params):
        return float(self._value(params.flat))


def flat_params(values) -> nn.ModelParams:
    """Single-block parameter object for objectives that are not networks."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return nn.ModelParams(values, (nn.ParamBlock(0, "theta", 0, values.shape),))


# ---------------------------------------------------------------------------
# worst-case perturbation


def compute_vhat(grad, cfg: SharpnessConfig, *, with_flag: bool = False):
    """First-order maximizer of ``<grad, v>`` over the ``rho`` ball of the p-norm.

    ``v = rho * sign(g) |g|^(q-1) / (||g||_q^q)^(1/p)``. For ``p = 2`` this is
    ``rho * g / ||g||_2`` and for ``p = inf`` it is ``rho * sign(g)``.

    A zero gradient (with ``rho > 0``) has no ascent direction; the zero vector
    is returned and, with ``with_flag=True``, the flag is set.
    """
    g = np.asarray(grad, dtype=np.float64)
    if cfg.rho == 0:
        out = np.zeros_like(g)
        return (out, False) if with_flag else out
    if not np.any(g):
        out = np.zeros_like(g)
        return (out, True) if with_flag else out
    if cfg.p == 2:
        out = cfg.rho * g / np.linalg.norm(g)
    elif cfg.p == math.inf:
        out = cfg.rho * np.sign(g)
    else:
        q = cfg.q
        scale = np.max(np.abs(g))
        gs = g / scale  # rescale so powers neither overflow nor underflow
        out = cfg.rho * np.sign(gs) * np.abs(gs) ** (q - 1.0) / np.sum(np.abs(gs) ** q) ** (1.0 / cfg.p)
    return (out, False) if with_flag else out


def lp_norm(v, p: float) -> float:
    v = np.asarray(v, dtype=np.float64)
    if p == math.inf:
        return float(np.max(np.abs(v))) if v.size else 0.0
    return float(np.sum(np.abs(v) ** p) ** (1.0 / p))


def project_ball(v, rho: float, p: float) -> np.ndarray:
    """Euclidean projection onto the l2 ball, or clipping for the l-inf ball."""
    if p == math.inf:
        return np.clip(v, -rho, rho)
    if p != 2:
        raise ValueError("projection is implemented for p in {2, inf}")
    n = np.linalg.norm(v)
    return v if n <= rho else v * (rho / n)


class SharpGradient(NamedTuple):
    grad: np.ndarray
    vhat: np.ndarray
    degenerate: bool


def sharp_objective_grad(params: nn.ModelParams, objective: Objective, cfg: SharpnessConfig) -> SharpGradient:
    """Gradient of ``max_{||v|| <= rho} Q(theta + v)``, approximated as ``grad Q(theta + vhat)``."""
    _, g = objective(params)
    vhat, degenerate = compute_vhat(g, cfg, with_flag=True)
    if degenerate:
        return SharpGradient(g, vhat, True)
    _, g_shift = objective(nn.perturb_params(params, vhat))
    return SharpGradient(g_shift, vhat, False)


def objective_sharpness(objective: Objective, params: nn.ModelParams, cfg: SharpnessConfig) -> float:
    """One-ascent-step sharpness estimate ``Q(theta + vhat) - Q(theta)``."""
    if cfg.rho == 0:
        return 0.0
    base, g = objective(params)
    vhat = compute_vhat(g, cfg)
    return objective.value(nn.perturb_params(params, vhat)) - base


def sharpness_estimate(spec: nn.ModelSpec, params: nn.ModelParams, data: nn.LabeledBatch, cfg: SharpnessConfig) -> float:
    """One-step estimate of the training-loss sharpness of a network on ``data``."""
    return objective_sharpness(TrainingLoss(spec, data), params, cfg)


def objective_sharpness_oracle(
    objective: Objective, params: nn.ModelParams, cfg: SharpnessConfig, k_steps: int, step_size: float
) -> float:
    """Tighter lower bound on sharpness by ``k_steps`` of projected normalized ascent.

    Iterates ``v <- Proj(v + step * vhat_dir(grad at theta + v))`` from ``v = 0``
    and returns the best loss increase seen, the one-step point included. Test
    oracle only; the attacks use the one-step estimate.
    """
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    base, g0 = objective(params)
    if cfg.rho == 0:
        return 0.0
    unit = SharpnessConfig(1.0, cfg.p)
    best = objective.value(nn.perturb_params(params, compute_vhat(g0, cfg))) - base
    v = np.zeros_like(params.flat)
    g = g0
    for _ in range(k_steps):
        v = project_ball(v + step_size * compute_vhat(g, unit), cfg.rho, cfg.p)
        val, g = objective(nn.perturb_params(params, v))
        best = max(best, val - base)
    return best


def sharpness_oracle(spec, params, data, cfg: SharpnessConfig, k_steps: int, step_size: float) -> float:
    return objective_sharpness_oracle(TrainingLoss(spec, data), params, cfg, k_steps, step_size)
