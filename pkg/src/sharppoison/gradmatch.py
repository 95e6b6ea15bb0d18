"""Targeted and backdoor poisoning by (sharpness-aware) gradient matching.

Poison perturbations are optimized so that the training gradient of the
poisoned samples points the same way as the gradient of the adversarial
objective. With ``rho > 0`` the objective gradient is taken at the
first-order worst-case neighbour ``theta + vhat`` of the surrogate model,
otherwise this is plain gradient matching.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .poisons import PoisonSet, check_budget, project_delta, random_delta, select_indices
from .sharpness import DegenerateGradientError, Objective, SharpnessConfig, sharp_objective_grad

log = logging.getLogger(__name__)


class CraftingFailedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# victims and triggers


@dataclass(frozen=True, eq=False)
class TriggerPatch:
    """Fixed values pasted over a box of the input starting at ``anchor``.

    ``pattern`` has the same number of dimensions as one input sample;
    ``anchor`` gives the box's first index along each of them.
    """

    pattern: np.ndarray
    anchor: tuple

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=np.float64)
        if pattern.size and (pattern.min() < 0 or pattern.max() > 1):
            raise ValueError("trigger values must lie in [0, 1]")
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))
        if len(self.anchor) != pattern.ndim:
            raise ValueError("anchor needs one coordinate per pattern dimension")

    def region(self, sample_shape) -> tuple:
        if len(sample_shape) != self.pattern.ndim:
            raise ValueError(f"trigger of rank {self.pattern.ndim} cannot patch samples of shape {sample_shape}")
        for a, p, s in zip(self.anchor, self.pattern.shape, sample_shape):
            if a < 0 or a + p > s:
                raise ValueError(f"trigger at {self.anchor} with shape {self.pattern.shape} does not fit {sample_shape}")
        return tuple(slice(a, a + p) for a, p in zip(self.anchor, self.pattern.shape))


def default_trigger(sample_shape, seed=0, size: int = 3) -> TriggerPatch:
    """Seeded random patch in the bottom-right corner.

    Images ``(c, h, w)`` get a ``size x size`` patch across all channels;
    flat feature vectors get their last ``size`` features.
    """
    rng = np.random.default_rng(seed)
    if len(sample_shape) == 3:
        c, h, w = sample_shape
        return TriggerPatch(rng.uniform(0, 1, size=(c, size, size)), (0, h - size, w - size))
    if len(sample_shape) == 1:
        (d,) = sample_shape
        return TriggerPatch(rng.uniform(0, 1, size=(size,)), (d - size,))
    raise ValueError(f"no default trigger for sample shape {sample_shape}")


def apply_trigger(images, patch: TriggerPatch) -> np.ndarray:
    """Paste ``patch`` onto one sample or a batch of samples; everything else is copied unchanged."""
    images = np.asarray(images, dtype=np.float64)
    out = images.copy()
    if images.ndim == patch.pattern.ndim:
        out[patch.region(images.shape)] = patch.pattern
    else:
        region = patch.region(images.shape[1:])
        out[(slice(None),) + region] = patch.pattern
    return out


@dataclass(frozen=True, eq=False)
class VictimSpec:
    inputs: np.ndarray
    y_vic: int
    y_obj: int
    trigger: Optional[TriggerPatch] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim < 2 or len(inputs) == 0:
            raise ValueError("victim set must be a non-empty batch")
        if int(self.y_obj) == int(self.y_vic):
            raise ValueError("adversarial class must differ from the victim class")
        object.__setattr__(self, "inputs", inputs)

    def __len__(self) -> int:
        return len(self.inputs)

    def adversarial_batch(self) -> nn.LabeledBatch:
        """Victim inputs (triggered in backdoor mode) labelled with ``y_obj``."""
        x = self.inputs if self.trigger is None else apply_trigger(self.inputs, self.trigger)
        return nn.LabeledBatch(x, np.full(len(x), int(self.y_obj)))


class VictimObjective(Objective):
    """Sum over victims of the loss toward the adversarial class."""

    def __init__(self, spec: nn.ModelSpec, victim: VictimSpec):
        self.spec = spec
        self.batch = victim.adversarial_batch()

    def __call__(self, params):
        loss, grad, _ = nn.loss_and_grads(self.spec, params, self.batch)
        k = len(self.batch)
        return loss * k, grad * k

    def value(self, params):
        return nn.loss(self.spec, params, self.batch) * len(self.batch)


def q_targeted(spec, params, victim: VictimSpec) -> float:
    if victim.trigger is not None:
        raise ValueError("targeted objective takes a victim set without trigger")
    return VictimObjective(spec, victim).value(params)


def q_backdoor(spec, params, victim: VictimSpec) -> float:
    if victim.trigger is None:
        raise ValueError("backdoor objective needs a trigger")
    return VictimObjective(spec, victim).value(params)


# ---------------------------------------------------------------------------
# alignment


def alignment_loss(g_q, g_l) -> float:
    """``1 - cos(g_q, g_l)``, in [0, 2]."""
    g_q, g_l = np.asarray(g_q, dtype=np.float64), np.asarray(g_l, dtype=np.float64)
    if g_q.shape != g_l.shape:
        raise ValueError("gradients differ in length")
    nq, nl = np.linalg.norm(g_q), np.linalg.norm(g_l)
    if nq == 0 or nl == 0:
        raise DegenerateGradientError("alignment with a zero gradient is undefined")
    cos = float(np.dot(g_q, g_l) / (nq * nl))
    return 1.0 - min(1.0, max(-1.0, cos))


def alignment_loss_grad(g_q, g_l) -> np.ndarray:
    """Derivative of :func:`alignment_loss` with respect to ``g_l``."""
    nq, nl = np.linalg.norm(g_q), np.linalg.norm(g_l)
    if nq == 0 or nl == 0:
        raise DegenerateGradientError("alignment with a zero gradient is undefined")
    return -(g_q / (nq * nl)) + (np.dot(g_q, g_l) / (nq * nl**3)) * g_l


def ensemble_sharp_grad(models: Sequence[tuple], objective_factory, cfg: SharpnessConfig) -> np.ndarray:
    """Mean sharpness-aware objective gradient over ``(spec, params)`` pairs.

    ``objective_factory(spec)`` builds the objective for one model.
    """
    if not models:
        raise ValueError("need at least one model")
    layout = models[0][1].layout
    total = None
    for spec, params in models:
        if params.layout != layout:
            raise ValueError("ensemble members must share a parameter layout")
        g = sharp_objective_grad(params, objective_factory(spec), cfg).grad
        total = g.copy() if total is None else total + g
    if len(models) == 1:
        return total
    return total / len(models)


# ---------------------------------------------------------------------------
# crafting


@dataclass(frozen=True)
class CraftConfig:
    restarts: int = 4
    steps: int = 60
    epsilon: float = 0.1
    step_size: Optional[float] = None  # default epsilon / 10
    ratio: float = 0.02
    sharpness: Optional[SharpnessConfig] = field(default_factory=SharpnessConfig)  # None: plain gradient matching
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 0 or self.steps < 1:
            raise ValueError("need restarts >= 0 and steps >= 1")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def rho(self) -> float:
        return 0.0 if self.sharpness is None else self.sharpness.rho

    def baseline(self) -> "CraftConfig":
        """Same config on the plain gradient-matching path."""
        return replace(self, sharpness=None)


class _Matcher:
    """Gradient-matching state for one surrogate model and a fixed poison index set."""

    def __init__(self, spec, params, victim, cfg: CraftConfig):
        self.spec = spec
        self.params = params
        self.refresh(params, victim, cfg)

    def refresh(self, params, victim, cfg):
        self.params = params
        objective = VictimObjective(self.spec, victim)
        if cfg.sharpness is None:
            self.g_q = objective(params)[1]
            return
        sg = sharp_objective_grad(params, objective, cfg.sharpness)
        if sg.degenerate:
            log.warning("zero adversarial-objective gradient; falling back to the plain gradient")
        self.g_q = sg.grad

    def loss_and_input_grad(self, batch: nn.LabeledBatch):
        _, g_l, _ = nn.loss_and_grads(self.spec, self.params, batch)
        loss = alignment_loss(self.g_q, g_l)
        u = alignment_loss_grad(self.g_q, g_l)
        return loss, nn.input_grad_of_param_dot(self.spec, self.params, batch, u)

    def loss(self, batch: nn.LabeledBatch) -> float:
        _, g_l, _ = nn.loss_and_grads(self.spec, self.params, batch)
        return alignment_loss(self.g_q, g_l)


def _ensemble_loss(matchers, batch, with_grad):
    losses, grads = [], []
    for m in matchers:
        if with_grad:
            loss, g = m.loss_and_input_grad(batch)
            grads.append(g)
        else:
            loss = m.loss(batch)
        losses.append(loss)
    loss = float(np.mean(losses))
    if not with_grad:
        return loss
    return loss, (grads[0] if len(grads) == 1 else np.mean(grads, axis=0))


def _signed_steps(matchers, x0, labels, delta, cfg: CraftConfig, steps, on_step=None):
    """``steps`` signed-gradient descent steps on the alignment loss; returns (delta, degenerate_count)."""
    degenerate = 0
    for m in range(1, steps + 1):
        batch = nn.LabeledBatch(x0 + delta, labels)
        try:
            _, g = _ensemble_loss(matchers, batch, with_grad=True)
        except DegenerateGradientError:
            degenerate += 1
            log.info("degenerate alignment gradient at step %d; step skipped", m)
        else:
            delta = project_delta(delta - cfg.alpha * np.sign(g), x0, cfg.epsilon)
        check_budget(x0, delta, cfg.epsilon)
        if on_step is not None:
            on_step(m, delta)
    return delta, degenerate


def _safe_loss(matchers, batch) -> float:
    try:
        return _ensemble_loss(matchers, batch, with_grad=False)
    except DegenerateGradientError:
        return float("inf")


def _as_list(pretrained):
    return list(pretrained) if isinstance(pretrained, (list, tuple)) else [pretrained]


def craft_targeted(
    spec: nn.ModelSpec,
    pretrained,
    train: nn.LabeledBatch,
    victim: VictimSpec,
    cfg: CraftConfig,
) -> PoisonSet:
    """Poison re-initialization: ``restarts`` independent runs of ``steps`` steps, best kept.

    ``pretrained`` is a :class:`~sharppoison.nn.ModelParams` trained on the clean
    set, or a list of them for an ensemble (losses and gradients are averaged).
    The run with the smallest final alignment loss wins; ties go to the lowest
    restart index.
    """
    if victim.trigger is not None:
        raise ValueError("use craft_backdoor for triggered victims")
    if cfg.restarts < 1:
        raise ValueError("targeted crafting needs at least one restart")
    indices = select_indices(len(train), cfg.ratio, np.random.default_rng([cfg.seed, 0]))
    x0 = train.inputs[indices]
    labels = train.labels[indices]
    matchers = [_Matcher(spec, p, victim, cfg) for p in _as_list(pretrained)]

    finals, initials, deltas, degenerate = [], [], [], 0
    for r in range(cfg.restarts):
        delta = random_delta(x0, cfg.epsilon, np.random.default_rng([cfg.seed, 1, r]))
        check_budget(x0, delta, cfg.epsilon)
        initials.append(_safe_loss(matchers, nn.LabeledBatch(x0 + delta, labels)))
        delta, bad = _signed_steps(matchers, x0, labels, delta, cfg, cfg.steps)
        degenerate += bad
        deltas.append(delta)
        finals.append(_safe_loss(matchers, nn.LabeledBatch(x0 + delta, labels)))
    if degenerate == cfg.restarts * cfg.steps:
        raise CraftingFailedError("every crafting step had a degenerate gradient")

    best = int(np.argmin(finals))
    return PoisonSet(
        indices,
        deltas[best],
        cfg.epsilon,
        mode="targeted",
        ratio=cfg.ratio,
        seed=cfg.seed,
        info={
            "alignment": finals[best],
            "restart_alignment": finals,
            "initial_alignment": initials,
            "best_restart": best,
            "degenerate_steps": degenerate,
            "rho": cfg.rho,
        },
    )


def retrain_interval(steps: int, restarts: int) -> int:
    return max(1, steps // (restarts + 1))


def craft_backdoor(
    spec: nn.ModelSpec,
    pretrained,
    train: nn.LabeledBatch,
    victim: VictimSpec,
    cfg: CraftConfig,
    retrain_cfg=None,
) -> PoisonSet:
    """Model-restart crafting: one trajectory, with the surrogate retrained on the
    poisoned set whenever ``m % floor(M / (R + 1)) == 0`` and ``m != M``.

    Poisons are drawn from class ``victim.y_obj``. ``cfg.restarts`` is the
    number of surrogate retrainings. ``retrain_cfg`` is a
    :class:`~sharppoison.training.TrainConfig` (default: 40 epochs).
    """
    from . import training

    if victim.trigger is None:
        raise ValueError("backdoor crafting needs a trigger")
    if retrain_cfg is None:
        retrain_cfg = training.TrainConfig(epochs=40, schedule=training.StepSchedule((20, 30)))
    eligible = np.flatnonzero(train.labels == victim.y_obj)
    indices = select_indices(len(train), cfg.ratio, np.random.default_rng([cfg.seed, 0]), eligible)
    x0 = train.inputs[indices]
    labels = train.labels[indices]
    models = _as_list(pretrained)
    matchers = [_Matcher(spec, p, victim, cfg) for p in models]

    delta = random_delta(x0, cfg.epsilon, np.random.default_rng([cfg.seed, 1, 0]))
    check_budget(x0, delta, cfg.epsilon)
    initial = _safe_loss(matchers, nn.LabeledBatch(x0 + delta, labels))
    interval = retrain_interval(cfg.steps, cfg.restarts)
    retrains = 0
    degenerate = 0
    for m in range(1, cfg.steps + 1):
        delta, bad = _signed_steps(matchers, x0, labels, delta, cfg, 1)
        degenerate += bad
        if m % interval == 0 and m != cfg.steps:
            poisoned = PoisonSet(indices, delta, cfg.epsilon).apply(train)
            for j, matcher in enumerate(matchers):
                init = nn.init_params(spec, [cfg.seed, 2, retrains, j])
                theta = training.train(spec, init, poisoned, retrain_cfg.with_seed(hash_seed(cfg.seed, retrains, j)))
                matcher.refresh(theta, victim, cfg)
            retrains += 1
    if degenerate == cfg.steps:
        raise CraftingFailedError("every crafting step had a degenerate gradient")
    return PoisonSet(
        indices,
        delta,
        cfg.epsilon,
        mode="backdoor",
        ratio=cfg.ratio,
        seed=cfg.seed,
        info={
            "alignment": _safe_loss(matchers, nn.LabeledBatch(x0 + delta, labels)),
            "initial_alignment": initial,
            "retrains": retrains,
            "degenerate_steps": degenerate,
            "rho": cfg.rho,
        },
    )


def hash_seed(*parts) -> int:
    """Deterministic 63-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))
