"""Un-targeted poisoning: error-minimizing and error-maximizing perturbations.

Both attacks run signed PGD on the inputs of (a portion of) the training set.
The sharpness-aware variants take the input gradient at the perturbed weights
``theta + vhat``, where ``vhat`` is the first-order worst-case parameter
perturbation for the current batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn, training
from .poisons import PoisonSet, check_budget, check_perturbed, project_delta, project_linf, random_delta, select_indices
from .sharpness import SharpnessConfig, TrainingLoss, compute_vhat, sharp_objective_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UntargetedConfig:
    mode: str = "error_min"  # error_min | error_max
    sharpness: Optional[SharpnessConfig] = field(default_factory=SharpnessConfig)  # None: plain attack
    pgd_steps: Optional[int] = None  # T; default 20 for error_min, 250 for error_max
    inner_steps: int = 10  # M, error_min only
    epochs: int = 100  # E, error_min only
    alpha: Optional[float] = None  # default epsilon / 10
    epsilon: float = 0.15
    portion: float = 1.0
    pretrain_epochs: int = 40  # error_max only
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    sharp_theta_update: bool = False
    per_sample_vhat: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("error_min", "error_max"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.inner_steps < 0 or (self.pgd_steps is not None and self.pgd_steps < 0):
            raise ValueError("invalid step counts")
        if self.step_size <= 0:
            raise ValueError("alpha must be positive")

    @property
    def steps(self) -> int:
        if self.pgd_steps is not None:
            return self.pgd_steps
        return 20 if self.mode == "error_min" else 250

    @property
    def step_size(self) -> float:
        return self.epsilon / 10 if self.alpha is None else self.alpha

    def baseline(self) -> "UntargetedConfig":
        return replace(self, sharpness=None)


def grad_input_sharp(spec, params, x_perturbed, y, cfg: Optional[SharpnessConfig], per_sample: bool = False) -> np.ndarray:
    """Per-sample input gradients of the loss at ``theta + vhat``.

    ``vhat`` comes from the parameter gradient of the whole batch unless
    ``per_sample`` is set, in which case every sample gets its own ``vhat``.
    ``cfg=None`` (or ``rho = 0``) gives the plain input gradient.
    """
    batch = nn.LabeledBatch(x_perturbed, y)
    if cfg is None:
        return nn.grad_inputs(spec, params, batch)
    if per_sample:
        rows = [grad_input_sharp(spec, params, x_perturbed[i : i + 1], y[i : i + 1], cfg) for i in range(len(y))]
        return np.concatenate(rows, axis=0)
    g = nn.grad_params(spec, params, batch)
    vhat, degenerate = compute_vhat(g, cfg, with_flag=True)
    if degenerate:
        log.debug("zero parameter gradient; using the plain input gradient")
    return nn.grad_inputs(spec, nn.perturb_params(params, vhat), batch)


def pgd_step(x_current, x_original, g, alpha: float, epsilon: float, direction: str = "descend") -> np.ndarray:
    """Signed step followed by projection onto the eps-ball around ``x_original`` and [0, 1]."""
    if direction == "descend":
        x = x_current - alpha * np.sign(g)
    elif direction == "ascend":
        x = x_current + alpha * np.sign(g)
    else:
        raise ValueError(f"direction must be 'descend' or 'ascend', not {direction!r}")
    x = project_linf(x, x_original, epsilon)
    check_perturbed(x_original, x, epsilon)
    return x


def _pgd_pass(spec, params, x_adv, x0, labels, cfg: UntargetedConfig, steps, direction, rng):
    """``steps`` PGD steps on every sample, minibatch by minibatch."""
    n = len(labels)
    order = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        xb, x0b, yb = x_adv[idx], x0[idx], labels[idx]
        for _ in range(steps):
            g = grad_input_sharp(spec, params, xb, yb, cfg.sharpness, cfg.per_sample_vhat)
            xb = pgd_step(xb, x0b, g, cfg.step_size, cfg.epsilon, direction)
        x_adv[idx] = xb
    return x_adv


def _delta_from(x_adv, x0, eps):
    # x_adv - x0 is within eps by construction; re-projecting keeps x0 + delta in range as well
    return project_delta(x_adv - x0, x0, eps)


def craft_error_min(spec, train: nn.LabeledBatch, cfg: UntargetedConfig, init: Optional[nn.ModelParams] = None) -> PoisonSet:
    """Min-min optimization of sample-wise perturbations and the surrogate.

    Each of ``cfg.epochs`` rounds runs ``cfg.steps`` descent PGD steps on the
    perturbations, then ``cfg.inner_steps`` SGD minibatch steps on the
    surrogate over the perturbed training set. The surrogate starts from
    ``init`` or from a fresh seeded initialization.
    """
    if cfg.mode != "error_min":
        raise ValueError("config is not in error_min mode")
    train.check_classes(spec.num_classes)
    indices = select_indices(len(train), cfg.portion, np.random.default_rng([cfg.seed, 0]))
    x0 = train.inputs[indices]
    labels = train.labels[indices]
    delta = random_delta(x0, cfg.epsilon, np.random.default_rng([cfg.seed, 1]))
    check_budget(x0, delta, cfg.epsilon)

    params = init.copy() if init is not None else nn.init_params(spec, [cfg.seed, 2])
    opt = training.SGD(params, cfg.momentum, cfg.weight_decay)
    stream = np.random.default_rng([cfg.seed, 3])
    history = []
    sharp_cfg = cfg.sharpness if (cfg.sharp_theta_update and cfg.sharpness is not None) else None

    for _ in range(cfg.epochs):
        x_adv = _pgd_pass(spec, opt.params, x0 + delta, x0, labels, cfg, cfg.steps, "descend", stream)
        delta = _delta_from(x_adv, x0, cfg.epsilon)
        check_budget(x0, delta, cfg.epsilon)

        poisoned = PoisonSet(indices, delta, cfg.epsilon).apply(train)
        for _ in range(cfg.inner_steps):
            idx = stream.choice(len(poisoned), size=min(cfg.batch_size, len(poisoned)), replace=False)
            objective = TrainingLoss(spec, poisoned.subset(idx))
            if sharp_cfg is None:
                _, g = objective(opt.params)
            else:
                g = sharp_objective_grad(opt.params, objective, sharp_cfg).grad
            opt.step(g, cfg.lr)
        history.append(nn.loss(spec, opt.params, poisoned))

    return PoisonSet(
        indices,
        delta,
        cfg.epsilon,
        mode="error-min",
        ratio=cfg.portion,
        seed=cfg.seed,
        info={"loss_history": history, "rho": 0.0 if cfg.sharpness is None else cfg.sharpness.rho},
    )


def craft_error_max(spec, train: nn.LabeledBatch, cfg: UntargetedConfig, pretrained: Optional[nn.ModelParams] = None) -> PoisonSet:
    """Ascent PGD against a surrogate trained on clean data and then frozen.

    The surrogate is trained for ``cfg.pretrain_epochs`` unless ``pretrained``
    is supplied. Perturbations start at zero, so zero steps yield zero deltas.
    """
    if cfg.mode != "error_max":
        raise ValueError("config is not in error_max mode")
    train.check_classes(spec.num_classes)
    indices = select_indices(len(train), cfg.portion, np.random.default_rng([cfg.seed, 0]))
    x0 = train.inputs[indices]
    labels = train.labels[indices]

    if pretrained is None:
        tcfg = training.TrainConfig(
            epochs=cfg.pretrain_epochs,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            schedule=training.StepSchedule((), 0.1),
            seed=cfg.seed,
        )
        pretrained = training.train(spec, nn.init_params(spec, [cfg.seed, 2]), train, tcfg)

    x_adv = project_linf(x0.copy(), x0, cfg.epsilon)
    if cfg.steps:
        x_adv = _pgd_pass(spec, pretrained, x_adv, x0, labels, cfg, cfg.steps, "ascend", np.random.default_rng([cfg.seed, 3]))
    delta = _delta_from(x_adv, x0, cfg.epsilon)
    check_budget(x0, delta, cfg.epsilon)
    return PoisonSet(
        indices,
        delta,
        cfg.epsilon,
        mode="error-max",
        ratio=cfg.portion,
        seed=cfg.seed,
        info={"rho": 0.0 if cfg.sharpness is None else cfg.sharpness.rho},
    )


def craft_untargeted(spec, train, cfg: UntargetedConfig, **kw) -> PoisonSet:
    if cfg.mode == "error_min":
        return craft_error_min(spec, train, cfg, **kw)
    return craft_error_max(spec, train, cfg, **kw)
