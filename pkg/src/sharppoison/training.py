"""Seeded minibatch SGD for (re)training models on clean or poisoned data."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .sharpness import SharpnessConfig, TrainingLoss, sharp_objective_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class StepSchedule:
    milestones: tuple = (30, 45)
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must be in (0, 1]")


@dataclass(frozen=True)
class CyclicSchedule:
    period: int = 10
    min_lr: float = 0.001
    max_lr: float = 0.1

    def __post_init__(self):
        if self.period < 2:
            raise ValueError("cyclic period must be >= 2")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ValueError("need 0 <= min_lr <= max_lr")


def schedule_lr(schedule, epoch: int, base_lr: float) -> float:
    """Learning rate for ``epoch``.

    Step decay multiplies ``base_lr`` by ``factor`` once per milestone reached.
    The product is formed in decimal arithmetic on the configured literals and
    rounded once, so ``0.1`` decays to exactly ``0.01`` and ``0.001``.
    Cyclic is a triangular wave: ``min_lr`` at the start of each period,
    ``max_lr`` at its midpoint.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if isinstance(schedule, StepSchedule):
        k = sum(1 for m in schedule.milestones if m <= epoch)
        if k == 0 or schedule.factor == 1:
            return float(base_lr)
        return float(Decimal(repr(float(base_lr))) * Decimal(repr(float(schedule.factor))) ** k)
    if isinstance(schedule, CyclicSchedule):
        phase = (epoch % schedule.period) / schedule.period
        up = 1.0 - abs(2.0 * phase - 1.0)
        return up * schedule.max_lr + (1.0 - up) * schedule.min_lr
    raise TypeError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Augmentation:
    kind: str = "none"  # none | mixup | cutout
    mixup_alpha: float = 1.0
    cutout_size: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "mixup", "cutout"):
            raise ValueError(f"unknown augmentation {self.kind!r}")


class MixedBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    labels_b: np.ndarray
    lam: float

    def soft_targets(self, num_classes: int) -> np.ndarray:
        t = np.zeros((len(self.labels), num_classes))
        idx = np.arange(len(self.labels))
        t[idx, self.labels] += self.lam
        t[idx, self.labels_b] += 1.0 - self.lam
        return t


def mixup_batch(batch: nn.LabeledBatch, lam: float, perm) -> MixedBatch:
    """Convex combination of each sample with ``perm`` of the batch.

    The matching loss is ``lam * l(., y) + (1 - lam) * l(., y[perm])``, i.e.
    cross-entropy against :meth:`MixedBatch.soft_targets`.
    """
    if not 0 <= lam <= 1:
        raise ValueError("lam must lie in [0, 1]")
    perm = np.asarray(perm)
    x = lam * batch.inputs + (1.0 - lam) * batch.inputs[perm]
    return MixedBatch(x, batch.labels, batch.labels[perm], float(lam))


def cutout_batch(batch: nn.LabeledBatch, size: int, seed) -> nn.LabeledBatch:
    """Zero one ``size x size`` square per image, placed uniformly inside it.

    Inputs ``[b, c, h, w]`` are images; ``[b, d]`` inputs are treated as 1-d
    signals and get a window of ``size`` features zeroed.
    """
    x = batch.inputs.copy()
    if size == 0:
        return nn.LabeledBatch(x, batch.labels)
    rng = np.random.default_rng(seed)
    if x.ndim == 2:
        d = x.shape[1]
        if size > d:
            raise ValueError("cutout larger than the input")
        for n, s in enumerate(rng.integers(0, d - size + 1, size=len(x))):
            x[n, s : s + size] = 0.0
    elif x.ndim == 4:
        h, w = x.shape[2:]
        if size > min(h, w):
            raise ValueError("cutout larger than the image")
        ys = rng.integers(0, h - size + 1, size=len(x))
        xs = rng.integers(0, w - size + 1, size=len(x))
        for n in range(len(x)):
            x[n, :, ys[n] : ys[n] + size, xs[n] : xs[n] + size] = 0.0
    else:
        raise ValueError(f"cutout needs [b, d] or [b, c, h, w] inputs, got {x.shape}")
    return nn.LabeledBatch(x, batch.labels)


# ---------------------------------------------------------------------------
# config and trainer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    schedule: object = field(default_factory=StepSchedule)
    augmentation: Augmentation = field(default_factory=Augmentation)
    optimizer: str = "erm"  # erm | sam
    sam_rho: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0 or self.batch_size < 1:
            raise ValueError("invalid learning rate or batch size")
        if self.optimizer not in ("erm", "sam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.schedule, StepSchedule) and self.schedule.milestones and self.schedule.milestones[-1] >= self.epochs:
            raise ValueError("milestones must be below the epoch count")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


def standard_preset(**overrides) -> TrainConfig:
    """160 epochs, decay 0.1 at 80 and 120."""
    return TrainConfig(**{"epochs": 160, "schedule": StepSchedule((80, 120), 0.1), **overrides})


def long_run_preset(**overrides) -> TrainConfig:
    """500 epochs; milestones scaled proportionally from the 160-epoch recipe (an assumption)."""
    return TrainConfig(**{"epochs": 500, "schedule": StepSchedule((250, 375), 0.1), **overrides})


class SGD:
    """Momentum SGD with decoupled-from-loss L2 weight decay, PyTorch update order."""

    def __init__(self, params: nn.ModelParams, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = np.zeros_like(params.flat)

    def step(self, grad: np.ndarray, lr: float) -> None:
        d = grad + self.weight_decay * self.params.flat if self.weight_decay else grad
        self.buf = self.momentum * self.buf + d
        self.params = self.params.replace(self.params.flat - lr * self.buf)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_gradient(spec, params, batch, cfg: TrainConfig, rng) -> tuple[float, np.ndarray]:
    """Loss and parameter gradient for one minibatch, applying augmentation and SAM."""
    soft = None
    aug = cfg.augmentation
    if aug.kind == "mixup":
        lam = float(rng.beta(aug.mixup_alpha, aug.mixup_alpha))
        mixed = mixup_batch(batch, lam, rng.permutation(len(batch)))
        batch = nn.LabeledBatch(mixed.inputs, batch.labels)
        soft = mixed.soft_targets(spec.num_classes)
    elif aug.kind == "cutout":
        batch = cutout_batch(batch, aug.cutout_size, int(rng.integers(2**63 - 1)))

    if soft is None:
        objective = TrainingLoss(spec, batch)
    else:
        objective = _SoftTargetLoss(spec, batch, soft)
    loss, grad = objective(params)
    if cfg.optimizer == "sam":
        grad = sharp_objective_grad(params, objective, SharpnessConfig(cfg.sam_rho)).grad
    return loss, grad


class _SoftTargetLoss(TrainingLoss):
    def __init__(self, spec, batch, soft):
        super().__init__(spec, batch)
        self.soft = soft

    def __call__(self, params):
        loss, grad, _ = nn.loss_and_grads(self.spec, params, self.batch, soft_targets=self.soft)
        return loss, grad


def train(
    spec: nn.ModelSpec,
    init: nn.ModelParams,
    dataset: nn.LabeledBatch,
    cfg: TrainConfig,
    callback=None,
) -> nn.ModelParams:
    """Minibatch SGD on ``dataset`` from ``init``; deterministic given ``cfg.seed``.

    ``callback(epoch, params, mean_loss)`` runs after every epoch if given.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    dataset.check_classes(spec.num_classes)
    opt = SGD(init.copy(), cfg.momentum, cfg.weight_decay)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.schedule, epoch, cfg.lr)
        order = epoch_order(n, cfg.seed, epoch)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                loss, grad = batch_gradient(spec, opt.params, dataset.subset(idx), cfg, aug_rng)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}")
            opt.step(grad, lr)
            total += loss * len(idx)
        if not np.all(np.isfinite(opt.params.flat)):
            raise TrainingDivergedError(f"parameters became non-finite at epoch {epoch}")
        if callback is not None:
            callback(epoch, opt.params, total / n)
    return opt.params


def accuracy(spec, params, data: nn.LabeledBatch) -> float:
    return float(np.mean(nn.predict(spec, params, data.inputs) == data.labels))


# ---------------------------------------------------------------------------
# config serialization and checkpoints

CHECKPOINT_FORMAT = "sharppoison.checkpoint/1"


def config_to_dict(cfg: TrainConfig) -> dict:
    sched = cfg.schedule
    if isinstance(sched, StepSchedule):
        schedule = {"kind": "step", "milestones": list(sched.milestones), "factor": sched.factor}
    else:
        schedule = {"kind": "cyclic", "period": sched.period, "min_lr": sched.min_lr, "max_lr": sched.max_lr}
    aug = cfg.augmentation
    return {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "schedule": schedule,
        "augmentation": {"kind": aug.kind, "mixup_alpha": aug.mixup_alpha, "cutout_size": aug.cutout_size},
        "optimizer": cfg.optimizer,
        "sam_rho": cfg.sam_rho,
        "seed": cfg.seed,
    }


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    sched = dict(d.pop("schedule"))
    kind = sched.pop("kind")
    schedule = StepSchedule(tuple(sched["milestones"]), sched["factor"]) if kind == "step" else CyclicSchedule(**sched)
    return TrainConfig(schedule=schedule, augmentation=Augmentation(**d.pop("augmentation")), **d)


def spec_hash(spec: nn.ModelSpec) -> str:
    return hashlib.sha256(spec.describe().encode()).hexdigest()


def save_checkpoint(path, spec: nn.ModelSpec, params: nn.ModelParams, cfg: Optional[TrainConfig] = None, epoch: Optional[int] = None, extra=None):
    """Write ``<path>.json`` (spec, config, epoch) and ``<path>.f64`` (little-endian parameters).

    ``extra`` is any JSON-serializable context stored alongside.
    """
    path = Path(path)
    manifest_path, data_path = path.with_suffix(".json"), path.with_suffix(".f64")
    data_path.write_bytes(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())
    meta = {
        "format": CHECKPOINT_FORMAT,
        "spec": spec.describe(),
        "spec_hash": spec_hash(spec),
        "num_params": spec.num_params,
        "config": None if cfg is None else config_to_dict(cfg),
        "epoch": epoch,
        "data": data_path.name,
        "extra": extra,
    }
    manifest_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return manifest_path, data_path


def load_checkpoint(path, spec: nn.ModelSpec) -> tuple[nn.ModelParams, dict]:
    """Read a checkpoint written for ``spec``; refuses one written for a different architecture."""
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    meta = json.loads(manifest_path.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path}: not a checkpoint manifest")
    if meta["spec_hash"] != spec_hash(spec):
        raise ValueError(f"{manifest_path}: checkpoint is for {meta['spec']}, not {spec.describe()}")
    raw = (manifest_path.parent / meta["data"]).read_bytes()
    if len(raw) != 8 * spec.num_params:
        raise ValueError(f"{meta['data']}: expected {8 * spec.num_params} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return nn.ModelParams(flat, spec.layout), meta
