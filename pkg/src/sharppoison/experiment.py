"""Experiment orchestration: craft, retrain from scratch, evaluate, repeat.

A run is described by an :class:`ExperimentConfig`, usually read from a flat
``key = value`` file. Trial seeds are derived from the master seed and the
trial index only, so two runs that differ in the attack (for example SAPA
against its rho = 0 baseline) retrain identically initialized models on the
same victims and the comparison is paired.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, _kernels, data, nn, training
from .evaluation import Metrics, eval_accuracy, eval_backdoor, eval_targeted
from .gradmatch import CraftConfig, CraftingFailedError, VictimSpec, craft_backdoor, craft_targeted, default_trigger, hash_seed
from .poisons import BudgetViolation, PoisonSet
from .sharpness import DegenerateGradientError, SharpnessConfig, sharpness_estimate
from .unlearnable import UntargetedConfig, craft_untargeted

log = logging.getLogger(__name__)

MODES = ("targeted", "backdoor", "error-min", "error-max", "clean")
MANIFEST_FORMAT = "sharppoison.experiment/1"


class ConfigError(ValueError):
    pass


class NoVictimError(RuntimeError):
    """No eligible victim for a case."""


# errors that mark a trial as failed instead of aborting the run
TRIAL_ERRORS = (CraftingFailedError, DegenerateGradientError, FloatingPointError, NoVictimError, BudgetViolation)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "targeted"
    seed: int = 0
    trials: int = 20
    cases_per_trial: int = 10
    # dataset
    dataset: str = "gaussians"
    n_train: int = 200
    n_test: int = 200
    data_seed: int = 0
    classes: int = 2
    dim: int = 50
    separation: float = 2.5
    noise: float = 0.1
    pad_low: float = 0.25
    pad_high: float = 0.75
    turns: float = 1.5
    path: str = ""
    labels_path: str = ""
    # model
    arch: str = "mlp"  # mlp | convnet
    hidden: tuple = (32,)
    conv_channels: int = 4
    conv_kernel: int = 3
    # attack
    epsilon: float = 0.1
    ratio: float = 0.02
    restarts: int = 4
    steps: int = 60
    step_size: Optional[float] = None
    sharp_rho: float = 0.05  # 0 selects the plain attack
    sharp_p: float = 2.0
    victims: int = 1
    y_vic: int = 0
    y_obj: int = 1
    trigger_size: int = 3
    pgd_steps: Optional[int] = None
    inner_steps: int = 10
    craft_epochs: int = 100
    craft_batch_size: int = 128
    craft_lr: float = 0.1
    pretrain_epochs: int = 40
    sharp_theta_update: bool = False
    # retraining
    epochs: int = 40
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    schedule: str = "step"
    milestones: tuple = (20, 30)
    factor: float = 0.1
    period: int = 10
    min_lr: float = 0.001
    max_lr: float = 0.1
    aug: str = "none"
    mixup_alpha: float = 1.0
    cutout_size: int = 1
    optimizer: str = "erm"
    sam_rho: float = 0.05
    # metrics
    eval_rho: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, not {self.mode!r}")
        if self.trials < 1 or self.cases_per_trial < 1 or self.victims < 1:
            raise ConfigError("trials, cases_per_trial and victims must be >= 1")
        if self.sharp_rho < 0:
            raise ConfigError("sharp_rho must be >= 0")
        if self.arch not in ("mlp", "convnet"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        self.train_config()  # validates the retraining block

    # -- (de)serialization -------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from a mapping of names to values or their text forms."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key == "portion":
                key = "ratio"
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_flat_config(path))

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        lines = []
        for key, v in self.to_dict().items():
            if v is None:
                text = "none"
            elif isinstance(v, list):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- derived objects -------------------------------------------------

    @property
    def sharpness(self) -> Optional[SharpnessConfig]:
        return None if self.sharp_rho == 0 else SharpnessConfig(self.sharp_rho, self.sharp_p)

    def source(self) -> data.DatasetSource:
        if self.dataset == "gaussians":
            params = {"classes": self.classes, "dim": self.dim, "separation": self.separation}
        elif self.dataset == "two_moons":
            params = {"noise": self.noise, "dim": self.dim, "pad_low": self.pad_low, "pad_high": self.pad_high}
        elif self.dataset == "spirals":
            params = {"turns": self.turns, "noise": self.noise}
        elif self.dataset == "csv":
            params = {"path": self.path}
        elif self.dataset == "idx_images":
            params = {"path": self.path, "labels_path": self.labels_path}
        else:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        return data.DatasetSource(self.dataset, self.n_train, self.n_test, self.data_seed, params)

    def model_spec(self, sample_shape: tuple, num_classes: int) -> nn.ModelSpec:
        if self.arch == "mlp":
            return nn.mlp(int(np.prod(sample_shape)), self.hidden, num_classes)
        if len(sample_shape) != 3:
            raise ConfigError("convnet needs image inputs")
        c, h, w = sample_shape
        k = self.conv_kernel
        flat = self.conv_channels * (h - k + 1) * (w - k + 1)
        layers = [nn.Conv2d(c, self.conv_channels, k), nn.ReLU(), nn.Flatten()]
        prev = flat
        for width in self.hidden:
            layers += [nn.Dense(prev, width), nn.ReLU()]
            prev = width
        layers.append(nn.Dense(prev, num_classes))
        return nn.ModelSpec(sample_shape, tuple(layers))

    def train_config(self, seed: int = 0) -> training.TrainConfig:
        if self.schedule == "step":
            schedule = training.StepSchedule(self.milestones, self.factor)
        elif self.schedule == "cyclic":
            schedule = training.CyclicSchedule(self.period, self.min_lr, self.max_lr)
        else:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        try:
            return training.TrainConfig(
                epochs=self.epochs,
                lr=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                batch_size=self.batch_size,
                schedule=schedule,
                augmentation=training.Augmentation(self.aug, self.mixup_alpha, self.cutout_size),
                optimizer=self.optimizer,
                sam_rho=self.sam_rho,
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def craft_config(self, seed: int) -> CraftConfig:
        return CraftConfig(
            restarts=self.restarts,
            steps=self.steps,
            epsilon=self.epsilon,
            step_size=self.step_size,
            ratio=self.ratio,
            sharpness=self.sharpness,
            seed=seed,
        )

    def untargeted_config(self, seed: int) -> UntargetedConfig:
        return UntargetedConfig(
            mode=self.mode.replace("-", "_"),
            sharpness=self.sharpness,
            pgd_steps=self.pgd_steps,
            inner_steps=self.inner_steps,
            epochs=self.craft_epochs,
            alpha=self.step_size,
            epsilon=self.epsilon,
            portion=self.ratio,
            pretrain_epochs=self.pretrain_epochs,
            batch_size=self.craft_batch_size,
            lr=self.craft_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            sharp_theta_update=self.sharp_theta_update,
            seed=seed,
        )


def _coerce(key, f, raw):
    if not isinstance(raw, str):
        if isinstance(raw, list):
            return tuple(raw)
        return raw
    text = raw.strip()
    kind = str(f.type)
    try:
        if "Optional" in kind and text.lower() in ("none", ""):
            return None
        if "bool" in kind:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "tuple" in kind:
            return tuple(int(t) for t in text.split(",") if t.strip())
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def read_flat_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + Path(path).read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["run"])


# ---------------------------------------------------------------------------
# seeds and memo caches


def trial_seed(master: int, trial: int) -> int:
    return hash_seed(master, trial)


def case_seed(trial_seed_: int, case: int) -> int:
    return hash_seed(trial_seed_, case)


_DATA_CACHE: dict = {}
_PRETRAIN_CACHE: dict = {}
_POISON_CACHE: dict = {}


def clear_caches() -> None:
    _DATA_CACHE.clear()
    _PRETRAIN_CACHE.clear()
    _POISON_CACHE.clear()


def _freeze(d: dict) -> str:
    return json.dumps(d, sort_keys=True, default=str)


def _load_data(cfg: ExperimentConfig):
    key = _freeze(cfg.source().describe())
    if key not in _DATA_CACHE:
        train, test = data.gen_dataset(cfg.source())
        if cfg.arch == "mlp" and train.inputs.ndim > 2:
            train = train.with_inputs(train.inputs.reshape(len(train), -1))
            test = test.with_inputs(test.inputs.reshape(len(test), -1))
        _DATA_CACHE[key] = (train, test)
    return _DATA_CACHE[key]


_PRETRAIN_KEYS = ("epochs", "lr", "momentum", "weight_decay", "batch_size", "schedule", "milestones", "factor", "period", "min_lr", "max_lr")


def _pretrain(cfg: ExperimentConfig, spec, train, seed: int) -> nn.ModelParams:
    """Clean surrogate for a trial; plain ERM with the retraining schedule, shared by paired arms."""
    d = cfg.to_dict()
    key = _freeze({"data": cfg.source().describe(), "spec": spec.describe(), "seed": seed, **{k: d[k] for k in _PRETRAIN_KEYS}})
    if key not in _PRETRAIN_CACHE:
        tcfg = dataclasses.replace(cfg.train_config(hash_seed(seed, 0)), augmentation=training.Augmentation(), optimizer="erm")
        _PRETRAIN_CACHE[key] = training.train(spec, nn.init_params(spec, [seed, 0]), train, tcfg)
    return _PRETRAIN_CACHE[key]


def _memo_poison(key: dict, build) -> PoisonSet:
    k = _freeze(key)
    if k not in _POISON_CACHE:
        _POISON_CACHE[k] = build()
    return _POISON_CACHE[k]


_ATTACK_KEYS = (
    "mode", "epsilon", "ratio", "restarts", "steps", "step_size", "sharp_rho", "sharp_p", "victims", "y_vic", "y_obj",
    "trigger_size", "pgd_steps", "inner_steps", "craft_epochs", "craft_batch_size", "craft_lr", "pretrain_epochs",
    "sharp_theta_update", "momentum", "weight_decay",
)


def _attack_key(cfg, spec, seed, extra=None):
    d = cfg.to_dict()
    key = {"data": cfg.source().describe(), "spec": spec.describe(), "seed": seed, **{k: d[k] for k in _ATTACK_KEYS}}
    if extra is not None:
        key["extra"] = extra
    return key


def prepare(cfg: ExperimentConfig) -> tuple[nn.ModelSpec, nn.LabeledBatch, nn.LabeledBatch]:
    """Model spec and (train, test) split for a config."""
    train, test = _load_data(cfg)
    num_classes = max(int(max(train.labels.max(), test.labels.max())) + 1, 2)
    return cfg.model_spec(train.inputs.shape[1:], num_classes), train, test


# ---------------------------------------------------------------------------
# cases


def pick_victims(cfg: ExperimentConfig, spec, surrogate, test: nn.LabeledBatch, seed: int) -> tuple[VictimSpec, list]:
    """Seeded victims from the test split that the clean surrogate classifies correctly.

    All victims of a case share the victim class; the adversarial class is a
    different class drawn from the same stream. Returns the victims and
    their test-set indices.
    """
    rng = np.random.default_rng([seed, 5])
    correct = np.flatnonzero(nn.predict(spec, surrogate, test.inputs) == test.labels)
    if len(correct) == 0:
        raise NoVictimError("no correctly classified test sample to target")
    first = int(rng.choice(correct))
    y_vic = int(test.labels[first])
    same = correct[test.labels[correct] == y_vic]
    chosen = [first]
    if cfg.victims > 1:
        others = same[same != first]
        if len(others) < cfg.victims - 1:
            raise NoVictimError(f"only {len(same)} eligible victims of class {y_vic}")
        chosen += [int(i) for i in rng.choice(others, size=cfg.victims - 1, replace=False)]
    choices = [c for c in range(spec.num_classes) if c != y_vic]
    y_obj = int(choices[int(rng.integers(len(choices)))])
    return VictimSpec(test.inputs[np.array(chosen)], y_vic, y_obj), chosen


def pick_backdoor_victims(cfg: ExperimentConfig, train: nn.LabeledBatch, seed: int) -> tuple[VictimSpec, list]:
    """Seeded training samples of class ``cfg.y_vic`` with a seeded trigger patch."""
    rng = np.random.default_rng([seed, 5])
    pool = np.flatnonzero(train.labels == cfg.y_vic)
    if len(pool) < cfg.victims:
        raise NoVictimError(f"only {len(pool)} training samples of class {cfg.y_vic}")
    chosen = np.sort(rng.choice(pool, size=cfg.victims, replace=False))
    trigger = default_trigger(train.inputs.shape[1:], seed=[seed, 6], size=cfg.trigger_size)
    return VictimSpec(train.inputs[chosen], cfg.y_vic, cfg.y_obj, trigger), [int(i) for i in chosen]


def _retrain(cfg, spec, dataset, seed):
    init = nn.init_params(spec, [seed, 1])
    return training.train(spec, init, dataset, cfg.train_config(hash_seed(seed, 1)))


def _sharpness(cfg, spec, params, dataset):
    return sharpness_estimate(spec, params, dataset, SharpnessConfig(cfg.eval_rho))


def run_targeted_case(cfg: ExperimentConfig, spec, train, test, trial_seed_: int, case: int) -> dict:
    seed = case_seed(trial_seed_, case)
    surrogate = _pretrain(cfg, spec, train, trial_seed_)
    victim, _ = pick_victims(cfg, spec, surrogate, test, seed)
    poison = _memo_poison(_attack_key(cfg, spec, seed), lambda: craft_targeted(spec, surrogate, train, victim, cfg.craft_config(seed)))
    poisoned = poison.apply(train)
    theta = _retrain(cfg, spec, poisoned, seed)
    hits = eval_targeted(spec, theta, victim)
    return {
        "success": float(np.all(hits)),
        "victim_rate": float(np.mean(hits)),
        "clean_test_accuracy": eval_accuracy(spec, theta, test),
        "sharpness_estimate": _sharpness(cfg, spec, theta, poisoned),
        "alignment": float(poison.info["alignment"]),
    }


def run_backdoor_case(cfg: ExperimentConfig, spec, train, test, trial_seed_: int, case: int) -> dict:
    seed = case_seed(trial_seed_, case)
    surrogate = _pretrain(cfg, spec, train, trial_seed_)
    victim, _ = pick_backdoor_victims(cfg, train, seed)
    trigger = victim.trigger
    retrain_cfg = cfg.train_config(0)
    poison = _memo_poison(
        _attack_key(cfg, spec, seed, extra=training.config_to_dict(retrain_cfg)),
        lambda: craft_backdoor(spec, surrogate, train, victim, cfg.craft_config(seed), retrain_cfg),
    )
    poisoned = poison.apply(train)
    theta = _retrain(cfg, spec, poisoned, seed)
    rate = eval_backdoor(spec, theta, test, cfg.y_vic, trigger, cfg.y_obj)
    return {
        "success": rate,
        "victim_rate": rate,
        "clean_test_accuracy": eval_accuracy(spec, theta, test),
        "sharpness_estimate": _sharpness(cfg, spec, theta, poisoned),
        "alignment": float(poison.info["alignment"]),
    }


def run_untargeted_trial(cfg: ExperimentConfig, spec, train, test, trial_seed_: int) -> dict:
    ucfg = cfg.untargeted_config(trial_seed_)
    poison = _memo_poison(_attack_key(cfg, spec, trial_seed_), lambda: craft_untargeted(spec, train, ucfg))
    poisoned = poison.apply(train)
    theta = _retrain(cfg, spec, poisoned, trial_seed_)
    return {
        "clean_test_accuracy": eval_accuracy(spec, theta, test),
        "train_accuracy": eval_accuracy(spec, theta, poisoned),
        "sharpness_estimate": _sharpness(cfg, spec, theta, poisoned),
    }


def run_clean_trial(cfg: ExperimentConfig, spec, train, test, trial_seed_: int) -> dict:
    theta = _retrain(cfg, spec, train, trial_seed_)
    return {
        "clean_test_accuracy": eval_accuracy(spec, theta, test),
        "train_accuracy": eval_accuracy(spec, theta, train),
        "sharpness_estimate": _sharpness(cfg, spec, theta, train),
    }


def run_trial(cfg: ExperimentConfig, spec, train, test, seed: int) -> dict:
    """Metrics of one trial; targeted and backdoor trials average ``cases_per_trial`` cases."""
    if cfg.mode in ("targeted", "backdoor"):
        case_fn = run_targeted_case if cfg.mode == "targeted" else run_backdoor_case
        cases = [case_fn(cfg, spec, train, test, seed, c) for c in range(cfg.cases_per_trial)]
        out = {
            "success_rate": float(np.mean([c["success"] for c in cases])),
            "avg_success_rate": float(np.mean([c["victim_rate"] for c in cases])),
        }
        for name in ("clean_test_accuracy", "sharpness_estimate", "alignment"):
            out[name] = float(np.mean([c[name] for c in cases]))
        return out
    if cfg.mode == "clean":
        return run_clean_trial(cfg, spec, train, test, seed)
    return run_untargeted_trial(cfg, spec, train, test, seed)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ExperimentManifest:
    mode: str
    config: dict
    dataset: dict
    master_seed: int
    trial_seeds: list
    version: str
    backend: str
    records: list = field(default_factory=list)  # one dict per trial: trial, seed, metrics or error
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def metrics(self) -> Metrics:
        return Metrics([r["metrics"] if "metrics" in r else {"error": r["error"]} for r in self.records])

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        d = json.loads(text)
        if d.pop("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
            raise ValueError("not an experiment manifest")
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        d = dataclasses.asdict(self)
        d["format"] = MANIFEST_FORMAT
        try:
            path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        return cls.from_json(Path(path).read_text())

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_mapping(self.config)


def run_experiment(cfg: ExperimentConfig, trials: Optional[int] = None, progress=None) -> ExperimentManifest:
    """Run ``trials`` (default ``cfg.trials``) seeded trials and aggregate their metrics.

    Trials whose attack or training fails numerically are recorded with an
    ``error`` tag and left out of the means; the summary reports how many.
    """
    if trials is not None:
        cfg = cfg.replace(trials=trials)
    start = time.perf_counter()
    spec, train, test = prepare(cfg)
    seeds = [trial_seed(cfg.seed, t) for t in range(cfg.trials)]
    records = []
    for t, seed in enumerate(seeds):
        try:
            metrics = run_trial(cfg, spec, train, test, seed)
        except TRIAL_ERRORS as exc:
            log.warning("trial %d failed: %s", t, exc)
            records.append({"trial": t, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        else:
            records.append({"trial": t, "seed": seed, "metrics": metrics})
        if progress is not None:
            progress(t, records[-1])
    manifest = ExperimentManifest(
        mode=cfg.mode,
        config=cfg.to_dict(),
        dataset=cfg.source().describe(),
        master_seed=cfg.seed,
        trial_seeds=seeds,
        version=__version__,
        backend=_kernels.BACKEND,
        records=records,
    )
    manifest.summary = manifest.metrics.summary()
    manifest.wall_clock = time.perf_counter() - start
    return manifest


def rerun(manifest: ExperimentManifest) -> ExperimentManifest:
    """Run the experiment a manifest describes again."""
    return run_experiment(manifest.experiment_config())


def same_metrics(a: ExperimentManifest, b: ExperimentManifest) -> bool:
    """Byte-level equality of everything except wall-clock time."""
    return metrics_csv(a) == metrics_csv(b) and a.trial_seeds == b.trial_seeds


# ---------------------------------------------------------------------------
# export


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.17g}"
    return str(v)


def metrics_csv(manifest: ExperimentManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "seed", "metric", "value"])
    for r in manifest.records:
        if "error" in r:
            w.writerow([r["trial"], r["seed"], "error", r["error"]])
            continue
        for name, value in r["metrics"].items():
            w.writerow([r["trial"], r["seed"], name, _fmt(float(value))])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list:
    """Rows of ``(trial, seed, metric, value)``; values are floats except for error rows."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["trial", "seed", "metric", "value"]:
        raise ValueError("missing metrics header")
    out = []
    for row in rows[1:]:
        if len(row) != 4:
            raise ValueError(f"expected 4 columns, got {len(row)}")
        trial, seed, name, value = row
        out.append((int(trial), int(seed), name, value if name == "error" else float(value)))
    return out


def export_metrics(manifest: ExperimentManifest, out_dir) -> tuple[Path, Path]:
    """Write ``metrics.csv`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        csv_path.write_text(metrics_csv(manifest))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {out}: {exc}") from exc
    return csv_path, manifest.save(out / "manifest.json")
