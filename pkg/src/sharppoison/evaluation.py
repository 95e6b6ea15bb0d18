"""Attack metrics on retrained models.

Predictions are argmax over logits with ties broken toward the lowest class
index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .gradmatch import TriggerPatch, VictimSpec, apply_trigger


def eval_targeted(spec, params, victim: VictimSpec) -> np.ndarray:
    """Per-victim success indicators: 1.0 where the model predicts ``y_obj``.

    The mean of the returned array is the average success rate.
    """
    x = victim.inputs if victim.trigger is None else apply_trigger(victim.inputs, victim.trigger)
    return (nn.predict(spec, params, x) == victim.y_obj).astype(np.float64)


def eval_backdoor(spec, params, test_set: nn.LabeledBatch, y_vic: int, trigger: TriggerPatch, y_obj: int) -> float:
    """Fraction of triggered test samples of class ``y_vic`` classified as ``y_obj``."""
    mask = test_set.labels == y_vic
    if not np.any(mask):
        raise ValueError(f"no test samples of class {y_vic}")
    x = apply_trigger(test_set.inputs[mask], trigger)
    return float(np.mean(nn.predict(spec, params, x) == y_obj))


def eval_accuracy(spec, params, test_set: nn.LabeledBatch) -> float:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return float(np.mean(nn.predict(spec, params, test_set.inputs) == test_set.labels))


@dataclass
class Metrics:
    """Aggregate of per-trial records.

    Each record is a dict with the metric values of one trial; failed trials
    carry an ``error`` entry and are left out of the means.
    """

    records: list = field(default_factory=list)

    def ok(self) -> list:
        return [r for r in self.records if "error" not in r]

    @property
    def excluded(self) -> int:
        return len(self.records) - len(self.ok())

    def mean(self, name: str) -> float:
        values = [r[name] for r in self.ok() if name in r]
        return float(np.mean(values)) if values else float("nan")

    @property
    def success_rate(self) -> float:
        return self.mean("success_rate")

    @property
    def avg_success_rate(self) -> float:
        return self.mean("avg_success_rate")

    @property
    def clean_test_accuracy(self) -> float:
        return self.mean("clean_test_accuracy")

    @property
    def sharpness_estimate(self) -> float:
        return self.mean("sharpness_estimate")

    def names(self) -> list:
        seen = []
        for r in self.ok():
            for k in r:
                if k not in seen and isinstance(r[k], (int, float)) and not isinstance(r[k], bool):
                    seen.append(k)
        return seen

    def summary(self) -> dict:
        out = {name: self.mean(name) for name in self.names()}
        out["trials"] = len(self.records)
        out["excluded"] = self.excluded
        return out
