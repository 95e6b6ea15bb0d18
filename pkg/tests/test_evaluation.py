import math

import numpy as np
import pytest

from sharppoison import nn
from sharppoison.evaluation import Metrics, eval_accuracy, eval_backdoor, eval_targeted
from sharppoison.gradmatch import TriggerPatch, VictimSpec


def _threshold_model():
    # logits = [0, x0 - x1]: class 1 exactly when x0 > x1, ties to class 0
    spec = nn.ModelSpec((2,), (nn.Dense(2, 2),))
    params = nn.init_params(spec, 0)
    w = np.array([[0.0, 1.0], [0.0, -1.0]])  # (in, out)
    flat = np.concatenate([w.ravel(), np.zeros(2)])
    return spec, nn.perturb_params(params, flat - params.flat)


def test_threshold_model_is_what_it_claims():
    spec, params = _threshold_model()
    x = np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
    np.testing.assert_array_equal(nn.predict(spec, params, x), [1, 0, 0])


def test_eval_targeted_counts():
    spec, params = _threshold_model()
    victims = VictimSpec(np.array([[0.9, 0.1], [0.2, 0.4], [0.7, 0.6], [0.3, 0.3]]), 0, 1)
    hits = eval_targeted(spec, params, victims)
    np.testing.assert_array_equal(hits, [1, 0, 1, 0])
    assert float(np.mean(hits)) == 0.5 and not np.all(hits)


def test_eval_backdoor_counts():
    spec, params = _threshold_model()
    test = nn.LabeledBatch(np.array([[0.2, 0.5], [0.1, 0.2], [0.3, 0.9], [0.8, 0.1]]), np.array([0, 0, 0, 1]))
    # the trigger sets x0 = 0.6; class-0 rows become 1 when x1 < 0.6
    rate = eval_backdoor(spec, params, test, 0, TriggerPatch(np.array([0.6]), (0,)), 1)
    assert rate == pytest.approx(2 / 3, abs=0)
    with pytest.raises(ValueError):
        eval_backdoor(spec, params, test, 5, TriggerPatch(np.array([0.6]), (0,)), 1)


def test_eval_accuracy_counts():
    spec, params = _threshold_model()
    test = nn.LabeledBatch(np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5], [0.6, 0.2]]), np.array([1, 0, 1, 0]))
    assert eval_accuracy(spec, params, test) == 0.5
    with pytest.raises(ValueError):
        eval_accuracy(spec, params, nn.LabeledBatch(np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_metrics_aggregation_and_exclusion():
    m = Metrics(
        [
            {"success_rate": 1.0, "clean_test_accuracy": 0.8},
            {"error": "CraftingFailedError: boom"},
            {"success_rate": 0.0, "clean_test_accuracy": 0.9},
        ]
    )
    assert m.success_rate == 0.5
    assert m.clean_test_accuracy == pytest.approx(0.85)
    assert m.excluded == 1
    s = m.summary()
    assert s["trials"] == 3 and s["excluded"] == 1 and s["success_rate"] == 0.5
    assert math.isnan(m.avg_success_rate)


def test_single_trial_mean_is_the_value():
    m = Metrics([{"sharpness_estimate": 0.123}])
    assert m.sharpness_estimate == 0.123
    assert m.names() == ["sharpness_estimate"]
