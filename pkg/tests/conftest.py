import numpy as np
import pytest

from sharppoison import nn


def random_mlp(seed, input_dim=None, hidden=None, classes=None):
    rng = np.random.default_rng([seed, 100])
    input_dim = input_dim or int(rng.integers(2, 6))
    hidden = hidden if hidden is not None else [int(h) for h in rng.integers(2, 7, size=rng.integers(1, 3))]
    classes = classes or int(rng.integers(2, 5))
    spec = nn.mlp(input_dim, hidden, classes)
    return spec, nn.init_params(spec, [seed, 101])


def random_convnet(seed):
    rng = np.random.default_rng([seed, 200])
    c = int(rng.integers(1, 3))
    size = int(rng.integers(5, 8))
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    o = int(rng.integers(1, 4))
    oh = (size - k) // stride + 1
    classes = int(rng.integers(2, 4))
    spec = nn.ModelSpec(
        (c, size, size),
        (nn.Conv2d(c, o, k, stride), nn.ReLU(), nn.Flatten(), nn.Dense(o * oh * oh, 4), nn.ReLU(), nn.Dense(4, classes)),
    )
    return spec, nn.init_params(spec, [seed, 201])


def random_batch(spec, seed, n=None):
    rng = np.random.default_rng([seed, 300])
    n = n or int(rng.integers(1, 5))
    x = rng.uniform(0, 1, size=(n,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, size=n)
    return nn.LabeledBatch(x, y)


@pytest.fixture
def small_mlp():
    return random_mlp(0, input_dim=4, hidden=[5], classes=3)


@pytest.fixture
def blobs():
    """Two well-separated Gaussian blobs in [0, 1]^2."""
    rng = np.random.default_rng(7)
    y = np.arange(80) % 2
    x = np.clip(np.where(y[:, None] == 0, 0.25, 0.75) + 0.05 * rng.standard_normal((80, 2)), 0, 1)
    return nn.LabeledBatch(x, y)


# acceptance criteria report their verdicts here; printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
