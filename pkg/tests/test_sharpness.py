import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharppoison import nn
from sharppoison.landscape import filter_normalized_direction, landscape_probe, probe_objective, read_grid_csv
from sharppoison.sharpness import (
    FunctionObjective,
    SharpnessConfig,
    TrainingLoss,
    compute_vhat,
    flat_params,
    lp_norm,
    objective_sharpness,
    objective_sharpness_oracle,
    sharp_objective_grad,
    sharpness_estimate,
    sharpness_oracle,
)

from conftest import random_batch, random_convnet, random_mlp

QUAD = FunctionObjective(lambda t: 0.5 * float(t @ t), lambda t: t.copy())


def test_config_validation():
    with pytest.raises(ValueError):
        SharpnessConfig(-0.1)
    with pytest.raises(ValueError):
        SharpnessConfig(0.1, p=1.0)
    assert SharpnessConfig(p=2).q == 2
    assert SharpnessConfig(p=math.inf).q == 1
    assert SharpnessConfig(p=3).q == pytest.approx(1.5)


# ---------------------------------------------------------------------------
# vhat


def test_vhat_3_4_example():
    np.testing.assert_allclose(compute_vhat(np.array([3.0, 4.0]), SharpnessConfig(0.05)), [0.03, 0.04], rtol=0, atol=1e-16)


def test_vhat_rho_zero_is_zero():
    g = np.random.default_rng(0).normal(size=10)
    assert not np.any(compute_vhat(g, SharpnessConfig(0.0)))


@pytest.mark.parametrize("seed", range(20))
def test_vhat_p2_closed_form(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=rng.integers(1, 50)) * 10 ** rng.uniform(-5, 5)
    rho = rng.uniform(0.001, 1)
    expected = rho * g / np.linalg.norm(g)
    assert np.max(np.abs(compute_vhat(g, SharpnessConfig(rho)) - expected)) < 1e-10


def test_vhat_pinf_is_signed_rho():
    g = np.array([0.3, -2.0, 0.0, 1e-30])
    np.testing.assert_array_equal(compute_vhat(g, SharpnessConfig(0.2, math.inf)), [0.2, -0.2, 0.0, 0.2])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)).filter(lambda g: np.linalg.norm(g) > 1e-6),
    st.floats(1e-4, 10),
)
def test_vhat_p2_norm_and_colinearity(g, rho):
    v = compute_vhat(g, SharpnessConfig(rho))
    assert abs(np.linalg.norm(v) - rho) <= 1e-12 * max(rho, 1)
    # colinear and same direction
    assert float(v @ g) == pytest.approx(rho * np.linalg.norm(g), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda g: np.max(np.abs(g)) > 1e-3), st.sampled_from([1.5, 3.0, 4.0]))
def test_vhat_general_p_lies_on_sphere_and_attains_dual_norm(g, p):
    rho = 0.3
    cfg = SharpnessConfig(rho, p)
    v = compute_vhat(g, cfg)
    assert lp_norm(v, p) == pytest.approx(rho, rel=1e-9)
    assert float(g @ v) == pytest.approx(rho * lp_norm(g, cfg.q), rel=1e-9)


def test_zero_gradient_is_flagged():
    v, flag = compute_vhat(np.zeros(4), SharpnessConfig(0.1), with_flag=True)
    assert flag and not np.any(v)


def sphere_grid_2d(n):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([np.cos(t), np.sin(t)], axis=1), 2 * np.pi / n


def sphere_grid_3d(n):
    # latitude/longitude grid; spacing bound is the larger of the two angle steps
    th = np.linspace(0, np.pi, n)
    ph = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    return pts, max(np.pi / (n - 1), np.pi / n)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("seed", range(10))
def test_vhat_beats_sphere_grid(dim, seed):
    rng = np.random.default_rng([dim, seed])
    g = rng.normal(size=dim)
    rho = 0.05
    v = compute_vhat(g, SharpnessConfig(rho))
    pts, step = sphere_grid_2d(720) if dim == 2 else sphere_grid_3d(180)
    lin = rho * pts @ g  # linearized loss increase on the grid
    # v must be at least as good as every grid point, and the grid's best is
    # within the grid resolution bound of v
    assert float(g @ v) >= lin.max() - 1e-15
    assert float(g @ v) - lin.max() <= rho * np.linalg.norm(g) * step**2
    best = rho * pts[np.argmax(lin)]
    assert np.linalg.norm(best - v) <= rho * step


@pytest.mark.parametrize("seed", range(5))
def test_vhat_pinf_beats_cube_grid(seed):
    g = np.random.default_rng(seed).normal(size=3)
    rho = 0.1
    v = compute_vhat(g, SharpnessConfig(rho, math.inf))
    axis = np.linspace(-rho, rho, 21)
    grid = np.array(list(itertools.product(axis, repeat=3)))
    assert float(g @ v) >= float(np.max(grid @ g)) - 1e-15


# ---------------------------------------------------------------------------
# sharpness estimates


def test_quadratic_closed_form_one_step():
    cfg = SharpnessConfig(0.1)
    assert abs(objective_sharpness(QUAD, flat_params([1.0]), cfg) - 0.105) < 1e-9


def test_quadratic_oracle_converges():
    cfg = SharpnessConfig(0.1)
    val = objective_sharpness_oracle(QUAD, flat_params([1.0]), cfg, k_steps=50, step_size=0.01)
    assert abs(val - 0.105) < 1e-6


def test_estimate_zero_for_rho_zero(small_mlp):
    spec, params = small_mlp
    assert sharpness_estimate(spec, params, random_batch(spec, 0, n=4), SharpnessConfig(0.0)) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_one_step_oracle_reproduces_estimate(seed):
    spec, params = random_mlp(seed)
    batch = random_batch(spec, seed, n=5)
    cfg = SharpnessConfig(0.05)
    est = sharpness_estimate(spec, params, batch, cfg)
    assert abs(sharpness_oracle(spec, params, batch, cfg, 1, cfg.rho) - est) < 1e-9
    assert est <= sharpness_oracle(spec, params, batch, cfg, 20, cfg.rho / 5) + 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_oracle_monotone_in_rho(seed):
    spec, params = random_mlp(seed)
    batch = random_batch(spec, seed, n=6)
    rhos = [0.01, 0.03, 0.1, 0.3]
    vals = [sharpness_oracle(spec, params, batch, SharpnessConfig(r), 30, r / 5) for r in rhos]
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


def test_small_rho_asymptotics():
    spec, params = random_mlp(11)
    batch = random_batch(spec, 11, n=8)
    gnorm = np.linalg.norm(nn.grad_params(spec, params, batch))
    errs = [abs(sharpness_estimate(spec, params, batch, SharpnessConfig(r)) / r - gnorm) for r in (1e-3, 1e-4, 1e-5)]
    # first-order Taylor: the error shrinks roughly in proportion to rho
    assert errs[1] < errs[0] / 5 and errs[2] < errs[1] / 5
    assert errs[2] < 1e-3 * gnorm


# ---------------------------------------------------------------------------
# sharp gradients


def test_sharp_grad_quadratic():
    theta = np.array([0.6, -0.8, 1.5])
    rho = 0.05
    sg = sharp_objective_grad(flat_params(theta), QUAD, SharpnessConfig(rho))
    np.testing.assert_allclose(sg.grad, theta + rho * theta / np.linalg.norm(theta), rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_sharp_grad_rho_zero_is_plain(seed):
    spec, params = random_convnet(seed) if seed % 2 else random_mlp(seed)
    batch = random_batch(spec, seed, n=3)
    plain = nn.grad_params(spec, params, batch)
    sharp = sharp_objective_grad(params, TrainingLoss(spec, batch), SharpnessConfig(0.0)).grad
    assert plain.tobytes() == sharp.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_sharp_grad_is_gradient_at_shifted_point(seed):
    spec, params = random_mlp(seed)
    batch = random_batch(spec, seed, n=4)
    sg = sharp_objective_grad(params, TrainingLoss(spec, batch), SharpnessConfig(0.05))
    shifted = nn.perturb_params(params, sg.vhat)
    h = 1e-5
    fd = np.empty(spec.num_params)
    for k in range(spec.num_params):
        e = np.zeros(spec.num_params)
        e[k] = h
        fd[k] = (nn.loss(spec, nn.perturb_params(shifted, e), batch) - nn.loss(spec, nn.perturb_params(shifted, -e), batch)) / (2 * h)
    assert np.max(np.abs(sg.grad - fd)) / np.max(np.abs(fd)) < 1e-4


# ---------------------------------------------------------------------------
# landscape


def test_landscape_center_and_shape(small_mlp, tmp_path):
    spec, params = small_mlp
    batch = random_batch(spec, 3, n=10)
    grid = landscape_probe(spec, params, batch, 0.5, 7, seed=1)
    assert grid.losses.shape == (7, 7)
    assert abs(grid.center - nn.loss(spec, params, batch)) <= 1e-12
    path = tmp_path / "grid.csv"
    grid.save_csv(path)
    assert path.read_text().splitlines()[0] == "a,b,loss"
    coords, losses = read_grid_csv(path)
    np.testing.assert_array_equal(coords, grid.coords)
    np.testing.assert_array_equal(losses, grid.losses)


def test_landscape_zero_extent_is_constant(small_mlp):
    spec, params = small_mlp
    grid = landscape_probe(spec, params, random_batch(spec, 3, n=10), 0.0, 5, seed=0)
    assert np.all(grid.losses == grid.losses[0, 0])


def test_landscape_convex_toy_minimum_at_center():
    center = np.array([0.3, -1.2, 2.0, 0.7])
    obj = FunctionObjective(lambda t: float(np.sum((t - center) ** 2)), lambda t: 2 * (t - center))
    grid = probe_objective(obj, flat_params(center), 1.0, 9, seed=4)
    assert np.unravel_index(np.argmin(grid.losses), grid.losses.shape) == (4, 4)


def test_landscape_rejects_even_resolution(small_mlp):
    spec, params = small_mlp
    with pytest.raises(ValueError):
        landscape_probe(spec, params, random_batch(spec, 3), 1.0, 4, seed=0)


def test_filter_normalization_matches_block_norms():
    spec, params = random_convnet(2)
    d = filter_normalized_direction(params, np.random.default_rng(0))
    for b in params.layout:
        sl = slice(b.offset, b.offset + b.size)
        assert np.linalg.norm(d[sl]) == pytest.approx(np.linalg.norm(params.flat[sl]), rel=1e-12)
