import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharppoison import _kernels, nn

from conftest import random_batch, random_convnet, random_mlp

H = 1e-5


def fd_params(spec, params, batch, h=H):
    out = np.empty(spec.num_params)
    for k in range(spec.num_params):
        e = np.zeros(spec.num_params)
        e[k] = h
        out[k] = (nn.loss(spec, nn.perturb_params(params, e), batch) - nn.loss(spec, nn.perturb_params(params, -e), batch)) / (2 * h)
    return out


def fd_inputs(spec, params, batch, h=H):
    """Per-sample central differences of l(f(x_i), y_i)."""
    x = batch.inputs
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        i = idx[0]
        lp = nn.loss(spec, params, nn.LabeledBatch(xp[i : i + 1], batch.labels[i : i + 1]))
        lm = nn.loss(spec, params, nn.LabeledBatch(xm[i : i + 1], batch.labels[i : i + 1]))
        out[idx] = (lp - lm) / (2 * h)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


# ---------------------------------------------------------------------------
# forward


def test_identity_dense_layer():
    spec = nn.ModelSpec((2,), (nn.Dense(2, 2),))
    params = nn.ModelParams(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), spec.layout)
    np.testing.assert_array_equal(nn.forward(spec, params, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_relu_definition():
    spec = nn.ModelSpec((3,), (nn.ReLU(), nn.Dense(3, 3)))
    eye = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    params = nn.ModelParams(eye, spec.layout)
    np.testing.assert_array_equal(nn.forward(spec, params, [[-1.0, 0.0, 3.0]]), [[0.0, 0.0, 3.0]])


def test_two_layer_mlp_matches_hand_matmul():
    spec, params = random_mlp(3, input_dim=3, hidden=[4], classes=2)
    x = np.array([[0.1, 0.7, 0.3], [0.9, 0.2, 0.5]])
    w1, b1 = params.block(0, "weight"), params.block(0, "bias")
    w2, b2 = params.block(2, "weight"), params.block(2, "bias")
    expected = []
    for row in x:
        h = [max(sum(row[i] * w1[i, j] for i in range(3)) + b1[j], 0.0) for j in range(4)]
        expected.append([sum(h[j] * w2[j, k] for j in range(4)) + b2[k] for k in range(2)])
    np.testing.assert_allclose(nn.forward(spec, params, x), expected, rtol=0, atol=1e-14)


def test_forward_is_pure(small_mlp):
    spec, params = small_mlp
    x = np.random.default_rng(0).uniform(size=(5, 4))
    a = nn.forward(spec, params, x)
    b = nn.forward(spec, params, x)
    assert a.tobytes() == b.tobytes()


def test_shape_error_names_layer():
    spec, params = random_mlp(0, input_dim=4, hidden=[3], classes=2)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(spec, params, np.zeros((2, 5)))


def test_spec_rejects_mismatched_dense():
    with pytest.raises(nn.ShapeError, match="layer 1"):
        nn.ModelSpec((4,), (nn.Dense(4, 3), nn.Dense(2, 2)))


def test_label_out_of_range(small_mlp):
    spec, params = small_mlp
    with pytest.raises(ValueError):
        nn.loss(spec, params, nn.LabeledBatch(np.zeros((1, 4)), np.array([3])))


def test_predict_ties_go_to_lowest_index():
    spec = nn.ModelSpec((2,), (nn.Dense(2, 3),))
    params = nn.ModelParams(np.zeros(9), spec.layout)
    np.testing.assert_array_equal(nn.predict(spec, params, np.ones((4, 2))), [0, 0, 0, 0])


# ---------------------------------------------------------------------------
# cross-entropy


def test_uniform_logits_give_ln2():
    assert nn.loss_ce(np.zeros((3, 2)), np.array([0, 1, 1])) == pytest.approx(np.log(2), abs=1e-15)


def test_saturated_logits_are_finite():
    v = nn.loss_ce(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(v) and 0 <= v < 1e-6


def mp_ce(logits, labels):
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        row = [mpmath.mpf(float(v)) for v in row]
        total += mpmath.log(sum(mpmath.exp(v) for v in row)) - row[int(y)]
    return total / len(labels)


@pytest.mark.parametrize("seed", range(10))
def test_ce_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    assert abs(nn.loss_ce(logits, labels) - float(mp_ce(logits, labels))) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(logits):
    np.testing.assert_allclose(nn.softmax(logits).sum(axis=1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e4, 1e4)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_ce_nonnegative(logits, labels):
    assert nn.loss_ce(logits, np.array(labels)) >= 0.0


# ---------------------------------------------------------------------------
# gradients


def test_zero_input_dense_gradient():
    spec, params = random_mlp(1, input_dim=3, hidden=[], classes=3)
    batch = nn.LabeledBatch(np.zeros((2, 3)), np.array([0, 2]))
    g = nn.ModelParams(nn.grad_params(spec, params, batch), spec.layout)
    np.testing.assert_array_equal(g.block(0, "weight"), 0.0)
    p = nn.softmax(nn.forward(spec, params, batch.inputs))
    residual = (p - np.eye(3)[[0, 2]]).mean(axis=0)
    np.testing.assert_allclose(g.block(0, "bias"), residual, rtol=0, atol=1e-15)


def test_duplicated_batch_keeps_mean_gradient(small_mlp):
    spec, params = small_mlp
    batch = random_batch(spec, 4, n=3)
    doubled = nn.LabeledBatch(np.concatenate([batch.inputs] * 2), np.concatenate([batch.labels] * 2))
    np.testing.assert_allclose(nn.grad_params(spec, params, doubled), nn.grad_params(spec, params, batch), rtol=1e-13, atol=1e-15)


def test_linear_model_input_gradient_closed_form():
    rng = np.random.default_rng(5)
    spec = nn.ModelSpec((4,), (nn.Dense(4, 3),))
    params = nn.ModelParams(rng.normal(size=spec.num_params), spec.layout)
    batch = nn.LabeledBatch(rng.uniform(size=(5, 4)), rng.integers(0, 3, size=5))
    w = params.block(0, "weight")  # (in, out): logits = x W + b
    p = nn.softmax(nn.forward(spec, params, batch.inputs))
    expected = (p - np.eye(3)[batch.labels]) @ w.T
    np.testing.assert_allclose(nn.grad_inputs(spec, params, batch), expected, rtol=1e-13, atol=1e-15)


def test_input_gradients_are_per_sample(small_mlp):
    spec, params = small_mlp
    batch = random_batch(spec, 8, n=3)
    g = nn.grad_inputs(spec, params, batch)
    x = batch.inputs.copy()
    x[2] += 0.3
    g2 = nn.grad_inputs(spec, params, batch.with_inputs(x))
    np.testing.assert_array_equal(g[:2], g2[:2])


@pytest.mark.parametrize("seed", range(60))
def test_mlp_gradients_match_finite_differences(seed):
    spec, params = random_mlp(seed)
    batch = random_batch(spec, seed)
    assert rel_err(nn.grad_params(spec, params, batch), fd_params(spec, params, batch)) < 1e-4
    assert rel_err(nn.grad_inputs(spec, params, batch), fd_inputs(spec, params, batch)) < 1e-4


@pytest.mark.parametrize("seed", range(40))
def test_convnet_gradients_match_finite_differences(seed):
    spec, params = random_convnet(seed)
    batch = random_batch(spec, seed, n=2)
    assert rel_err(nn.grad_params(spec, params, batch), fd_params(spec, params, batch)) < 1e-4
    assert rel_err(nn.grad_inputs(spec, params, batch), fd_inputs(spec, params, batch)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["mlp", "conv"])
def test_mixed_derivative_matches_finite_differences(seed, kind):
    spec, params = random_mlp(seed) if kind == "mlp" else random_convnet(seed)
    batch = random_batch(spec, seed, n=3)
    u = np.random.default_rng([seed, 9]).normal(size=spec.num_params)
    got = nn.input_grad_of_param_dot(spec, params, batch, u)

    def dot(x):
        return float(u @ nn.grad_params(spec, params, batch.with_inputs(x)))

    fd = np.empty_like(batch.inputs)
    for idx in np.ndindex(*batch.inputs.shape):
        xp, xm = batch.inputs.copy(), batch.inputs.copy()
        xp[idx] += H
        xm[idx] -= H
        fd[idx] = (dot(xp) - dot(xm)) / (2 * H)
    assert rel_err(got, fd) < 1e-4


# ---------------------------------------------------------------------------
# parameters


def test_perturb_identities():
    spec, params = random_mlp(2)
    rng = np.random.default_rng(0)
    v1, v2 = rng.normal(size=(2, spec.num_params))
    np.testing.assert_array_equal(nn.perturb_params(params, np.zeros(spec.num_params)).flat, params.flat)
    # exact inverse holds for values where the rounding of theta + v is reversible; use dyadic v
    v = np.round(v1 * 64) / 64
    theta = nn.ModelParams(np.round(params.flat * 1024) / 1024, params.layout)
    np.testing.assert_array_equal(nn.perturb_params(nn.perturb_params(theta, v), -v).flat, theta.flat)
    w = np.round(v2 * 64) / 64
    np.testing.assert_array_equal(
        nn.perturb_params(theta, v + w).flat, nn.perturb_params(nn.perturb_params(theta, v), w).flat
    )


def test_perturb_rejects_wrong_length(small_mlp):
    spec, params = small_mlp
    with pytest.raises(nn.ShapeError):
        nn.perturb_params(params, np.zeros(spec.num_params + 1))


def test_init_is_seeded(small_mlp):
    spec, _ = small_mlp
    a, b, c = nn.init_params(spec, 1), nn.init_params(spec, 1), nn.init_params(spec, 2)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert a.flat.tobytes() != c.flat.tobytes()


# ---------------------------------------------------------------------------
# kernels


def naive_conv(x, w, stride):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for n in range(b):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[n, f, i, j] = np.sum(x[n, :, i * stride : i * stride + k, j * stride : j * stride + k] * w[f])
    return out


@pytest.mark.parametrize("backend", ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else []))
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_kernels_against_loops(backend, stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = _kernels.conv2d_forward(x, w, stride, backend=backend)
    np.testing.assert_allclose(out, naive_conv(x, w, stride), rtol=1e-12, atol=1e-12)
    # adjoint identities: <conv(x, w), g> is linear in both x and w
    g = rng.normal(size=out.shape)
    gw = _kernels.conv2d_grad_weight(x, g, 3, stride, backend=backend)
    gx = _kernels.conv2d_grad_input(g, w, (7, 7), stride, backend=backend)
    np.testing.assert_allclose(np.sum(gw * w), np.sum(out * g), rtol=1e-11)
    np.testing.assert_allclose(np.sum(gx * x), np.sum(out * g), rtol=1e-11)


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba unavailable")
def test_backends_agree():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3))
    g = rng.normal(size=(3, 2, 4, 4))
    for name, args in (
        ("forward", (_kernels.conv2d_forward, (x, w, 1))),
        ("grad_weight", (_kernels.conv2d_grad_weight, (x, g, 3, 1))),
        ("grad_input", (_kernels.conv2d_grad_input, (g, w, (6, 6), 1))),
    ):
        fn, a = args
        np.testing.assert_allclose(fn(*a, backend="numba"), fn(*a, backend="numpy"), rtol=1e-12, atol=1e-12, err_msg=name)


def test_disable_flag_selects_numpy(tmp_path):
    import subprocess
    import sys

    code = "from sharppoison import _kernels; print(_kernels.BACKEND)"
    env = {**__import__("os").environ, "SHARPPOISON_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"
