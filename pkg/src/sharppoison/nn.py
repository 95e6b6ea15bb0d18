"""Minimal differentiable network core.

Models are described by an immutable :class:`ModelSpec` (an ordered list of
``Dense``/``ReLU``/``Conv2d``/``Flatten`` layers) and evaluated against a flat
float64 parameter vector (:class:`ModelParams`). Gradients are exact
reverse-mode, with respect to parameters and inputs. For gradient matching we
also need the mixed second derivative ``grad_x <u, grad_theta L>``, which is
computed exactly by a forward-mode sweep over the reverse pass
(:func:`input_grad_of_param_dot`).

Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose with a model."""


# ---------------------------------------------------------------------------
# tensors and batches


def as_tensor(data, shape=None) -> np.ndarray:
    """Return a contiguous float64 copy of ``data``, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """Inputs of shape ``[b, d...]`` with integer labels of length ``b``."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or inputs.ndim < 2 or inputs.shape[0] != labels.shape[0]:
            raise ShapeError(f"inputs {inputs.shape} and labels {labels.shape} disagree")
        if labels.shape[0] < 1:
            raise ValueError("empty batch")
        if labels.dtype.kind not in "iu":
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
            labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise ValueError("negative label")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx])

    def with_inputs(self, inputs) -> "LabeledBatch":
        return LabeledBatch(inputs, self.labels)

    def check_classes(self, num_classes: int) -> None:
        if self.labels.max() >= num_classes:
            raise ValueError(f"label {self.labels.max()} out of range for {num_classes} classes")


# ---------------------------------------------------------------------------
# model description


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, ReLU, Conv2d, Flatten]


class ParamBlock(NamedTuple):
    layer: int
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _layer_output_shape(index: int, layer: Layer, shape: tuple) -> tuple:
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeError(f"layer {index} (dense {layer.in_features}->{layer.out_features}) got input shape {shape}")
        return (layer.out_features,)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"layer {index} (conv2d in_channels={layer.in_channels}) got input shape {shape}")
        if layer.kernel < 1 or layer.stride < 1 or layer.kernel > min(shape[1:]):
            raise ShapeError(f"layer {index} (conv2d kernel={layer.kernel}) does not fit input {shape}")
        oh = _kernels.conv_output_size(shape[1], layer.kernel, layer.stride)
        ow = _kernels.conv_output_size(shape[2], layer.kernel, layer.stride)
        return (layer.out_channels, oh, ow)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack applied to per-sample inputs of ``input_shape``."""

    input_shape: tuple
    layers: tuple
    shapes: tuple = field(init=False, repr=False, compare=False)
    layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_layer_output_shape(i, layer, shapes[-1]))
        if len(shapes[-1]) != 1:
            raise ShapeError(f"final layer produces shape {shapes[-1]}, expected a logit vector")
        object.__setattr__(self, "shapes", tuple(shapes))

        blocks, offset = [], 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                wshape, bshape = (layer.in_features, layer.out_features), (layer.out_features,)
            elif isinstance(layer, Conv2d):
                wshape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                bshape = (layer.out_channels,)
            else:
                continue
            for name, shape in (("weight", wshape), ("bias", bshape)):
                block = ParamBlock(i, name, offset, shape)
                blocks.append(block)
                offset += block.size
        object.__setattr__(self, "layout", tuple(blocks))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def num_params(self) -> int:
        if not self.layout:
            return 0
        last = self.layout[-1]
        return last.offset + last.size

    def describe(self) -> str:
        """Stable one-line description, used for checkpoint hashes."""
        parts = [f"input={'x'.join(map(str, self.input_shape))}"]
        for layer in self.layers:
            if isinstance(layer, Dense):
                parts.append(f"dense({layer.in_features},{layer.out_features})")
            elif isinstance(layer, Conv2d):
                parts.append(f"conv2d({layer.in_channels},{layer.out_channels},{layer.kernel},{layer.stride})")
            elif isinstance(layer, ReLU):
                parts.append("relu")
            else:
                parts.append("flatten")
        return ";".join(parts)


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> ModelSpec:
    """Dense/ReLU stack ``input_dim -> hidden... -> num_classes``."""
    layers, prev = [], input_dim
    for h in hidden:
        layers += [Dense(prev, h), ReLU()]
        prev = h
    layers.append(Dense(prev, num_classes))
    return ModelSpec((input_dim,), tuple(layers))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the per-layer layout it follows."""

    flat: np.ndarray
    layout: tuple

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.ndim != 1:
            raise ShapeError("parameter vector must be one-dimensional")
        expected = sum(b.size for b in self.layout)
        if flat.shape[0] != expected:
            raise ShapeError(f"parameter vector has length {flat.shape[0]}, layout needs {expected}")
        object.__setattr__(self, "flat", flat)

    def block(self, layer: int, name: str) -> np.ndarray:
        for b in self.layout:
            if b.layer == layer and b.name == name:
                return self.flat[b.offset : b.offset + b.size].reshape(b.shape)
        raise KeyError((layer, name))

    def blocks(self) -> dict:
        return {(b.layer, b.name): self.flat[b.offset : b.offset + b.size].reshape(b.shape) for b in self.layout}

    def replace(self, flat) -> "ModelParams":
        return ModelParams(np.array(flat, dtype=np.float64), self.layout)

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.layout)


def init_params(spec: ModelSpec, seed) -> ModelParams:
    """Fan-in scaled uniform init: every weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    flat = np.empty(spec.num_params)
    for b in spec.layout:
        layer = spec.layers[b.layer]
        if isinstance(layer, Dense):
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
        bound = 1.0 / np.sqrt(fan_in)
        flat[b.offset : b.offset + b.size] = rng.uniform(-bound, bound, size=b.size)
    return ModelParams(flat, spec.layout)


def perturb_params(params: ModelParams, v) -> ModelParams:
    """Return ``params + v`` as a new parameter object."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.flat.shape:
        raise ShapeError(f"perturbation length {v.shape} does not match parameters {params.flat.shape}")
    return ModelParams(params.flat + v, params.layout)


def _check(spec: ModelSpec, params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    if params.layout != spec.layout:
        raise ShapeError("parameters do not follow this model's layout")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim < 2 or tuple(inputs.shape[1:]) != spec.input_shape:
        first = spec.layers[0] if spec.layers else None
        raise ShapeError(f"layer 0 ({first}) expects per-sample shape {spec.input_shape}, got {inputs.shape[1:]}")
    return inputs


# ---------------------------------------------------------------------------
# forward / loss


def _forward(spec, params, x):
    """Forward pass keeping what the backward pass needs: per-layer inputs and relu masks."""
    acts = [x]
    for i, layer in enumerate(spec.layers):
        a = acts[-1]
        if isinstance(layer, Dense):
            out = a @ params.block(i, "weight") + params.block(i, "bias")
        elif isinstance(layer, Conv2d):
            out = _kernels.conv2d_forward(a, params.block(i, "weight"), layer.stride)
            out += params.block(i, "bias")[None, :, None, None]
        elif isinstance(layer, ReLU):
            out = np.maximum(a, 0.0)
        else:
            out = a.reshape(a.shape[0], -1)
        acts.append(out)
    return acts


def forward(spec: ModelSpec, params: ModelParams, inputs) -> np.ndarray:
    """Logits ``[b, m]`` of the model on ``inputs``."""
    x = _check(spec, params, inputs)
    return _forward(spec, params, x)[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _targets(labels, num_classes, soft=None):
    if soft is not None:
        return np.asarray(soft, dtype=np.float64)
    onehot = np.zeros((labels.shape[0], num_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return onehot


def per_sample_ce(logits, labels=None, soft_targets=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits)
    if soft_targets is None:
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError("label out of range")
        return -logp[np.arange(logits.shape[0]), labels]
    return -(np.asarray(soft_targets) * logp).sum(axis=1)


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("empty batch")
    losses = per_sample_ce(logits, labels)
    # rounding can produce -0.0 or tiny negatives in the saturated regime
    return float(max(losses.mean(), 0.0))


# ---------------------------------------------------------------------------
# reverse mode


def _backward(spec, params, acts, gout, need_params=True, need_inputs=False):
    grad = np.zeros(spec.num_params) if need_params else None
    offsets = {(b.layer, b.name): b for b in spec.layout}
    g = gout
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, a = spec.layers[i], acts[i]
        last = i == 0 and not need_inputs
        if isinstance(layer, Dense):
            w = params.block(i, "weight")
            if need_params:
                bw, bb = offsets[(i, "weight")], offsets[(i, "bias")]
                grad[bw.offset : bw.offset + bw.size] = (a.T @ g).ravel()
                grad[bb.offset : bb.offset + bb.size] = g.sum(axis=0)
            if not last:
                g = g @ w.T
        elif isinstance(layer, Conv2d):
            w = params.block(i, "weight")
            if need_params:
                bw, bb = offsets[(i, "weight")], offsets[(i, "bias")]
                gw = _kernels.conv2d_grad_weight(a, g, layer.kernel, layer.stride)
                grad[bw.offset : bw.offset + bw.size] = gw.ravel()
                grad[bb.offset : bb.offset + bb.size] = g.sum(axis=(0, 2, 3))
            if not last:
                g = _kernels.conv2d_grad_input(g, w, a.shape[2:], layer.stride)
        elif isinstance(layer, ReLU):
            g = g * (a > 0)
        else:
            g = g.reshape(a.shape)
    return grad, (g if need_inputs else None)


def _residual(logits, labels, soft_targets, weights):
    """d(mean weighted CE)/d logits."""
    p = softmax(logits)
    t = _targets(labels, logits.shape[1], soft_targets)
    r = p - t
    if weights is not None:
        r = r * np.asarray(weights, dtype=np.float64)[:, None]
    return r / logits.shape[0]


def loss_and_grads(
    spec: ModelSpec,
    params: ModelParams,
    batch: LabeledBatch,
    *,
    need_params: bool = True,
    need_inputs: bool = False,
    soft_targets=None,
    weights=None,
):
    """Mean cross-entropy and its exact gradients.

    Returns ``(loss, grad_params, grad_inputs)``; the input gradient is of the
    *mean* loss (row ``i`` is ``(1/b) dl_i/dx_i``). ``soft_targets`` replaces
    the one-hot labels; ``weights`` scales each sample's loss.
    """
    x = _check(spec, params, batch.inputs)
    if soft_targets is None:
        batch.check_classes(spec.num_classes)
    acts = _forward(spec, params, x)
    logits = acts[-1]
    losses = per_sample_ce(logits, batch.labels, soft_targets)
    if weights is not None:
        losses = losses * weights
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    gp, gx = _backward(spec, params, acts, _residual(logits, batch.labels, soft_targets, weights), need_params, need_inputs)
    return loss, gp, gx


def loss(spec: ModelSpec, params: ModelParams, batch: LabeledBatch) -> float:
    batch.check_classes(spec.num_classes)
    return loss_ce(forward(spec, params, batch.inputs), batch.labels)


def grad_params(spec: ModelSpec, params: ModelParams, batch: LabeledBatch) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the flat parameters."""
    return loss_and_grads(spec, params, batch)[1]


def grad_inputs(spec: ModelSpec, params: ModelParams, batch: LabeledBatch) -> np.ndarray:
    """Per-sample input gradients: row ``i`` is ``d l(f(x_i), y_i) / d x_i``."""
    _, _, gx = loss_and_grads(spec, params, batch, need_params=False, need_inputs=True)
    return gx * len(batch)


# ---------------------------------------------------------------------------
# forward-over-reverse


def input_grad_of_param_dot(spec: ModelSpec, params: ModelParams, batch: LabeledBatch, direction) -> np.ndarray:
    """Exact ``grad_x <direction, grad_theta L(theta; x)>`` for the mean loss ``L``.

    By symmetry of mixed partials this is the derivative of ``grad_x L`` along
    ``direction`` in parameter space, which we push through the reverse pass
    with forward-mode tangents. ReLU masks are piecewise constant and carry no
    tangent. Cost is about two gradient evaluations.
    """
    x = _check(spec, params, batch.inputs)
    batch.check_classes(spec.num_classes)
    u = ModelParams(np.asarray(direction, dtype=np.float64), params.layout)

    acts = _forward(spec, params, x)
    # tangent of every activation w.r.t. a parameter move along u (input tangent is 0)
    dacts = [np.zeros_like(x)]
    for i, layer in enumerate(spec.layers):
        a, da = acts[i], dacts[-1]
        if isinstance(layer, Dense):
            out = da @ params.block(i, "weight") + a @ u.block(i, "weight") + u.block(i, "bias")
        elif isinstance(layer, Conv2d):
            out = _kernels.conv2d_forward(da, params.block(i, "weight"), layer.stride)
            out += _kernels.conv2d_forward(a, u.block(i, "weight"), layer.stride)
            out += u.block(i, "bias")[None, :, None, None]
        elif isinstance(layer, ReLU):
            out = da * (a > 0)
        else:
            out = da.reshape(da.shape[0], -1)
        dacts.append(out)

    logits, dlogits = acts[-1], dacts[-1]
    b = logits.shape[0]
    p = softmax(logits)
    g = (p - _targets(batch.labels, logits.shape[1])) / b
    dg = p * (dlogits - (p * dlogits).sum(axis=1, keepdims=True)) / b

    for i in range(len(spec.layers) - 1, -1, -1):
        layer, a = spec.layers[i], acts[i]
        if isinstance(layer, Dense):
            w, uw = params.block(i, "weight"), u.block(i, "weight")
            g, dg = g @ w.T, dg @ w.T + g @ uw.T
        elif isinstance(layer, Conv2d):
            w, uw = params.block(i, "weight"), u.block(i, "weight")
            hw = a.shape[2:]
            dg = _kernels.conv2d_grad_input(dg, w, hw, layer.stride) + _kernels.conv2d_grad_input(
                g, uw, hw, layer.stride
            )
            g = _kernels.conv2d_grad_input(g, w, hw, layer.stride)
        elif isinstance(layer, ReLU):
            mask = a > 0
            g, dg = g * mask, dg * mask
        else:
            g, dg = g.reshape(a.shape), dg.reshape(a.shape)
    return dg


def predict(spec: ModelSpec, params: ModelParams, inputs) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward(spec, params, inputs), axis=1)
