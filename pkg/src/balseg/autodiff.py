"""Minimal reverse-mode differentiation over dense NHWC arrays.

A Graph records one backward closure per operation; Graph.backward replays
them in reverse. Gradients accumulate additively, so tensors consumed by
several ops (skip connections, shared backbones) need no special wiring.
Heavy kernels (3x3 conv, 2x2 max pool) are delegated to balseg.kernels.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels
from .errors import OptimizerError, ShapeError


class Parameter:
    """A trainable array with a same-shape gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def reset_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class Node:
    """One tensor in the computation graph."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = None

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad


class Graph:
    """Tape of backward closures, replayed last-to-first."""

    def __init__(self):
        self._ops = []

    def record(self, fn):
        self._ops.append(fn)

    def backward(self, loss: Node):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._ops:
            raise ShapeError("backward called on an empty graph (no forward recorded)")
        loss.ensure_grad()[...] = 1.0
        for fn in reversed(self._ops):
            fn()


def _record(g, fn):
    if g is not None:
        g.record(fn)


def _require_rank4(x: np.ndarray, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 (batch, height, width, channels) "
                         f"array, got rank {x.ndim}")


def conv2d(g, x: Node, w: Parameter, b: Parameter) -> Node:
    """Same-padded 3x3 convolution. w: (3, 3, Cin, Cout), b: (Cout,)."""
    _require_rank4(x.data, "conv2d")
    if w.value.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernels must be 3x3, got {w.value.shape[:2]}")
    if x.data.shape[3] != w.value.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[3]} channels "
            f"but weight {w.name} expects {w.value.shape[2]}")
    y = Node(kernels.conv3x3_forward(x.data, w.value, b.value))

    def bwd():
        if y.grad is None:
            return
        x.ensure_grad()[...] += kernels.conv3x3_input_grad(y.grad, w.value)
        w.grad += kernels.conv3x3_weight_grad(x.data, y.grad)
        b.grad += y.grad.sum(axis=(0, 1, 2))

    _record(g, bwd)
    return y


def conv1x1(g, x: Node, w: Parameter, b: Parameter) -> Node:
    """1x1 convolution (per-pixel channel mixing). w: (Cin, Cout)."""
    _require_rank4(x.data, "conv1x1")
    if x.data.shape[3] != w.value.shape[0]:
        raise ShapeError(
            f"conv1x1 channel mismatch: input has {x.data.shape[3]} channels "
            f"but weight {w.name} expects {w.value.shape[0]}")
    y = Node(x.data @ w.value + b.value)

    def bwd():
        if y.grad is None:
            return
        x.ensure_grad()[...] += y.grad @ w.value.T
        ci, co = w.value.shape
        w.grad += x.data.reshape(-1, ci).T @ y.grad.reshape(-1, co)
        b.grad += y.grad.sum(axis=(0, 1, 2))

    _record(g, bwd)
    return y


def relu(g, x: Node) -> Node:
    y = Node(np.maximum(x.data, 0.0))

    def bwd():
        if y.grad is None:
            return
        x.ensure_grad()[...] += np.where(x.data > 0.0, y.grad, 0.0)

    _record(g, bwd)
    return y


def sigmoid(g, x: Node) -> Node:
    d = x.data
    y_data = np.empty_like(d)
    pos = d >= 0
    y_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    y_data[~pos] = ed / (1.0 + ed)
    y = Node(y_data)

    def bwd():
        if y.grad is None:
            return
        x.ensure_grad()[...] += y.grad * y_data * (1.0 - y_data)

    _record(g, bwd)
    return y


def softmax_channels(g, x: Node) -> Node:
    """Per-pixel softmax across the channel axis, stabilized by max-subtraction."""
    _require_rank4(x.data, "softmax_channels")
    if x.data.shape[3] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.data.shape[3]}")
    z = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(z)
    y_data = e / e.sum(axis=3, keepdims=True)
    y = Node(y_data)

    def bwd():
        if y.grad is None:
            return
        inner = (y.grad * y_data).sum(axis=3, keepdims=True)
        x.ensure_grad()[...] += y_data * (y.grad - inner)

    _record(g, bwd)
    return y


def max_pool2(g, x: Node) -> Node:
    _require_rank4(x.data, "max_pool2")
    _, h, w, _ = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    y_data, idx = kernels.maxpool2_forward(x.data)
    y = Node(y_data)

    def bwd():
        if y.grad is None:
            return
        x.ensure_grad()[...] += kernels.maxpool2_backward(y.grad, idx)

    _record(g, bwd)
    return y


def upsample2(g, x: Node) -> Node:
    """Nearest-neighbor 2x upsampling."""
    _require_rank4(x.data, "upsample2")
    y = Node(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def bwd():
        if y.grad is None:
            return
        bsz, h, w, c = x.data.shape
        x.ensure_grad()[...] += (y.grad.reshape(bsz, h, 2, w, 2, c)
                                       .sum(axis=(2, 4)))

    _record(g, bwd)
    return y


def concat_channels(g, a: Node, b: Node) -> Node:
    _require_rank4(a.data, "concat_channels")
    _require_rank4(b.data, "concat_channels")
    if a.data.shape[:3] != b.data.shape[:3]:
        raise ShapeError(
            f"concat_channels batch/spatial mismatch: {a.data.shape[:3]} "
            f"vs {b.data.shape[:3]}")
    ca = a.data.shape[3]
    y = Node(np.concatenate([a.data, b.data], axis=3))

    def bwd():
        if y.grad is None:
            return
        a.ensure_grad()[...] += y.grad[..., :ca]
        b.ensure_grad()[...] += y.grad[..., ca:]

    _record(g, bwd)
    return y


class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics."""

    def __init__(self, name: str, channels: int, dtype=np.float32,
                 momentum: float = 0.9, eps: float = 1e-5):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(g, x: Node, state: BatchNormState, training: bool) -> Node:
    """Channelwise batch normalization over (batch, height, width)."""
    _require_rank4(x.data, "batch_norm")
    c = x.data.shape[3]
    if c != state.gamma.value.shape[0]:
        raise ShapeError(
            f"batch_norm channel mismatch: input has {c} channels, "
            f"state {state.gamma.name} has {state.gamma.value.shape[0]}")
    gamma, beta = state.gamma, state.beta
    if training:
        mean = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    y = Node(gamma.value * xhat + beta.value)

    def bwd():
        if y.grad is None:
            return
        gamma.grad += (y.grad * xhat).sum(axis=(0, 1, 2))
        beta.grad += y.grad.sum(axis=(0, 1, 2))
        dxhat = y.grad * gamma.value
        if training:
            n = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]
            s1 = dxhat.sum(axis=(0, 1, 2))
            s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
            x.ensure_grad()[...] += inv_std / n * (n * dxhat - s1 - xhat * s2)
        else:
            x.ensure_grad()[...] += dxhat * inv_std

    _record(g, bwd)
    return y


def weighted_sum(g, nodes, weights) -> Node:
    """Scalar combination sum_i weights[i] * nodes[i] (all nodes scalar)."""
    total = 0.0
    for nd, wt in zip(nodes, weights):
        total = total + wt * float(nd.data)
    y = Node(np.asarray(total, dtype=nodes[0].data.dtype))

    def bwd():
        if y.grad is None:
            return
        for nd, wt in zip(nodes, weights):
            nd.ensure_grad()[...] += wt * y.grad

    _record(g, bwd)
    return y


class Adam:
    """Adam with bias correction; resets gradients after each step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient for parameter {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.reset_grad()


def adam_step(params, lr: float, state: Adam | None = None) -> Adam:
    """One-shot functional wrapper around Adam for single updates."""
    if state is None:
        state = Adam(params)
    state.step(lr)
    return state


def save_arrays(path: str, named_arrays: dict[str, np.ndarray]):
    """Writes a flat binary container: params.bin + manifest.txt.

    Manifest rows: name, dims (comma separated), byte offset. Values are
    little-endian float32.
    """
    os.makedirs(path, exist_ok=True)
    offset = 0
    lines = []
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name, arr in named_arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            dims = ",".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name}\t{dims}\t{offset}")
            offset += data.nbytes
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_arrays(path: str) -> dict[str, np.ndarray]:
    """Reads a container written by save_arrays."""
    with open(os.path.join(path, "manifest.txt")) as fh:
        rows = [ln.split("\t") for ln in fh.read().splitlines() if ln]
    blob = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
    out = {}
    for name, dims, offset in rows:
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
        n = int(np.prod(shape)) if shape else 1
        start = int(offset) // 4
        out[name] = blob[start:start + n].reshape(shape).copy()
    return out
