"""Dense feed-forward networks with hand-written reverse mode, and Adam.

A ``DenseNet`` owns one contiguous float64 parameter vector; the per-layer
weight matrices and bias vectors are views into it. The flat layout is, for
each layer in order, ``W`` (shape ``(fan_out, fan_in)``, row-major) followed by
``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvalidParameterError, InvalidStateError, ShapeError
from .numerics import RngStream

ACTIVATIONS = ("relu", "sigmoid", "identity")


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class DenseNet:
    def __init__(self, sizes, activations, params=None):
        sizes = tuple(int(s) for s in sizes)
        activations = tuple(activations)
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ShapeError("need len(activations) == len(sizes) - 1 >= 1")
        for act in activations:
            if act not in ACTIVATIONS:
                raise InvalidParameterError(f"unknown activation {act!r}")
        self.sizes = sizes
        self.activations = activations
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b))
        self.n_params = offset
        self.params = np.zeros(offset)
        if params is not None:
            self.unflatten(params)
        self.version = 0

    @classmethod
    def init(cls, sizes, activations, rng: RngStream) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        net = cls(sizes, activations)
        for (fan_in, fan_out), (w, _) in zip(zip(net.sizes[:-1], net.sizes[1:]), net._slices):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            net.params[w] = rng.uniform(fan_in * fan_out, -limit, limit)
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def layers(self):
        """List of ``(W, b, activation)``; ``W`` and ``b`` are views into ``params``."""
        out = []
        for (fan_in, fan_out), (w, b), act in zip(
            zip(self.sizes[:-1], self.sizes[1:]), self._slices, self.activations
        ):
            out.append((self.params[w].reshape(fan_out, fan_in), self.params[b], act))
        return out

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        self.params[...] = vec
        self.version = getattr(self, "version", 0) + 1

    def mark_updated(self) -> None:
        """Call after writing ``params`` in place; invalidates outstanding tapes."""
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.activations, self.params)

    def __repr__(self):
        return f"DenseNet(sizes={self.sizes}, activations={self.activations})"


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list
    outputs: list


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    """Evaluate ``net`` on a vector ``(in_dim,)`` or a batch ``(B, in_dim)``."""
    a = np.asarray(x, dtype=np.float64)
    if a.shape[-1:] != (net.in_dim,) or a.ndim > 2:
        raise ShapeError(f"input shape {a.shape} does not match in_dim {net.in_dim}")
    inputs, outputs = [], []
    for w, b, act in net.layers:
        inputs.append(a)
        h = a @ w.T + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "sigmoid":
            h = _sigmoid(h)
        outputs.append(h)
        a = h
    return a, Tape(id(net), net.version, inputs, outputs)


def backward(net: DenseNet, tape: Tape, output_grad, through_last_activation: bool = True,
             out: np.ndarray | None = None, param_grad: bool = True):
    """Reverse pass for the scalar whose gradient w.r.t. the output is ``output_grad``.

    With ``through_last_activation=False`` the supplied gradient is taken to be
    w.r.t. the last layer's pre-activation (used for sigmoid + cross-entropy).
    For batched tapes the parameter gradient is summed over the batch.
    ``out`` optionally receives the parameter gradient. With
    ``param_grad=False`` only the input gradient is formed and the first
    return value is ``None``.

    Returns ``(param_grad, input_grad)``.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise InvalidStateError("tape was recorded on a different network or parameter version")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {tape.outputs[-1].shape}")
    grads = None
    if param_grad:
        grads = np.empty(net.n_params) if out is None else out
    layers = net.layers
    for i in range(len(layers) - 1, -1, -1):
        w, _, act = layers[i]
        h = tape.outputs[i]
        skip = i == len(layers) - 1 and not through_last_activation
        if skip or act == "identity":
            delta = g
        elif act == "relu":
            delta = g * (h > 0)
        else:
            delta = g * h * (1.0 - h)
        if grads is not None:
            a = tape.inputs[i]
            ws, bs = net._slices[i]
            if delta.ndim == 1:
                np.multiply.outer(delta, a, out=grads[ws].reshape(len(delta), len(a)))
                grads[bs] = delta
            else:
                np.matmul(delta.T, a, out=grads[ws].reshape(delta.shape[1], a.shape[1]))
                grads[bs] = delta.sum(axis=0)
        g = delta @ w
    return grads, g


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, b1, b2, eps, lr, bc1, bc2):
    # fused in-place pass; bias corrections hoisted so the loop has one sqrt and one divide
    step = lr / bc1
    inv_root_bc2 = 1.0 / np.sqrt(bc2)
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) * inv_root_bc2 + eps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params, grad, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError("params, grad and Adam moments must have equal lengths")
    if lr < 0:
        raise InvalidParameterError(f"learning rate must be non-negative, got {lr}")
    new_state = state.copy()
    new_params = params.copy()
    adam_update(new_params, grad, new_state, lr)
    return new_params, new_state


def adam_update(params: np.ndarray, grad, state: AdamState, lr: float) -> None:
    """In-place twin of ``adam_step``: overwrites ``params``, ``state.m``, ``state.v``, ``state.t``."""
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError("params, grad and Adam moments must have equal lengths")
    if lr < 0:
        raise InvalidParameterError(f"learning rate must be non-negative, got {lr}")
    state.t += 1
    _adam_kernel(params, grad, state.m, state.v, state.beta1, state.beta2, state.eps, lr,
                 1.0 - state.beta1 ** state.t, 1.0 - state.beta2 ** state.t)


def clip_to_norm(g, c: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, c / ||g||_2)``."""
    if c <= 0:
        raise InvalidParameterError(f"clip bound must be positive, got {c}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g.copy()
    return g * (c / norm)
