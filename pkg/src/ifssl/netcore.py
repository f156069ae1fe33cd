"""Dense feedforward classifier, exact backpropagation and Nesterov SGD.

Parameters are plain values: every update returns new arrays so a
snapshot taken with :meth:`NetworkParams.copy` is never aliased by later
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ifssl.errors import ConfigurationError, DivergenceError

ACTIVATIONS = ("tanh", "relu", "linear")


@dataclass
class NetworkParams:
    """Weights ``[n_out x n_in]`` and biases ``[n_out]`` per layer.

    ``activation`` applies to hidden layers only; the last layer is linear
    and produces logits.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}", "activation")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("weights and biases must be non-empty and paired")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {k}: n_in={w.shape[1]} does not chain with previous n_out={self.weights[k - 1].shape[0]}"
                )

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.tensors()]

    def tensors(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_tensors(cls, tensors, activation="tanh") -> NetworkParams:
        return cls(list(tensors[0::2]), list(tensors[1::2]), activation)

    def copy(self) -> NetworkParams:
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> NetworkParams:
        return NetworkParams(
            [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases], self.activation
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def equals(self, other: NetworkParams) -> bool:
        """Bit-exact equality of all tensors and the activation."""
        return (
            self.activation == other.activation
            and self.shapes == other.shapes
            and all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))
        )


def init_params(sizes, rng: np.random.Generator, activation="tanh") -> NetworkParams:
    """Uniform init in ``+-sqrt(6 / (n_in + n_out))``, zero biases.

    ``sizes`` lists layer widths, e.g. ``[d, 64, 64, m]``.
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ConfigurationError(f"invalid layer sizes {sizes}", "hidden")
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return NetworkParams(weights, biases, activation)


def _activate(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, a, activation):
    if activation == "tanh":
        return 1.0 - a * a
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _check_inputs(params, inputs):
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.n_inputs:
        raise ConfigurationError(f"input shape {x.shape} does not match network input width {params.n_inputs}")
    return x


def _forward_trace(params, x):
    pre, post = [], [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if k == last else _activate(z, params.activation)
        post.append(h)
    return pre, post


def forward(params: NetworkParams, inputs) -> np.ndarray:
    """Logits ``[B x m]`` for a batch of inputs ``[B x d]``."""
    x = _check_inputs(params, inputs)
    return _forward_trace(params, x)[1][-1]


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-shift, works on ``[m]`` or ``[B x m]``."""
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(probs, grad_probs) -> np.ndarray:
    """Pull ``dL/dprobs`` back to ``dL/dlogits`` through softmax."""
    p = np.asarray(probs, dtype=float)
    g = np.asarray(grad_probs, dtype=float)
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


def backward(params: NetworkParams, inputs, grad_logits) -> NetworkParams:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``grad_logits`` is ``dL/dlogits`` with shape ``[B x m]``; the forward
    pass is recomputed from ``inputs``.
    """
    x = _check_inputs(params, inputs)
    g = np.asarray(grad_logits, dtype=float)
    if g.shape != (x.shape[0], params.n_classes):
        raise ConfigurationError(f"upstream gradient shape {g.shape} != {(x.shape[0], params.n_classes)}")
    pre, post = _forward_trace(params, x)
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = g
    for k in range(n_layers - 1, -1, -1):
        gw[k] = delta.T @ post[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * _activation_grad(pre[k - 1], post[k], params.activation)
    return NetworkParams(gw, gb, params.activation)


@dataclass
class OptimizerState:
    """Momentum buffers plus the schedule settings of one training run."""

    momentum_buffers: list[np.ndarray]
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    epoch: int = 0
    total_epochs: int = 1
    step: int = field(default=0)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be > 0", "base_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)", "momentum")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0", "weight_decay")
        if self.total_epochs <= 0:
            raise ConfigurationError("total_epochs must be > 0", "max_epochs")

    @classmethod
    def for_params(cls, params: NetworkParams, base_lr, momentum=0.9, weight_decay=0.0, total_epochs=1):
        return cls([np.zeros_like(t) for t in params.tensors()], base_lr, momentum, weight_decay, 0, total_epochs)


def sgd_nesterov_step(params: NetworkParams, grads: NetworkParams, state: OptimizerState, lr: float):
    """One Nesterov step with L2 weight decay; returns ``(params, state)``.

    ``g = grad + wd * w``, ``buf = mu * buf + g``, ``w -= lr * (g + mu * buf)``.
    """
    if lr < 0:
        raise ConfigurationError("learning rate must be >= 0", "base_lr")
    p_t, g_t = params.tensors(), grads.tensors()
    if [t.shape for t in g_t] != [t.shape for t in p_t] or [b.shape for b in state.momentum_buffers] != [
        t.shape for t in p_t
    ]:
        raise ConfigurationError("gradient/buffer shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in g_t):
        raise DivergenceError("non-finite gradient")
    mu, wd = state.momentum, state.weight_decay
    new_p, new_buf = [], []
    # overflow here surfaces as non-finite parameters, which callers check
    with np.errstate(over="ignore", invalid="ignore"):
        for w, g, buf in zip(p_t, g_t, state.momentum_buffers):
            g = g + wd * w
            buf = mu * buf + g
            new_p.append(w - lr * (g + mu * buf))
            new_buf.append(buf)
    new_state = OptimizerState(
        new_buf, state.base_lr, mu, wd, state.epoch, state.total_epochs, state.step + 1
    )
    return NetworkParams.from_tensors(new_p, params.activation), new_state


def cosine_lr(epoch: int, base_lr: float, total_epochs: int) -> float:
    """Half-cosine decay from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        raise ConfigurationError("total_epochs must be > 0", "max_epochs")
    e = min(max(epoch, 0), total_epochs)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * e / total_epochs))
