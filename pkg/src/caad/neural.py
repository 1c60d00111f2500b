"""Small dense-network engine with exact backpropagation.

Only what the detector needs: fully connected layers with relu / sigmoid /
linear activations, batched forward and backward passes, SGD and Adam
updates, and a linearly decaying learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, DivergenceError

ACTIVATIONS = ("relu", "sigmoid", "linear")


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, a, activation):
    if activation == "relu":
        return (z > 0).astype(np.float64)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """Feed-forward stack of :class:`Dense` layers.

    Inputs are batched row-wise, ``(n, input_dim)``; a 1-D input is treated
    as a single sample and the output is returned 1-D as well.
    """

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise ValueError("a DenseNet needs at least one layer")
        for k, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer {k} outputs {a.out_dim} features but layer {k + 1} expects {b.in_dim}"
                )
        self.layers = list(layers)

    @classmethod
    def build(cls, input_dim, hidden, output_dim, *, hidden_activation="relu",
              output_activation="linear", rng=None):
        """Randomly initialised net with He-uniform weights and zero biases."""
        rng = np.random.default_rng(rng)
        dims = [int(input_dim), *map(int, hidden), int(output_dim)]
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / fan_in)
            act = output_activation if k == len(dims) - 2 else hidden_activation
            layers.append(
                Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act)
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> DenseNet:
        return DenseNet([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x, row_stable=False):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DataError(f"expected input of dimension {self.input_dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite values in network input")
        inputs, pre, post = [], [], []
        a = x
        for layer in self.layers:
            inputs.append(a)
            if row_stable:
                z = (a[:, None, :] @ layer.weight.T)[:, 0, :] + layer.bias
            else:
                z = a @ layer.weight.T + layer.bias
            a = _activate(z, layer.activation)
            pre.append(z)
            post.append(a)
        cache = {"inputs": inputs, "pre": pre, "post": post, "single": single}
        return (a[0] if single else a), cache

    def __call__(self, x):
        """Inference output. Each row is its own product, so a row's result
        does not depend on which other rows share the batch."""
        out, _ = self.forward(x, row_stable=True)
        return out

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
        :attr:`params`.
        """
        g = np.asarray(upstream, dtype=np.float64)
        if cache["single"] and g.ndim == 1:
            g = g[None, :]
        if g.shape != cache["post"][-1].shape:
            raise DataError(
                f"upstream gradient shape {g.shape} does not match output {cache['post'][-1].shape}"
            )
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = g * _activation_grad(cache["pre"][k], cache["post"][k], layer.activation)
            grads[2 * k] = dz.T @ cache["inputs"][k]
            grads[2 * k + 1] = dz.sum(axis=0)
            g = dz @ layer.weight
        return grads, (g[0] if cache["single"] else g)


def forward(net: DenseNet, x):
    return net.forward(x)


def backward(net: DenseNet, cache, upstream):
    return net.backward(cache, upstream)


@dataclass
class OptimizerState:
    """Mutable optimizer bookkeeping; Adam moments exist only for ``kind='adam'``."""

    kind: str = "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, kind, params, learning_rate, **kw):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        state = cls(kind=kind, learning_rate=float(learning_rate), **kw)
        if kind == "adam":
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        return state


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient encountered")


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g`` for every parameter; returns ``params``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    _check_finite(grads)
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        p -= lr * g
    return params


def adam_step(params, grads, state: OptimizerState, lr=None):
    """In-place bias-corrected Adam update; increments ``state.step_count``."""
    if state.kind != "adam":
        raise ValueError("adam_step needs an Adam optimizer state")
    _check_finite(grads)
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def apply_update(params, grads, state: OptimizerState, lr):
    if state.kind == "adam":
        adam_step(params, grads, state, lr)
    else:
        sgd_step(params, grads, lr)
        state.step_count += 1


@dataclass(frozen=True)
class LrSchedule:
    """Linear interpolation from ``initial`` (step 0) to ``final`` (``total_steps``)."""

    initial: float
    final: float
    total_steps: int

    def __post_init__(self):
        if self.initial <= 0 or self.final <= 0:
            raise ValueError("learning rates must be positive")
        if self.final > self.initial:
            raise ValueError("final learning rate must not exceed the initial one")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @classmethod
    def constant(cls, lr, total_steps=1):
        return cls(lr, lr, max(1, total_steps))

    def __call__(self, step):
        return lr_at(self, step)


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    if step == schedule.total_steps:
        return schedule.final  # exact, free of rounding in the interpolation
    return schedule.initial - (schedule.initial - schedule.final) * frac
