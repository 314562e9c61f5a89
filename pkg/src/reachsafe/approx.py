"""Minimal MLP stack: forward, hand-rolled backward, adaptive-moment steps.

Everything is plain float64 numpy. A network is a list of dense layers
with tanh hidden activations and a linear head; ``forward`` caches the
activations the matching ``backward`` consumes. No graph, no broadcasting
cleverness: the shapes are (batch, features) throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import substream


class BackwardBeforeForward(RuntimeError):
    """backward() called without a cached forward pass."""


class Mlp:
    """Dense tanh network with a linear output layer.

    Parameters are ``weights[i]`` of shape (in_i, out_i) and ``biases[i]``
    of shape (out_i,), initialized with uniform fan-in scaling.
    """

    def __init__(self, sizes: list[int], seed: int = 0, init_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = substream(seed, "mlp-init", *sizes)
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = init_scale / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache: list[np.ndarray] | None = None

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_parameters(self, params: list[np.ndarray]) -> None:
        flat = list(params)
        for i in range(len(self.weights)):
            self.weights[i] = flat[2 * i].reshape(self.weights[i].shape).astype(float)
            self.biases[i] = flat[2 * i + 1].reshape(self.biases[i].shape).astype(float)

    def copy(self) -> "Mlp":
        twin = Mlp(self.sizes)
        twin.set_parameters([p.copy() for p in self.parameters()])
        return twin

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the network, caching activations for ``backward``."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {h.shape[1]}")
        cache = [h]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = np.tanh(z) if i < n_layers - 1 else z
            cache.append(h)
        self._cache = cache
        self._squeezed = squeeze
        return h[0] if squeeze else h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def backward(self, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. parameters and input.

        Returns (grads, input_grad) with grads ordered like parameters().
        """
        if self._cache is None:
            raise BackwardBeforeForward("run forward() first")
        cache = self._cache
        g = np.asarray(upstream, dtype=float)
        if getattr(self, "_squeezed", False) and g.ndim == 1:
            g = g.reshape(1, -1)
        if g.shape != cache[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {cache[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        n_layers = len(self.weights)
        for i in range(n_layers - 1, -1, -1):
            h_in, h_out = cache[i], cache[i + 1]
            if i < n_layers - 1:
                g = g * (1.0 - h_out * h_out)  # tanh'(z) = 1 - tanh(z)^2
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        input_grad = g[0] if getattr(self, "_squeezed", False) else g
        return grads, input_grad

    def value_and_input_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = self.forward(x)
        _, gx = self.backward(np.ones_like(np.atleast_2d(y)))
        return y, gx


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    return net.backward(upstream)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: list[float] | None = None  # per-parameter L2 coefficients


def init_optimizer(params: list[np.ndarray], lr: float,
                   weight_decay: list[float] | None = None) -> OptimizerState:
    if weight_decay is not None and len(weight_decay) != len(params):
        raise ValueError("one weight-decay coefficient per parameter tensor")
    return OptimizerState(
        lr=lr,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        weight_decay=weight_decay,
    )


def optimizer_step(state: OptimizerState, params: list[np.ndarray],
                   grads: list[np.ndarray]) -> list[np.ndarray]:
    """One adaptive-moment update; mutates the accumulators, returns params."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("parameter/gradient count mismatch with optimizer state")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay is not None and state.weight_decay[i]:
            g = g + state.weight_decay[i] * p
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1 ** t)
        v_hat = state.v[i] / (1 - state.beta2 ** t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class Trainer:
    """Convenience bundle of a network and its optimizer."""

    net: Mlp
    opt: OptimizerState = field(init=False)
    lr: float = 3e-4
    weight_decay: list[float] | None = None

    def __post_init__(self) -> None:
        self.opt = init_optimizer(self.net.parameters(), self.lr, self.weight_decay)

    def apply(self, grads: list[np.ndarray]) -> None:
        self.net.set_parameters(optimizer_step(self.opt, self.net.parameters(), grads))


def soft_update(target: Mlp, source: Mlp, rate: float) -> None:
    """Polyak mixing of source into target, in place."""
    mixed = [(1 - rate) * t + rate * s
             for t, s in zip(target.parameters(), source.parameters())]
    target.set_parameters(mixed)


# ---------------------------------------------------------------------------
# Checkpoints: layer-size header + flat little-endian float32 payload.
# ---------------------------------------------------------------------------

_MAGIC = b"MLP1"


def save_mlp(net: Mlp, path) -> None:
    flat = np.concatenate([p.ravel() for p in net.parameters()]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(net.sizes)))
        fh.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
        fh.write(flat.tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a network checkpoint")
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = list(struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes)))
        flat = np.frombuffer(fh.read(), dtype="<f4").astype(float)
    net = Mlp(sizes)
    if flat.size != net.n_parameters():
        raise ValueError(f"{path}: payload holds {flat.size} values, "
                         f"expected {net.n_parameters()}")
    params, offset = [], 0
    for p in net.parameters():
        params.append(flat[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    net.set_parameters(params)
    return net
