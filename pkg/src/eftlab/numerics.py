"""Dense feed-forward networks with analytic gradients, Adam, soft updates and a seeded RNG.

Everything is float64 numpy. Networks are plain dataclasses holding weight and
bias arrays; ``forward``/``backward`` are pure functions of the network and the
input. Inputs may be a single vector ``(d,)`` or a batch ``(B, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("tanh", "identity")


class ShapeError(ValueError):
    """Raised when array shapes do not match a network or optimizer."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class DenseNetwork:
    """Multi-layer perceptron ``x -> relu(xW0+b0) -> ... -> out(xWn+bn)``.

    Weights are stored ``(fan_in, fan_out)`` so a batch multiplies from the left.
    The flat parameter order used by :meth:`params` (and by checkpoints) is
    ``W0, b0, W1, b1, ...``.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("weights/biases do not match layer count")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in, fan_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeError(
                    f"layer {k}: expected W{(fan_in, fan_out)} b{(fan_out,)}, "
                    f"got W{w.shape} b{b.shape}"
                )

    @classmethod
    def init(cls, layer_sizes, rng: "SeededRng", output_activation="identity"):
        """Uniform(+-1/sqrt(fan_in)) initialization for weights and biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=(fan_out,)))
        return cls(tuple(layer_sizes), weights, biases, "relu", output_activation)

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def same_architecture(self, other: "DenseNetwork") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden_activation == other.hidden_activation
            and self.output_activation == other.output_activation
        )


def _check_input(net: DenseNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_size:
        raise ShapeError(f"input shape {x.shape} incompatible with input size {net.input_size}")
    return x


def forward_cache(net: DenseNetwork, x) -> list[np.ndarray]:
    """Return ``[x, h1, ..., y]``, the activations of every layer."""
    x = _check_input(net, x)
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if k < last:
            h = np.maximum(z, 0.0)
        elif net.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
        acts.append(h)
    return acts


def forward(net: DenseNetwork, x) -> np.ndarray:
    return forward_cache(net, x)[-1]


def backward(net: DenseNetwork, x, output_grad, cache: list[np.ndarray] | None = None):
    """Gradients of ``sum(forward(net, x) * output_grad)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`DenseNetwork.params`. For a batch, parameter gradients are summed
    over the batch and the input gradient is per row. ``cache`` may hold the
    result of :func:`forward_cache` for the same input to skip recomputation.
    """
    acts = forward_cache(net, x) if cache is None else cache
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {acts[-1].shape}")
    if net.output_activation == "tanh":
        g = g * (1.0 - acts[-1] ** 2)
    n_layers = len(net.weights)
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        h_in = acts[k]
        if h_in.ndim == 1:
            grads[2 * k] = np.outer(h_in, g)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k].T
        if k > 0:
            # relu subgradient at 0 is 0
            g = g * (h_in > 0.0)
    return grads, g


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate, **kwargs) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = state.epsilon * math.sqrt(1.0 - b2**t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr_t * m / (np.sqrt(v) + eps_t)
    return params, state


def soft_update(target: DenseNetwork, source: DenseNetwork, tau: float) -> DenseNetwork:
    """``target <- tau * source + (1 - tau) * target``, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if not target.same_architecture(source):
        raise ShapeError("soft_update between different architectures")
    for tp, sp in zip(target.params(), source.params()):
        if tau == 1.0:
            tp[...] = sp
        else:
            tp *= 1.0 - tau
            tp += tau * sp
    return target


class SeededRng:
    """Counter-based (Philox) random source with Box-Muller gaussians.

    ``spawn(*keys)`` derives an independent stream whose seed depends only on
    this rng's seed and the keys, never on how much of this stream was used.
    """

    def __init__(self, seed: int, _keys: tuple = ()):
        self.seed = int(seed)
        self._keys = tuple(int(k) for k in _keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self._keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self._keys + tuple(keys))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # 1 - U maps [0, 1) onto (0, 1], keeping the log finite
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = loc + scale * z
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
