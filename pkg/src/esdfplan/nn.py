"""Fixed-graph neural network substrate: Fourier features, ReLU MLPs,
reverse-mode gradients, Adam.

Everything is plain float64 numpy. Networks are sequences of affine
layers with one of three activations (relu / identity / sigmoid); a
forward pass records a tape from which one backward pass recovers exact
gradients with respect to both the inputs and every parameter. There is
no dynamic graph: the composition is fixed, which is all a coordinate
network needs.

Shapes: every entry point accepts a single vector ``(d,)`` or a batch
``(n, d)``. Parameter gradients are summed over the batch; input
gradients keep the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, StructureError, TapeReuseError

ACTIVATIONS = ("relu", "identity", "sigmoid")


# ---------------------------------------------------------------------------
# Fourier positional encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionalEncoding:
    """Sinusoidal feature map gamma(p) = [p, sin(2^k pi p_i), cos(2^k pi p_i), ...].

    Ordering: the raw input block (if ``include_input``), then for each
    frequency k = 0..L-1 and each coordinate i the pair
    (sin(2^k pi p_i), cos(2^k pi p_i)).
    """

    num_frequencies: int = 10
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))


def encode(points, cfg: PositionalEncoding) -> np.ndarray:
    """Apply the Fourier encoding to one point ``(d,)`` or a batch ``(n, d)``."""
    p = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(p)):
        raise DomainError("encode: input contains non-finite components")
    parts = [p] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        w = (2.0 ** k) * np.pi
        sc = np.stack([np.sin(w * p), np.cos(w * p)], axis=-1)
        parts.append(sc.reshape(*p.shape[:-1], -1))
    return np.concatenate(parts, axis=-1)


def encode_jacobian(point, cfg: PositionalEncoding) -> np.ndarray:
    """Exact Jacobian of :func:`encode` at a single point, shape (out_dim, d)."""
    p = np.asarray(point, dtype=float)
    if p.ndim != 1:
        raise StructureError("encode_jacobian expects a single point")
    if not np.all(np.isfinite(p)):
        raise DomainError("encode_jacobian: input contains non-finite components")
    d = p.shape[0]
    rows = []
    if cfg.include_input:
        rows.append(np.eye(d))
    for k in range(cfg.num_frequencies):
        w = (2.0 ** k) * np.pi
        block = np.zeros((2 * d, d))
        for i in range(d):
            block[2 * i, i] = w * np.cos(w * p[i])
            block[2 * i + 1, i] = -w * np.sin(w * p[i])
        rows.append(block)
    return np.concatenate(rows, axis=0)


def encode_vjp(points, grad_encoded, cfg: PositionalEncoding) -> np.ndarray:
    """Pull a cotangent on the encoded vector back to input space.

    Batched: ``points (n, d)``, ``grad_encoded (n, out_dim)`` -> ``(n, d)``.
    Equivalent to per-sample ``J(p).T @ g`` without materializing Jacobians.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    g = np.atleast_2d(np.asarray(grad_encoded, dtype=float))
    d = p.shape[-1]
    out = np.zeros_like(p)
    off = 0
    if cfg.include_input:
        out += g[:, :d]
        off = d
    for k in range(cfg.num_frequencies):
        w = (2.0 ** k) * np.pi
        blk = g[:, off:off + 2 * d].reshape(-1, d, 2)
        out += blk[:, :, 0] * (w * np.cos(w * p)) - blk[:, :, 1] * (w * np.sin(w * p))
        off += 2 * d
    if np.asarray(points).ndim == 1:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weights: np.ndarray  # (rows, cols)
    bias: np.ndarray     # (rows,)
    activation: str

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpNetwork:
    layers: list[Layer]
    input_dim: int

    @property
    def output_dim(self) -> int:
        return self.layers[-1].rows

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...] (views, not copies)."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


def validate_network(net: MlpNetwork) -> None:
    if not net.layers:
        raise StructureError("network has no layers")
    prev = net.input_dim
    for i, layer in enumerate(net.layers):
        if layer.activation not in ACTIVATIONS:
            raise StructureError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.cols != prev:
            raise StructureError(
                f"layer {i}: expected {prev} input columns, got {layer.cols}"
            )
        if layer.bias.shape != (layer.rows,):
            raise StructureError(f"layer {i}: bias shape {layer.bias.shape}")
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
            raise StructureError(f"layer {i}: non-finite parameters")
        prev = layer.rows


def glorot_layer(rows: int, cols: int, activation: str, rng: np.random.Generator) -> Layer:
    # uniform +-sqrt(6 / (fan_in + fan_out)), zero bias
    bound = np.sqrt(6.0 / (rows + cols))
    w = rng.uniform(-bound, bound, size=(rows, cols))
    return Layer(weights=w, bias=np.zeros(rows), activation=activation)


def build_network(input_dim: int, layer_specs: list[tuple[int, str]],
                  rng: np.random.Generator) -> MlpNetwork:
    """Glorot-initialized network from (width, activation) specs."""
    layers = []
    prev = input_dim
    for rows, act in layer_specs:
        layers.append(glorot_layer(rows, prev, act, rng))
        prev = rows
    net = MlpNetwork(layers=layers, input_dim=input_dim)
    validate_network(net)
    return net


def subnetwork(net: MlpNetwork, depth: int) -> MlpNetwork:
    """First ``depth`` layers of ``net``, sharing the parameter arrays."""
    if not 1 <= depth <= len(net.layers):
        raise DomainError(f"depth {depth} outside 1..{len(net.layers)}")
    return MlpNetwork(layers=net.layers[:depth], input_dim=net.input_dim)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    # log(1 + e^z) without overflow
    return np.logaddexp(0.0, z)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    return sigmoid(z)


def _activation_derivative(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # subgradient 0 at exactly 0
        return (z > 0.0).astype(float)
    if kind == "identity":
        return np.ones_like(z)
    return a * (1.0 - a)


@dataclass
class Tape:
    """Activations of one forward pass; feeds exactly one backward pass."""

    net: MlpNetwork
    single: bool
    acts: list[np.ndarray]       # acts[0] is the input batch
    pre_acts: list[np.ndarray]
    consumed: bool = field(default=False)


def forward(net: MlpNetwork, x) -> tuple[np.ndarray, Tape]:
    """Evaluate the network; returns (output, tape).

    ``x`` may be a single vector or an ``(n, d)`` batch; the output mirrors
    that shape.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    a = arr[None, :] if single else arr
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise StructureError(
            f"forward: input dim {arr.shape} incompatible with network input {net.input_dim}"
        )
    acts = [a]
    pre_acts = []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        pre_acts.append(z)
        acts.append(a)
    out = a[0] if single else a
    return out, Tape(net=net, single=single, acts=acts, pre_acts=pre_acts)


def backward(tape: Tape, output_seed) -> tuple[np.ndarray, list[np.ndarray]]:
    """Reverse-mode gradients of ``seed . output`` w.r.t. inputs and parameters.

    Returns ``(input_grad, param_grads)`` where ``param_grads`` matches
    ``net.parameters()`` ([dW0, db0, dW1, db1, ...], summed over the batch).
    """
    if tape.consumed:
        raise TapeReuseError("tape already consumed by a backward pass")
    tape.consumed = True
    net = tape.net
    seed = np.asarray(output_seed, dtype=float)
    g = seed[None, :] if tape.single else seed
    if g.shape != tape.acts[-1].shape:
        raise StructureError(
            f"backward: seed shape {seed.shape} does not match output {tape.acts[-1].shape}"
        )
    param_grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_derivative(tape.pre_acts[i], tape.acts[i + 1], layer.activation)
        param_grads[2 * i] = dz.T @ tape.acts[i]
        param_grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.weights
    input_grad = g[0] if tape.single else g
    return input_grad, param_grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step_count: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: list[np.ndarray], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        step_count=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Mutates ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise StructureError("adam_step: parameter/gradient count mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise StructureError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
