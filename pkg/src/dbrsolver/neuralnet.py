"""Minimal feedforward engine: tanh MLPs, exact backprop, Adam, gradient checking.

Networks are plain value objects; ``forward_batch`` and ``backward_batch``
are pure functions. The checkpoint byte layout is documented on
``save_network``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .paths import RngStream

Array = np.ndarray


@dataclass
class MlpNetwork:
    """Feedforward net with tanh hidden layers and an affine output layer.

    weights[l] has shape (n_l, n_{l-1}); biases[l] has shape (n_l,).
    ``input_shift`` / ``input_scale`` implement the optional affine
    input-scaling hook: when set, inputs are mapped to (x - shift) / scale
    before the first layer. Off (None) by default.
    """

    layer_sizes: tuple
    weights: List[Array]
    biases: List[Array]
    input_shift: Optional[Array] = None
    input_scale: Optional[Array] = None

    @property
    def in_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_size(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            layer_sizes=tuple(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_shift=None if self.input_shift is None else self.input_shift.copy(),
            input_scale=None if self.input_scale is None else self.input_scale.copy(),
        )

    def set_input_scaling(self, shift, scale) -> None:
        shift = np.asarray(shift, dtype=float).reshape(self.in_size)
        scale = np.asarray(scale, dtype=float).reshape(self.in_size)
        if not (np.isfinite(shift).all() and np.isfinite(scale).all() and (scale != 0).all()):
            raise ValueError("input scaling must be finite with nonzero scale")
        self.input_shift, self.input_scale = shift, scale


@dataclass
class GradBundle:
    """Per-parameter partials of a scalar loss, same shapes as the network."""

    weights: List[Array]
    biases: List[Array]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    m_weights: List[Array]
    v_weights: List[Array]
    m_biases: List[Array]
    v_biases: List[Array]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_network(cls, net: MlpNetwork, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m_weights=[np.zeros_like(w) for w in net.weights],
            v_weights=[np.zeros_like(w) for w in net.weights],
            m_biases=[np.zeros_like(b) for b in net.biases],
            v_biases=[np.zeros_like(b) for b in net.biases],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def init_xavier(layer_sizes, stream: RngStream) -> MlpNetwork:
    """Glorot-uniform weights, W ~ U(+-sqrt(6/(fan_in+fan_out))), zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if any(s < 1 for s in sizes):
        raise ValueError(f"zero-size layer in {sizes}")
    rng = stream.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpNetwork(layer_sizes=sizes, weights=weights, biases=biases)


def _scaled_inputs(net: MlpNetwork, inputs: Array) -> Array:
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.in_size:
        raise ValueError(f"expected inputs of shape (B, {net.in_size}), got {x.shape}")
    if net.input_shift is not None:
        x = (x - net.input_shift) / net.input_scale
    return x


def _forward_cached(net: MlpNetwork, inputs: Array):
    acts = [_scaled_inputs(net, inputs)]
    n_layers = len(net.weights)
    for l in range(n_layers - 1):
        acts.append(np.tanh(acts[-1] @ net.weights[l].T + net.biases[l]))
    acts.append(acts[-1] @ net.weights[-1].T + net.biases[-1])
    return acts


def forward_batch(net: MlpNetwork, inputs: Array) -> Array:
    """Evaluate the network on a (B, in) batch, returning (B, out)."""
    x = _scaled_inputs(net, inputs)
    for l in range(len(net.weights) - 1):
        x = np.tanh(x @ net.weights[l].T + net.biases[l])
    return x @ net.weights[-1].T + net.biases[-1]


def backward_from_cache(net: MlpNetwork, acts, out_grads: Array) -> GradBundle:
    """Backward pass reusing activations produced by ``_forward_cached``."""
    n_layers = len(net.weights)
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    delta = out_grads
    for l in range(n_layers - 1, -1, -1):
        d_w[l] = delta.T @ acts[l]
        d_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * (1.0 - acts[l] ** 2)
    return GradBundle(weights=d_w, biases=d_b)


def backward_batch(net: MlpNetwork, inputs: Array, out_grads: Array) -> GradBundle:
    """Exact reverse-mode gradient of sum_b <out_grads_b, net(inputs_b)>."""
    out_grads = np.asarray(out_grads, dtype=float)
    acts = _forward_cached(net, inputs)
    if out_grads.shape != acts[-1].shape:
        raise ValueError(f"expected out_grads of shape {acts[-1].shape}, got {out_grads.shape}")
    return backward_from_cache(net, acts, out_grads)


def adam_update(state: AdamState, net: MlpNetwork, grads: GradBundle, lr: float):
    """One Adam step with bias correction; mutates net and state in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not grads.is_finite():
        raise FloatingPointError("non-finite gradient passed to adam_update")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for group, m_list, v_list, g_list in (
        (net.weights, state.m_weights, state.v_weights, grads.weights),
        (net.biases, state.m_biases, state.v_biases, grads.biases),
    ):
        for p, m, v, g in zip(group, m_list, v_list, g_list):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return net, state


def _param_view(net: MlpNetwork, bundle: GradBundle):
    """Flat index over all parameters as (kind, layer, flat offset) triples."""
    entries = []
    for l, w in enumerate(net.weights):
        entries.append(("w", l, w.size))
    for l, b in enumerate(net.biases):
        entries.append(("b", l, b.size))
    return entries


def grad_check(
    net: MlpNetwork,
    probe_inputs: Array,
    tolerance: float = 1e-6,
    n_samples: int = 100,
    out_grads: Optional[Array] = None,
    stream: Optional[RngStream] = None,
    grads: Optional[GradBundle] = None,
    fd_step: float = 1e-5,
) -> float:
    """Max relative deviation of backprop against central finite differences.

    Checks d/dtheta of sum_b <out_grads_b, net(x_b)> on up to ``n_samples``
    randomly chosen parameters; the deviation for one parameter is
    |backprop - central difference| / (|central difference| + 1e-12).
    ``grads`` overrides the backprop bundle (used to verify that a corrupted
    gradient is detected).
    """
    probes = np.asarray(probe_inputs, dtype=float)
    if probes.ndim != 2 or probes.shape[0] < 1:
        raise ValueError("need a (B, in) probe batch with B >= 1")
    if out_grads is None:
        out_grads = np.ones((probes.shape[0], net.out_size))
    if grads is None:
        grads = backward_batch(net, probes, out_grads)
    rng = (stream or RngStream(seed=0)).generator()

    def loss() -> float:
        return float((forward_batch(net, probes) * out_grads).sum())

    coords = []
    for kind, l, size in _param_view(net, grads):
        for off in range(size):
            coords.append((kind, l, off))
    if len(coords) > n_samples:
        picked = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[int(i)] for i in picked]

    worst = 0.0
    for kind, l, off in coords:
        p = net.weights[l] if kind == "w" else net.biases[l]
        g = grads.weights[l] if kind == "w" else grads.biases[l]
        flat = p.reshape(-1)
        orig = flat[off]
        flat[off] = orig + fd_step
        up = loss()
        flat[off] = orig - fd_step
        dn = loss()
        flat[off] = orig
        fd = (up - dn) / (2.0 * fd_step)
        dev = abs(g.reshape(-1)[off] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, dev)
    return worst


_MAGIC = b"MLP1"


def save_network(net: MlpNetwork, path) -> None:
    """Write a checkpoint that round-trips bit-exactly.

    Byte layout (little-endian throughout):

    - 4 bytes magic ``MLP1``
    - uint32: number of layer sizes (L + 1)
    - int64 x (L + 1): the layer sizes
    - uint8: 1 if the input-scaling hook is set, else 0
    - if set: float64 x in_size shift values, then float64 x in_size scales
    - per layer l = 0..L-1: float64 weight matrix W_l row-major
      (n_l x n_{l-1} values), then float64 x n_l bias values
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(net.layer_sizes)))
        fh.write(np.asarray(net.layer_sizes, dtype="<i8").tobytes())
        scaled = net.input_shift is not None
        fh.write(struct.pack("<B", 1 if scaled else 0))
        if scaled:
            fh.write(np.ascontiguousarray(net.input_shift, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(net.input_scale, dtype="<f8").tobytes())
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_network(path) -> MlpNetwork:
    """Read a checkpoint written by ``save_network``."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = tuple(int(s) for s in np.frombuffer(fh.read(8 * n_sizes), dtype="<i8"))
        (scaled,) = struct.unpack("<B", fh.read(1))
        shift = scale = None
        if scaled:
            shift = np.frombuffer(fh.read(8 * sizes[0]), dtype="<f8").copy()
            scale = np.frombuffer(fh.read(8 * sizes[0]), dtype="<f8").copy()
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(
                np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in).copy()
            )
            biases.append(np.frombuffer(fh.read(8 * fan_out), dtype="<f8").copy())
    return MlpNetwork(
        layer_sizes=sizes, weights=weights, biases=biases, input_shift=shift, input_scale=scale
    )
