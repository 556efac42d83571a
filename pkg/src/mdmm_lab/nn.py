"""Small dense networks with hand-written backprop and an AdamW update.

Parameters for a whole network live in one flat float64 vector; each layer's
weight matrix and bias are views into it, same for the gradient buffer.
Gradients accumulate across ``backward`` calls until :meth:`Net.zero_grad`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import BackwardBeforeForward, DimensionMismatch, NonFiniteValue


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"


@dataclass(frozen=True)
class NetSpec:
    layer_dims: tuple
    activation: Activation = Activation.TANH
    init_seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims needs at least two positive entries, got {dims}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


class Net:
    """Dense network; ``param_buffer``/``grad_buffer`` let several nets share one flat vector."""

    def __init__(
        self,
        spec: NetSpec,
        params: Optional[np.ndarray] = None,
        param_buffer: Optional[np.ndarray] = None,
        grad_buffer: Optional[np.ndarray] = None,
    ):
        self.spec = spec
        n = spec.n_params
        self.params = np.zeros(n) if param_buffer is None else param_buffer
        self.grads = np.zeros(n) if grad_buffer is None else grad_buffer
        if self.params.shape != (n,) or self.grads.shape != (n,):
            raise DimensionMismatch(f"buffers must have shape ({n},)")
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        self.weight_grads: List[np.ndarray] = []
        self.bias_grads: List[np.ndarray] = []
        offset = 0
        dims = spec.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            nw = fan_in * fan_out
            self.weights.append(self.params[offset:offset + nw].reshape(fan_in, fan_out))
            self.weight_grads.append(self.grads[offset:offset + nw].reshape(fan_in, fan_out))
            offset += nw
            self.biases.append(self.params[offset:offset + fan_out])
            self.bias_grads.append(self.grads[offset:offset + fan_out])
            offset += fan_out
        self._cache: Optional[list] = None

        if params is None:
            rng = np.random.default_rng(spec.init_seed)
            for w, b in zip(self.weights, self.biases):
                bound = 1.0 / np.sqrt(w.shape[0])
                w[...] = rng.uniform(-bound, bound, size=w.shape)
                b[...] = rng.uniform(-bound, bound, size=b.shape)
        else:
            self.set_params(params)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def set_params(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise DimensionMismatch(f"expected {self.params.shape} parameters, got {values.shape}")
        self.params[...] = values

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def _act(self, h):
        if self.spec.activation is Activation.TANH:
            return np.tanh(h)
        return np.maximum(h, 0.0)

    def _act_grad(self, h, a, upstream):
        if self.spec.activation is Activation.TANH:
            return upstream * (1.0 - a * a)
        return upstream * (h > 0)

    def forward(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise DimensionMismatch(f"batch shape {x.shape} does not fit input dim {self.spec.in_dim}")
        cache = []
        a = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ w + b
            out = h if i == last else self._act(h)
            cache.append((a, h, out))
            a = out
        self._cache = cache
        return a

    __call__ = forward

    def backward(self, output_grad) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input batch."""
        if self._cache is None:
            raise BackwardBeforeForward("backward called before forward")
        g = np.asarray(output_grad, dtype=np.float64)
        n = self._cache[-1][2].shape[0]
        if g.shape != (n, self.spec.out_dim):
            raise DimensionMismatch(f"output_grad shape {g.shape}, expected {(n, self.spec.out_dim)}")
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            a_in, h, out = self._cache[i]
            if i != last:
                g = self._act_grad(h, out, g)
            self.weight_grads[i] += a_in.T @ g
            self.bias_grads[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g


@dataclass
class AdamWState:
    n_params: int
    step_size: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps_num: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.step_size <= 0 or self.eps_num <= 0 or self.weight_decay < 0:
            raise ValueError("step_size and eps_num must be > 0, weight_decay >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adamw_step(state: AdamWState, params: np.ndarray, grads) -> None:
    """Decoupled-weight-decay Adam update, in place on ``params``."""
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatch(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape} must agree"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteValue("non-finite gradient passed to adamw_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** t)
    v_hat = state.v / (1.0 - b2 ** t)
    if state.weight_decay:
        params *= 1.0 - state.step_size * state.weight_decay
    params -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps_num)


# parameter snapshots: magic, header, then raw little-endian float64 values

_MAGIC = b"MDMMNET1"
_ACT_CODES = {Activation.TANH: 0, Activation.RELU: 1}


def snapshot_bytes(net: Net, step: int = 0) -> bytes:
    dims = net.spec.layer_dims
    header = _MAGIC + struct.pack(
        f"<I{len(dims)}IBQQQ",
        len(dims),
        *dims,
        _ACT_CODES[net.spec.activation],
        net.spec.init_seed & 0xFFFFFFFFFFFFFFFF,
        step,
        net.spec.n_params,
    )
    return header + net.params.astype("<f8").tobytes()


def net_from_snapshot(data: bytes):
    """Inverse of :func:`snapshot_bytes`; returns ``(net, step)``."""
    if not data.startswith(_MAGIC):
        raise ValueError("not a parameter snapshot (bad magic)")
    off = len(_MAGIC)
    (n_dims,) = struct.unpack_from("<I", data, off)
    off += 4
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    act_code, seed, step, n_params = struct.unpack_from("<BQQQ", data, off)
    off += struct.calcsize("<BQQQ")
    activation = {v: k for k, v in _ACT_CODES.items()}[act_code]
    spec = NetSpec(dims, activation, seed)
    if n_params != spec.n_params or len(data) - off != 8 * n_params:
        raise ValueError("snapshot payload length does not match its header")
    values = np.frombuffer(data, dtype="<f8", count=n_params, offset=off)
    return Net(spec, params=values.astype(np.float64)), step


def save_snapshot(path, net: Net, step: int = 0) -> None:
    Path(path).write_bytes(snapshot_bytes(net, step))


def load_snapshot(path):
    return net_from_snapshot(Path(path).read_bytes())
