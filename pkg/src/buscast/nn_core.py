"""Minimal differentiable core: LSTM and dense layers, MSE, optimizers.

Everything runs on float64 numpy arrays. The LSTM uses the standard cell

    i = sigmoid(W_i x + U_i h + b_i)      f = sigmoid(W_f x + U_f h + b_f)
    g = tanh(W_g x + U_g h + b_g)         o = sigmoid(W_o x + U_o h + b_o)
    c_t = f * c_{t-1} + i * g             h_t = o * tanh(c_t)

with the four gate blocks stacked in the fixed order [i, f, g, o] inside one
(4H x D) input matrix, one (4H x H) recurrent matrix, and one 4H bias.
Backward passes are exact reverse-mode differentiation of the forward code,
returning gradients for every parameter and for the inputs.

Set the environment variable BUSCAST_DEBUG=1 to assert that no forward or
backward pass produces NaN/Inf.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CheckpointError,
    NonPositiveLearningRate,
    ShapeMismatch,
)

_DEBUG = bool(int(os.environ.get("BUSCAST_DEBUG", "0")))


def _debug_check(name: str, *arrays: np.ndarray) -> None:
    if _DEBUG:
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in {name}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic sigmoid via sigmoid(z) = (tanh(z/2) + 1) / 2."""
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@dataclass
class LstmLayerParams:
    """Gate order inside w/u/b is [input i, forget f, candidate g, output o]."""

    w: np.ndarray  # (4H, D)
    u: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.u.shape[1]

    @property
    def input_size(self) -> int:
        return self.w.shape[1]

    def validate(self) -> None:
        h = self.hidden_size
        if self.w.shape[0] != 4 * h or self.u.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ShapeMismatch(
                f"inconsistent LSTM parameter shapes w={self.w.shape} u={self.u.shape} b={self.b.shape}"
            )


@dataclass
class DenseParams:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


@dataclass
class LstmCache:
    """Per-step activations retained for exact backpropagation through time.

    Arrays carry a leading branch axis: (n, B, L, ...). The single-branch
    entry points wrap and unwrap n = 1.
    """

    x: np.ndarray  # (n, B, L, D)
    gates: np.ndarray  # (n, B, L, 4H), post-activation, order [i, f, g, o]
    c: np.ndarray  # (n, B, L, H) cell states
    tanh_c: np.ndarray  # (n, B, L, H)
    h_prev: np.ndarray  # (n, B, L, H) hidden state entering each step
    c_prev: np.ndarray  # (n, B, L, H) cell state entering each step


@dataclass
class LstmGrads:
    dw: np.ndarray
    du: np.ndarray
    db: np.ndarray
    dx: np.ndarray
    dh0: np.ndarray
    dc0: np.ndarray


def branched_lstm_forward(
    w: np.ndarray,  # (n, 4H, D)
    u: np.ndarray,  # (n, 4H, H)
    b: np.ndarray,  # (n, 4H)
    x: np.ndarray,  # (n, B, L, D)
    h0: np.ndarray | None = None,  # (n, B, H)
    c0: np.ndarray | None = None,
) -> tuple[np.ndarray, LstmCache]:
    """Run n independent LSTM layers over n input streams in lock-step.

    The branches share shapes but not parameters, so each time step is one
    batched matmul instead of n small ones.
    """
    n, batch, steps, dim = x.shape
    hidden = u.shape[2]
    h = np.zeros((n, batch, hidden)) if h0 is None else h0
    c = np.zeros((n, batch, hidden)) if c0 is None else c0
    if h.shape != (n, batch, hidden) or c.shape != (n, batch, hidden):
        raise ShapeMismatch(f"initial state shapes {h.shape}/{c.shape} != {(n, batch, hidden)}")

    # Input contribution for every step of every branch in one batched GEMM.
    wt = w.transpose(0, 2, 1)
    xw = np.matmul(x.reshape(n, batch * steps, dim), wt).reshape(n, batch, steps, 4 * hidden)
    ut = u.transpose(0, 2, 1)
    bias = b[:, None, :]

    gates = np.empty((n, batch, steps, 4 * hidden))
    cs = np.empty((n, batch, steps, hidden))
    tanh_cs = np.empty((n, batch, steps, hidden))
    h_prevs = np.empty((n, batch, steps, hidden))
    c_prevs = np.empty((n, batch, steps, hidden))
    hs = np.empty((n, batch, steps, hidden))

    for t in range(steps):
        z = xw[:, :, t] + np.matmul(h, ut) + bias
        act = sigmoid(z)
        act[..., 2 * hidden : 3 * hidden] = np.tanh(z[..., 2 * hidden : 3 * hidden])
        i = act[..., :hidden]
        f = act[..., hidden : 2 * hidden]
        g = act[..., 2 * hidden : 3 * hidden]
        o = act[..., 3 * hidden :]
        h_prevs[:, :, t] = h
        c_prevs[:, :, t] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, :, t] = act
        cs[:, :, t] = c
        tanh_cs[:, :, t] = tc
        hs[:, :, t] = h

    _debug_check("lstm_forward", hs, cs)
    return hs, LstmCache(x=x, gates=gates, c=cs, tanh_c=tanh_cs, h_prev=h_prevs, c_prev=c_prevs)


def branched_lstm_backward(
    w: np.ndarray, u: np.ndarray, cache: LstmCache, grad_hs: np.ndarray
) -> LstmGrads:
    """Exact BPTT through :func:`branched_lstm_forward`.

    ``grad_hs`` is dLoss/d(hidden sequence), shape (n, B, L, H); gradients
    come back per branch with the same leading axis.
    """
    n, batch, steps, dim = cache.x.shape
    hidden = u.shape[2]
    if grad_hs.shape != (n, batch, steps, hidden):
        raise ShapeMismatch(f"grad shape {grad_hs.shape} != {(n, batch, steps, hidden)}")

    i = cache.gates[..., :hidden]
    f = cache.gates[..., hidden : 2 * hidden]
    g = cache.gates[..., 2 * hidden : 3 * hidden]
    o = cache.gates[..., 3 * hidden :]

    # Local gate derivatives are step-independent; hoist them out of the
    # sequential pass so the time loop only chains dc/dh.
    dcell_dh = o * (1.0 - cache.tanh_c * cache.tanh_c)
    k_i = g * i * (1.0 - i)
    k_f = cache.c_prev * f * (1.0 - f)
    k_g = i * (1.0 - g * g)
    k_o = cache.tanh_c * o * (1.0 - o)

    dz = np.empty((n, batch, steps, 4 * hidden))
    dh_next = np.zeros((n, batch, hidden))
    dc_next = np.zeros((n, batch, hidden))
    for t in reversed(range(steps)):
        dh = grad_hs[:, :, t] + dh_next
        dc = dh * dcell_dh[:, :, t] + dc_next
        dc_next = dc * f[:, :, t]
        dz[:, :, t, :hidden] = dc * k_i[:, :, t]
        dz[:, :, t, hidden : 2 * hidden] = dc * k_f[:, :, t]
        dz[:, :, t, 2 * hidden : 3 * hidden] = dc * k_g[:, :, t]
        dz[:, :, t, 3 * hidden :] = dh * k_o[:, :, t]
        dh_next = np.matmul(dz[:, :, t], u)

    flat_dz = dz.reshape(n, batch * steps, 4 * hidden)
    flat_dz_t = flat_dz.transpose(0, 2, 1)
    grads = LstmGrads(
        dw=np.matmul(flat_dz_t, cache.x.reshape(n, batch * steps, dim)),
        du=np.matmul(flat_dz_t, cache.h_prev.reshape(n, batch * steps, hidden)),
        db=flat_dz.sum(axis=1),
        dx=np.matmul(flat_dz, w).reshape(n, batch, steps, dim),
        dh0=dh_next,
        dc0=dc_next,
    )
    _debug_check("lstm_backward", grads.dw, grads.du, grads.db, grads.dx)
    return grads


def lstm_forward(
    params: LstmLayerParams,
    x: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
) -> tuple[np.ndarray, LstmCache]:
    """Run the cell over a (B, L, D) batch; return hidden sequence and cache."""
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (batch, steps, features) input, got shape {x.shape}")
    params.validate()
    if x.shape[2] != params.input_size:
        raise ShapeMismatch(f"input feature dim {x.shape[2]} != layer input size {params.input_size}")
    hs, cache = branched_lstm_forward(
        params.w[None], params.u[None], params.b[None], x[None],
        None if h0 is None else h0[None],
        None if c0 is None else c0[None],
    )
    return hs[0], cache


def lstm_backward(params: LstmLayerParams, cache: LstmCache, grad_hs: np.ndarray) -> LstmGrads:
    """Exact BPTT for a single layer. ``grad_hs`` has shape (B, L, H)."""
    grads = branched_lstm_backward(params.w[None], params.u[None], cache, grad_hs[None])
    return LstmGrads(
        dw=grads.dw[0], du=grads.du[0], db=grads.db[0],
        dx=grads.dx[0], dh0=grads.dh0[0], dc0=grads.dc0[0],
    )


def dense_forward(params: DenseParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != params.w.shape[1]:
        raise ShapeMismatch(f"dense input shape {x.shape} != (batch, {params.w.shape[1]})")
    return x @ params.w.T + params.b


def dense_backward(
    params: DenseParams, x: np.ndarray, grad_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dW, db, dX) for y = x W^T + b."""
    if grad_y.shape != (x.shape[0], params.w.shape[0]):
        raise ShapeMismatch(f"dense grad shape {grad_y.shape} != {(x.shape[0], params.w.shape[0])}")
    return grad_y.T @ x, grad_y.sum(axis=0), grad_y @ params.w


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all elements of squared error, and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) with fan_in=cols, fan_out=rows."""
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_lstm_params(input_size: int, hidden_size: int, rng: np.random.Generator) -> LstmLayerParams:
    """Glorot-uniform weights; biases zero except forget gate, which starts at 1."""
    b = np.zeros(4 * hidden_size)
    b[hidden_size : 2 * hidden_size] = 1.0
    return LstmLayerParams(
        w=glorot_uniform(rng, 4 * hidden_size, input_size),
        u=glorot_uniform(rng, 4 * hidden_size, hidden_size),
        b=b,
    )


def init_dense_params(input_size: int, output_size: int, rng: np.random.Generator) -> DenseParams:
    return DenseParams(w=glorot_uniform(rng, output_size, input_size), b=np.zeros(output_size))


# ---------------------------------------------------------------------------
# optimizers


class OptimizerKind(Enum):
    SGD = "sgd"
    RMSPROP = "rmsprop"
    ADAM = "adam"
    NADAM = "nadam"
    # candidate list entries not selected by tuning; construction raises
    ADADELTA = "adadelta"
    ADAGRAD = "adagrad"
    ADAMAX = "adamax"
    FTRL = "ftrl"


_UNIMPLEMENTED = {
    OptimizerKind.ADADELTA,
    OptimizerKind.ADAGRAD,
    OptimizerKind.ADAMAX,
    OptimizerKind.FTRL,
}


class Optimizer:
    """Updates a named set of parameter arrays in place."""

    kind: OptimizerKind

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise NonPositiveLearningRate(f"learning rate must be > 0, got {learning_rate}")
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        if set(params) != set(grads):
            raise ShapeMismatch("parameter and gradient names differ")
        self.step_count += 1
        for name in params:
            if params[name].shape != grads[name].shape:
                raise ShapeMismatch(
                    f"{name}: parameter shape {params[name].shape} != gradient shape {grads[name].shape}"
                )
            self._update(name, params[name], grads[name])

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        raise NotImplementedError

    def _slot(self, slots: dict[str, np.ndarray], name: str, like: np.ndarray) -> np.ndarray:
        if name not in slots:
            slots[name] = np.zeros_like(like)
        return slots[name]


class Sgd(Optimizer):
    kind = OptimizerKind.SGD

    def _update(self, name, param, grad):
        param -= self.learning_rate * grad


class RmsProp(Optimizer):
    kind = OptimizerKind.RMSPROP

    def __init__(self, learning_rate: float, rho: float = 0.9, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.rho = rho
        self.eps = eps
        self._v: dict[str, np.ndarray] = {}

    def _update(self, name, param, grad):
        v = self._slot(self._v, name, param)
        v *= self.rho
        v += (1.0 - self.rho) * grad * grad
        param -= self.learning_rate * grad / (np.sqrt(v) + self.eps)


class Adam(Optimizer):
    kind = OptimizerKind.ADAM

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _moments(self, name, param, grad):
        m = self._slot(self._m, name, param)
        v = self._slot(self._v, name, param)
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        t = self.step_count
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return m_hat, v_hat

    def _update(self, name, param, grad):
        m_hat, v_hat = self._moments(name, param, grad)
        param -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class Nadam(Adam):
    """Adam with a Nesterov-style lookahead on the first moment."""

    kind = OptimizerKind.NADAM

    def _update(self, name, param, grad):
        m_hat, v_hat = self._moments(name, param, grad)
        t = self.step_count
        lookahead = self.beta1 * m_hat + (1.0 - self.beta1) * grad / (1.0 - self.beta1**t)
        param -= self.learning_rate * lookahead / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: OptimizerKind, learning_rate: float) -> Optimizer:
    if kind in _UNIMPLEMENTED:
        raise NotImplementedError(
            f"optimizer {kind.value!r} is in the candidate list but not implemented; "
            "use one of sgd, rmsprop, adam, nadam"
        )
    cls = {
        OptimizerKind.SGD: Sgd,
        OptimizerKind.RMSPROP: RmsProp,
        OptimizerKind.ADAM: Adam,
        OptimizerKind.NADAM: Nadam,
    }[kind]
    return cls(learning_rate)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"BCKP"
CHECKPOINT_VERSION = 1


def save_params(path: str | Path, header: dict, named_params: Iterable[tuple[str, np.ndarray]]) -> None:
    """Versioned header (JSON) followed by row-major float64 payloads.

    The payload order matches the ``params`` entry written into the header,
    so a round trip restores bit-identical arrays.
    """
    named = [(name, np.ascontiguousarray(arr, dtype=np.float64)) for name, arr in named_params]
    meta = dict(header)
    meta["format_version"] = CHECKPOINT_VERSION
    meta["params"] = [[name, list(arr.shape)] for name, arr in named]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a buscast checkpoint")
    (blob_len,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12 : 12 + blob_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 12 + blob_len
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated payload at {name}")
        params[name] = arr.reshape(shape).copy()
        offset += count * 8
    return header, params
