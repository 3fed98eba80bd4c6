"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations needed by the graph classifier are provided:
dense and sparse-constant matmul, bias add, relu, sigmoid, row gather,
column concatenation and the two-sample BCE loss.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConfigError, FormatError, ParameterError

EPS_CLIP = 1e-7


class Tensor:
    """A value node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``grad`` (default 1 for scalars) to every upstream node."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.value) if grad is None else grad)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            for p, g in zip(node.parents, node.backward_fn(node.grad)):
                if p.requires_grad and g is not None:
                    p._accumulate(g)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inner(a_shape, b_shape):
    if len(a_shape) != 2 or len(b_shape) != 2 or a_shape[1] != b_shape[0]:
        raise ParameterError(f"shape mismatch for matmul: {a_shape} @ {b_shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_inner(a.shape, b.shape)
    av, bv = a.value, b.value
    return Tensor(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(s: sp.spmatrix, h) -> Tensor:
    """Constant sparse matrix times tensor, e.g. graph propagation ``A_norm @ H``."""
    h = as_tensor(h)
    _check_inner(s.shape, h.shape)
    st = s.T.tocsr()
    return Tensor(np.asarray(s @ h.value), (h,), lambda g: (np.asarray(st @ g),))


def add_bias(h, bias) -> Tensor:
    h, bias = as_tensor(h), as_tensor(bias)
    return Tensor(h.value + bias.value, (h, bias), lambda g: (g, g.sum(axis=0).reshape(bias.shape)))


def relu(h) -> Tensor:
    h = as_tensor(h)
    mask = h.value > 0
    # np.maximum keeps NaN, so divergence upstream reaches the loss instead of being masked
    return Tensor(np.maximum(h.value, 0.0), (h,), lambda g: (g * mask,))


def sigmoid(h) -> Tensor:
    h = as_tensor(h)
    s = expit(h.value)
    return Tensor(s, (h,), lambda g: (g * s * (1.0 - s),))


def identity(h) -> Tensor:
    return as_tensor(h)


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


def gather_rows(table, idx: np.ndarray) -> Tensor:
    """Embedding lookup: row ``idx[i]`` of ``table`` for every ``i``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    rows = table.shape[0]

    def back(g):
        out = np.zeros((rows,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(table.value[idx], (table,), back)


def hconcat(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    k = a.shape[1]
    return Tensor(np.hstack([a.value, b.value]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def weighted_sum(h, coef: np.ndarray) -> Tensor:
    """Scalar ``sum(coef * h)`` for a constant ``coef``; a linear readout."""
    h = as_tensor(h)
    coef = np.asarray(coef, dtype=float)
    if coef.shape != h.shape:
        raise ParameterError(f"coef shape {coef.shape} != tensor shape {h.shape}")
    return Tensor(np.sum(coef * h.value), (h,), lambda g: (g * coef,))


def bce_loss(f_first: np.ndarray, f_second: np.ndarray, grad_perturbation: float = 0.0):
    """Two-sample binary cross-entropy.

    ``L = -(1/n) sum_i [log f_first_i + log(1 - f_second_i)]``, i.e. the first
    vector is pushed towards 1 and the second towards 0. Probabilities are
    clamped to ``[EPS_CLIP, 1 - EPS_CLIP]`` first; the returned gradients are
    those of the clamped loss (zero where clamping is active).

    Returns ``(loss, grad_first, grad_second)``.
    """
    f1 = np.asarray(f_first, dtype=float).ravel()
    f2 = np.asarray(f_second, dtype=float).ravel()
    if f1.shape != f2.shape:
        raise ParameterError("both probability vectors must have the same length")
    n = f1.shape[0]
    c1 = np.clip(f1, EPS_CLIP, 1.0 - EPS_CLIP)
    c2 = np.clip(f2, EPS_CLIP, 1.0 - EPS_CLIP)
    loss = -(np.log(c1).sum() + np.log1p(-c2).sum()) / n
    in1 = (f1 >= EPS_CLIP) & (f1 <= 1.0 - EPS_CLIP)
    in2 = (f2 >= EPS_CLIP) & (f2 <= 1.0 - EPS_CLIP)
    g1 = np.where(in1, -1.0 / (n * c1), 0.0)
    g2 = np.where(in2, 1.0 / (n * (1.0 - c2)), 0.0)
    if grad_perturbation:
        g1 = g1 + grad_perturbation
    return float(loss), g1, g2


def bce(f_first: Tensor, f_second: Tensor, grad_perturbation: float = 0.0) -> Tensor:
    """Autodiff wrapper around :func:`bce_loss`."""
    loss, g1, g2 = bce_loss(f_first.value, f_second.value, grad_perturbation)
    s1, s2 = f_first.shape, f_second.shape
    return Tensor(loss, (f_first, f_second), lambda g: (g * g1.reshape(s1), g * g2.reshape(s2)))


# --------------------------------------------------------------------------
# parameters and optimizers


@dataclass
class ParamStore:
    """Named parameter tensors with Adam moment buffers."""

    params: Dict[str, Tensor] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ConfigError(f"parameter {name!r} is not registered") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in self.params.items()}

    def values(self) -> Dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        for k, val in values.items():
            if k not in self.params:
                self.add(k, val)
            elif self.params[k].value.shape != np.shape(val):
                raise ParameterError(f"shape mismatch for {k}")
            else:
                self.params[k].value = np.array(val, dtype=np.float64)


def optimizer_step(
    store: ParamStore,
    learning_rate: float,
    method: str = "adam",
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One update of every parameter from its accumulated gradient."""
    if method not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {method!r}")
    store.step_count += 1
    t = store.step_count
    b1, b2 = betas
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        if method == "sgd":
            p.value = p.value - learning_rate * g
            continue
        store.m[name] = b1 * store.m[name] + (1 - b1) * g
        store.v[name] = b2 * store.v[name] + (1 - b2) * g * g
        m_hat = store.m[name] / (1 - b1 ** t)
        v_hat = store.v[name] / (1 - b2 ** t)
        p.value = p.value - learning_rate * m_hat / (np.sqrt(v_hat) + eps)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def forward_layer(
    store: ParamStore,
    name: str,
    x,
    activation: str = "identity",
    propagate: Optional[sp.spmatrix] = None,
) -> Tensor:
    """``activation(P @ x @ W + b)`` with ``W = store[name + '.W']``, ``b = store[name + '.b']``.

    ``P`` is an optional constant sparse propagation matrix (graph layers);
    omitting it gives an ordinary dense layer.
    """
    W, b = store[f"{name}.W"], store[f"{name}.b"]
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    x = as_tensor(x)
    if propagate is None:
        z = matmul(x, W)
    elif W.shape[1] < x.shape[1]:
        z = spmm(propagate, matmul(x, W))
    else:
        z = matmul(spmm(propagate, x), W)
    return ACTIVATIONS[activation](add_bias(z, b))


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    n_coords: int = 20,
    rng: Optional[np.random.Generator] = None,
    atol: float = 1e-8,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values. Up to ``n_coords`` coordinates per parameter are sampled.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    loss_fn().backward()
    analytic = {k: g.copy() for k, g in store.grads().items()}
    worst = 0.0
    for name, p in store.params.items():
        flat = p.value.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            up = float(loss_fn().value)
            flat[c] = old - h
            down = float(loss_fn().value)
            flat[c] = old
            num = (up - down) / (2 * h)
            ana = analytic[name].reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            if not np.isfinite(err):
                err = np.inf
            worst = max(worst, err)
    store.zero_grad()
    return float(worst)


# --------------------------------------------------------------------------
# checkpoints: b"NOPE" | version u8 | count u32 | {name_len u16, name, rows u32, cols u32, <f8 data}

_MAGIC = b"NOPE"
_VERSION = 1


def dumps_params(values: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<BI", _VERSION, len(values)))
    for name in sorted(values):
        arr = np.asarray(values[name], dtype="<f8")
        arr2 = arr.reshape(1, -1) if arr.ndim == 1 else arr
        if arr2.ndim != 2:
            raise ParameterError(f"{name}: only vectors and matrices can be stored")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr2.shape))
        buf.write(np.ascontiguousarray(arr2).tobytes())
    return buf.getvalue()


def loads_params(blob: bytes) -> Dict[str, np.ndarray]:
    """Inverse of :func:`dumps_params`; truncated or foreign blobs raise ``FormatError``."""
    if blob[:4] != _MAGIC:
        raise FormatError("not a parameter checkpoint")
    try:
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 9
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + ln].decode()
            pos += ln
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(blob):
                raise FormatError(f"checkpoint truncated inside {name!r}")
            out[name] = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(rows, cols).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint")
    return out


def save_params(store: ParamStore, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps_params(store.values()))


def load_params(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads_params(Path(path).read_bytes())
