"""Minimal reverse-mode autodiff over dense numpy arrays.

The operator set is fixed to what the segmentation network and its losses
need: matmul, conv2d, activations, softmax, layer_norm, elementwise
arithmetic, reductions, concat/slice/reshape/transpose, bilinear 2x
upsampling and position-encoding addition. Data is float32 by default;
reductions accumulate in float64 so repeated means stay stable. All ops are
deterministic: same inputs, same bits out.

Gradients are recorded on an implicit tape (parent links per tensor) and
`backward` replays it once in reverse topological order.
"""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BadCheckpointError, NotScalarLossError, ShapeMismatchError

_GRAD_ENABLED = True

CHECKPOINT_MAGIC = b"PSEGCKPT"
CHECKPOINT_VERSION = 1


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """Dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named model weight; frozen parameters never receive gradients."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.trainable = bool(trainable)
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = _as_array(value, self.tensor.data.dtype)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(data, dtype=None) -> Tensor:
    """Tensor that never requires grad (labels, position tables)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.asarray(s, dtype=a.dtype))

    return _make(data, (a,), backward)


def embedding_add(x: Tensor, table: np.ndarray) -> Tensor:
    """Add a fixed (non-trainable) encoding table to x."""
    return add(x, constant(table, dtype=x.dtype))


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _make(data, (x,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    data = (0.5 * xd * (1.0 + t)).astype(x.dtype)

    def backward(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
            x.accumulate_grad(g * dx.astype(x.dtype))

    return _make(data, (x,), backward)


LOG_CLAMP = 1e-12


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped at LOG_CLAMP to stay finite."""
    clamped = np.maximum(x.data, LOG_CLAMP)
    data = np.log(clamped).astype(x.dtype)

    def backward(g):
        if x.requires_grad:
            dx = np.where(x.data >= LOG_CLAMP, 1.0 / clamped, 0.0)
            x.accumulate_grad(g * dx.astype(x.dtype))

    return _make(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            denom = np.maximum(2.0 * data, 1e-12)
            x.accumulate_grad((g / denom).astype(x.dtype))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (C, H, W) with (C_out, C_in, kh, kw) weights."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d input {x.shape} weight {w.shape}")
    c_out, c_in, kh, kw = w.shape
    s, p = int(stride), int(padding)
    xd = x.data
    if p:
        xd = np.pad(xd, ((0, 0), (p, p), (p, p)))
    _, hp, wp = xd.shape
    if hp < kh or wp < kw:
        raise ShapeMismatchError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    # (C_in, Ho, Wo, kh, kw) -> (C_in*kh*kw, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, ho * wo)
    cols = np.ascontiguousarray(cols)
    wm = w.data.reshape(c_out, c_in * kh * kw)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        gm = g.reshape(c_out, ho * wo)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gm.sum(axis=1, dtype=np.float64).astype(b.dtype))
        if w.requires_grad:
            w.accumulate_grad((gm @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c_in, kh, kw, ho, wo)
            dxp = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
            if p:
                dxp = dxp[:, p:-p or None, p:-p or None]
            x.accumulate_grad(dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x.accumulate_grad(data * (g - dot))

    return _make(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeMismatchError(f"layer_norm affine {gamma.shape} for features {x.shape[-1:]}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        if beta.requires_grad:
            beta.accumulate_grad(gd.reshape(-1, g.shape[-1]).sum(axis=0).astype(beta.dtype))
        if gamma.requires_grad:
            gg = (gd * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
            gamma.accumulate_grad(gg.astype(gamma.dtype))
        if x.requires_grad:
            dxhat = gd * gamma.data.astype(np.float64)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            x.accumulate_grad(dx.astype(x.dtype))

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    data = x.data.sum(axis=ax, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not x.requires_grad:
            return
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _make(data, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    data = x.data.mean(axis=ax, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not x.requires_grad:
            return
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        x.accumulate_grad((np.broadcast_to(g, x.shape) / count).astype(x.dtype))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

    return _make(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(part)

    return _make(data, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = np.ascontiguousarray(x.data[index])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x.accumulate_grad(full)

    return _make(data, (x,), backward)


def _upsample2x_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) align-corners-false bilinear interpolation weights."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(2 * n):
        pos = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(pos))
        frac = pos - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m.astype(dtype)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of (C, H, W), align-corners-false."""
    if x.ndim != 3:
        raise ShapeMismatchError(f"upsample2x expects (C,H,W), got {x.shape}")
    _, h, w = x.shape
    mh = _upsample2x_matrix(h, x.dtype)
    mw = _upsample2x_matrix(w, x.dtype)
    data = np.einsum("ij,cjk,lk->cil", mh, x.data, mw, optimize=True)

    def backward(g):
        if x.requires_grad:
            dx = np.einsum("ij,cik,kl->cjl", mh, g, mw, optimize=True)
            x.accumulate_grad(dx.astype(x.dtype))

    return _make(data.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    if loss.size != 1:
        raise NotScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # intermediate grads are not needed after the sweep; free them
    for node in topo:
        if node._backward is not None and node is not loss:
            node.grad = None if not node.requires_grad else node.grad


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-3,
    samples: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between backprop gradients and central differences.

    Samples `samples` coordinates across all trainable parameters. The
    relative denominator is max(|analytic|, |numeric|, 1e-8).
    """
    params = [p for p in params if p.trainable]
    zero_grads(params)
    loss = f()
    backward(loss)
    grads = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(samples, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat_idx in sorted(int(i) for i in picks):
        pi = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = flat_idx - (0 if pi == 0 else int(bounds[pi - 1]))
        p = params[pi]
        idx = np.unravel_index(local, p.data.shape)
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + eps
            f_plus = float(f().data)
            p.data[idx] = orig - eps
            f_minus = float(f().data)
            p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(grads[p.name][idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays: magic, version, then per-record
    (name length, name bytes, rank, dims) as 64-bit LE plus raw LE floats."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<Q", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise BadCheckpointError(f"no such checkpoint: {path}")

    def read_exact(fh, n):
        buf = fh.read(n)
        if len(buf) != n:
            raise BadCheckpointError(f"truncated checkpoint: {path}")
        return buf

    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise BadCheckpointError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise BadCheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", read_exact(fh, 8))
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", read_exact(fh, 8))
            name = read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", read_exact(fh, 8))
            shape = tuple(struct.unpack("<Q", read_exact(fh, 8))[0] for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(read_exact(fh, 4 * n_items), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float32)
    return out
