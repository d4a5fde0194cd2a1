"""Dense-tensor engine with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 by default, float64 switchable for
tight gradient checks); the graph is built eagerly by op functions that
attach backward closures. Single-threaded per graph; independent graphs
are independent.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_default_dtype = np.float32
_grad_enabled = True
_debug_checks = False
_flop_count = 0
_alloc_bytes = 0


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _default_dtype = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage dtype (float64 for gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(flag: bool) -> None:
    """Toggle per-op finiteness assertions on forward outputs."""
    global _debug_checks
    _debug_checks = bool(flag)


def reset_flops() -> None:
    global _flop_count
    _flop_count = 0


def matmul_flops() -> int:
    """Multiply-accumulate FLOPs (2*m*n*k) executed since the last reset."""
    return _flop_count


def reset_alloc_bytes() -> None:
    global _alloc_bytes
    _alloc_bytes = 0


def alloc_bytes() -> int:
    """Bytes of forward activations allocated since the last reset."""
    return _alloc_bytes


class Tensor:
    """A numpy array plus an optional gradient buffer and backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this node."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(param: Tensor, grad: np.ndarray) -> None:
    if param.grad is None:
        param.grad = np.zeros_like(param.data)
    param.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _build(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    global _alloc_bytes
    _alloc_bytes += data.nbytes
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _default_dtype else data.astype(_default_dtype)
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


# -- elementwise and broadcast ops -------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _build(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _build(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _build(data, (a, b), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _build(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * sig * (1.0 - sig))

    return _build(sig, (x,), backward)


def softmax_lastdim(x, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis, numerically stabilized.

    ``allowed`` is an optional boolean array (broadcastable to x) marking
    positions that may receive probability; the rest get exactly zero.
    """
    x = as_tensor(x)
    logits = x.data
    if allowed is not None:
        mask = np.broadcast_to(allowed, logits.shape)
        safe = np.where(mask, logits, -np.inf)
        row_max = np.max(np.where(mask, logits, -np.inf), axis=-1, keepdims=True)
        exps = np.where(mask, np.exp(safe - row_max), 0.0)
    else:
        row_max = np.max(logits, axis=-1, keepdims=True)
        exps = np.exp(logits - row_max)
    probs = exps / np.sum(exps, axis=-1, keepdims=True)
    probs = probs.astype(logits.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            inner = np.sum(g * probs, axis=-1, keepdims=True)
            _accumulate(x, probs * (g - inner))

    return _build(probs, (x,), backward)


def rsqrt_mean_square(x, eps: float = 1e-6) -> Tensor:
    """Per-row 1/sqrt(mean(x^2) + eps) over the last axis, keepdims."""
    x = as_tensor(x)
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (-(inv**3) * x.data / d))

    return _build(inv.astype(x.data.dtype), (x,), backward)


def tsum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            grad = np.asarray(g)
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            _accumulate(x, np.broadcast_to(grad, x.shape).astype(x.data.dtype))

    return _build(np.asarray(data), (x,), backward)


def tmean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    data = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            grad = np.asarray(g) / count
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            _accumulate(x, np.broadcast_to(grad, x.shape).astype(x.data.dtype))

    return _build(np.asarray(data), (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _build(data, (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    global _flop_count
    _flop_count += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _build(data, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.T)

    return _build(x.data.T.copy(), (x,), backward)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[..., lo:hi])

    return _build(data, tuple(parts), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = [p.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + heights)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    return _build(data, tuple(parts), backward)


# -- indexing ----------------------------------------------------------------


def gather_rows(x, indices) -> Tensor:
    """Select rows by integer index; duplicates accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            grad = np.zeros_like(x.data)
            np.add.at(grad, idx, g)
            _accumulate(x, grad)

    return _build(data, (x,), backward)


def scatter_rows(values, indices, num_rows: int) -> Tensor:
    """Place rows at the given indices of a zero matrix (duplicates add)."""
    values = as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((num_rows,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(data, idx, values.data)

    def backward(g):
        if values.requires_grad:
            _accumulate(values, g[idx])

    return _build(data, (values,), backward)


def take_elems(x, row_indices, col_indices) -> Tensor:
    """Pick x[r, c] for paired index vectors; returns a column [n, 1]."""
    x = as_tensor(x)
    rows = np.asarray(row_indices, dtype=np.int64)
    cols = np.asarray(col_indices, dtype=np.int64)
    data = x.data[rows, cols][:, None]

    def backward(g):
        if x.requires_grad:
            grad = np.zeros_like(x.data)
            np.add.at(grad, (rows, cols), g[:, 0])
            _accumulate(x, grad)

    return _build(data, (x,), backward)


def rotate_pairs(x) -> Tensor:
    """Map (..., x0, x1, x2, x3, ...) to (..., -x1, x0, -x3, x2, ...)."""
    x = as_tensor(x)
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last dim, got {x.shape}")
    data = np.empty_like(x.data)
    data[..., 0::2] = -x.data[..., 1::2]
    data[..., 1::2] = x.data[..., 0::2]

    def backward(g):
        if x.requires_grad:
            grad = np.empty_like(g)
            grad[..., 0::2] = g[..., 1::2]
            grad[..., 1::2] = -g[..., 0::2]
            _accumulate(x, grad)

    return _build(data, (x,), backward)


# -- fused losses --------------------------------------------------------------


def cross_entropy_logits(logits, targets, sample_weight: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    ``sample_weight`` defaults to all-ones; rows with weight zero are
    excluded from both the mean and the gradient.
    """
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    w = np.ones(n, logits.data.dtype) if sample_weight is None else np.asarray(
        sample_weight, logits.data.dtype
    )
    total_w = float(w.sum())
    if total_w <= 0:
        raise ValueError("cross_entropy_logits needs at least one weighted row")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=-1))
    logp = shifted[np.arange(n), tgt] - logsumexp
    loss = -float(np.sum(w * logp)) / total_w

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(shifted - logsumexp[:, None])
            probs[np.arange(n), tgt] -= 1.0
            probs *= (w / total_w)[:, None] * g
            _accumulate(logits, probs.astype(logits.data.dtype))

    return _build(np.asarray(loss, logits.data.dtype), (logits,), backward)


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Accepts a flat parameter list or param groups (dicts with ``params``
    and optional ``lr`` / ``weight_decay`` overrides) so layer-wise
    learning rates are just groups.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if params and isinstance(params[0], Tensor):
            params = [{"params": list(params)}]
        self.groups = [dict(g) for g in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for group in self.groups:
            lr = group.get("lr", self.lr)
            wd = group.get("weight_decay", self.weight_decay)
            for p in group["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                m, v = self._m[key], self._v[key]
                g = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * np.square(g)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if wd:
                    update = update + wd * p.data
                p.data -= lr * update


# -- checkpoints ---------------------------------------------------------------
#
# Flat binary layout, all integers little-endian:
#   magic 'TMCK' | version u32 | tensor count u32
#   per tensor: name length u16 | name utf-8 | rank u8 | dims u32 each |
#               raw float32 little-endian data, row-major.

_CKPT_MAGIC = b"TMCK"
_CKPT_VERSION = 1


def save_checkpoint(named_tensors: dict[str, "Tensor | np.ndarray"], path: str | Path) -> None:
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<II", _CKPT_VERSION, len(named_tensors))
    for name, value in named_tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        out[name] = arr
    return out
