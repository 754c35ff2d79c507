"""Dense tensors with a reverse-mode autodiff tape.

Tensors are immutable numpy-backed values. Ops run eagerly; when any operand
lives on a Tape the op also records a backward rule, and nodes are appended in
creation order so the tape is topologically ordered by construction. One
backward() pass over one tape yields gradients for every reachable leaf.

Every op validates that its output is finite; NaN/Inf raises NumericError
instead of propagating silently. Reductions use a fixed order, so identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    FormatError,
    NumericError,
    ShapeMismatchError,
)

_NORM_EPS = 1e-12


class _Node:
    __slots__ = ("parents", "bwd", "name")

    def __init__(self, parents, bwd, name):
        self.parents = parents
        self.bwd = bwd
        self.name = name


class Tape:
    """Single-writer op record for one forward/backward cycle."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []

    def leaf(self, data, name: str | None = None) -> "Tensor":
        """Register a differentiable input."""
        arr = _validate_array(np.asarray(data), name or "leaf")
        nid = len(self._nodes)
        self._nodes.append(_Node((), None, name or f"leaf{nid}"))
        t = Tensor(arr, self, nid)
        self._leaves.append(t)
        return t

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)


class Tensor:
    """Immutable dense array, optionally attached to a tape node."""

    __slots__ = ("data", "_tape", "_nid")

    def __init__(self, data, tape: Tape | None = None, nid: int = -1):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if tape is None:
            arr = _validate_array(arr, "tensor")
        self.data = arr
        self._tape = tape
        self._nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = "" if self._tape is None else f", node={self._nid}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _validate_array(arr: np.ndarray, where: str) -> np.ndarray:
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")
    return arr


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _find_tape(inputs) -> Tape | None:
    tape = None
    for t in inputs:
        if t._tape is not None:
            if tape is not None and tape is not t._tape:
                raise ContractError("operands live on different tapes")
            tape = t._tape
    return tape


def _record(out_data: np.ndarray, inputs, bwd, name: str) -> Tensor:
    """Finish an op: finite-check the forward value and record a node if needed."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite result from op '{name}'")
    tape = _find_tape(inputs)
    if tape is None:
        t = Tensor.__new__(Tensor)
        t.data = out_data
        t._tape = None
        t._nid = -1
        return t
    parents = tuple(t._nid for t in inputs)
    nid = len(tape._nodes)
    tape._nodes.append(_Node(parents, bwd, name))
    return Tensor(out_data, tape, nid)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_dtype(a: Tensor, b: Tensor, name: str):
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch in '{name}': {a.dtype} vs {b.dtype}")


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"'{name}' shapes do not broadcast: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# linear ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "add")
    _check_broadcast(a, b, "add")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "sub")
    _check_broadcast(a, b, "sub")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "div")
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad / bd
    return _record(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _record(-a.data, (a,), bwd, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _record(a.data * a.dtype.type(s), (a,), bwd, "scale")


def matmul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got shape {a.shape}")

    def bwd(g):
        return (g.T,)

    return _record(a.data.T.copy(), (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"cannot reshape {old} to {shape}") from None
    return _record(out, (a,), bwd, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat axis={axis} shapes {[t.shape for t in tensors]}"
        ) from None
    return _record(out, tuple(tensors), bwd, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeMismatchError(f"slice [{start}:{stop}] outside axis {axis} of shape {a.shape}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    full_shape = a.shape

    def bwd(g):
        z = np.zeros(full_shape, dtype=g.dtype)
        z[idx] = g
        return (z,)

    return _record(a.data[idx].copy(), (a,), bwd, "slice")


# ---------------------------------------------------------------------------
# nonlinear ops and reductions


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log domain: input must be strictly positive")
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt domain: input must be non-negative")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _record(out, (a,), bwd, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out.astype(a.dtype, copy=False), (a,), bwd, "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, a.dtype.type(0)), (a,), bwd, "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(g.dtype, copy=False),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(g.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).astype(g.dtype, copy=False),)

    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


def dot(u: Tensor, v: Tensor) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    _check_same_dtype(u, v, "dot")
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(f"dot expects equal-length vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data

    def bwd(g):
        return g * vd, g * ud

    return _record(np.asarray(ud @ vd), (u, v), bwd, "dot")


def l2_norm(v: Tensor) -> Tensor:
    """Euclidean norm over all components; gradient guarded at zero norm."""
    vd = v.data
    out = np.asarray(np.sqrt((vd * vd).sum()), dtype=v.dtype)
    nrm = float(out)

    def bwd(g):
        if nrm < _NORM_EPS:
            return (np.zeros_like(vd),)
        return (g * vd / nrm,)

    return _record(out, (v,), bwd, "l2_norm")


# ---------------------------------------------------------------------------
# composites


def _detached_max(a: Tensor, axis, keepdims=True) -> Tensor:
    # softmax(x) == softmax(x - c) exactly, so the shift carries no gradient
    return Tensor(a.data.max(axis=axis, keepdims=keepdims))


def softmax_t(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax, computed with max-subtraction."""
    if tau <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    z = scale(sub(logits, _detached_max(logits, axis)), 1.0 / tau)
    e = exp(z)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax_t(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    if tau <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    z = scale(sub(logits, _detached_max(logits, axis)), 1.0 / tau)
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def l2_normalize(v: Tensor, axis: int | None = None) -> Tensor:
    """Scale to unit Euclidean norm (whole tensor, or each slice along axis)."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    if axis is None:
        n = l2_norm(v)
        if float(n.data) <= _NORM_EPS:
            raise DegenerateInputError(f"cannot normalize: norm {float(n.data):.3e}")
        return div(v, n)
    sq = tsum(mul(v, v), axis=axis, keepdims=True)
    if np.any(sq.data <= _NORM_EPS * _NORM_EPS):
        raise DegenerateInputError("cannot normalize: a slice has near-zero norm")
    return div(v, sqrt(sq))


# ---------------------------------------------------------------------------
# backward pass


class Gradients:
    """Map from tape leaves to their gradient arrays."""

    def __init__(self, tape: Tape, by_nid: dict):
        self._tape = tape
        self._by_nid = by_nid

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        if leaf._tape is not self._tape:
            raise ContractError("tensor is not a leaf of this tape")
        g = self._by_nid.get(leaf._nid)
        if g is None:
            return np.zeros_like(leaf.data)
        return np.ascontiguousarray(g)


def backward(loss: Tensor) -> Gradients:
    """Accumulate gradients of a scalar loss for every leaf of its tape."""
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    grads: dict[int, np.ndarray] = {loss._nid: np.ones_like(loss.data)}
    for nid in range(loss._nid, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape._nodes[nid]
        if node.bwd is None:
            continue
        parent_grads = node.bwd(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid < 0 or pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient from op '{node.name}'")
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f, at, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map one Tensor to a scalar Tensor and be evaluable without a tape.
    """
    at = np.asarray(at, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(at)
    analytic = backward(f(x))[x].ravel()
    flat = at.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        fp = f(Tensor((flat + bump).reshape(at.shape))).item()
        fm = f(Tensor((flat - bump).reshape(at.shape))).item()
        fd[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))


# ---------------------------------------------------------------------------
# serialization

_TENSOR_MAGIC = b"A2MCTNSR"
_TENSOR_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise ContractError(f"unsupported dtype {arr.dtype} for serialization")
    head = _TENSOR_MAGIC + struct.pack("<II", _TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<B", _DTYPE_TAGS[arr.dtype])
    le = arr.astype("<f4" if arr.dtype == np.float32 else "<f8", copy=False)
    return head + np.ascontiguousarray(le).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns (array, next offset)."""
    start = offset
    if len(buf) < offset + 16:
        raise FormatError(f"truncated tensor header at offset {start}")
    if buf[offset : offset + 8] != _TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic at offset {start}")
    offset += 8
    version, rank = struct.unpack_from("<II", buf, offset)
    offset += 8
    if version != _TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version} at offset {start + 8}")
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank} at offset {start + 12}")
    if len(buf) < offset + 8 * rank + 1:
        raise FormatError(f"truncated tensor dims at offset {offset}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    (tag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag} at offset {offset - 1}")
    dt = _TAG_DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
    if len(buf) < offset + nbytes:
        raise FormatError(f"truncated tensor data at offset {offset}")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("=")), offset + nbytes


def save_tensor(arr: np.ndarray, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"trailing bytes after tensor at offset {end}")
    return arr
