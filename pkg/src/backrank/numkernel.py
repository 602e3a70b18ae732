"""Dense float64 tensors with a recorded reverse-mode gradient tape.

Everything is 64-bit and row-major. Ops compute with numpy; gradients are
hand-written per primitive and recorded onto the innermost active `Tape`
(a context manager) whenever any input has `requires_grad`. Inference with
no tape active records nothing and is safe to run from many threads;
recording and `backward` are single-threaded by contract.

A tape can be replayed backward exactly once. Running `backward` twice on
one tape, or starting a backward while some leaf still carries a gradient
from an earlier pass, raises `ContractError` rather than silently
accumulating: call `reset_grads` (or clear `.grad` yourself) between steps.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ParseError, ShapeError

_TLS = threading.local()


def _tapes() -> list:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


class Tape:
    """Ordered record of primitive ops, replayable backward once."""

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tapes().pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tensor_mean(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def _record(inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> None:
    stack = _tapes()
    if not stack:
        return
    tape = stack[-1]
    if tape._consumed:
        raise ContractError("recording onto a tape that already ran backward")
    tape._nodes.append(_Node(inputs, out, backward_fn))


def _make(inputs: tuple[Tensor, ...], arr: np.ndarray, backward_fn) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, rg)
    if rg:
        _record(inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make((a, b), arr, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make((a, b), arr, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make((a, b), arr, backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (-g,)

    return _make((a,), -a.data, backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _make((a,), a.data * c, backward_fn)


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g,)

    return _make((a,), a.data + c, backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or 3-D x 3-D with equal leading batch."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes incompatible, {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: expects 2-D or batched 3-D operands, got {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    arr = ad @ bd

    def backward_fn(g):
        if ad.ndim == 2:
            return g @ bd.T, ad.T @ g
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _make((a, b), arr, backward_fn)


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"dot: expects equal-length vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data

    def backward_fn(g):
        return g * vd, g * ud

    return _make((u, v), np.einsum("i,i->", ud, vd), backward_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make((a,), np.ascontiguousarray(a.data.transpose(axes)), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _make((a,), a.data.reshape(shape), backward_fn)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expects a 2-D tensor, got {a.shape}")
    ix = np.asarray(idx, dtype=np.intp)
    if ix.ndim != 1:
        raise ShapeError("take_rows: index must be 1-D")
    if ix.size and (ix.min() < 0 or ix.max() >= a.shape[0]):
        raise DomainError(f"take_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward_fn(g):
        z = np.zeros(shape, dtype=np.float64)
        np.add.at(z, ix, g)
        return (z,)

    return _make((a,), a.data[ix].copy(), backward_fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("stack: needs at least one tensor")
    shape0 = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape0:
            raise ShapeError("stack: mismatched shapes")
    arr = np.stack([t.data for t in ts])

    def backward_fn(g):
        return tuple(g[i] for i in range(len(ts)))

    return _make(ts, arr, backward_fn)


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    if axis is None:
        def backward_fn(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _make((a,), a.data.sum(), backward_fn)

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make((a,), a.data.sum(axis=axis), backward_fn)


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor) -> Tensor:
    arr = np.exp(a.data)

    def backward_fn(g):
        return (g * arr,)

    return _make((a,), arr, backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data

    def backward_fn(g):
        return (g / ad,)

    return _make((a,), np.log(ad), backward_fn)


def tanh(a: Tensor) -> Tensor:
    arr = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - arr * arr),)

    return _make((a,), arr, backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    arr = np.empty_like(x)
    pos = x >= 0
    arr[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    arr[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * arr * (1.0 - arr),)

    return _make((a,), arr, backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along `axis`; rows sum to 1."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    arr = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (arr * (g - (g * arr).sum(axis=axis, keepdims=True)),)

    return _make((a,), arr, backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    arr = shifted - lse
    sm = np.exp(arr)

    def backward_fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make((a,), arr, backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every tracked tensor the loss depends on."""
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ContractError("backward: loss must be a scalar (0-d) tensor")
    if tape._consumed:
        raise ContractError("backward: this tape already ran backward; record a fresh tape")
    produced = {id(n.out) for n in tape._nodes}
    if id(loss) not in produced:
        raise ContractError("backward: loss was not produced under this tape")

    checked: set[int] = set()
    for node in tape._nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in checked:
                checked.add(id(t))
                if t.grad is not None:
                    raise ContractError(
                        "backward: a leaf tensor still carries a gradient; "
                        "reset grads before running another backward"
                    )

    tape._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for t, gin in zip(node.inputs, node.backward_fn(g)):
            if gin is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
                holders[key] = t

    # anything left unpopped is a leaf
    for key, g in grads.items():
        holders[key].grad = g


def reset_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
) -> float:
    """Max relative error between f's tape gradient and central differences.

    Per coordinate: |analytic - (f(x+eps e) - f(x-eps e)) / 2 eps| scaled by
    max(1, |analytic|). f must map a tensor to a scalar tensor.
    """
    if eps <= 0.0:
        raise DomainError("finite_diff_check: eps must be positive")
    xt = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not isinstance(y, Tensor) or y.data.ndim != 0:
        raise ContractError("finite_diff_check: f must return a scalar tensor")
    backward(tape, y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    analytic = analytic.ravel()

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        hi = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = flat[i] - eps
        lo = f(Tensor(probe.reshape(x.shape))).item()
        fd = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst


def cosine_similarity(u: Tensor | np.ndarray, v: Tensor | np.ndarray) -> float:
    """cos(u, v) for equal-length 1-D vectors, clamped to [-1, 1]."""
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if ud.ndim != 1 or vd.ndim != 1 or ud.shape != vd.shape or ud.size < 1:
        raise ShapeError(f"cosine_similarity: expects equal-length vectors, got {ud.shape} and {vd.shape}")
    nu = float(np.linalg.norm(ud))
    nv = float(np.linalg.norm(vd))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine_similarity: zero vector")
    c = float(ud @ vd) / (nu * nv)
    return min(1.0, max(-1.0, c))


# ---------------------------------------------------------------------------
# snapshot container
#
# Layout (little-endian):
#   magic "BRTS1\n"
#   u32   tensor count
#   per tensor:
#     u16  name length, then UTF-8 name
#     u8   ndim, then ndim x u64 dims
#     float64 values, row-major

SNAPSHOT_MAGIC = b"BRTS1\n"


def write_snapshot(fh, named: dict[str, np.ndarray]) -> None:
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", a.ndim))
        for d in a.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(a.tobytes(order="C"))


def read_snapshot(fh) -> dict[str, np.ndarray]:
    magic = fh.read(len(SNAPSHOT_MAGIC))
    if magic != SNAPSHOT_MAGIC:
        raise ParseError("bad snapshot magic")
    (count,) = struct.unpack("<I", fh.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
        n = 1
        for d in dims:
            n *= d
        buf = fh.read(8 * n)
        if len(buf) != 8 * n:
            raise ParseError(f"snapshot truncated while reading tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    return out


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_snapshot(fh, named)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_snapshot(fh)
