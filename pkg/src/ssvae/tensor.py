"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable operation goes through :func:`apply_primitive`, which looks
up a ``(forward, vjp)`` pair in :data:`PRIMITIVES` and, when an operand requires
gradients and a :class:`Tape` is active, appends a record to that tape. Records
are appended in evaluation order, so walking them backwards is a valid reverse
topological order.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them must be a scalar, or one shape must be a suffix of the
other (the shorter operand is repeated along leading batch dimensions).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NumericError",
    "TapeError",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "detach",
    "as_tensor",
    "precision",
    "get_dtype",
    "checked",
    "finite_difference_check",
    "GradCheckResult",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NumericError(FloatingPointError):
    """A primitive produced non-finite values while checked mode was on."""


class TapeError(RuntimeError):
    """Misuse of a differentiation tape (reuse, foreign loss, ...)."""


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Tape | None = None
        self.dtype = np.dtype(np.float32)
        self.checked = False


_state = _State()

_PRECISIONS = {"float32": np.float32, "float64": np.float64, "32": np.float32, "64": np.float64}


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(name: str | type) -> Iterator[None]:
    """Temporarily switch the default float dtype (``"float32"`` or ``"float64"``)."""
    dtype = np.dtype(_PRECISIONS[name] if isinstance(name, str) else name)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}")
    prev = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NumericError` whenever a primitive yields inf or nan."""
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    """An immutable n-dimensional float array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.node: tuple[Tape, int] | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.node = None
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

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, exp(-log(other)))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t: Tensor) -> Tensor:
    """Same values (shared memory), no tape node, no gradient flow."""
    return Tensor._wrap(t.data, False)


class _Record(NamedTuple):
    kind: str
    inputs: tuple[Tensor, ...]
    ctx: object


class Gradients:
    """Gradients of one backward pass, keyed by leaf tensor identity."""

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]) -> None:
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def array(self, t: Tensor) -> np.ndarray:
        """Gradient as an ndarray; zeros for a leaf the loss does not depend on."""
        entry = self._grads.get(id(t))
        if entry is None or entry[0] is not t:
            if not t.requires_grad:
                raise KeyError("tensor does not require grad")
            return np.zeros_like(t.data)
        return entry[1]

    def __getitem__(self, t: Tensor) -> Tensor:
        return Tensor._wrap(self.array(t), False)

    def get(self, t: Tensor) -> Tensor:
        return self[t]


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass.

    Use as a context manager; operations executed inside the block on tensors
    that require gradients are recorded.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self.consumed = False
        self._prev: list[Tape | None] = []

    def __enter__(self) -> Tape:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._prev.append(_state.tape)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, kind: str, inputs: tuple[Tensor, ...], ctx, out: Tensor) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out.node = (self, len(self._records))
        self._records.append(_Record(kind, inputs, ctx))

    def backward(self, loss: Tensor) -> Gradients:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        records = self._records
        node_grads: list[np.ndarray | None] = [None] * len(records)
        node_grads[loss.node[1]] = np.ones_like(loss.data)
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for i in range(loss.node[1], -1, -1):
            g = node_grads[i]
            if g is None:
                continue
            node_grads[i] = None
            kind, inputs, ctx = records[i]
            needs = tuple(t.requires_grad for t in inputs)
            in_grads = PRIMITIVES[kind].vjp(g, ctx, needs)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is not None:
                    j = t.node[1]
                    prev = node_grads[j]
                    node_grads[j] = gi if prev is None else prev + gi
                else:
                    prev_leaf = leaves.get(id(t))
                    leaves[id(t)] = (t, gi if prev_leaf is None else prev_leaf[1] + gi)
        self._records = []
        return Gradients(leaves)


def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar loss w.r.t. every requires-grad leaf on its tape."""
    if loss.node is None:
        raise TapeError("loss is not connected to a tape")
    return loss.node[0].backward(loss)


# ---------------------------------------------------------------------------
# primitives


class Primitive(NamedTuple):
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(kind: str):
    def register(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.vjp)
        return cls

    return register


def apply_primitive(kind: str, operands: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    ts = tuple(as_tensor(x) for x in operands)
    out, ctx = prim.forward(*(t.data for t in ts), **(attrs or {}))
    if _state.checked and not np.all(np.isfinite(out)):
        raise NumericError(f"{kind} produced non-finite values")
    tape = _state.tape
    if tape is not None and any(t.requires_grad for t in ts):
        res = Tensor._wrap(out, True)
        tape.record(kind, ts, ctx, res)
        return res
    return Tensor._wrap(out, False)


def _check_broadcast(kind: str, sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    la, lb = len(sa), len(sb)
    if la > lb and sa[la - lb:] == sb:
        return
    if lb > la and sb[lb - la:] == sa:
        return
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


@_primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a.shape, b.shape)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def vjp(g, ctx, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


@_primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast("sub", a.shape, b.shape)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def vjp(g, ctx, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None, -_unbroadcast(g, sb) if needs[1] else None)


@_primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a.shape, b.shape)
        return a * b, (a, b)

    @staticmethod
    def vjp(g, ctx, needs):
        a, b = ctx
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@_primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def vjp(g, ctx, needs):
        a, b = ctx
        ga = g @ b.T if needs[0] else None
        gb = None
        if needs[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb


@_primitive("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=-1):
        ref = arrays[0].shape
        ax = axis % len(ref)
        for x in arrays[1:]:
            if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
                raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
        sizes = np.cumsum([x.shape[ax] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=ax), (sizes, ax)

    @staticmethod
    def vjp(g, ctx, needs):
        sizes, ax = ctx
        parts = np.split(g, sizes, axis=ax)
        return tuple(p if n else None for p, n in zip(parts, needs))


@_primitive("slice")
class _Slice:
    @staticmethod
    def forward(a, key=()):
        return a[key], (a.shape, a.dtype, key)

    @staticmethod
    def vjp(g, ctx, needs):
        shape, dtype, key = ctx
        ga = np.zeros(shape, dtype=dtype)
        ga[key] = g
        return (ga,)


@_primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape=()):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    @staticmethod
    def vjp(g, ctx, needs):
        return (g.reshape(ctx),)


@_primitive("exp")
class _Exp:
    @staticmethod
    def forward(a):
        with np.errstate(over="ignore"):
            out = np.exp(a)
        return out, out

    @staticmethod
    def vjp(g, ctx, needs):
        return (g * ctx,)


@_primitive("log")
class _Log:
    @staticmethod
    def forward(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a), a

    @staticmethod
    def vjp(g, ctx, needs):
        return (g / ctx,)


@_primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(a):
        out = np.tanh(a)
        return out, out

    @staticmethod
    def vjp(g, ctx, needs):
        return (g * (1.0 - ctx * ctx),)


@_primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        out = expit(a)
        return out, out

    @staticmethod
    def vjp(g, ctx, needs):
        return (g * ctx * (1.0 - ctx),)


@_primitive("softplus")
class _Softplus:
    @staticmethod
    def forward(a):
        return np.logaddexp(0.0, a).astype(a.dtype, copy=False), a

    @staticmethod
    def vjp(g, ctx, needs):
        return (g * expit(ctx),)


@_primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(a, axis=-1):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    @staticmethod
    def vjp(g, ctx, needs):
        s, axis = ctx
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


@_primitive("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return out, (out, axis)

    @staticmethod
    def vjp(g, ctx, needs):
        out, axis = ctx
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@_primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), (a.shape, axis, keepdims)

    @staticmethod
    def vjp(g, ctx, needs):
        shape, axis, keepdims = ctx
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)


@_primitive("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        n = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis, keepdims=keepdims)), (a.shape, axis, keepdims, n)

    @staticmethod
    def vjp(g, ctx, needs):
        shape, axis, keepdims, n = ctx
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)


@_primitive("gather_rows")
class _GatherRows:
    """``table[ids]``; gradients of duplicate ids accumulate by addition."""

    @staticmethod
    def forward(table, ids=None, padding_idx=None):
        ids = np.asarray(ids)
        if table.ndim != 2:
            raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
        out = table[ids]
        if padding_idx is not None:
            out[ids == padding_idx] = 0.0
        return out, (table.shape, table.dtype, ids, padding_idx)

    @staticmethod
    def vjp(g, ctx, needs):
        shape, dtype, ids, padding_idx = ctx
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, shape[1]))
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        return (gt,)


@_primitive("pick")
class _Pick:
    """Select one entry per row along the last axis: ``a[..., index[...]]``."""

    @staticmethod
    def forward(a, index=None):
        index = np.asarray(index)
        if index.shape != a.shape[:-1]:
            raise ShapeError(f"pick: index shape {index.shape} does not match {a.shape[:-1]}")
        return np.take_along_axis(a, index[..., None], axis=-1)[..., 0], (a.shape, a.dtype, index)

    @staticmethod
    def vjp(g, ctx, needs):
        shape, dtype, index = ctx
        ga = np.zeros(shape, dtype=dtype)
        np.put_along_axis(ga, index[..., None], g[..., None], axis=-1)
        return (ga,)


def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a, b) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a, b) -> Tensor:
    return apply_primitive("mul", (a, b))


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def concat(ts: Sequence, axis: int = -1) -> Tensor:
    return apply_primitive("concat", ts, {"axis": axis})


def slice_(a, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    return apply_primitive("slice", (a,), {"key": key})


def reshape(a, shape) -> Tensor:
    return apply_primitive("reshape", (a,), {"shape": tuple(shape)})


def exp(a) -> Tensor:
    return apply_primitive("exp", (a,))


def log(a) -> Tensor:
    return apply_primitive("log", (a,))


def tanh(a) -> Tensor:
    return apply_primitive("tanh", (a,))


def sigmoid(a) -> Tensor:
    return apply_primitive("sigmoid", (a,))


def softplus(a) -> Tensor:
    return apply_primitive("softplus", (a,))


def softmax(a, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", (a,), {"axis": axis})


def log_softmax(a, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", (a,), {"axis": axis})


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("sum", (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("mean", (a,), {"axis": axis, "keepdims": keepdims})


def gather_rows(table, ids, padding_idx=None) -> Tensor:
    return apply_primitive("gather_rows", (table,), {"ids": ids, "padding_idx": padding_idx})


def pick(a, index) -> Tensor:
    return apply_primitive("pick", (a,), {"index": index})


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckResult:
    max_error: float
    n_checked: int
    worst: tuple[int, int] | None = None
    nonfinite: list[tuple[int, int]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_error

    @property
    def ok(self) -> bool:
        return not self.nonfinite


def _stencil(fn: Callable[[float], float], eps: float, order: int) -> float:
    if order == 2:
        return (fn(eps) - fn(-eps)) / (2 * eps)
    if order == 4:
        # pair the symmetric evaluations first so a flat direction gives exactly 0
        near = fn(eps) - fn(-eps)
        far = fn(2 * eps) - fn(-2 * eps)
        return (8 * near - far) / (12 * eps)
    if order == 6:
        d1 = fn(eps) - fn(-eps)
        d2 = fn(2 * eps) - fn(-2 * eps)
        d3 = fn(3 * eps) - fn(-3 * eps)
        return (45 * d1 - 9 * d2 + d3) / (60 * eps)
    raise ValueError("order must be 2, 4 or 6")


def finite_difference_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    eps: float = 1e-4,
    *,
    order: int = 4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``f(*point)`` to central differences.

    The error of a coordinate is ``|analytic - numeric| / max(|analytic|, floor)``.
    Everything runs in 64-bit. ``max_coords`` caps the coordinates checked per
    tensor (a seeded random subset).
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    with precision("float64"):
        base = [np.array(p.data, dtype=np.float64) for p in points]
        leaves = [Tensor(b, requires_grad=True) for b in base]
        with Tape() as tape:
            out = f(*leaves)
        if out.size != 1:
            raise ShapeError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
        grads = tape.backward(out)
        rng = np.random.default_rng(seed)
        worst, max_err, n = None, 0.0, 0
        nonfinite: list[tuple[int, int]] = []
        for k, b in enumerate(base):
            analytic = grads.array(leaves[k]).ravel()
            coords = np.arange(b.size)
            if max_coords is not None and b.size > max_coords:
                coords = np.sort(rng.choice(b.size, size=max_coords, replace=False))
            for c in coords:
                def shifted(delta, k=k, c=c):
                    arrs = [Tensor(x) for x in base]
                    moved = base[k].copy()
                    moved.flat[c] += delta
                    arrs[k] = Tensor(moved)
                    return f(*arrs).item()

                numeric = _stencil(shifted, eps, order)
                if not np.isfinite(numeric):
                    nonfinite.append((k, int(c)))
                    continue
                err = abs(analytic[c] - numeric) / max(abs(analytic[c]), floor)
                n += 1
                if err > max_err or worst is None:
                    max_err, worst = max(err, max_err), (k, int(c))
        return GradCheckResult(float(max_err), n, worst, nonfinite)
