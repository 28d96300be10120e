"""Dense float64 tensors, seeded random streams and live-scalar accounting.

Every other module computes through :class:`Tensor`.  Tensors are immutable
wrappers over C-contiguous ``float64`` numpy arrays.  Each one registers its
size with the active :class:`MemMeter` (if any) when it is created and
releases it when it is garbage collected, so the meter reports how many float
slots are alive at any instant.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import zlib
from typing import Iterable, Sequence

import numpy as np

from . import _kernels


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


Number = (int, float, np.floating, np.integer)


# --------------------------------------------------------------------------
# memory accounting
# --------------------------------------------------------------------------

_ACTIVE_METER: contextvars.ContextVar["MemMeter | None"] = contextvars.ContextVar(
    "fwdguide_active_meter", default=None
)


class MemMeter:
    """Counts float slots held by live tensors.

    Tensors created while the meter is active (``with meter.activate():``)
    are charged to it for their whole lifetime, even if they outlive the
    ``with`` block.  Reverse-mode tapes additionally report the slots they
    retain under a tag, so a caller can tell tape memory apart from ordinary
    temporaries.
    """

    def __init__(self) -> None:
        self.live_scalars = 0
        self.peak_scalars = 0
        self.total_allocated = 0
        self._tape_live: dict[str, int] = {}
        self._tape_peak: dict[str, int] = {}

    def alloc(self, n: int) -> None:
        self.live_scalars += n
        self.total_allocated += n
        if self.live_scalars > self.peak_scalars:
            self.peak_scalars = self.live_scalars

    def release(self, n: int) -> None:
        self.live_scalars -= n

    def tape_retain(self, n: int, tag: str) -> None:
        live = self._tape_live.get(tag, 0) + n
        self._tape_live[tag] = live
        if live > self._tape_peak.get(tag, 0):
            self._tape_peak[tag] = live

    def tape_release(self, n: int, tag: str) -> None:
        self._tape_live[tag] = self._tape_live.get(tag, 0) - n

    def tape_live(self, tag: str | None = None) -> int:
        if tag is None:
            return sum(self._tape_live.values())
        return self._tape_live.get(tag, 0)

    def tape_peak(self, tag: str | None = None) -> int:
        if tag is None:
            return sum(self._tape_peak.values())
        return self._tape_peak.get(tag, 0)

    def reset(self) -> None:
        """Restart peak and cumulative counters from the current live state."""
        self.peak_scalars = self.live_scalars
        self.total_allocated = 0
        self._tape_peak = {k: v for k, v in self._tape_live.items() if v}

    @contextlib.contextmanager
    def activate(self):
        token = _ACTIVE_METER.set(self)
        try:
            yield self
        finally:
            _ACTIVE_METER.reset(token)

    def __repr__(self) -> str:
        return (
            f"MemMeter(live={self.live_scalars}, peak={self.peak_scalars}, "
            f"total={self.total_allocated}, tape_peak={self.tape_peak()})"
        )


def active_meter() -> MemMeter | None:
    return _ACTIVE_METER.get()


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


def _shape_str(shape) -> str:
    return "(" + ", ".join(str(d) for d in shape) + ")"


class Tensor:
    """Immutable dense array of float64 values.

    ``Tensor(data)`` copies ``data``.  Arithmetic operators cover the small
    op set the rest of the package needs; binary operators require equal
    shapes and only broadcast plain Python/numpy scalars.
    """

    __slots__ = ("_data", "_meter", "__weakref__")
    __array_ufunc__ = None  # keep numpy from swallowing mixed expressions

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self._init(arr)

    def _init(self, arr: np.ndarray) -> None:
        if arr.size and not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor of shape {_shape_str(arr.shape)}")
        arr.flags.writeable = False
        self._data = arr
        meter = _ACTIVE_METER.get()
        self._meter = meter
        if meter is not None:
            meter.alloc(arr.size)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # arr must be a fresh float64 array nobody else holds
        t = cls.__new__(cls)
        if type(arr) is not np.ndarray:
            arr = np.array(arr, dtype=np.float64)  # 0-d results come back as numpy scalars
        elif arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        t._init(arr)
        return t

    def __del__(self) -> None:
        meter = getattr(self, "_meter", None)
        if meter is not None:
            meter.release(self._data.size)

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    def tolist(self):
        return self._data.tolist()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {_shape_str(self.shape)}")
        return float(self._data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        if not self._data.ndim:
            raise TypeError("len() of a 0-d tensor")
        return self._data.shape[0]

    def __repr__(self) -> str:
        body = np.array2string(self._data, precision=6, threshold=12)
        return f"Tensor({body}, shape={_shape_str(self.shape)})"

    # -- elementwise --------------------------------------------------------

    def _binary_operand(self, other, opname):
        if isinstance(other, Tensor):
            if other._data.shape != self._data.shape:
                raise ContractError(
                    f"{opname}: shape mismatch {_shape_str(self.shape)} vs {_shape_str(other.shape)}"
                )
            return other._data
        if isinstance(other, Number):
            return float(other)
        return None

    def __add__(self, other):
        o = self._binary_operand(other, "add")
        if o is None:
            return NotImplemented
        return Tensor._wrap(self._data + o)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._binary_operand(other, "sub")
        if o is None:
            return NotImplemented
        return Tensor._wrap(self._data - o)

    def __rsub__(self, other):
        o = self._binary_operand(other, "sub")
        if o is None:
            return NotImplemented
        return Tensor._wrap(o - self._data)

    def __mul__(self, other):
        o = self._binary_operand(other, "mul")
        if o is None:
            return NotImplemented
        return Tensor._wrap(self._data * o)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Number):
            return NotImplemented
        return Tensor._wrap(self._data / float(other))

    def __neg__(self):
        return Tensor._wrap(-self._data)

    def relu(self) -> "Tensor":
        return Tensor._wrap(np.maximum(self._data, 0.0))

    def square(self) -> "Tensor":
        return Tensor._wrap(self._data * self._data)

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        a, b = self._data, other._data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractError(
                f"matmul: incompatible shapes {_shape_str(a.shape)} and {_shape_str(b.shape)}"
            )
        return Tensor._wrap(a @ b)

    def add_row(self, row: "Tensor") -> "Tensor":
        """Add a length-k vector to every row of an [n, k] tensor."""
        if not isinstance(row, Tensor):
            return NotImplemented
        _check_add_row(self.shape, row.shape)
        return Tensor._wrap(self._data + row._data)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        axis = _check_axis(self.shape, axis, "sum")
        return Tensor._wrap(self._data.sum(axis=axis))

    def mean(self, axis: int | None = None) -> "Tensor":
        axis = _check_axis(self.shape, axis, "mean")
        count = self.size if axis is None else self.shape[axis]
        if count == 0 or self.size == 0:
            raise ContractError("mean of an empty tensor")
        return Tensor._wrap(self._data.sum(axis=axis) / count)

    def norm(self) -> "Tensor":
        d = self._data.reshape(-1)
        return Tensor._wrap(math.sqrt(float(d @ d)))

    # -- structure --------------------------------------------------------------

    def rows(self, index: Sequence[int]) -> "Tensor":
        idx = _check_rows(self.shape, index)
        return Tensor._wrap(self._data[idx])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if math.prod(shape) != self.size:
            raise ContractError(f"reshape: cannot view {_shape_str(self.shape)} as {_shape_str(shape)}")
        return Tensor._wrap(self._data.reshape(shape).copy())

    # -- plain-only helpers (not differentiable) ----------------------------------

    def exp(self) -> "Tensor":
        return Tensor._wrap(np.exp(self._data))

    def sqrt(self) -> "Tensor":
        if (self._data < 0).any():
            raise ContractError("sqrt of a negative value")
        return Tensor._wrap(np.sqrt(self._data))


# -- validation helpers shared with the AD engines -------------------------------


def _check_axis(shape, axis, opname):
    if axis is None:
        return None
    nd = len(shape)
    if not isinstance(axis, (int, np.integer)) or not -nd <= axis < nd:
        raise ContractError(f"{opname}: axis {axis!r} out of range for shape {_shape_str(shape)}")
    return int(axis) % nd


def _check_add_row(shape, row_shape):
    if len(shape) != 2 or row_shape != (shape[1],):
        raise ContractError(
            f"add_row: expected [n, k] and [k], got {_shape_str(shape)} and {_shape_str(row_shape)}"
        )


def _check_rows(shape, index):
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if not shape or (idx.size and (idx.min() < 0 or idx.max() >= shape[0])):
        raise ContractError(f"rows: index out of range for shape {_shape_str(shape)}")
    return idx


def _check_concat(shapes, axis):
    if not shapes:
        raise ContractError("concat of zero tensors")
    nd = len(shapes[0])
    if not -nd <= axis < nd:
        raise ContractError(f"concat: axis {axis} out of range")
    axis %= nd
    for s in shapes[1:]:
        if len(s) != nd or any(a != b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != axis):
            raise ContractError(
                "concat: incompatible shapes " + ", ".join(_shape_str(x) for x in shapes)
            )
    return axis


# --------------------------------------------------------------------------
# functional surface (dispatches to whatever kind of value it is handed)
# --------------------------------------------------------------------------

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "relu", "square")


def elementwise(op: str, a, b=None):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "scale":
        if not isinstance(b, Number):
            raise ContractError("scale needs a numeric constant")
        return a * float(b)
    if op == "relu":
        return a.relu()
    if op == "square":
        return a.square()
    raise ContractError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")


def relu(a):
    return a.relu()


def square(a):
    return a.square()


def matmul(a, b):
    return a @ b


def add_row(a, row):
    out = a.add_row(row)
    if out is NotImplemented:
        # constant matrix plus a traced row vector
        out = row.radd_row(a)
    return out


def reduce(op: str, a, axis: int | None = None):
    if op == "sum":
        return a.sum(axis)
    if op == "mean":
        return a.mean(axis)
    raise ContractError(f"unknown reduction {op!r}")


def frobenius_norm(a):
    return a.norm()


def rows(a, index):
    return a.rows(index)


def concat(parts: Sequence, axis: int = 0):
    """Concatenate tensors (plain, dual or traced) along ``axis``."""
    parts = list(parts)
    for p in parts:
        hook = getattr(type(p), "_concat", None)
        if hook is not None and not isinstance(p, Tensor):
            return hook(parts, axis)
    axis = _check_concat([p.shape for p in parts], axis)
    return Tensor._wrap(np.concatenate([p._data for p in parts], axis=axis))


# plain-tensor helpers outside the differentiable op set


def zeros(*shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor._wrap(np.zeros(shape))


def ones(*shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor._wrap(np.ones(shape))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n))


def dot(a: Tensor, b: Tensor) -> float:
    if a.shape != b.shape:
        raise ContractError(f"dot: shape mismatch {_shape_str(a.shape)} vs {_shape_str(b.shape)}")
    return float(a.numpy().reshape(-1) @ b.numpy().reshape(-1))


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of an [n, k] tensor by w[i]."""
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise ContractError(
            f"scale_rows: expected [n, k] and [n], got {_shape_str(a.shape)} and {_shape_str(w.shape)}"
        )
    return Tensor._wrap(a.numpy() * w.numpy()[:, None])


def row_norms(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ContractError("row_norms expects a 2-D tensor")
    d = a.numpy()
    return Tensor._wrap(np.sqrt(np.einsum("ij,ij->i", d, d)))


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat the rows of ``a`` cyclically until there are ``n`` of them."""
    if a.ndim != 2 or a.shape[0] < 1 or n < 1:
        raise ContractError("tile_rows expects a non-empty 2-D tensor and n >= 1")
    idx = np.arange(n) % a.shape[0]
    return Tensor._wrap(a.numpy()[idx])


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def _stream_key(seed: int, stream: str) -> np.ndarray:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())])
    return ss.generate_state(2, dtype=np.uint64)


class RngState:
    """A named Philox stream derived from a 64-bit seed.

    Philox is counter based, so ``position`` (the block counter) fully locates
    the stream; equal ``(seed, stream)`` pairs replay identical draws on any
    platform.  Independent consumers take their own :meth:`substream` instead
    of sharing one generator.
    """

    def __init__(self, seed: int, stream: str = "root") -> None:
        if not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ContractError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed)
        self.stream = stream
        self._bitgen = np.random.Philox(key=_stream_key(self.seed, stream))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def position(self) -> int:
        st = self._bitgen.state["state"]["counter"]
        return int(st[0]) | (int(st[1]) << 64)

    def substream(self, name: str) -> "RngState":
        return RngState(self.seed, f"{self.stream}/{name}")

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` in draw order."""
        if not 1 <= k <= n:
            raise ContractError(f"cannot choose {k} distinct items from {n}")
        return self._gen.permutation(n)[:k]

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream!r}, position={self.position})"


def gaussian(rng: RngState, shape) -> Tensor:
    """Standard normal tensor; advances ``rng``."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ContractError(f"invalid shape {_shape_str(shape)}")
    return Tensor._wrap(rng.normal(shape))


def uniform(rng: RngState, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
    return Tensor._wrap(rng.uniform(shape, low, high))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stack_rows(items: Iterable[Tensor]) -> Tensor:
    return Tensor._wrap(np.stack([t.numpy() for t in items]))


# used by the AD engines for relu
relu_mask = _kernels.relu_mask
