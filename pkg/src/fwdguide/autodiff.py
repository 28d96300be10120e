"""Forward-mode (dual tensor) and reverse-mode (tape) differentiation.

Programs are ordinary Python functions written against the tensor operator
set: ``+ - * @``, ``relu``, ``square``, ``sum``, ``mean``, ``norm``,
``rows``, ``add_row``, ``reshape`` and :func:`numerics.concat`.  The same
program runs on plain :class:`Tensor` values, on :class:`DualTensor` values
(forward mode) and on tape-recorded :class:`Var` values (reverse mode).
Plain tensors that meet a traced value are treated as constants.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import (
    ContractError,
    Number,
    Tensor,
    _check_add_row,
    _check_axis,
    _check_concat,
    _check_rows,
    _shape_str,
    active_meter,
    relu_mask,
)


class UnsupportedOperationError(TypeError):
    """A differentiated program used an operation outside the supported set."""


def _unsupported(name):
    def method(self, *args, **kwargs):
        raise UnsupportedOperationError(
            f"{name} is not differentiable here; supported ops are + - * @, relu, square, "
            "sum, mean, norm, rows, add_row, reshape and concat"
        )

    method.__name__ = name
    return method


class _Traced:
    """Behaviour shared by dual and tape values: no escape hatches to floats."""

    __slots__ = ()
    __array_ufunc__ = None

    __float__ = _unsupported("float()")
    __bool__ = _unsupported("bool()")
    __array__ = _unsupported("numpy conversion")
    item = _unsupported("item()")
    numpy = _unsupported("numpy()")
    exp = _unsupported("exp")
    sqrt = _unsupported("sqrt")
    __pow__ = _unsupported("**")
    __abs__ = _unsupported("abs")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def __truediv__(self, other):
        if not isinstance(other, Number):
            raise UnsupportedOperationError("division is only supported by a numeric constant")
        return self * (1.0 / float(other))

    def __neg__(self):
        return self * -1.0

    def __rsub__(self, other):
        return (-self) + other


# ==========================================================================
# forward mode
# ==========================================================================


class DualTensor(_Traced):
    """A primal tensor paired with a same-shaped tangent."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Tensor, tangent: Tensor) -> None:
        if primal.shape != tangent.shape:
            raise ContractError(
                f"dual tensor needs matching shapes, got {_shape_str(primal.shape)} "
                f"and {_shape_str(tangent.shape)}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    def __repr__(self) -> str:
        return f"DualTensor(shape={_shape_str(self.shape)})"

    @staticmethod
    def _other(other):
        if isinstance(other, DualTensor):
            return other.primal, other.tangent
        if isinstance(other, (Tensor,) + Number):
            return other, None
        if isinstance(other, Var):
            raise UnsupportedOperationError("cannot mix forward-mode and reverse-mode values")
        return None, None

    def __add__(self, other):
        p, t = self._other(other)
        if p is None:
            return NotImplemented
        tangent = self.tangent if t is None else self.tangent + t
        return DualTensor(self.primal + p, tangent)

    __radd__ = __add__

    def __sub__(self, other):
        p, t = self._other(other)
        if p is None:
            return NotImplemented
        tangent = self.tangent if t is None else self.tangent - t
        return DualTensor(self.primal - p, tangent)

    def __mul__(self, other):
        p, t = self._other(other)
        if p is None:
            return NotImplemented
        if t is None:
            return DualTensor(self.primal * p, self.tangent * p)
        a, da = self.primal.numpy(), self.tangent.numpy()
        b, db = p.numpy(), t.numpy()
        return DualTensor(self.primal * p, Tensor._wrap(da * b + a * db))

    __rmul__ = __mul__

    def __matmul__(self, other):
        p, t = self._other(other)
        if p is None or isinstance(p, Number):
            return NotImplemented
        out = self.primal @ p
        if t is None:
            return DualTensor(out, self.tangent @ p)
        tan = self.tangent.numpy() @ p.numpy() + self.primal.numpy() @ t.numpy()
        return DualTensor(out, Tensor._wrap(tan))

    def __rmatmul__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return DualTensor(other @ self.primal, other @ self.tangent)

    def relu(self):
        a = self.primal.numpy()
        return DualTensor(self.primal.relu(), Tensor._wrap(relu_mask(a, self.tangent.numpy())))

    def square(self):
        a = self.primal.numpy()
        return DualTensor(self.primal.square(), Tensor._wrap(2.0 * a * self.tangent.numpy()))

    def add_row(self, row):
        p, t = self._other(row)
        if p is None or isinstance(p, Number):
            return NotImplemented
        out = self.primal.add_row(p)
        return DualTensor(out, self.tangent if t is None else self.tangent.add_row(t))

    def radd_row(self, mat: Tensor):
        # constant [n, k] matrix plus this traced [k] row
        _check_add_row(mat.shape, self.shape)
        tan = np.broadcast_to(self.tangent.numpy(), mat.shape).copy()
        return DualTensor(mat.add_row(self.primal), Tensor._wrap(tan))

    def sum(self, axis=None):
        return DualTensor(self.primal.sum(axis), self.tangent.sum(axis))

    def mean(self, axis=None):
        return DualTensor(self.primal.mean(axis), self.tangent.mean(axis))

    def norm(self):
        out = self.primal.norm()
        n = out.item()
        if n == 0.0:
            # one-sided directional derivative of the norm at the origin
            tan = self.tangent.norm()
        else:
            a = self.primal.numpy().reshape(-1)
            tan = Tensor._wrap(float(a @ self.tangent.numpy().reshape(-1)) / n)
        return DualTensor(out, tan)

    def rows(self, index):
        return DualTensor(self.primal.rows(index), self.tangent.rows(index))

    def reshape(self, *shape):
        return DualTensor(self.primal.reshape(*shape), self.tangent.reshape(*shape))

    @staticmethod
    def _concat(parts, axis):
        shapes = [p.shape for p in parts]
        axis = _check_concat(shapes, axis)
        prim, tans = [], []
        for p in parts:
            if isinstance(p, DualTensor):
                prim.append(p.primal.numpy())
                tans.append(p.tangent.numpy())
            elif isinstance(p, Tensor):
                prim.append(p.numpy())
                tans.append(np.zeros(p.shape))
            else:
                raise UnsupportedOperationError(f"cannot concat {type(p).__name__} with dual tensors")
        return DualTensor(
            Tensor._wrap(np.concatenate(prim, axis=axis)),
            Tensor._wrap(np.concatenate(tans, axis=axis)),
        )


def jvp(program: Callable, x: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Evaluate ``program(x)`` and its directional derivative along ``v``.

    One forward pass; no graph is retained.  Returns ``(value, directional)``
    as tensors shaped like the program output (0-d for scalar programs).
    """
    if not isinstance(x, Tensor) or not isinstance(v, Tensor):
        raise ContractError("jvp expects Tensor inputs")
    if x.shape != v.shape:
        raise ContractError(f"jvp: tangent shape {_shape_str(v.shape)} != input shape {_shape_str(x.shape)}")
    out = program(DualTensor(x, v))
    if isinstance(out, DualTensor):
        return out.primal, out.tangent
    if isinstance(out, Tensor):
        return out, Tensor._wrap(np.zeros(out.shape))
    raise UnsupportedOperationError(f"program returned {type(out).__name__}, expected a tensor")


# ==========================================================================
# reverse mode
# ==========================================================================


def _fwd(op: str, args: Sequence, aux):
    """Primal evaluation shared by recording and replay."""
    if op == "add":
        return args[0] + args[1]
    if op == "sub":
        return args[0] - args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "matmul":
        return args[0] @ args[1]
    if op == "relu":
        return args[0].relu()
    if op == "square":
        return args[0].square()
    if op == "add_row":
        return args[0].add_row(args[1])
    if op == "sum":
        return args[0].sum(aux)
    if op == "mean":
        return args[0].mean(aux)
    if op == "norm":
        return args[0].norm()
    if op == "rows":
        return args[0].rows(aux)
    if op == "reshape":
        return args[0].reshape(aux)
    if op == "concat":
        return Tensor._wrap(np.concatenate([a.numpy() for a in args], axis=aux))
    raise UnsupportedOperationError(op)


def _arr(v):
    return v.numpy() if isinstance(v, Tensor) else v


def _unbroadcast_reduction(g, shape, axis):
    if axis is None:
        return np.full(shape, float(g))
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _vjp(op: str, g: np.ndarray, args: Sequence, out: Tensor, aux) -> list:
    """Cotangents for each argument of one node (``None`` where not needed)."""
    if op == "add":
        return [g, g]
    if op == "sub":
        return [g, -g]
    if op == "mul":
        a, b = _arr(args[0]), _arr(args[1])
        return [g * b, g * a]
    if op == "matmul":
        a, b = _arr(args[0]), _arr(args[1])
        return [g @ b.T, a.T @ g]
    if op == "relu":
        return [relu_mask(_arr(args[0]), g)]
    if op == "square":
        return [2.0 * _arr(args[0]) * g]
    if op == "add_row":
        return [g, g.sum(axis=0)]
    if op == "sum":
        return [_unbroadcast_reduction(g, args[0].shape, aux)]
    if op == "mean":
        shape = args[0].shape
        count = int(np.prod(shape)) if aux is None else shape[aux]
        return [_unbroadcast_reduction(g, shape, aux) / count]
    if op == "norm":
        n = out.item()
        a = _arr(args[0])
        if n == 0.0:
            return [np.zeros_like(a)]
        return [a * (float(g) / n)]
    if op == "rows":
        ga = np.zeros(args[0].shape)
        np.add.at(ga, aux, g)
        return [ga]
    if op == "reshape":
        return [g.reshape(args[0].shape)]
    if op == "concat":
        cuts = np.cumsum([a.shape[aux] for a in args])[:-1]
        return list(np.split(g, cuts, axis=aux))
    raise UnsupportedOperationError(op)


class _Node:
    __slots__ = ("op", "args", "aux", "value")

    def __init__(self, op, args, aux, value):
        self.op = op
        self.args = args  # node indices (int) or constants (Tensor / float)
        self.aux = aux
        self.value = value


class Tape:
    """Ordered record of reverse-mode nodes for one differentiation call.

    Every node keeps its primal output until :meth:`release`; the retained
    float slots are reported to the active meter under ``tag``.
    """

    created = 0  # process-wide count, lets callers prove a code path built no tape

    def __init__(self, tag: str = "tape") -> None:
        Tape.created += 1
        self.tag = tag
        self.nodes: list[_Node] = []
        self.inputs: list[int] = []
        self._meter = active_meter()
        self._retained = 0

    def _push(self, op, args, aux, value) -> "Var":
        self.nodes.append(_Node(op, tuple(args), aux, value))
        self._retained += value.size
        if self._meter is not None:
            self._meter.tape_retain(value.size, self.tag)
        return Var(value, self, len(self.nodes) - 1)

    def input(self, value: Tensor) -> "Var":
        var = self._push("input", (), None, value)
        self.inputs.append(var.index)
        return var

    def record(self, op: str, args: Sequence, aux=None) -> "Var":
        vals = [self.nodes[a].value if isinstance(a, int) else a for a in args]
        return self._push(op, args, aux, _fwd(op, vals, aux))

    @property
    def retained_scalars(self) -> int:
        return self._retained

    def backward(self, out: "Var", wanted: Sequence[int]) -> dict[int, Tensor]:
        if out.tape is not self:
            raise ContractError("output was not recorded on this tape")
        if out.value.size != 1:
            raise ContractError(f"reverse mode needs a scalar output, got shape {_shape_str(out.value.shape)}")
        keep = set(wanted)
        grads: list[Tensor | None] = [None] * len(self.nodes)
        grads[out.index] = Tensor._wrap(np.ones(out.value.shape))
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.op == "input":
                continue
            if i not in keep:
                grads[i] = None
            vals = [self.nodes[a].value if isinstance(a, int) else a for a in node.args]
            cots = _vjp(node.op, g.numpy(), vals, node.value, node.aux)
            del g
            for a, c in zip(node.args, cots):
                if not isinstance(a, int) or c is None:
                    continue
                prev = grads[a]
                if prev is None:
                    grads[a] = Tensor._wrap(np.array(c, dtype=np.float64))
                else:
                    grads[a] = Tensor._wrap(prev.numpy() + c)
        return {i: grads[i] if grads[i] is not None else Tensor._wrap(np.zeros(self.nodes[i].value.shape))
                for i in wanted}

    def replay(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        """Recompute every node from fresh input values, in record order."""
        if len(inputs) != len(self.inputs):
            raise ContractError("replay needs one value per tape input")
        feed = dict(zip(self.inputs, inputs))
        values: list[Tensor] = []
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                values.append(feed[i])
                continue
            vals = [values[a] if isinstance(a, int) else a for a in node.args]
            values.append(_fwd(node.op, vals, node.aux))
        return values

    def release(self) -> None:
        if self._meter is not None and self._retained:
            self._meter.tape_release(self._retained, self.tag)
        self._retained = 0
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Var(_Traced):
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: Tensor, tape: Tape, index: int) -> None:
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={_shape_str(self.shape)})"

    def _arg(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise UnsupportedOperationError("values from different tapes cannot be combined")
            return other.index
        if isinstance(other, Tensor):
            return other
        if isinstance(other, Number):
            return float(other)
        if isinstance(other, DualTensor):
            raise UnsupportedOperationError("cannot mix forward-mode and reverse-mode values")
        return None

    def _check_same_shape(self, other, opname):
        shape = other.shape if isinstance(other, (Var, Tensor)) else None
        if shape is not None and shape != self.shape:
            raise ContractError(f"{opname}: shape mismatch {_shape_str(self.shape)} vs {_shape_str(shape)}")

    def _binary(self, op, other, reverse=False):
        a = self._arg(other)
        if a is None:
            return NotImplemented
        self._check_same_shape(other, op)
        args = (a, self.index) if reverse else (self.index, a)
        return self.tape.record(op, args)

    def __add__(self, other):
        return self._binary("add", other)

    def __radd__(self, other):
        return self._binary("add", other, reverse=True)

    def __sub__(self, other):
        return self._binary("sub", other)

    def __rsub__(self, other):
        return self._binary("sub", other, reverse=True)

    def __mul__(self, other):
        return self._binary("mul", other)

    def __rmul__(self, other):
        return self._binary("mul", other, reverse=True)

    def __matmul__(self, other):
        a = self._arg(other)
        if a is None or isinstance(a, float):
            return NotImplemented
        return self.tape.record("matmul", (self.index, a))

    def __rmatmul__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.tape.record("matmul", (other, self.index))

    def relu(self):
        return self.tape.record("relu", (self.index,))

    def square(self):
        return self.tape.record("square", (self.index,))

    def add_row(self, row):
        a = self._arg(row)
        if a is None or isinstance(a, float):
            return NotImplemented
        _check_add_row(self.shape, row.shape)
        return self.tape.record("add_row", (self.index, a))

    def radd_row(self, mat: Tensor):
        _check_add_row(mat.shape, self.shape)
        return self.tape.record("add_row", (mat, self.index))

    def sum(self, axis=None):
        return self.tape.record("sum", (self.index,), _check_axis(self.shape, axis, "sum"))

    def mean(self, axis=None):
        return self.tape.record("mean", (self.index,), _check_axis(self.shape, axis, "mean"))

    def norm(self):
        return self.tape.record("norm", (self.index,))

    def rows(self, index):
        return self.tape.record("rows", (self.index,), _check_rows(self.shape, index))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", (self.index,), tuple(shape))

    @staticmethod
    def _concat(parts, axis):
        tape = next(p.tape for p in parts if isinstance(p, Var))
        axis = _check_concat([p.shape for p in parts], axis)
        args = []
        for p in parts:
            if isinstance(p, Var):
                if p.tape is not tape:
                    raise UnsupportedOperationError("values from different tapes cannot be combined")
                args.append(p.index)
            elif isinstance(p, Tensor):
                args.append(p)
            else:
                raise UnsupportedOperationError(f"cannot concat {type(p).__name__} with traced values")
        return tape.record("concat", args, axis)


def value_and_grad(program: Callable, x, *, tag: str = "tape"):
    """Reverse-mode value and gradient of a scalar program.

    ``x`` is a Tensor (``program(x)``) or a tuple of Tensors
    (``program(*x)``); gradients come back in the same structure.  The tape
    lives only for the duration of the call.
    """
    single = isinstance(x, Tensor)
    xs = (x,) if single else tuple(x)
    if not all(isinstance(t, Tensor) for t in xs):
        raise ContractError("grad expects Tensor inputs")
    tape = Tape(tag)
    try:
        ins = [tape.input(t) for t in xs]
        out = program(ins[0]) if single else program(*ins)
        if isinstance(out, Tensor):
            if out.size != 1:
                raise ContractError("grad needs a scalar-valued program")
            value = out
            grads = [Tensor._wrap(np.zeros(t.shape)) for t in xs]
        elif isinstance(out, Var):
            value = out.value
            table = tape.backward(out, [v.index for v in ins])
            grads = [table[v.index] for v in ins]
        else:
            raise UnsupportedOperationError(f"program returned {type(out).__name__}, expected a tensor")
    finally:
        tape.release()
    return value, (grads[0] if single else tuple(grads))


def grad(program: Callable, x, *, tag: str = "tape"):
    return value_and_grad(program, x, tag=tag)[1]


def record(program: Callable, x: Tensor, *, tag: str = "tape") -> tuple[Tape, Var]:
    """Run ``program`` under a fresh tape and hand back the live tape.

    The caller owns the tape and must :meth:`Tape.release` it.
    """
    tape = Tape(tag)
    out = program(tape.input(x))
    return tape, out


# ==========================================================================
# oracle
# ==========================================================================


def finite_diff(program: Callable, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar program, one coordinate at a time."""
    if not h > 0:
        raise ContractError(f"finite_diff step must be positive, got {h}")
    base = np.array(x.numpy(), dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(program(Tensor(base)))
        flat[i] = orig - h
        fm = float(program(Tensor(base)))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(out.reshape(base.shape))
