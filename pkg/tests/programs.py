"""Random programs over the shared operator set, for AD cross-checks.

A program is a list of instructions built once from a numpy Generator; the
same list can then be evaluated on a Tensor, a DualTensor or a tape Var.
"""

from __future__ import annotations

import numpy as np

from fwdguide.numerics import Tensor, add_row, concat

SHAPE = (3, 2)

UNARY = ("relu", "square", "scale", "matmul_right", "matmul_left", "add_row_const",
         "rows_concat", "reshape_roundtrip")
BINARY = ("add", "sub", "mul", "add_row_traced")
HEADS = ("sum", "mean", "norm", "row_sum_square")


def make_program(rng: np.random.Generator, depth: int):
    """Instructions ``(op, operand indices, constant)``; slot 0 is the input."""
    instrs = []
    for k in range(depth):
        live = k + 1
        if rng.random() < 0.4 and live >= 1:
            op = BINARY[rng.integers(len(BINARY))]
            args = (int(rng.integers(live)), int(rng.integers(live)))
            const = None
        else:
            op = UNARY[rng.integers(len(UNARY))]
            args = (int(rng.integers(live)),)
            const = {
                "scale": float(rng.uniform(-1.5, 1.5)),
                "matmul_right": Tensor(rng.normal(0, 0.7, (2, 2))),
                "matmul_left": Tensor(rng.normal(0, 0.5, (3, 3))),
                "add_row_const": Tensor(rng.normal(0, 0.5, 2)),
                "rows_concat": [int(i) for i in rng.permutation(3)],
            }.get(op)
        instrs.append((op, args, const))
    head = HEADS[rng.integers(len(HEADS))]
    return instrs, head


def _apply(op, xs, const):
    a = xs[0]
    if op == "relu":
        return a.relu()
    if op == "square":
        return a.square() * 0.5
    if op == "scale":
        return a * const
    if op == "matmul_right":
        return a @ const
    if op == "matmul_left":
        return const @ a
    if op == "add_row_const":
        return add_row(a, const)
    if op == "rows_concat":
        return concat([a.rows(const[:2]), a.rows(const[2:])], axis=0)
    if op == "reshape_roundtrip":
        return a.reshape(6).reshape(3, 2)
    b = xs[1]
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "add_row_traced":
        return add_row(a, b.mean(axis=0))
    raise ValueError(op)


def run_program(program, x):
    instrs, head = program
    slots = [x]
    for op, args, const in instrs:
        slots.append(_apply(op, [slots[i] for i in args], const))
    out = slots[-1]
    if head == "sum":
        return out.sum()
    if head == "mean":
        return out.mean()
    if head == "norm":
        return out.norm()
    return out.sum(axis=1).square().sum()


def near_kink(program, x: np.ndarray, margin: float = 1e-4) -> bool:
    """True if some relu input sits within ``margin`` of zero (finite differences unreliable there)."""
    instrs, _ = program
    slots = [Tensor(x)]
    for op, args, const in instrs:
        xs = [slots[i] for i in args]
        if op == "relu" and np.any(np.abs(xs[0].numpy()) < margin):
            return True
        slots.append(_apply(op, xs, const))
    return False
