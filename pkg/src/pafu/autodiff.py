"""Reverse-mode differentiation over a flat, append-only tape.

A `Tape` records every operation in execution order; `backward` walks the
nodes in strict reverse order exactly once and accumulates gradients by
addition.  Gradients are computed in whatever float dtype the variables
carry: training runs float32, while `grad_check` re-evaluates everything
in a float64 shadow so central differences are trustworthy at eps=1e-3.

Backward rules live next to their forward ops and every differentiable op
must register itself through `taped_op`, which is what the registry
completeness test enumerates.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError, NumericError

# name -> op function, populated by @taped_op
OP_REGISTRY: dict[str, Callable] = {}


def taped_op(name: str):
    def deco(fn):
        fn.op_name = name
        OP_REGISTRY[name] = fn
        return fn
    return deco


class Variable:
    """A tensor value bound to a node of one tape."""

    __slots__ = ("value", "node_id", "requires_grad", "tape")

    def __init__(self, value: np.ndarray, node_id: int, requires_grad: bool, tape: "Tape"):
        self.value = value
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Variable(node={self.node_id}, shape={self.value.shape}, grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "input_ids", "backward_fn")

    def __init__(self, op: str, input_ids: tuple[int, ...], backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations; topological order == append order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grad_leaves: list[Variable] = []

    def variable(self, value, requires_grad: bool = False) -> Variable:
        value = np.ascontiguousarray(np.asarray(value))
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float32)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        var = Variable(value, node_id, requires_grad, self)
        if requires_grad:
            self._grad_leaves.append(var)
        return var

    def record(self, op: str, inputs: tuple[Variable, ...], value: np.ndarray, backward_fn) -> Variable:
        for v in inputs:
            if v.tape is not self:
                raise ContractError("all operands of a taped op must live on the same tape")
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(v.node_id for v in inputs), backward_fn))
        requires = any(v.requires_grad for v in inputs)
        return Variable(np.ascontiguousarray(value), node_id, requires, self)

    def backward(self, loss: Variable) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every requires-grad variable.

        Parameters the loss never touched map to zero tensors.  The pass is
        stateless, so calling it twice gives identical results.
        """
        if loss.tape is not self:
            raise ContractError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.value)
        }
        for node_id in range(loss.node_id, -1, -1):
            node = self.nodes[node_id]
            g = grads.get(node_id)
            if g is None or node.backward_fn is None:
                continue
            for input_id, gin in zip(node.input_ids, node.backward_fn(g)):
                if gin is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + gin
                else:
                    grads[input_id] = gin
        out: dict[int, np.ndarray] = {}
        for leaf in self._grad_leaves:
            if leaf.node_id <= loss.node_id and leaf.node_id in grads:
                out[leaf.node_id] = grads[leaf.node_id]
            else:
                out[leaf.node_id] = np.zeros_like(leaf.value)
        return out


def _same_tape(*vs: Variable) -> Tape:
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

@taped_op("add")
def add(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    value = tn.add(a.value, b.value)
    return tape.record("add", (a, b), value, lambda g: (g, g))


@taped_op("sub")
def sub(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    value = tn.sub(a.value, b.value)
    return tape.record("sub", (a, b), value, lambda g: (g, -g))


@taped_op("mul")
def mul(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    value = tn.mul(a.value, b.value)
    av, bv = a.value, b.value
    return tape.record("mul", (a, b), value, lambda g: (g * bv, g * av))


@taped_op("scale")
def scale(a: Variable, s: float) -> Variable:
    value = tn.scale(a.value, s)
    sv = a.value.dtype.type(s)
    return a.tape.record("scale", (a,), value, lambda g: (g * sv,))


@taped_op("relu")
def relu(a: Variable) -> Variable:
    value = tn.relu(a.value)
    mask = (a.value > 0).astype(a.value.dtype)
    return a.tape.record("relu", (a,), value, lambda g: (g * mask,))


@taped_op("abs")
def absolute(a: Variable) -> Variable:
    value = tn.absolute(a.value)
    sign = np.sign(a.value)
    return a.tape.record("abs", (a,), value, lambda g: (g * sign,))


@taped_op("bias_add")
def bias_add(x: Variable, b: Variable) -> Variable:
    """Add a per-channel bias vector b[C] to x[N,C,H,W]."""
    tape = _same_tape(x, b)
    if x.value.ndim != 4 or b.value.ndim != 1 or b.value.shape[0] != x.value.shape[1]:
        raise DimensionError(f"bias_add mismatch: x {x.value.shape}, b {b.value.shape}")
    value = x.value + b.value[None, :, None, None]
    return tape.record("bias_add", (x, b), value, lambda g: (g, g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

@taped_op("sum")
def total(a: Variable) -> Variable:
    value = np.asarray(a.value.sum(), dtype=a.value.dtype)
    shape = a.value.shape
    dtype = a.value.dtype
    return a.tape.record("sum", (a,), value, lambda g: (np.full(shape, g, dtype=dtype),))


@taped_op("mean")
def mean(a: Variable) -> Variable:
    value = np.asarray(a.value.mean(dtype=np.float64), dtype=a.value.dtype)
    shape = a.value.shape
    dtype = a.value.dtype
    inv = 1.0 / a.value.size
    return a.tape.record("mean", (a,), value, lambda g: (np.full(shape, g * inv, dtype=dtype),))


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

@taped_op("matmul")
def matmul(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    value = tn.matmul(a.value, b.value)
    av, bv = a.value, b.value
    return tape.record("matmul", (a, b), value, lambda g: (g @ bv.T, av.T @ g))


@taped_op("conv2d")
def conv2d(x: Variable, w: Variable, pad: str = "zero") -> Variable:
    tape = _same_tape(x, w)
    cout, cin, k, _ = w.value.shape
    value = tn.conv2d(x.value, w.value, pad)
    cols = tn.im2col(x.value, k, pad)
    wf = w.value.reshape(cout, -1)
    x_shape = x.value.shape

    def backward(g):
        n, _, h, wd = g.shape
        gf = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
        gw = (gf.T @ cols).reshape(cout, cin, k, k)
        gx = tn.col2im(gf @ wf, x_shape, k, pad)
        return gx, gw

    return tape.record("conv2d", (x, w), value, backward)


@taped_op("depth_to_space")
def depth_to_space(x: Variable, r: int) -> Variable:
    value = tn.depth_to_space(x.value, r)
    return x.tape.record("depth_to_space", (x,), value, lambda g: (tn.space_to_depth(g, r),))


@taped_op("space_to_depth")
def space_to_depth(x: Variable, r: int) -> Variable:
    value = tn.space_to_depth(x.value, r)
    return x.tape.record("space_to_depth", (x,), value, lambda g: (tn.depth_to_space(g, r),))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Variable], inputs, eps: float = 1e-3) -> float:
    """Compare tape gradients of a scalar function against central differences.

    `f` receives one Variable per input array and must return a scalar
    Variable on the same tape.  Inputs are copied to float64 so both the
    analytic pass and the difference quotients run in the shadow precision.
    Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    shadow = [np.array(x, dtype=np.float64) for x in inputs]

    tape = Tape()
    variables = [tape.variable(x, requires_grad=True) for x in shadow]
    out = f(*variables)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function produced a non-finite value")
    grads = tape.backward(out)
    analytic = [grads[v.node_id] for v in variables]

    def evaluate() -> float:
        t = Tape()
        vs = [t.variable(x) for x in shadow]
        val = f(*vs).value
        if not np.all(np.isfinite(val)):
            raise NumericError("function produced a non-finite value")
        return float(val)

    worst = 0.0
    for x, a in zip(shadow, analytic):
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            fp = evaluate()
            x[idx] = orig - eps
            fm = evaluate()
            x[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            an = float(a[idx])
            rel = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
            worst = max(worst, rel)
    return worst
