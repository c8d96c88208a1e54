"""Reverse-mode automatic differentiation over small dense float64 tensors.

Values are numpy ``float64`` arrays: 0-d scalars, 1-d vectors, 2-d matrices.
Every operation evaluates eagerly and appends a :class:`Node` to an implicit
tape. ``grad`` runs the reverse sweep; because each backward rule is itself
written in terms of the exported operations, the returned gradients are
ordinary graph nodes, and passing ``create_graph=True`` keeps them attached
to the tape so ``grad`` can be applied to them again. Second- and
higher-order derivatives are therefore exact, never approximated.

Two deliberate restrictions keep shape bugs loud:

* no implicit broadcasting — binary elementwise ops require identical
  shapes, and ``replicate`` is the only promotion mechanism;
* every produced value is checked finite, raising :class:`NumericError`
  the moment an overflow or 0/0 enters the graph.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

_node_ids = itertools.count()

# A backward rule maps the adjoint of the output to one adjoint per parent,
# building graph nodes (not raw arrays) so gradients stay differentiable.
Vjp = Callable[["Node"], tuple["Node", ...]]


class Node:
    """One value in the computation graph.

    Leaves are either parameters (``is_param=True``, created via
    :func:`parameter`) or constants (:func:`constant`). Interior nodes
    remember their parents and the backward rule produced by the op that
    made them. ``value`` is an immutable float64 array.
    """

    __slots__ = ("id", "op", "parents", "value", "is_param", "name", "_vjp")

    def __init__(
        self,
        op: str,
        parents: Sequence["Node"],
        value: Array | float,
        *,
        is_param: bool = False,
        name: str | None = None,
        vjp: Vjp | None = None,
    ):
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"op '{op}' produced non-finite values")
        arr.setflags(write=False)
        self.id = next(_node_ids)
        self.op = op
        self.parents = tuple(parents)
        self.value = arr
        self.is_param = is_param
        self.name = name
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Node({tag}, shape={self.shape}, id={self.id})"

    # Minimal operator sugar; both operands must already be nodes.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __neg__(self) -> "Node":
        return neg(self)


def parameter(value: Array | float, name: str | None = None) -> Node:
    """Leaf registered as a differentiation target."""
    return Node("param", (), value, is_param=True, name=name)


def constant(value: Array | float, name: str | None = None) -> Node:
    """Leaf that never receives a gradient."""
    return Node("const", (), value, name=name)


def detach(a: Node, name: str | None = None) -> Node:
    """Copy of ``a``'s value as a fresh constant, cut off from the tape."""
    return Node("const", (), a.value, name=name or a.name)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _require_matrix(op: str, a: Node) -> None:
    if a.value.ndim != 2:
        raise ShapeError(f"{op}: expected a matrix, got shape {a.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return Node("add", (a, b), a.value + b.value, vjp=lambda g: (g, g))


def neg(a: Node) -> Node:
    return Node("neg", (a,), -a.value, vjp=lambda g: (neg(g),))


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def mul(a: Node, b: Node) -> Node:
    """Hadamard (elementwise) product."""
    _same_shape("mul", a, b)
    return Node("mul", (a, b), a.value * b.value, vjp=lambda g: (mul(g, b), mul(g, a)))


def div(a: Node, b: Node) -> Node:
    _same_shape("div", a, b)
    with np.errstate(all="ignore"):
        value = a.value / b.value
    out = Node("div", (a, b), value)
    out._vjp = lambda g: (div(g, b), neg(div(mul(g, out), b)))
    return out


def scale(a: Node, c: float) -> Node:
    """Multiply by a fixed Python scalar (the only scalar broadcast allowed)."""
    c = float(c)
    if not math.isfinite(c):
        raise ContractError(f"scale: constant must be finite, got {c!r}")
    return Node("scale", (a,), a.value * c, vjp=lambda g: (scale(g, c),))


_TANH_CEIL = float(np.nextafter(1.0, 0.0))


def tanh(a: Node) -> Node:
    # np.tanh rounds to exactly +/-1 for large inputs; pull saturated values
    # back to the nearest interior double so outputs stay strictly in (-1, 1).
    out = Node("tanh", (a,), np.clip(np.tanh(a.value), -_TANH_CEIL, _TANH_CEIL))

    def vjp(g: Node) -> tuple[Node, ...]:
        one = constant(np.ones(out.shape))
        return (mul(g, sub(one, mul(out, out))),)

    out._vjp = vjp
    return out


def exp(a: Node) -> Node:
    with np.errstate(all="ignore"):
        value = np.exp(a.value)
    out = Node("exp", (a,), value)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise NumericError("log: input must be strictly positive")
    return Node("log", (a,), np.log(a.value), vjp=lambda g: (div(g, a),))


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0.0):
        raise NumericError("sqrt: input must be nonnegative")
    out = Node("sqrt", (a,), np.sqrt(a.value))
    out._vjp = lambda g: (scale(div(g, out), 0.5),)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    _require_matrix("matmul", a)
    _require_matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    return Node(
        "matmul",
        (a, b),
        a.value @ b.value,
        vjp=lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Node) -> Node:
    _require_matrix("transpose", a)
    return Node("transpose", (a,), a.value.T.copy(), vjp=lambda g: (transpose(g),))


# ---------------------------------------------------------------------------
# reductions and shape promotion


def sum_all(a: Node) -> Node:
    if a.value.size == 0:
        raise ContractError("sum_all: empty tensor")
    return Node("sum_all", (a,), a.value.sum(), vjp=lambda g: (replicate(g, a.shape),))


def sum_cols(a: Node) -> Node:
    """Row-wise sum of a matrix: (d, m) -> (d, 1)."""
    _require_matrix("sum_cols", a)
    return Node(
        "sum_cols",
        (a,),
        a.value.sum(axis=1, keepdims=True),
        vjp=lambda g: (replicate(g, a.shape),),
    )


def sum_rows(a: Node) -> Node:
    """Column-wise sum of a matrix: (d, m) -> (1, m)."""
    _require_matrix("sum_rows", a)
    return Node(
        "sum_rows",
        (a,),
        a.value.sum(axis=0, keepdims=True),
        vjp=lambda g: (replicate(g, a.shape),),
    )


def mean(a: Node) -> Node:
    if a.value.size == 0:
        raise ContractError("mean: empty tensor")
    return scale(sum_all(a), 1.0 / a.value.size)


def dot(a: Node, b: Node) -> Node:
    _same_shape("dot", a, b)
    return sum_all(mul(a, b))


def l2_norm(a: Node) -> Node:
    return sqrt(sum_all(mul(a, a)))


def replicate(a: Node, shape: Sequence[int]) -> Node:
    """Explicit shape promotion; the inverse of the matching reduction.

    Supported promotions: scalar -> any shape, column (d, 1) -> (d, m),
    row (1, m) -> (d, m). Anything else raises :class:`ShapeError`.
    """
    target = tuple(int(s) for s in shape)
    src = a.shape
    if src == target:
        return a
    if src == ():
        value = np.full(target, float(a.value))
        vjp: Vjp = lambda g: (sum_all(g),)
    elif len(src) == 2 and len(target) == 2 and src[0] == target[0] and src[1] == 1:
        value = np.repeat(a.value, target[1], axis=1)
        vjp = lambda g: (sum_cols(g),)
    elif len(src) == 2 and len(target) == 2 and src[1] == target[1] and src[0] == 1:
        value = np.repeat(a.value, target[0], axis=0)
        vjp = lambda g: (sum_rows(g),)
    else:
        raise ShapeError(f"replicate: cannot promote {src} to {target}")
    return Node("replicate", (a,), value, vjp=vjp)


def concat_cols(*nodes: Node) -> Node:
    """Concatenate matrices along columns."""
    if not nodes:
        raise ContractError("concat_cols: need at least one operand")
    if len(nodes) == 1:
        return nodes[0]
    for n in nodes:
        _require_matrix("concat_cols", n)
    rows = nodes[0].shape[0]
    for n in nodes[1:]:
        if n.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {nodes[0].shape} vs {n.shape}"
            )
    bounds: list[tuple[int, int]] = []
    start = 0
    for n in nodes:
        bounds.append((start, start + n.shape[1]))
        start += n.shape[1]
    value = np.concatenate([n.value for n in nodes], axis=1)

    def vjp(g: Node) -> tuple[Node, ...]:
        return tuple(slice_cols(g, lo, hi) for lo, hi in bounds)

    return Node("concat_cols", nodes, value, vjp=vjp)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    """Column slice of a matrix: columns [start, stop)."""
    _require_matrix("slice_cols", a)
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}, {stop}) invalid for shape {a.shape}")
    value = a.value[:, start:stop].copy()

    def vjp(g: Node) -> tuple[Node, ...]:
        parts: list[Node] = []
        if start > 0:
            parts.append(constant(np.zeros((a.shape[0], start))))
        parts.append(g)
        if stop < a.shape[1]:
            parts.append(constant(np.zeros((a.shape[0], a.shape[1] - stop))))
        return (concat_cols(*parts),)

    return Node("slice_cols", (a,), value, vjp=vjp)


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Node) -> list[Node]:
    """Parents-before-children ordering of all ancestors of ``root``."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def grad(output: Node, params: Iterable[Node], create_graph: bool = False) -> list[Node]:
    """Reverse-mode gradients of a scalar ``output``.

    Returns one gradient node per entry of ``params``, each shaped like its
    parameter. Parameters unreachable from ``output`` get zero gradients.
    With ``create_graph=True`` the results stay attached to the tape, so
    ``grad`` may be called on them again for exact higher-order derivatives;
    otherwise they are detached constants.

    ``params`` are usually parameter leaves; interior nodes are accepted
    (the adjoint at that node), but constants are rejected because they are
    frozen by definition.
    """
    if output.value.ndim != 0:
        raise ContractError(f"grad: output must be scalar, got shape {output.shape}")
    targets = list(params)
    for p in targets:
        if p.is_leaf and not p.is_param:
            raise ContractError(
                f"grad: {p!r} is a constant; only parameters receive gradients"
            )

    adjoint: dict[int, Node] = {output.id: constant(np.array(1.0))}
    for node in reversed(_topo_order(output)):
        g = adjoint.get(node.id)
        if g is None or node._vjp is None:
            continue
        for parent, part in zip(node.parents, node._vjp(g)):
            existing = adjoint.get(parent.id)
            adjoint[parent.id] = part if existing is None else add(existing, part)

    results: list[Node] = []
    for p in targets:
        g = adjoint.get(p.id)
        if g is None:
            g = constant(np.zeros(p.shape))
        elif not create_graph:
            g = detach(g)
        results.append(g)
    return results
