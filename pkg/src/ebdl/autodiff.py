"""Reverse-mode automatic differentiation on explicit numpy graphs.

Graphs are built from a small fixed set of primitive ops, all float64.
``grad`` is symbolic: it returns new nodes, so gradients can be
differentiated again (the mixed second-order terms in the losses need
exactly that).  Evaluation is an iterative topological sweep with one
shared memo per call, and every intermediate is checked for finiteness
so numerical blow-ups name the op that produced them.

Shapes are inferred at construction time; ``add`` and ``mul`` insist on
equal shapes, with ``broadcast_to`` as the only shape-changing route.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

__all__ = [
    "Node",
    "NonFiniteError",
    "leaf",
    "const",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sin",
    "cos",
    "reduce_sum",
    "square",
    "broadcast_to",
    "slice_axis",
    "concat",
    "logsumexp",
    "sigmoid",
    "logsigmoid",
    "exp",
    "pad_axis",
    "reshape",
    "neg",
    "sub",
    "scale",
    "shift",
    "one_minus",
    "reduce_mean",
    "evaluate",
    "Program",
    "grad",
    "input_gradient_graph",
]

# Test hook: when set to an op name, that op's adjoint is deliberately
# mis-scaled at graph-build time so the failure-reporting path of the
# gradient checker can be exercised end to end.  Never set outside tests
# or the grad-check command.
BROKEN_OP_FOR_TESTS: Optional[str] = None


class NonFiniteError(RuntimeError):
    """An intermediate value contained nan or inf."""


class Node:
    """One vertex of a computation graph: an op, its parents, and a shape."""

    __slots__ = ("op", "parents", "attrs", "shape", "name")
    _count = 0

    def __init__(self, op: str, parents: tuple, attrs: dict, shape: tuple, name: str | None = None):
        Node._count += 1
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.shape = shape
        self.name = name if name is not None else f"{op}#{Node._count}"

    def __repr__(self) -> str:
        return f"<Node {self.name} op={self.op} shape={self.shape}>"


def leaf(name: str, shape: Sequence[int]) -> Node:
    """A named input; its value is supplied through the evaluation environment."""
    return Node("leaf", (), {}, tuple(int(s) for s in shape), name=name)


def const(value) -> Node:
    """A fixed array baked into the graph."""
    arr = np.asarray(value, dtype=np.float64)
    return Node("const", (), {"value": arr}, arr.shape)


def _require(cond: bool, message: str):
    if not cond:
        raise ValueError(message)


def _mm_shape(shape: tuple, transpose: bool) -> tuple:
    return (shape[1], shape[0]) if transpose else shape


def matmul(a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
    _require(len(a.shape) == 2 and len(b.shape) == 2, "matmul operands must be 2-D")
    sa, sb = _mm_shape(a.shape, transpose_a), _mm_shape(b.shape, transpose_b)
    _require(sa[1] == sb[0], f"matmul inner dims differ: {sa} x {sb}")
    return Node(
        "matmul", (a, b), {"ta": bool(transpose_a), "tb": bool(transpose_b)}, (sa[0], sb[1])
    )


def add(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"add needs equal shapes, got {a.shape} and {b.shape}")
    return Node("add", (a, b), {}, a.shape)


def mul(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return Node("mul", (a, b), {}, a.shape)


def _elementwise(op: str, x: Node) -> Node:
    return Node(op, (x,), {}, x.shape)


def tanh(x: Node) -> Node:
    return _elementwise("tanh", x)


def sin(x: Node) -> Node:
    return _elementwise("sin", x)


def cos(x: Node) -> Node:
    return _elementwise("cos", x)


def square(x: Node) -> Node:
    return _elementwise("square", x)


def sigmoid(x: Node) -> Node:
    return _elementwise("sigmoid", x)


def logsigmoid(x: Node) -> Node:
    return _elementwise("logsigmoid", x)


def exp(x: Node) -> Node:
    return _elementwise("exp", x)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    _require(len(set(axes)) == len(axes), f"duplicate axes in {axis}")
    return axes


def _reduced_shape(shape: tuple, axes: tuple, keepdims: bool) -> tuple:
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def reduce_sum(x: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _normalize_axes(axis, len(x.shape))
    out_shape = _reduced_shape(x.shape, axes, keepdims)
    return Node("sum", (x,), {"axes": axes, "keepdims": bool(keepdims)}, out_shape)


def logsumexp(x: Node, axis: int, keepdims: bool = False) -> Node:
    axes = _normalize_axes(axis, len(x.shape))
    _require(len(axes) == 1, "logsumexp reduces exactly one axis")
    out_shape = _reduced_shape(x.shape, axes, keepdims)
    return Node("logsumexp", (x,), {"axes": axes, "keepdims": bool(keepdims)}, out_shape)


def broadcast_to(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError as err:
        raise ValueError(f"cannot broadcast {x.shape} to {shape}") from err
    _require(
        np.broadcast_shapes(x.shape, shape) == shape,
        f"broadcast target {shape} smaller than operand {x.shape}",
    )
    return Node("broadcast", (x,), {"shape": shape}, shape)


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    axis = axis % len(x.shape)
    _require(0 <= start < stop <= x.shape[axis], f"bad slice [{start}:{stop}] on axis size {x.shape[axis]}")
    out_shape = tuple(stop - start if i == axis else s for i, s in enumerate(x.shape))
    return Node("slice", (x,), {"axis": axis, "start": start, "stop": stop}, out_shape)


def pad_axis(x: Node, axis: int, before: int, after: int) -> Node:
    axis = axis % len(x.shape)
    _require(before >= 0 and after >= 0, "pad amounts must be non-negative")
    out_shape = tuple(
        s + before + after if i == axis else s for i, s in enumerate(x.shape)
    )
    return Node("pad", (x,), {"axis": axis, "before": before, "after": after}, out_shape)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    _require(len(nodes) >= 1, "concat needs at least one node")
    ndim = len(nodes[0].shape)
    axis = axis % ndim
    for n in nodes[1:]:
        _require(
            len(n.shape) == ndim
            and all(n.shape[i] == nodes[0].shape[i] for i in range(ndim) if i != axis),
            f"concat shapes incompatible: {[n.shape for n in nodes]}",
        )
    total = sum(n.shape[axis] for n in nodes)
    out_shape = tuple(total if i == axis else s for i, s in enumerate(nodes[0].shape))
    return Node("concat", tuple(nodes), {"axis": axis}, out_shape)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    _require(
        int(np.prod(shape, dtype=np.int64)) == int(np.prod(x.shape, dtype=np.int64)),
        f"reshape {x.shape} -> {shape} changes the element count",
    )
    return Node("reshape", (x,), {"shape": shape}, shape)


# -- composed helpers (no new primitives) ------------------------------------


def scale(x: Node, c: float) -> Node:
    return mul(x, broadcast_to(const(float(c)), x.shape))


def shift(x: Node, c: float) -> Node:
    return add(x, broadcast_to(const(float(c)), x.shape))


def neg(x: Node) -> Node:
    return scale(x, -1.0)


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def one_minus(x: Node) -> Node:
    return shift(neg(x), 1.0)


def reduce_mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _normalize_axes(axis, len(x.shape))
    count = 1
    for a in axes:
        count *= x.shape[a]
    return scale(reduce_sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- evaluation ----------------------------------------------------------------


def _topo(roots: Sequence[Node]) -> list:
    """Parents-before-children order over everything reachable from roots."""
    order: list = []
    seen: set = set()
    stack: list = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def _forward_one(node: Node, vals: dict, env: dict) -> np.ndarray:
    op = node.op
    if op == "leaf":
        try:
            v = env[node.name]
        except KeyError:
            raise KeyError(f"no value bound for leaf {node.name!r}") from None
        v = np.asarray(v, dtype=np.float64)
        _require(v.shape == node.shape, f"leaf {node.name!r} expects {node.shape}, got {v.shape}")
        return v
    if op == "const":
        return node.attrs["value"]
    p = [vals[id(q)] for q in node.parents]
    if op == "matmul":
        a = p[0].T if node.attrs["ta"] else p[0]
        b = p[1].T if node.attrs["tb"] else p[1]
        return a @ b
    if op == "add":
        return p[0] + p[1]
    if op == "mul":
        return p[0] * p[1]
    if op == "tanh":
        return np.tanh(p[0])
    if op == "sin":
        return np.sin(p[0])
    if op == "cos":
        return np.cos(p[0])
    if op == "square":
        return p[0] * p[0]
    if op == "sigmoid":
        return expit(p[0])
    if op == "logsigmoid":
        return log_expit(p[0])
    if op == "exp":
        return np.exp(p[0])
    if op == "sum":
        return np.sum(p[0], axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])
    if op == "logsumexp":
        axis = node.attrs["axes"][0]
        hi = np.max(p[0], axis=axis, keepdims=True)
        out = hi + np.log(np.sum(np.exp(p[0] - hi), axis=axis, keepdims=True))
        return out if node.attrs["keepdims"] else np.squeeze(out, axis=axis)
    if op == "broadcast":
        return np.broadcast_to(p[0], node.attrs["shape"])
    if op == "slice":
        a, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
        key = tuple(slice(start, stop) if i == a else slice(None) for i in range(len(node.shape)))
        return p[0][key]
    if op == "pad":
        widths = [
            (node.attrs["before"], node.attrs["after"]) if i == node.attrs["axis"] else (0, 0)
            for i in range(len(node.shape))
        ]
        return np.pad(p[0], widths)
    if op == "concat":
        return np.concatenate(p, axis=node.attrs["axis"])
    if op == "reshape":
        return np.reshape(p[0], node.attrs["shape"])
    raise ValueError(f"unknown op {op!r}")  # pragma: no cover


def _run(order: Sequence[Node], outputs: Sequence[Node], env: dict, check_finite: bool):
    vals: dict = {}
    for node in order:
        v = _forward_one(node, vals, env)
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(
                f"non-finite values out of {node.op!r} node {node.name!r} (shape {node.shape})"
            )
        vals[id(node)] = v
    return [vals[id(o)] for o in outputs]


def evaluate(outputs: Sequence[Node], env: dict | None = None, check_finite: bool = True):
    """Evaluate several outputs at once with a shared memo."""
    return _run(_topo(outputs), outputs, env or {}, check_finite)


class Program:
    """A compiled graph: the topological order is computed once, run many times."""

    def __init__(self, outputs: Sequence[Node]):
        self.outputs = list(outputs)
        self.order = _topo(self.outputs)
        self.leaf_names = sorted({n.name for n in self.order if n.op == "leaf"})

    def run(self, env: dict | None = None, check_finite: bool = True):
        return _run(self.order, self.outputs, env or {}, check_finite)


# -- symbolic reverse mode -------------------------------------------------------


def _keepdims_form(node_out: Node, g: Node, x_shape: tuple, axes: tuple, keepdims: bool):
    """Bring a reduction output/adjoint back to the keepdims shape of the operand."""
    if keepdims:
        return node_out, g
    ks = tuple(1 if i in axes else s for i, s in enumerate(x_shape))
    return reshape(node_out, ks), reshape(g, ks)


def _vjp(node: Node, gy: Node) -> list:
    """Adjoint nodes for each parent; None marks a structurally zero gradient."""
    op = node.op
    p = node.parents
    if op == "matmul":
        a, b = p
        ta, tb = node.attrs["ta"], node.attrs["tb"]
        if not ta and not tb:
            return [matmul(gy, b, False, True), matmul(a, gy, True, False)]
        if ta and not tb:
            return [matmul(b, gy, False, True), matmul(a, gy, False, False)]
        if not ta and tb:
            return [matmul(gy, b, False, False), matmul(gy, a, True, False)]
        return [matmul(b, gy, True, True), matmul(gy, a, True, True)]
    if op == "add":
        return [gy, gy]
    if op == "mul":
        return [mul(gy, p[1]), mul(gy, p[0])]
    if op == "tanh":
        return [mul(gy, one_minus(square(node)))]
    if op == "sin":
        return [mul(gy, cos(p[0]))]
    if op == "cos":
        return [neg(mul(gy, sin(p[0])))]
    if op == "square":
        return [mul(gy, scale(p[0], 2.0))]
    if op == "sigmoid":
        return [mul(gy, mul(node, one_minus(node)))]
    if op == "logsigmoid":
        return [mul(gy, one_minus(sigmoid(p[0])))]
    if op == "exp":
        return [mul(gy, node)]
    if op == "sum":
        g = gy
        if not node.attrs["keepdims"] and node.attrs["axes"]:
            if g.shape != ():
                g = reshape(g, _reduced_shape(p[0].shape, node.attrs["axes"], True))
            # a scalar broadcasts to anything, no reshape needed
        return [broadcast_to(g, p[0].shape)]
    if op == "logsumexp":
        y_k, g_k = _keepdims_form(node, gy, p[0].shape, node.attrs["axes"], node.attrs["keepdims"])
        soft = exp(sub(p[0], broadcast_to(y_k, p[0].shape)))
        return [mul(soft, broadcast_to(g_k, p[0].shape))]
    if op == "broadcast":
        x = p[0]
        g = gy
        extra = len(g.shape) - len(x.shape)
        if extra:
            g = reduce_sum(g, axis=tuple(range(extra)), keepdims=False)
        squeeze_axes = tuple(
            i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] > 1
        )
        if squeeze_axes:
            g = reduce_sum(g, axis=squeeze_axes, keepdims=True)
        return [g]
    if op == "slice":
        x = p[0]
        a, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
        return [pad_axis(gy, a, start, x.shape[a] - stop)]
    if op == "pad":
        x = p[0]
        a, before = node.attrs["axis"], node.attrs["before"]
        return [slice_axis(gy, a, before, before + x.shape[a])]
    if op == "concat":
        a = node.attrs["axis"]
        grads = []
        offset = 0
        for q in p:
            grads.append(slice_axis(gy, a, offset, offset + q.shape[a]))
            offset += q.shape[a]
        return grads
    if op == "reshape":
        return [reshape(gy, p[0].shape)]
    raise ValueError(f"no adjoint for op {op!r}")  # pragma: no cover


def grad(output: Node, wrt: Sequence[Node]) -> list:
    """Nodes computing d(output)/d(w) for each w; output must be scalar.

    The result is an ordinary graph, so it can be evaluated, combined, or
    differentiated again.
    """
    if output.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    order = _topo([output])
    adj: dict = {id(output): const(1.0)}
    for node in reversed(order):
        gy = adj.get(id(node))
        if gy is None or node.op in ("leaf", "const"):
            continue
        contribs = _vjp(node, gy)
        if BROKEN_OP_FOR_TESTS is not None and node.op == BROKEN_OP_FOR_TESTS:
            contribs = [None if g is None else scale(g, 1.0 + 1e-3) for g in contribs]
        for parent, g in zip(node.parents, contribs):
            if g is None:
                continue
            have = adj.get(id(parent))
            adj[id(parent)] = g if have is None else add(have, g)
    out = []
    for w in wrt:
        g = adj.get(id(w))
        out.append(g if g is not None else const(np.zeros(w.shape)))
    return out


def input_gradient_graph(output: Node, x: Node) -> Node:
    """Gradient of a scalar output with respect to one input node."""
    return grad(output, [x])[0]
