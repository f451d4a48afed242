"""Small static-graph reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is built once by calling its op methods, which return
:class:`Node` handles with statically checked shapes.  ``forward`` evaluates
nodes in insertion order (which is a stable topological order since a node
can only reference earlier nodes) and keeps every activation; ``backward``
walks the same list in reverse.

Parameters live in ``graph.params`` (a plain ``dict`` of arrays) and are read
at forward time, so several graphs built for different batch sizes can share
one parameter dict and see in-place optimizer updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray


class GraphError(Exception):
    """Raised on shape mismatches and misuse of a graph."""


class NonFiniteError(GraphError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


@dataclass(eq=False)
class Node:
    id: int
    op: str
    shape: tuple
    parents: tuple = ()
    attrs: dict = field(default_factory=dict)
    graph: Optional["Graph"] = field(default=None, repr=False)

    # Thin operator sugar; everything routes through the owning graph.
    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.mul(self, -1.0)


def _shape(x) -> tuple:
    return tuple(int(s) for s in x)


class Graph:
    def __init__(self, params: Optional[Dict[str, Tensor]] = None):
        self.nodes: List[Node] = []
        self.params: Dict[str, Tensor] = params if params is not None else {}
        self.inputs: Dict[str, Node] = {}
        self.param_nodes: Dict[str, Node] = {}
        self.outputs: Dict[str, Node] = {}
        self.values: Optional[List[Tensor]] = None
        self._cache: Optional[List[object]] = None
        # When set, detached nodes replay these values instead of recomputing.
        self.frozen_detached: Optional[Dict[int, Tensor]] = None

    # ------------------------------------------------------------------ build
    def _add(self, op, shape, parents=(), **attrs) -> Node:
        node = Node(len(self.nodes), op, _shape(shape), tuple(parents), attrs, self)
        self.nodes.append(node)
        return node

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("node belongs to a different graph")
            return x
        return self.const(x)

    def input(self, name: str, shape) -> Node:
        if name in self.inputs or name in self.param_nodes:
            raise GraphError(f"duplicate name {name!r}")
        node = self._add("input", shape, name=name)
        self.inputs[name] = node
        return node

    def param(self, name: str, value: Optional[Tensor] = None) -> Node:
        if name in self.param_nodes or name in self.inputs:
            raise GraphError(f"duplicate name {name!r}")
        if value is not None:
            self.params[name] = np.asarray(value, dtype=np.float64)
        if name not in self.params:
            raise GraphError(f"parameter {name!r} has no value")
        node = self._add("param", self.params[name].shape, name=name)
        self.param_nodes[name] = node
        return node

    def const(self, value) -> Node:
        value = np.array(value, dtype=np.float64)
        return self._add("const", value.shape, value=value)

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = self._node(node)
        return node

    # Primitive ops ----------------------------------------------------------
    def dense(self, x, w, b=None) -> Node:
        x, w = self._node(x), self._node(w)
        if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[0]:
            raise GraphError(f"dense: cannot apply {w.shape} to {x.shape}")
        parents = [x, w]
        if b is not None:
            b = self._node(b)
            if b.shape != (w.shape[1],):
                raise GraphError(f"dense: bias {b.shape} for width {w.shape[1]}")
            parents.append(b)
        return self._add("dense", (x.shape[0], w.shape[1]), parents)

    def conv2d(self, x, w, b=None, stride: int = 1) -> Node:
        """3x3 convolution, NHWC layout, zero padding 1, kernel (3, 3, Cin, Cout)."""
        x, w = self._node(x), self._node(w)
        if len(x.shape) != 4 or w.shape[:2] != (3, 3) or len(w.shape) != 4 or w.shape[2] != x.shape[3]:
            raise GraphError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
        parents = [x, w]
        if b is not None:
            b = self._node(b)
            if b.shape != (w.shape[3],):
                raise GraphError(f"conv2d: bias {b.shape} for {w.shape[3]} channels")
            parents.append(b)
        n, h, wd, _ = x.shape
        ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
        return self._add("conv2d", (n, ho, wo, w.shape[3]), parents, stride=int(stride))

    def relu(self, x) -> Node:
        x = self._node(x)
        return self._add("relu", x.shape, [x])

    def mean_pool(self, x) -> Node:
        """Global average over the spatial axes of an NHWC tensor."""
        x = self._node(x)
        if len(x.shape) != 4:
            raise GraphError("mean_pool expects NHWC input")
        return self._add("mean_pool", (x.shape[0], x.shape[3]), [x])

    def flatten(self, x) -> Node:
        x = self._node(x)
        return self._add("reshape", (x.shape[0], int(np.prod(x.shape[1:]))), [x])

    def reshape(self, x, shape) -> Node:
        x = self._node(x)
        shape = _shape(shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise GraphError(f"reshape: {x.shape} -> {shape}")
        return self._add("reshape", shape, [x])

    def add(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        if a.shape == b.shape:
            return self._add("add", a.shape, [a, b])
        # bias-add: b spans the trailing axis only
        if len(b.shape) == 1 and len(a.shape) >= 1 and b.shape[0] == a.shape[-1]:
            return self._add("add", a.shape, [a, b], bias=True)
        raise GraphError(f"add: shapes {a.shape} and {b.shape}")

    def sub(self, a, b) -> Node:
        return self.add(a, self.mul(b, -1.0))

    def mul(self, a, b) -> Node:
        a = self._node(a)
        if not isinstance(b, Node) and np.ndim(b) == 0:
            return self._add("scale", a.shape, [a], factor=float(b))
        b = self._node(b)
        if a.shape != b.shape:
            raise GraphError(f"mul: shapes {a.shape} and {b.shape}")
        return self._add("mul", a.shape, [a, b])

    def matmul(self, a, b, trans_b: bool = False) -> Node:
        a, b = self._node(a), self._node(b)
        bs = b.shape[::-1] if trans_b else b.shape
        if len(a.shape) != 2 or len(bs) != 2 or a.shape[1] != bs[0]:
            raise GraphError(f"matmul: {a.shape} @ {bs}")
        return self._add("matmul", (a.shape[0], bs[1]), [a, b], trans_b=bool(trans_b))

    def sum(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self._node(x)
        shape = np.sum(np.zeros(x.shape), axis=axis, keepdims=keepdims).shape
        return self._add("sum", shape, [x], axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self._node(x)
        shape = np.sum(np.zeros(x.shape), axis=axis, keepdims=keepdims).shape
        return self._add("mean", shape, [x], axis=axis, keepdims=keepdims)

    def l2norm(self, x, axis: int = -1) -> Node:
        """Rescale ``x`` to unit euclidean norm along ``axis``."""
        x = self._node(x)
        return self._add("l2norm", x.shape, [x], axis=axis)

    def log(self, x) -> Node:
        x = self._node(x)
        return self._add("log", x.shape, [x])

    def exp(self, x) -> Node:
        x = self._node(x)
        return self._add("exp", x.shape, [x])

    def softmax(self, x, axis: int = -1) -> Node:
        x = self._node(x)
        return self._add("softmax", x.shape, [x], axis=axis)

    def concat(self, xs: Sequence, axis: int = -1) -> Node:
        xs = [self._node(x) for x in xs]
        ax = axis % len(xs[0].shape)
        for x in xs[1:]:
            if len(x.shape) != len(xs[0].shape) or any(
                    s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax):
                raise GraphError("concat: incompatible shapes")
        shape = list(xs[0].shape)
        shape[ax] = sum(x.shape[ax] for x in xs)
        return self._add("concat", shape, xs, axis=ax)

    def detached(self, fn: Callable[[Tensor], Tensor], x, shape=None) -> Node:
        """Value ``fn(x)`` that is treated as a constant by ``backward``."""
        x = self._node(x)
        if shape is None:
            shape = np.asarray(fn(np.zeros(x.shape))).shape
        return self._add("detached", shape, [x], fn=fn)

    # Composite helpers (not primitives) -------------------------------------
    def abs(self, x) -> Node:
        return self.add(self.relu(x), self.relu(self.mul(x, -1.0)))

    # ---------------------------------------------------------------- execute
    def forward(self, inputs: Dict[str, Tensor], check_finite: bool = True) -> Dict[str, Tensor]:
        for name in inputs:
            if name not in self.inputs:
                raise GraphError(f"unknown input {name!r}")
        values: List[Tensor] = []
        cache: List[object] = []
        for node in self.nodes:
            if node.op == "input":
                if node.attrs["name"] not in inputs:
                    raise GraphError(f"missing input {node.attrs['name']!r}")
                v = np.asarray(inputs[node.attrs["name"]], dtype=np.float64)
                if v.shape != node.shape:
                    raise GraphError(
                        f"input {node.attrs['name']!r}: expected {node.shape}, got {v.shape}")
                c = None
            elif node.op == "param":
                v = self.params[node.attrs["name"]]
                if v.shape != node.shape:
                    raise GraphError(f"param {node.attrs['name']!r} changed shape")
                c = None
            elif node.op == "const":
                v, c = node.attrs["value"], None
            else:
                args = [values[p.id] for p in node.parents]
                v, c = _FORWARD[node.op](self, node, args)
            if check_finite and node.op not in ("input", "param", "const") and not np.all(np.isfinite(v)):
                raise NonFiniteError(node.id, node.op)
            values.append(v)
            cache.append(c)
        self.values, self._cache = values, cache
        return {name: values[n.id] for name, n in self.outputs.items()}

    def value(self, node: Node) -> Tensor:
        if self.values is None:
            raise GraphError("graph has not been run")
        return self.values[node.id]

    def _needs_grad(self, wrt_inputs: bool) -> List[bool]:
        need = []
        for n in self.nodes:
            if n.op == "param":
                need.append(True)
            elif n.op == "input":
                need.append(wrt_inputs)
            elif n.op in ("const", "detached"):
                need.append(False)
            else:
                need.append(any(need[p.id] for p in n.parents))
        return need

    def backward(self, output_grads: Dict[str, Tensor], wrt_inputs: bool = True) -> Dict[str, Tensor]:
        """Gradients for every parameter (and input) given output cotangents.

        Parameters unreachable from the seeded outputs get zeros.  With
        ``wrt_inputs=False`` input gradients are neither computed nor returned.
        """
        if self.values is None:
            raise GraphError("backward called before forward")
        need = self._needs_grad(wrt_inputs)
        grads: List[Optional[Tensor]] = [None] * len(self.nodes)
        for name, g in output_grads.items():
            if name not in self.outputs:
                raise GraphError(f"unknown output {name!r}")
            node = self.outputs[name]
            g = np.broadcast_to(np.asarray(g, dtype=np.float64), node.shape)
            grads[node.id] = g.copy() if grads[node.id] is None else grads[node.id] + g
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None or not need[node.id] or not node.parents:
                continue
            args = [self.values[p.id] for p in node.parents]
            pneed = [need[p.id] for p in node.parents]
            pgrads = _BACKWARD[node.op](self, node, args, self._cache[node.id], g, pneed)
            for p, pg, pn in zip(node.parents, pgrads, pneed):
                if pg is None or not pn:
                    continue
                grads[p.id] = pg if grads[p.id] is None else grads[p.id] + pg
        out = {}
        named = list(self.param_nodes.items()) + (list(self.inputs.items()) if wrt_inputs else [])
        for name, n in named:
            g = grads[n.id]
            out[name] = np.zeros(n.shape) if g is None else np.array(g, dtype=np.float64)
        return out


def forward(graph: Graph, inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, output_grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return graph.backward(output_grads)


# ---------------------------------------------------------------------------
# forward / backward kernels.  Forward returns (value, cache).

def _im2col(x, stride):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, 9 * c)


def _col2im(cols, xshape, stride):
    n, h, w, c = xshape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    cols = cols.reshape(n, ho, wo, 3, 3, c)
    gp = np.zeros((n, h + 2, w + 2, c))
    for ki in range(3):
        for kj in range(3):
            gp[:, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += cols[:, :, :, ki, kj]
    return gp[:, 1:-1, 1:-1]


def _f_dense(g, node, a):
    out = a[0] @ a[1]
    if len(a) == 3:
        out = out + a[2]
    return out, None


def _b_dense(g, node, a, c, gr, need):
    res = [gr @ a[1].T, a[0].T @ gr]
    if len(a) == 3:
        res.append(gr.sum(axis=0))
    return res


def _f_conv(g, node, a):
    x, w = a[0], a[1]
    cols = _im2col(x, node.attrs["stride"])
    out = (cols @ w.reshape(-1, w.shape[3])).reshape(node.shape)
    if len(a) == 3:
        out = out + a[2]
    return out, cols


def _b_conv(g, node, a, cols, gr, need):
    x, w = a[0], a[1]
    g2 = gr.reshape(-1, w.shape[3])
    gw = (cols.T @ g2).reshape(w.shape)
    gx = _col2im(g2 @ w.reshape(-1, w.shape[3]).T, x.shape, node.attrs["stride"]) if need[0] else None
    res = [gx, gw]
    if len(a) == 3:
        res.append(g2.sum(axis=0))
    return res


def _f_l2norm(g, node, a):
    norm = np.sqrt(np.sum(a[0] * a[0], axis=node.attrs["axis"], keepdims=True))
    if np.any(norm == 0):
        raise NonFiniteError(node.id, "l2norm (zero-norm input)")
    y = a[0] / norm
    return y, (y, norm)


def _b_l2norm(g, node, a, c, gr, need):
    y, norm = c
    ax = node.attrs["axis"]
    return [(gr - y * np.sum(gr * y, axis=ax, keepdims=True)) / norm]


def _f_softmax(g, node, a):
    ax = node.attrs["axis"]
    e = np.exp(a[0] - np.max(a[0], axis=ax, keepdims=True))
    y = e / np.sum(e, axis=ax, keepdims=True)
    return y, y


def _b_softmax(g, node, a, y, gr, need):
    ax = node.attrs["axis"]
    return [y * (gr - np.sum(gr * y, axis=ax, keepdims=True))]


def _reduce_back(node, x, gr, scale=1.0):
    ax, keep = node.attrs["axis"], node.attrs["keepdims"]
    if ax is not None and not keep:
        gr = np.expand_dims(gr, ax)
    return np.broadcast_to(gr * scale, x.shape).copy()


def _mean_scale(node, x):
    ax = node.attrs["axis"]
    if ax is None:
        return 1.0 / x.size
    axes = ax if isinstance(ax, tuple) else (ax,)
    return 1.0 / int(np.prod([x.shape[i] for i in axes]))


def _f_detached(g, node, a):
    if g.frozen_detached is not None and node.id in g.frozen_detached:
        return g.frozen_detached[node.id], None
    return np.asarray(node.attrs["fn"](a[0]), dtype=np.float64).reshape(node.shape), None


def _f_add(g, node, a):
    return a[0] + a[1], None


def _b_add(g, node, a, c, gr, need):
    if node.attrs.get("bias"):
        return [gr, gr.reshape(-1, gr.shape[-1]).sum(axis=0)]
    return [gr, gr]


def _f_matmul(g, node, a):
    return (a[0] @ a[1].T if node.attrs["trans_b"] else a[0] @ a[1]), None


def _b_matmul(g, node, a, c, gr, need):
    if node.attrs["trans_b"]:
        return [gr @ a[1], gr.T @ a[0]]
    return [gr @ a[1].T, a[0].T @ gr]


def _f_concat(g, node, a):
    return np.concatenate(a, axis=node.attrs["axis"]), None


def _b_concat(g, node, a, c, gr, need):
    ax = node.attrs["axis"]
    cuts = np.cumsum([x.shape[ax] for x in a])[:-1]
    return np.split(gr, cuts, axis=ax)


_FORWARD = {
    "dense": _f_dense,
    "conv2d": _f_conv,
    "relu": lambda g, n, a: (np.maximum(a[0], 0.0), None),
    "mean_pool": lambda g, n, a: (a[0].mean(axis=(1, 2)), None),
    "reshape": lambda g, n, a: (a[0].reshape(n.shape), None),
    "add": _f_add,
    "scale": lambda g, n, a: (a[0] * n.attrs["factor"], None),
    "mul": lambda g, n, a: (a[0] * a[1], None),
    "matmul": _f_matmul,
    "sum": lambda g, n, a: (np.asarray(np.sum(a[0], axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])), None),
    "mean": lambda g, n, a: (np.asarray(np.mean(a[0], axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])), None),
    "l2norm": _f_l2norm,
    "log": lambda g, n, a: (np.log(a[0]), None),
    "exp": lambda g, n, a: (np.exp(a[0]), None),
    "softmax": _f_softmax,
    "concat": _f_concat,
    "detached": _f_detached,
}

_BACKWARD = {
    "dense": _b_dense,
    "conv2d": _b_conv,
    # subgradient of relu at 0 is 0
    "relu": lambda g, n, a, c, gr, need: [gr * (a[0] > 0)],
    "mean_pool": lambda g, n, a, c, gr, need: [
        np.broadcast_to(gr[:, None, None, :] / (a[0].shape[1] * a[0].shape[2]), a[0].shape).copy()],
    "reshape": lambda g, n, a, c, gr, need: [gr.reshape(a[0].shape)],
    "add": _b_add,
    "scale": lambda g, n, a, c, gr, need: [gr * n.attrs["factor"]],
    "mul": lambda g, n, a, c, gr, need: [gr * a[1], gr * a[0]],
    "matmul": _b_matmul,
    "sum": lambda g, n, a, c, gr, need: [_reduce_back(n, a[0], gr)],
    "mean": lambda g, n, a, c, gr, need: [_reduce_back(n, a[0], gr, _mean_scale(n, a[0]))],
    "l2norm": _b_l2norm,
    "log": lambda g, n, a, c, gr, need: [gr / a[0]],
    "exp": lambda g, n, a, c, gr, need: [gr * np.exp(a[0])],
    "softmax": _b_softmax,
    "concat": _b_concat,
}


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: List[tuple]
    worst: Optional[tuple] = None

    def __float__(self):
        return self.max_rel_error


def _relu_pattern(graph: Graph) -> List[np.ndarray]:
    return [graph.values[n.parents[0].id] > 0 for n in graph.nodes if n.op == "relu"]


def grad_check(graph: Graph, inputs: Dict[str, Tensor], step: float = 1e-5,
               params: Optional[Sequence[str]] = None, max_coords: Optional[int] = 24,
               seed: int = 0, output_weights: Optional[Dict[str, Tensor]] = None) -> GradCheckReport:
    """Compare ``backward`` against central differences.

    The checked scalar is ``sum_k <w_k, output_k>`` with ``w_k`` either given
    or drawn from ``seed``.  Error per coordinate is
    ``|analytic - numeric| / max(1e-6, |numeric|)``; the floor sits above the
    round-off of a central difference on an O(1) output.  Coordinates whose
    perturbation flips any relu input across zero (including inputs sitting
    exactly at the kink) are reported as skipped rather than counted.
    ``max_coords`` samples that many coordinates per parameter tensor
    (``None`` checks all of them).  Detached nodes are held at their base
    values while perturbing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    if output_weights is None:
        output_weights = {}
        for name, node in graph.outputs.items():
            output_weights[name] = np.ones(node.shape) if node.shape == () else rng.standard_normal(node.shape)

    def objective():
        outs = graph.forward(inputs, check_finite=False)
        return sum(float(np.sum(output_weights[k] * outs[k])) for k in output_weights)

    objective()
    base_relu = _relu_pattern(graph)
    graph.frozen_detached = {n.id: graph.values[n.id] for n in graph.nodes if n.op == "detached"}
    try:
        graph.forward(inputs)
        analytic = graph.backward(output_weights)
        names = list(params) if params is not None else list(graph.param_nodes)
        worst, worst_at, checked, skipped = 0.0, None, 0, []
        for name in names:
            p = graph.params[name]
            flat = p.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = objective()
                kink = any(np.any(a != b) for a, b in zip(_relu_pattern(graph), base_relu))
                flat[i] = orig - step
                fm = objective()
                kink = kink or any(np.any(a != b) for a, b in zip(_relu_pattern(graph), base_relu))
                flat[i] = orig
                if kink:
                    skipped.append((name, int(i)))
                    continue
                numeric = (fp - fm) / (2 * step)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - numeric) / max(1e-6, abs(numeric))
                checked += 1
                if err > worst:
                    worst, worst_at = err, (name, int(i), float(a), float(numeric))
    finally:
        graph.frozen_detached = None
        graph.forward(inputs, check_finite=False)
    return GradCheckReport(worst, checked, skipped, worst_at)
