"""Minimal reverse-mode autodiff over dense numpy arrays.

The engine exposes exactly the operations the survival model needs,
nothing generic. A Graph is built eagerly: every op computes its value
the moment its node is created, so data-dependent constants (hard
top-K masks, gather index maps) can be derived mid-build from values
already in the graph. ``forward`` replays the recorded graph under new
input bindings; ``backward`` runs the adjoint rules in reverse
topological order (creation order is topological by construction);
``finite_diff_check`` compares analytic gradients against central
differences.

Values are numpy arrays, float32 by default, float64 when a graph is
constructed with dtype=np.float64 (used by gradient-check tests).
Scalars are 0-d arrays. Stored values are never mutated in place.

Multiply-add accounting (used by the complexity checks): matmul of
(m,k)@(k,n) counts m*k*n; the GRU cell counts its six matmuls plus ten
elementwise passes; layer norm 4 per element; softmaxes 3 per element;
other arithmetic ops 1 per element of the output; pure data movement
(transpose, gather, concat, stop_gradient) counts zero.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "Node",
    "OP_KINDS",
    "backward",
    "bind_arrays",
    "finite_diff_check",
    "forward",
    "named_arrays",
]

# Every op kind the engine registers. The model uses all of them.
OP_KINDS = (
    "input",
    "const",
    "matmul",
    "transpose",
    "add",
    "scale",
    "row_softmax",
    "col_softmax",
    "sigmoid",
    "relu",
    "layer_norm",
    "gru_cell",
    "mean_pool",
    "concat",
    "mul",
    "squared_error",
    "cosine",
    "log",
    "exp",
    "clamp",
    "gather_rows",
    "reduce_sum",
    "stop_gradient",
)

_LN_EPS = 1e-5
_COS_TINY = 1e-12


class GraphError(ValueError):
    """Shape mismatch, bad operand, or non-finite value in the graph."""


class Node:
    """Lightweight handle to a graph node."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.graph._values[self.idx]

    @property
    def shape(self) -> tuple:
        return self.graph._values[self.idx].shape

    @property
    def op(self) -> str:
        return self.graph._ops[self.idx]

    def __repr__(self):
        return f"Node({self.idx}:{self.op}, shape={self.shape})"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Eagerly evaluated op graph with recorded structure for replay."""

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        if dtype not in (np.float32, np.float64):
            raise GraphError(f"unsupported dtype {dtype!r}")
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._ops: list[str] = []
        self._parents: list[tuple] = []
        self._aux: list = []          # static per-node attributes
        self._values: list = []       # current values (eager / last replay)
        self._saved: list = []        # per-run intermediates for backward
        self._madds: list[int] = []
        self._inputs: dict[str, int] = {}
        self._marks: dict[str, int] = {}

    # ---------------------------------------------------------------- leaves

    def input(self, name: str, value) -> Node:
        """Declare a named, rebindable leaf with its initial value."""
        if name in self._inputs:
            raise GraphError(f"duplicate input name {name!r}")
        arr = self._coerce(value, f"input {name!r}")
        node = self._append("input", (), arr, aux=name)
        self._inputs[name] = node.idx
        return node

    def const(self, value) -> Node:
        """A fixed leaf; never rebound, never differentiated."""
        arr = self._coerce(value, "const")
        return self._append("const", (), arr)

    # ------------------------------------------------------------------- ops

    def matmul(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise GraphError(
                f"matmul shape mismatch {va.shape} @ {vb.shape} (node {self._next_id()})"
            )
        m, k = va.shape
        n = vb.shape[1]
        return self._append("matmul", (a.idx, b.idx), va @ vb, madds=m * k * n)

    def transpose(self, a: Node) -> Node:
        va = a.value
        if va.ndim != 2:
            raise GraphError(f"transpose needs 2-d operand, got {va.shape}")
        return self._append("transpose", (a.idx,), va.T.copy())

    def add(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.shape != vb.shape:
            row_bias = (
                va.ndim == 2
                and vb.ndim == 2
                and vb.shape == (1, va.shape[1])
            )
            if not row_bias:
                raise GraphError(f"add shape mismatch {va.shape} + {vb.shape}")
        return self._append("add", (a.idx, b.idx), va + vb, madds=int(np.prod(va.shape)))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._append("scale", (a.idx,), a.value * self.dtype.type(c),
                            aux=c, madds=a.value.size)

    def row_softmax(self, a: Node) -> Node:
        va = a.value
        if va.ndim != 2:
            raise GraphError(f"row_softmax needs 2-d operand, got {va.shape}")
        return self._append("row_softmax", (a.idx,), _row_softmax(va), madds=3 * va.size)

    def col_softmax(self, a: Node) -> Node:
        va = a.value
        if va.ndim != 2:
            raise GraphError(f"col_softmax needs 2-d operand, got {va.shape}")
        return self._append("col_softmax", (a.idx,), _col_softmax(va), madds=3 * va.size)

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a.idx,), _sigmoid(a.value), madds=a.value.size)

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a.idx,), np.maximum(a.value, 0), madds=a.value.size)

    def layer_norm(self, a: Node, gamma: Node, beta: Node) -> Node:
        va = a.value
        d = va.shape[-1]
        if va.ndim != 2 or gamma.shape != (1, d) or beta.shape != (1, d):
            raise GraphError(
                f"layer_norm shapes: x {va.shape}, gamma {gamma.shape}, beta {beta.shape}"
            )
        y, saved = _layer_norm_fwd(va, gamma.value, beta.value)
        node = self._append("layer_norm", (a.idx, gamma.idx, beta.idx), y,
                            madds=4 * va.size)
        self._saved[node.idx] = saved
        return node

    def gru_cell(self, x: Node, h: Node, wz, uz, bz, wr, ur, br, wn, un, bn) -> Node:
        vx, vh = x.value, h.value
        d = vh.shape[1]
        if vx.shape != vh.shape:
            raise GraphError(f"gru_cell input/state mismatch {vx.shape} vs {vh.shape}")
        for w in (wz, uz, wr, ur, wn, un):
            if w.shape != (d, d):
                raise GraphError(f"gru_cell weight shape {w.shape}, want {(d, d)}")
        for b in (bz, br, bn):
            if b.shape != (1, d):
                raise GraphError(f"gru_cell bias shape {b.shape}, want {(1, d)}")
        y, saved = _gru_fwd(vx, vh, wz.value, uz.value, bz.value, wr.value,
                            ur.value, br.value, wn.value, un.value, bn.value)
        s, _ = vx.shape
        madds = 6 * s * d * d + 10 * s * d
        node = self._append(
            "gru_cell",
            (x.idx, h.idx, wz.idx, uz.idx, bz.idx, wr.idx, ur.idx, br.idx,
             wn.idx, un.idx, bn.idx),
            y, madds=madds)
        self._saved[node.idx] = saved
        return node

    def mean_pool(self, a: Node) -> Node:
        va = a.value
        if va.ndim != 2:
            raise GraphError(f"mean_pool needs 2-d operand, got {va.shape}")
        return self._append("mean_pool", (a.idx,), va.mean(axis=0, keepdims=True),
                            madds=va.size)

    def concat(self, a: Node, b: Node, axis: int) -> Node:
        va, vb = a.value, b.value
        if va.ndim != 2 or vb.ndim != 2 or axis not in (0, 1):
            raise GraphError("concat needs two 2-d operands and axis 0 or 1")
        other = 1 - axis
        if va.shape[other] != vb.shape[other]:
            raise GraphError(f"concat shape mismatch {va.shape} | {vb.shape} axis {axis}")
        return self._append("concat", (a.idx, b.idx),
                            np.concatenate([va, vb], axis=axis), aux=axis)

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise GraphError(f"mul shape mismatch {a.shape} * {b.shape}")
        return self._append("mul", (a.idx, b.idx), a.value * b.value,
                            madds=a.value.size)

    def squared_error(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise GraphError(f"squared_error shape mismatch {a.shape} vs {b.shape}")
        d = a.value - b.value
        return self._append("squared_error", (a.idx, b.idx),
                            np.asarray((d * d).mean(), dtype=self.dtype),
                            madds=2 * a.value.size)

    def cosine(self, a: Node, b: Node) -> Node:
        """Mean row-wise cosine similarity; zero-norm rows contribute 0."""
        if a.shape != b.shape or a.value.ndim != 2:
            raise GraphError(f"cosine needs matching 2-d shapes, got {a.shape}, {b.shape}")
        y, saved = _cosine_fwd(a.value, b.value)
        node = self._append("cosine", (a.idx, b.idx),
                            np.asarray(y, dtype=self.dtype), madds=4 * a.value.size)
        self._saved[node.idx] = saved
        return node

    def log(self, a: Node) -> Node:
        va = a.value
        if np.any(va <= 0):
            raise GraphError(f"log of non-positive entry (node {self._next_id()})")
        return self._append("log", (a.idx,), np.log(va), madds=va.size)

    def exp(self, a: Node) -> Node:
        return self._append("exp", (a.idx,), np.exp(a.value), madds=a.value.size)

    def clamp(self, a: Node, lo: float, hi: float) -> Node:
        lo, hi = float(lo), float(hi)
        if not lo < hi:
            raise GraphError(f"clamp bounds [{lo}, {hi}]")
        return self._append("clamp", (a.idx,), np.clip(a.value, lo, hi),
                            aux=(lo, hi), madds=a.value.size)

    def gather_rows(self, a: Node, indices) -> Node:
        va = a.value
        idx = np.asarray(indices, dtype=np.int64)
        if va.ndim != 2 or idx.ndim != 1:
            raise GraphError("gather_rows needs a 2-d source and 1-d index list")
        if idx.size and (idx.min() < 0 or idx.max() >= va.shape[0]):
            raise GraphError(f"gather_rows index out of range for {va.shape[0]} rows")
        return self._append("gather_rows", (a.idx,), va[idx], aux=idx)

    def reduce_sum(self, a: Node) -> Node:
        """Sum every entry down to a 0-d scalar."""
        return self._append("reduce_sum", (a.idx,),
                            np.asarray(a.value.sum(), dtype=self.dtype),
                            madds=a.value.size)

    def stop_gradient(self, a: Node) -> Node:
        return self._append("stop_gradient", (a.idx,), a.value)

    # ------------------------------------------------------------- utilities

    def mark(self, name: str, node: Node) -> Node:
        """Register a node under a name reported by forward()."""
        self._marks[name] = node.idx
        return node

    @property
    def num_nodes(self) -> int:
        return len(self._ops)

    def total_madds(self) -> int:
        return sum(self._madds)

    def input_names(self):
        return list(self._inputs)

    def ancestors(self, node: Node) -> set:
        """All node ids reachable backwards from `node`, inclusive."""
        seen = set()
        stack = [node.idx]
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(p for p in self._parents[i] if p not in seen)
        return seen

    def degenerate_rows(self, node: Node) -> np.ndarray:
        """Indices of zero-norm rows recorded by a cosine node."""
        if self._ops[node.idx] != "cosine":
            raise GraphError("degenerate_rows applies to cosine nodes")
        valid = self._saved[node.idx][3]
        return np.flatnonzero(~valid.ravel())

    def clone(self, dtype) -> "Graph":
        """Structural copy at another precision; used by the FD checker."""
        out = Graph(dtype=dtype, check_finite=self.check_finite)
        out._ops = list(self._ops)
        out._parents = list(self._parents)
        out._aux = list(self._aux)
        out._madds = list(self._madds)
        out._inputs = dict(self._inputs)
        out._marks = dict(self._marks)
        out._saved = [None] * len(self._ops)
        out._values = [np.asarray(v, dtype=dtype) for v in self._values]
        forward(out, {})
        return out

    # -------------------------------------------------------------- internal

    def _next_id(self) -> int:
        return len(self._ops)

    def _coerce(self, value, what: str) -> np.ndarray:
        arr = np.ascontiguousarray(np.asarray(value, dtype=self.dtype))
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise GraphError(f"{what}: non-finite entries")
        return arr

    def _append(self, op, parents, value, aux=None, madds=0) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise GraphError(f"non-finite output at node {self._next_id()} ({op})")
        self._ops.append(op)
        self._parents.append(parents)
        self._aux.append(aux)
        self._values.append(value)
        self._saved.append(None)
        self._madds.append(int(madds))
        return Node(self, len(self._ops) - 1)


# ------------------------------------------------------------ forward kernels

def _row_softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _col_softmax(x):
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _layer_norm_fwd(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _gru_fwd(x, h, wz, uz, bz, wr, ur, br, wn, un, bn):
    z = _sigmoid(x @ wz + h @ uz + bz)
    r = _sigmoid(x @ wr + h @ ur + br)
    rh = r * h
    n = np.tanh(x @ wn + rh @ un + bn)
    return z * h + (1.0 - z) * n, (z, r, n, rh)


def _cosine_fwd(a, b):
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    valid = (na > _COS_TINY) & (nb > _COS_TINY)
    denom = np.where(valid, na * nb, 1.0)
    cos = np.where(valid, (a * b).sum(axis=1, keepdims=True) / denom, 0.0)
    return cos.mean(), (na, nb, cos, valid)


def _replay_node(g: Graph, i: int):
    op = g._ops[i]
    p = g._parents[i]
    v = g._values
    if op == "matmul":
        out = v[p[0]] @ v[p[1]]
    elif op == "transpose":
        out = v[p[0]].T.copy()
    elif op == "add":
        out = v[p[0]] + v[p[1]]
    elif op == "scale":
        out = v[p[0]] * g.dtype.type(g._aux[i])
    elif op == "row_softmax":
        out = _row_softmax(v[p[0]])
    elif op == "col_softmax":
        out = _col_softmax(v[p[0]])
    elif op == "sigmoid":
        out = _sigmoid(v[p[0]])
    elif op == "relu":
        out = np.maximum(v[p[0]], 0)
    elif op == "layer_norm":
        out, saved = _layer_norm_fwd(v[p[0]], v[p[1]], v[p[2]])
        g._saved[i] = saved
    elif op == "gru_cell":
        out, saved = _gru_fwd(*(v[j] for j in p))
        g._saved[i] = saved
    elif op == "mean_pool":
        out = v[p[0]].mean(axis=0, keepdims=True)
    elif op == "concat":
        out = np.concatenate([v[p[0]], v[p[1]]], axis=g._aux[i])
    elif op == "mul":
        out = v[p[0]] * v[p[1]]
    elif op == "squared_error":
        d = v[p[0]] - v[p[1]]
        out = np.asarray((d * d).mean(), dtype=g.dtype)
    elif op == "cosine":
        y, saved = _cosine_fwd(v[p[0]], v[p[1]])
        g._saved[i] = saved
        out = np.asarray(y, dtype=g.dtype)
    elif op == "log":
        src = v[p[0]]
        if np.any(src <= 0):
            raise GraphError(f"log of non-positive entry (node {i})")
        out = np.log(src)
    elif op == "exp":
        out = np.exp(v[p[0]])
    elif op == "clamp":
        lo, hi = g._aux[i]
        out = np.clip(v[p[0]], lo, hi)
    elif op == "gather_rows":
        out = v[p[0]][g._aux[i]]
    elif op == "reduce_sum":
        out = np.asarray(v[p[0]].sum(), dtype=g.dtype)
    elif op == "stop_gradient":
        out = v[p[0]]
    else:  # pragma: no cover - input/const handled by caller
        raise GraphError(f"cannot replay op {op!r}")
    out = np.asarray(out, dtype=g.dtype)
    if g.check_finite and not np.all(np.isfinite(out)):
        raise GraphError(f"non-finite output at node {i} ({op})")
    g._values[i] = out


def forward(graph: Graph, bindings: dict | None = None) -> dict:
    """Replay the graph under new input bindings; return marked tensors."""
    bindings = bindings or {}
    for name, value in bindings.items():
        if name not in graph._inputs:
            raise GraphError(f"unknown input {name!r}")
        graph._values[graph._inputs[name]] = graph._coerce(value, f"input {name!r}")
    for i, op in enumerate(graph._ops):
        if op in ("input", "const"):
            continue
        _replay_node(graph, i)
    return {name: graph._values[i] for name, i in graph._marks.items()}


# ----------------------------------------------------------------- backward

def _bw_matmul(g, i, grad, grads):
    a, b = g._parents[i]
    _acc(grads, a, grad @ g._values[b].T)
    _acc(grads, b, g._values[a].T @ grad)


def _bw_transpose(g, i, grad, grads):
    _acc(grads, g._parents[i][0], grad.T)


def _bw_add(g, i, grad, grads):
    a, b = g._parents[i]
    _acc(grads, a, grad)
    if g._values[b].shape != g._values[a].shape:
        _acc(grads, b, grad.sum(axis=0, keepdims=True))
    else:
        _acc(grads, b, grad)


def _bw_scale(g, i, grad, grads):
    _acc(grads, g._parents[i][0], grad * g.dtype.type(g._aux[i]))


def _bw_row_softmax(g, i, grad, grads):
    y = g._values[i]
    gy = grad * y
    _acc(grads, g._parents[i][0], gy - y * gy.sum(axis=1, keepdims=True))


def _bw_col_softmax(g, i, grad, grads):
    y = g._values[i]
    gy = grad * y
    _acc(grads, g._parents[i][0], gy - y * gy.sum(axis=0, keepdims=True))


def _bw_sigmoid(g, i, grad, grads):
    y = g._values[i]
    _acc(grads, g._parents[i][0], grad * y * (1.0 - y))


def _bw_relu(g, i, grad, grads):
    x = g._values[g._parents[i][0]]
    _acc(grads, g._parents[i][0], grad * (x > 0))


def _bw_layer_norm(g, i, grad, grads):
    a, gi, bi = g._parents[i]
    xhat, inv = g._saved[i]
    gamma = g._values[gi]
    gg = grad * gamma
    dx = inv * (gg - gg.mean(axis=1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=1, keepdims=True))
    _acc(grads, a, dx)
    _acc(grads, gi, (grad * xhat).sum(axis=0, keepdims=True))
    _acc(grads, bi, grad.sum(axis=0, keepdims=True))


def _bw_gru(g, i, grad, grads):
    (xi, hi, wzi, uzi, bzi, wri, uri, bri, wni, uni, bni) = g._parents[i]
    z, r, n, rh = g._saved[i]
    x, h = g._values[xi], g._values[hi]
    wz, uz = g._values[wzi], g._values[uzi]
    wr, ur = g._values[wri], g._values[uri]
    wn, un = g._values[wni], g._values[uni]

    dz = grad * (h - n)
    dn = grad * (1.0 - z)
    dh = grad * z

    dnp = dn * (1.0 - n * n)
    dx = dnp @ wn.T
    drh = dnp @ un.T
    dr = drh * h
    dh = dh + drh * r

    dzp = dz * z * (1.0 - z)
    drp = dr * r * (1.0 - r)
    dx = dx + dzp @ wz.T + drp @ wr.T
    dh = dh + dzp @ uz.T + drp @ ur.T

    _acc(grads, xi, dx)
    _acc(grads, hi, dh)
    _acc(grads, wzi, x.T @ dzp)
    _acc(grads, uzi, h.T @ dzp)
    _acc(grads, bzi, dzp.sum(axis=0, keepdims=True))
    _acc(grads, wri, x.T @ drp)
    _acc(grads, uri, h.T @ drp)
    _acc(grads, bri, drp.sum(axis=0, keepdims=True))
    _acc(grads, wni, x.T @ dnp)
    _acc(grads, uni, rh.T @ dnp)
    _acc(grads, bni, dnp.sum(axis=0, keepdims=True))


def _bw_mean_pool(g, i, grad, grads):
    p = g._parents[i][0]
    m = g._values[p].shape[0]
    _acc(grads, p, np.broadcast_to(grad / m, g._values[p].shape).copy())


def _bw_concat(g, i, grad, grads):
    a, b = g._parents[i]
    axis = g._aux[i]
    na = g._values[a].shape[axis]
    if axis == 0:
        _acc(grads, a, grad[:na])
        _acc(grads, b, grad[na:])
    else:
        _acc(grads, a, grad[:, :na])
        _acc(grads, b, grad[:, na:])


def _bw_mul(g, i, grad, grads):
    a, b = g._parents[i]
    _acc(grads, a, grad * g._values[b])
    _acc(grads, b, grad * g._values[a])


def _bw_squared_error(g, i, grad, grads):
    a, b = g._parents[i]
    d = g._values[a] - g._values[b]
    coeff = grad * g.dtype.type(2.0 / d.size)
    _acc(grads, a, coeff * d)
    _acc(grads, b, -coeff * d)


def _bw_cosine(g, i, grad, grads):
    a, b = g._parents[i]
    va, vb = g._values[a], g._values[b]
    na, nb, cos, valid = g._saved[i]
    m = va.shape[0]
    s = (grad / g.dtype.type(m)) * valid
    sna = np.where(valid, na, 1.0)
    snb = np.where(valid, nb, 1.0)
    da = s * (vb / (sna * snb) - cos * va / (sna * sna))
    db = s * (va / (sna * snb) - cos * vb / (snb * snb))
    _acc(grads, a, da)
    _acc(grads, b, db)


def _bw_log(g, i, grad, grads):
    p = g._parents[i][0]
    _acc(grads, p, grad / g._values[p])


def _bw_exp(g, i, grad, grads):
    _acc(grads, g._parents[i][0], grad * g._values[i])


def _bw_clamp(g, i, grad, grads):
    p = g._parents[i][0]
    lo, hi = g._aux[i]
    x = g._values[p]
    _acc(grads, p, grad * ((x >= lo) & (x <= hi)))


def _bw_gather_rows(g, i, grad, grads):
    p = g._parents[i][0]
    buf = np.zeros_like(g._values[p])
    np.add.at(buf, g._aux[i], grad)
    _acc(grads, p, buf)


def _bw_reduce_sum(g, i, grad, grads):
    p = g._parents[i][0]
    _acc(grads, p, np.broadcast_to(grad, g._values[p].shape).copy())


_BACKWARD = {
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "add": _bw_add,
    "scale": _bw_scale,
    "row_softmax": _bw_row_softmax,
    "col_softmax": _bw_col_softmax,
    "sigmoid": _bw_sigmoid,
    "relu": _bw_relu,
    "layer_norm": _bw_layer_norm,
    "gru_cell": _bw_gru,
    "mean_pool": _bw_mean_pool,
    "concat": _bw_concat,
    "mul": _bw_mul,
    "squared_error": _bw_squared_error,
    "cosine": _bw_cosine,
    "log": _bw_log,
    "exp": _bw_exp,
    "clamp": _bw_clamp,
    "gather_rows": _bw_gather_rows,
    "reduce_sum": _bw_reduce_sum,
    # input/const/stop_gradient intentionally absent: adjoint is zero.
}


def _acc(grads, idx, delta):
    if grads[idx] is None:
        grads[idx] = delta
    else:
        grads[idx] = grads[idx] + delta


def backward(graph: Graph, seed: Node) -> dict:
    """Adjoints of a size-1 seed w.r.t. every named input.

    Inputs unreachable from the seed get exact zero gradients.
    """
    sv = graph._values[seed.idx]
    if sv.size != 1:
        raise GraphError(f"backward seed must be scalar, got shape {sv.shape}")
    grads: list = [None] * graph.num_nodes
    grads[seed.idx] = np.ones_like(sv)
    for i in range(seed.idx, -1, -1):
        gr = grads[i]
        if gr is None:
            continue
        fn = _BACKWARD.get(graph._ops[i])
        if fn is not None:
            fn(graph, i, gr, grads)
    out = {}
    for name, i in graph._inputs.items():
        out[name] = grads[i] if grads[i] is not None else np.zeros_like(graph._values[i])
    return out


def finite_diff_check(graph: Graph, seed: Node, step: float = 1e-3,
                      wrt=None) -> float:
    """Max relative error between backward() and finite differences.

    Relative error per element is |a - b| / max(|a|, |b|, 1e-8). The
    numeric reference is a fourth-order central difference evaluated on
    a float64 shadow replay of the graph, so the comparison measures
    the backward implementation at the graph's own precision rather
    than forward rounding or truncation noise. Exact for (piecewise)
    polynomials of degree <= 4, hence 0.0 for linear functions at
    power-of-two steps. Only meant for micro graphs: cost is four
    replays per input element.
    """
    analytic = backward(graph, seed)
    shadow = graph.clone(np.float64)
    names = list(wrt) if wrt is not None else graph.input_names()
    base = {n: shadow._values[shadow._inputs[n]].copy() for n in names}

    # Each perturbation only invalidates the perturbed input's descendant
    # cone; everything else keeps its base value, so replaying just the
    # cone (in node order) matches a full replay bitwise.
    children = [[] for _ in range(shadow.num_nodes)]
    for i, parents in enumerate(shadow._parents):
        for p in set(parents):
            children[p].append(i)

    def cone(root: int):
        seen = {root}
        stack = [root]
        while stack:
            for c in children[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        seen.discard(root)
        return sorted(seen)

    def eval_at(idx, affected, x, k, delta):
        xp = x.copy()
        xp.flat[k] += delta
        shadow._values[idx] = xp
        for i in affected:
            _replay_node(shadow, i)
        return shadow._values[seed.idx].item()

    worst = 0.0
    for name in names:
        idx = shadow._inputs[name]
        affected = cone(idx)
        x = base[name]
        g = analytic[name]
        for k in range(x.size):
            f_m2 = eval_at(idx, affected, x, k, -2.0 * step)
            f_m1 = eval_at(idx, affected, x, k, -step)
            f_p1 = eval_at(idx, affected, x, k, step)
            f_p2 = eval_at(idx, affected, x, k, 2.0 * step)
            # pairwise grouping: equal evaluations cancel exactly
            num = ((f_m2 - f_p2) + 8.0 * (f_p1 - f_m1)) / (12.0 * step)
            an = float(g.flat[k])
            err = abs(num - an) / max(abs(num), abs(an), 1e-8)
            worst = max(worst, err)
        # restore the base values along the cone before the next input
        shadow._values[idx] = x
        for i in affected:
            _replay_node(shadow, i)
    return worst


# ------------------------------------------------------- parameter dataclasses


def named_arrays(prefix: str, obj) -> dict:
    """Flatten a dataclass of ndarrays into an ordered {prefix.field: array}."""
    out = {}
    for f in dataclasses.fields(obj):
        out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
    return out


def bind_arrays(graph: Graph, prefix: str, obj, trainable: bool = True):
    """Mirror a dataclass of ndarrays as graph leaves.

    Returns an instance of the same dataclass type whose fields hold the
    created Nodes: inputs named "<prefix>.<field>" when trainable, consts
    otherwise (no gradient, no rebinding).
    """
    kw = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if trainable:
            kw[f.name] = graph.input(f"{prefix}.{f.name}", value)
        else:
            kw[f.name] = graph.const(value)
    return type(obj)(**kw)
