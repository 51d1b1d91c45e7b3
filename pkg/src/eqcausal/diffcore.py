"""Reverse-mode automatic differentiation over dense float64 vectors.

Expression graphs are immutable DAGs of vector-valued operations with named
input slots (e.g. "parents", "theta", "u"). Evaluation allocates fresh value
buffers per call, so one graph can be evaluated concurrently. Supported
operations: add, sub, mul (elementwise), recip, neg, matvec (constant matrix),
dot, pow (constant exponent), exp, log, relu, concat, slice, gather,
broadcast (scalar to vector).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DomainError, ShapeMismatch, UnboundSlot

Array = np.ndarray


def _as_vector(value, what="value") -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ShapeMismatch(f"{what} must be a 1-d vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GraphNode:
    op: str
    args: tuple[int, ...]
    payload: object = None


@dataclass(frozen=True, eq=False)
class ExprGraph:
    """Immutable expression DAG. Node arguments always precede the node."""

    nodes: tuple[GraphNode, ...]
    output: int
    slots: dict  # slot name -> (node index, dim)
    dims: tuple[int, ...]  # per-node output dimension

    @property
    def output_dim(self) -> int:
        return self.dims[self.output]

    def slot_dim(self, name: str) -> int:
        return self.slots[name][1]


class Ref:
    """Handle to a node under construction; supports +, -, * and unary -."""

    __slots__ = ("builder", "idx", "dim")

    def __init__(self, builder, idx, dim):
        self.builder = builder
        self.idx = idx
        self.dim = dim

    def __add__(self, other):
        return self.builder.add(self, other)

    def __sub__(self, other):
        return self.builder.sub(self, other)

    def __mul__(self, other):
        return self.builder.mul(self, other)

    def __neg__(self):
        return self.builder.neg(self)


class ExprBuilder:
    """Accumulates nodes in topological order and freezes them into an ExprGraph."""

    def __init__(self):
        self._nodes: list[GraphNode] = []
        self._dims: list[int] = []
        self._inputs: dict[str, Ref] = {}

    def _push(self, op, args, payload, dim) -> Ref:
        self._nodes.append(GraphNode(op, tuple(a.idx for a in args), payload))
        self._dims.append(dim)
        return Ref(self, len(self._nodes) - 1, dim)

    def input(self, slot: str, dim: int) -> Ref:
        if slot in self._inputs:
            ref = self._inputs[slot]
            if ref.dim != dim:
                raise ShapeMismatch(f"slot {slot!r} re-declared with dim {dim}, was {ref.dim}")
            return ref
        ref = self._push("input", (), (slot, int(dim)), int(dim))
        self._inputs[slot] = ref
        return ref

    def const(self, value) -> Ref:
        arr = _as_vector(value, "const")
        arr.setflags(write=False)
        return self._push("const", (), arr, arr.shape[0])

    def _binary(self, op, a, b) -> Ref:
        if a.dim != b.dim:
            raise ShapeMismatch(f"{op}: dims {a.dim} vs {b.dim}")
        return self._push(op, (a, b), None, a.dim)

    def add(self, a, b) -> Ref:
        return self._binary("add", a, b)

    def sub(self, a, b) -> Ref:
        return self._binary("sub", a, b)

    def mul(self, a, b) -> Ref:
        return self._binary("mul", a, b)

    def recip(self, a) -> Ref:
        return self._push("recip", (a,), None, a.dim)

    def neg(self, a) -> Ref:
        return self._push("neg", (a,), None, a.dim)

    def matvec(self, matrix, v) -> Ref:
        mat = np.asarray(matrix, dtype=np.float64)
        if mat.ndim != 2:
            raise ShapeMismatch(f"matvec matrix must be 2-d, got shape {mat.shape}")
        if mat.shape[1] != v.dim:
            raise ShapeMismatch(f"matvec: matrix is {mat.shape}, vector dim {v.dim}")
        mat = mat.copy()
        mat.setflags(write=False)
        return self._push("matvec", (v,), mat, mat.shape[0])

    def dot(self, a, b) -> Ref:
        if a.dim != b.dim:
            raise ShapeMismatch(f"dot: dims {a.dim} vs {b.dim}")
        return self._push("dot", (a, b), None, 1)

    def powc(self, a, exponent: float) -> Ref:
        return self._push("pow", (a,), float(exponent), a.dim)

    def exp(self, a) -> Ref:
        return self._push("exp", (a,), None, a.dim)

    def log(self, a) -> Ref:
        return self._push("log", (a,), None, a.dim)

    def relu(self, a) -> Ref:
        return self._push("relu", (a,), None, a.dim)

    def concat(self, *refs) -> Ref:
        if not refs:
            raise ShapeMismatch("concat needs at least one argument")
        return self._push("concat", refs, None, sum(r.dim for r in refs))

    def slice(self, a, start: int, stop: int) -> Ref:
        if not (0 <= start <= stop <= a.dim):
            raise ShapeMismatch(f"slice [{start}:{stop}] out of range for dim {a.dim}")
        return self._push("slice", (a,), (int(start), int(stop)), stop - start)

    def gather(self, a, indices) -> Ref:
        idx = tuple(int(i) for i in indices)
        if any(i < 0 or i >= a.dim for i in idx):
            raise ShapeMismatch(f"gather indices {idx} out of range for dim {a.dim}")
        return self._push("gather", (a,), idx, len(idx))

    def broadcast(self, a, dim: int) -> Ref:
        if a.dim != 1:
            raise ShapeMismatch(f"broadcast expects a scalar node, got dim {a.dim}")
        return self._push("broadcast", (a,), int(dim), int(dim))

    def build(self, output: Ref) -> ExprGraph:
        slots = {slot: (ref.idx, ref.dim) for slot, ref in self._inputs.items()}
        return ExprGraph(tuple(self._nodes), output.idx, slots, tuple(self._dims))


def inline(builder: ExprBuilder, graph: ExprGraph, slot_map: Mapping[str, Ref] | None = None) -> Ref:
    """Copy a graph's nodes into a builder, substituting input slots via slot_map.

    Slots absent from slot_map become (or reuse) same-named inputs of the
    enclosing builder. Returns a handle to the inlined graph's output.
    """
    slot_map = slot_map or {}
    mapping: dict[int, Ref] = {}
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            slot, dim = node.payload
            if slot in slot_map:
                repl = slot_map[slot]
                if repl.dim != dim:
                    raise ShapeMismatch(f"slot {slot!r} substitution has dim {repl.dim}, graph expects {dim}")
                mapping[i] = repl
            else:
                mapping[i] = builder.input(slot, dim)
        elif node.op == "const":
            mapping[i] = builder._push("const", (), node.payload, graph.dims[i])
        else:
            args = tuple(mapping[a] for a in node.args)
            mapping[i] = builder._push(node.op, args, node.payload, graph.dims[i])
    return mapping[graph.output]


def _forward_values(graph: ExprGraph, bindings: Mapping[str, Array]) -> list[Array]:
    vals: list[Array] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for i, node in enumerate(graph.nodes):
        op = node.op
        if op == "input":
            slot, dim = node.payload
            if slot not in bindings:
                raise UnboundSlot(f"slot {slot!r} not bound")
            v = np.asarray(bindings[slot], dtype=np.float64)
            if v.ndim != 1 or v.shape[0] != dim:
                raise ShapeMismatch(f"slot {slot!r} expects dim {dim}, got shape {v.shape}")
            vals[i] = v
        elif op == "const":
            vals[i] = node.payload
        elif op == "add":
            vals[i] = vals[node.args[0]] + vals[node.args[1]]
        elif op == "sub":
            vals[i] = vals[node.args[0]] - vals[node.args[1]]
        elif op == "mul":
            vals[i] = vals[node.args[0]] * vals[node.args[1]]
        elif op == "recip":
            a = vals[node.args[0]]
            if np.any(a == 0.0):
                raise DomainError("reciprocal of zero")
            vals[i] = 1.0 / a
        elif op == "neg":
            vals[i] = -vals[node.args[0]]
        elif op == "matvec":
            vals[i] = node.payload @ vals[node.args[0]]
        elif op == "dot":
            vals[i] = np.array([vals[node.args[0]] @ vals[node.args[1]]])
        elif op == "pow":
            a = vals[node.args[0]]
            c = node.payload
            if c < 0.0 and np.any(a <= 0.0):
                raise DomainError(f"pow with negative exponent {c} on non-positive base")
            if c != int(c) and np.any(a < 0.0):
                raise DomainError(f"pow with fractional exponent {c} on negative base")
            vals[i] = np.power(a, c)
        elif op == "exp":
            vals[i] = np.exp(vals[node.args[0]])
        elif op == "log":
            a = vals[node.args[0]]
            if np.any(a <= 0.0):
                raise DomainError("log of non-positive value")
            vals[i] = np.log(a)
        elif op == "relu":
            vals[i] = np.maximum(vals[node.args[0]], 0.0)
        elif op == "concat":
            vals[i] = np.concatenate([vals[a] for a in node.args])
        elif op == "slice":
            start, stop = node.payload
            vals[i] = vals[node.args[0]][start:stop]
        elif op == "gather":
            vals[i] = vals[node.args[0]][list(node.payload)]
        elif op == "broadcast":
            vals[i] = np.full(node.payload, vals[node.args[0]][0])
        else:
            raise ValueError(f"unknown op {op!r}")
    return vals


def forward_eval(graph: ExprGraph, bindings: Mapping[str, Array]) -> Array:
    """Evaluate the graph's output for the given slot bindings."""
    return _forward_values(graph, bindings)[graph.output].copy()


@dataclass
class Gradient:
    """Per-input-slot partial derivatives, each shaped like its slot."""

    parts: dict

    def __getitem__(self, slot: str) -> Array:
        return self.parts[slot]

    def get(self, slot: str, default=None):
        return self.parts.get(slot, default)


def reverse_vjp(graph: ExprGraph, bindings: Mapping[str, Array], cotangent) -> Gradient:
    """Vector-Jacobian product v^T J for each input slot of the graph.

    The relu derivative at exactly 0 is taken to be 0.
    """
    vals = _forward_values(graph, bindings)
    cot = _as_vector(cotangent, "cotangent")
    if cot.shape[0] != graph.output_dim:
        raise ShapeMismatch(f"cotangent dim {cot.shape[0]} != output dim {graph.output_dim}")

    adj: list[Array | None] = [None] * len(graph.nodes)
    adj[graph.output] = cot.astype(np.float64, copy=True)

    def acc(idx, value):
        if adj[idx] is None:
            adj[idx] = np.zeros(graph.dims[idx])
        adj[idx] += value

    for i in range(len(graph.nodes) - 1, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = graph.nodes[i]
        op = node.op
        if op in ("input", "const"):
            continue
        elif op == "add":
            acc(node.args[0], g)
            acc(node.args[1], g)
        elif op == "sub":
            acc(node.args[0], g)
            acc(node.args[1], -g)
        elif op == "mul":
            acc(node.args[0], g * vals[node.args[1]])
            acc(node.args[1], g * vals[node.args[0]])
        elif op == "recip":
            out = vals[i]
            acc(node.args[0], -g * out * out)
        elif op == "neg":
            acc(node.args[0], -g)
        elif op == "matvec":
            acc(node.args[0], node.payload.T @ g)
        elif op == "dot":
            acc(node.args[0], g[0] * vals[node.args[1]])
            acc(node.args[1], g[0] * vals[node.args[0]])
        elif op == "pow":
            a = vals[node.args[0]]
            c = node.payload
            acc(node.args[0], g * c * np.power(a, c - 1.0))
        elif op == "exp":
            acc(node.args[0], g * vals[i])
        elif op == "log":
            acc(node.args[0], g / vals[node.args[0]])
        elif op == "relu":
            acc(node.args[0], g * (vals[node.args[0]] > 0.0))
        elif op == "concat":
            offset = 0
            for a in node.args:
                d = graph.dims[a]
                acc(a, g[offset:offset + d])
                offset += d
        elif op == "slice":
            start, stop = node.payload
            full = np.zeros(graph.dims[node.args[0]])
            full[start:stop] = g
            acc(node.args[0], full)
        elif op == "gather":
            full = np.zeros(graph.dims[node.args[0]])
            np.add.at(full, list(node.payload), g)
            acc(node.args[0], full)
        elif op == "broadcast":
            acc(node.args[0], np.array([g.sum()]))
        else:
            raise ValueError(f"unknown op {op!r}")

    parts = {}
    for slot, (idx, dim) in graph.slots.items():
        grad = adj[idx]
        parts[slot] = np.zeros(dim) if grad is None else grad
    return Gradient(parts)


def jacobian(graph: ExprGraph, bindings: Mapping[str, Array], slot: str) -> Array:
    """Dense Jacobian of the output w.r.t. one input slot (n x m)."""
    n = graph.output_dim
    m = graph.slot_dim(slot)
    out = np.zeros((n, m))
    cot = np.zeros(n)
    for i in range(n):
        cot[i] = 1.0
        out[i, :] = reverse_vjp(graph, bindings, cot)[slot]
        cot[i] = 0.0
    return out


def finite_difference_jacobian(fn: Callable[[Array], Array], x, h: float = 1e-6) -> Array:
    """Central-difference Jacobian estimate of fn at x; column j uses x +/- h e_j."""
    x = _as_vector(x, "x").copy()
    if h <= 0:
        raise ValueError("h must be positive")
    f0 = _as_vector(fn(x), "fn(x)")
    out = np.zeros((f0.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        out[:, j] = (_as_vector(fn(xp)) - _as_vector(fn(xm))) / (2.0 * h)
    return out


# --- serialization (op-code JSON form) ---

def graph_to_obj(graph: ExprGraph) -> dict:
    """Encode a graph as plain JSON-ready data; floats round-trip bit-exactly."""
    nodes = []
    for i, node in enumerate(graph.nodes):
        rec: dict = {"op": node.op, "args": list(node.args)}
        if node.op == "input":
            rec["slot"], rec["dim"] = node.payload
        elif node.op == "const":
            rec["values"] = node.payload.tolist()
        elif node.op == "matvec":
            rec["matrix"] = node.payload.tolist()
        elif node.op == "pow":
            rec["exponent"] = node.payload
        elif node.op == "slice":
            rec["start"], rec["stop"] = node.payload
        elif node.op == "gather":
            rec["indices"] = list(node.payload)
        elif node.op == "broadcast":
            rec["dim"] = node.payload
        nodes.append(rec)
    return {"nodes": nodes, "output": graph.output}


def graph_from_obj(obj: dict) -> ExprGraph:
    """Inverse of graph_to_obj."""
    b = ExprBuilder()
    refs: list[Ref] = []
    for rec in obj["nodes"]:
        op = rec["op"]
        args = tuple(refs[a] for a in rec["args"])
        if op == "input":
            refs.append(b.input(rec["slot"], rec["dim"]))
        elif op == "const":
            refs.append(b.const(rec["values"]))
        elif op == "matvec":
            refs.append(b.matvec(rec["matrix"], args[0]))
        elif op == "pow":
            refs.append(b.powc(args[0], rec["exponent"]))
        elif op == "slice":
            refs.append(b.slice(args[0], rec["start"], rec["stop"]))
        elif op == "gather":
            refs.append(b.gather(args[0], rec["indices"]))
        elif op == "broadcast":
            refs.append(b.broadcast(args[0], rec["dim"]))
        elif op == "concat":
            refs.append(b.concat(*args))
        elif op in ("add", "sub", "mul", "dot"):
            refs.append(getattr(b, op)(args[0], args[1]))
        elif op in ("recip", "neg", "exp", "log", "relu"):
            refs.append(getattr(b, op)(args[0]))
        else:
            raise ValueError(f"unknown op {op!r}")
    return b.build(refs[obj["output"]])
