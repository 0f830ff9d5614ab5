"""Predictive coding on arbitrary computation graphs.

Each vertex holds a value ``v_i = op_i(parents; theta_i)``. Augmenting the
graph with one error unit per vertex and freezing the forward predictions
``v^_i`` gives the relaxation

    d eps_i / dt = -eps_i + sum_{j in children(i)} J_ji^T eps_j,

whose fixed point is the reverse-mode recursion. With ``eps_out`` seeded to
``dL/dv_out`` the relaxed errors are the backprop gradients, and the local
weight rule ``eps_i * dv^_i/dtheta_i`` gives the parameter gradients.

Supported vertex ops: ``input``, ``linear`` (sum of ``W:<parent> @ v_parent``
plus ``b``), the elementwise activations ``identity``, ``tanh``, ``logistic``,
``rectifier``, and ``add`` / ``mul`` over several parents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .activations import ACTIVATIONS
from .errors import ArgumentError, DivergenceError, StateError, StructuralError

ELEMENTWISE = set(ACTIVATIONS)
OPS = {"input", "linear", "add", "mul"} | ELEMENTWISE


@dataclass
class Vertex:
    name: str
    dim: int
    op: str = "input"
    parents: list = field(default_factory=list)

    @property
    def is_input(self) -> bool:
        return self.op == "input"


@dataclass
class Loss:
    kind: str = "mse"
    target: np.ndarray | None = None

    def value(self, y):
        if self.kind == "mse":
            r = y - self.target
            return 0.5 * float(r @ r)
        if self.kind == "sum":
            return float(np.sum(y))
        raise ArgumentError(f"unknown loss {self.kind!r}")

    def grad(self, y):
        if self.kind == "mse":
            return y - self.target
        if self.kind == "sum":
            return np.ones_like(y)
        raise ArgumentError(f"unknown loss {self.kind!r}")


class ComputationGraph:
    def __init__(self, vertices, output: str, loss: Loss | None = None, params=None):
        self.vertices = {}
        for v in vertices:
            if v.name in self.vertices:
                raise StructuralError(f"duplicate vertex {v.name!r}")
            if v.op not in OPS:
                raise StructuralError(f"vertex {v.name!r} has unknown op {v.op!r}")
            self.vertices[v.name] = v
        self.output = output
        self.loss = loss or Loss("sum")
        self.params = params if params is not None else {}
        self.order = self._topological_order()
        self.children = {n: [] for n in self.vertices}
        for v in self.vertices.values():
            for p in v.parents:
                self.children[p].append(v.name)
        self._validate()

    def _topological_order(self):
        for v in self.vertices.values():
            for p in v.parents:
                if p not in self.vertices:
                    raise StructuralError(f"vertex {v.name!r} references unknown parent {p!r}")
        indeg = {n: len(v.parents) for n, v in self.vertices.items()}
        kids = {n: [] for n in self.vertices}
        for v in self.vertices.values():
            for p in v.parents:
                kids[p].append(v.name)
        ready = [n for n in self.vertices if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in kids[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.vertices):
            raise StructuralError("graph contains a cycle")
        return order

    def _validate(self):
        if self.output not in self.vertices:
            raise StructuralError(f"unknown output vertex {self.output!r}")
        if self.children[self.output]:
            raise StructuralError("the output vertex must not have children")
        for v in self.vertices.values():
            if v.is_input:
                if v.parents:
                    raise StructuralError(f"input vertex {v.name!r} cannot have parents")
                continue
            if not v.parents:
                raise StructuralError(f"non-input vertex {v.name!r} needs at least one parent")
            pdims = [self.vertices[p].dim for p in v.parents]
            if v.op in ELEMENTWISE and (len(v.parents) != 1 or pdims[0] != v.dim):
                raise StructuralError(f"elementwise vertex {v.name!r} needs one parent of equal dim")
            if v.op in ("add", "mul") and any(d != v.dim for d in pdims):
                raise StructuralError(f"vertex {v.name!r}: {v.op} needs parents of equal dim")
            if v.op == "linear":
                prm = self.params.setdefault(v.name, {})
                for p, d in zip(v.parents, pdims):
                    W = prm.get(f"W:{p}")
                    if W is None or np.shape(W) != (v.dim, d):
                        raise StructuralError(f"vertex {v.name!r} needs W:{p} of shape {(v.dim, d)}")
                    prm[f"W:{p}"] = np.asarray(W, dtype=float)
                prm["b"] = np.asarray(prm.get("b", np.zeros(v.dim)), dtype=float)
        if self.loss.kind == "mse":
            if self.loss.target is None:
                raise StructuralError("mse loss needs a target")
            self.loss.target = np.asarray(self.loss.target, dtype=float)
            if self.loss.target.shape != (self.vertices[self.output].dim,):
                raise StructuralError("loss target does not match the output dimension")

    @property
    def inputs(self):
        return [n for n in self.order if self.vertices[n].is_input]

    def depth(self) -> int:
        """Longest input-to-output path, in edges."""
        dist = {}
        for n in self.order:
            v = self.vertices[n]
            dist[n] = 0 if v.is_input else 1 + max(dist[p] for p in v.parents)
        return dist[self.output]


# ---------------------------------------------------------------------------
# local operations


def _eval_vertex(v: Vertex, pvals, prm):
    if v.op == "linear":
        out = prm["b"].copy()
        for p, x in zip(v.parents, pvals):
            out = out + prm[f"W:{p}"] @ x
        return out
    if v.op in ELEMENTWISE:
        return ACTIVATIONS[v.op].f(pvals[0])
    if v.op == "add":
        return np.sum(pvals, axis=0)
    if v.op == "mul":
        return np.prod(pvals, axis=0)
    raise StructuralError(f"cannot evaluate op {v.op!r}")


def _local_jacobian(v: Vertex, parent_index: int, pvals, prm) -> np.ndarray:
    """dv / d(parent), a (dim_v, dim_parent) matrix at the given parent values."""
    if v.op == "linear":
        return prm[f"W:{v.parents[parent_index]}"]
    if v.op in ELEMENTWISE:
        return np.diag(ACTIVATIONS[v.op].df(pvals[0]))
    if v.op == "add":
        return np.eye(v.dim)
    if v.op == "mul":
        others = [x for k, x in enumerate(pvals) if k != parent_index]
        return np.diag(np.prod(others, axis=0) if others else np.ones(v.dim))
    raise StructuralError(f"no jacobian for op {v.op!r}")


def _param_grads(v: Vertex, err: np.ndarray, pvals) -> dict:
    """err * dv/dtheta for every parameter of vertex ``v``."""
    if v.op != "linear":
        return {}
    out = {f"W:{p}": np.outer(err, x) for p, x in zip(v.parents, pvals)}
    out["b"] = err.copy()
    return out


def vertex_relax_update(eps_i: np.ndarray, child_terms, eta: float) -> np.ndarray:
    """Relaxation of one error unit from purely local quantities.

    ``child_terms`` is a list of ``(eps_j, J_ji)`` pairs for the children of i.
    """
    drive = np.zeros_like(eps_i)
    for eps_j, J in child_terms:
        drive = drive + J.T @ eps_j
    return eps_i + eta * (drive - eps_i)


# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    values: dict
    loss: float
    n_evals: int


def forward_pass(graph: ComputationGraph, inputs: dict, overrides: dict | None = None) -> ForwardResult:
    """Evaluate every vertex in topological order.

    ``overrides`` replaces the computed value of the named vertices, which is
    how finite-difference probes of dL/dv_i are made.
    """
    overrides = overrides or {}
    values = {}
    n = 0
    for name in graph.order:
        v = graph.vertices[name]
        if v.is_input:
            if name not in inputs:
                raise ArgumentError(f"input vertex {name!r} is not bound")
            x = np.atleast_1d(np.asarray(inputs[name], dtype=float))
            if x.shape != (v.dim,):
                raise StructuralError(f"input {name!r} has shape {x.shape}, expected ({v.dim},)")
            values[name] = x
        else:
            values[name] = _eval_vertex(v, [values[p] for p in v.parents], graph.params.get(name, {}))
        n += 1
        if name in overrides:
            values[name] = np.asarray(overrides[name], dtype=float)
    return ForwardResult(values, graph.loss.value(values[graph.output]), n)


def reverse_oracle(graph: ComputationGraph, fwd: ForwardResult):
    """Exact reverse-mode gradients: ``(vertex_grads, param_grads)``."""
    vals = fwd.values
    grads = {n: np.zeros(graph.vertices[n].dim) for n in graph.order}
    grads[graph.output] = graph.loss.grad(vals[graph.output])
    for name in reversed(graph.order):
        v = graph.vertices[name]
        if v.is_input:
            continue
        pvals = [vals[p] for p in v.parents]
        prm = graph.params.get(name, {})
        for k, p in enumerate(v.parents):
            grads[p] = grads[p] + _local_jacobian(v, k, pvals, prm).T @ grads[name]
    pgrads = {}
    for name in graph.order:
        v = graph.vertices[name]
        if not v.is_input and v.op == "linear":
            pgrads[name] = _param_grads(v, grads[name], [vals[p] for p in v.parents])
    return grads, pgrads


class AugmentedGraph:
    """A computation graph with one error unit per vertex and frozen predictions."""

    def __init__(self, graph: ComputationGraph, fwd: ForwardResult, precision_weights: dict | None = None):
        self.base = graph
        self.predictions = {}
        for k, x in fwd.values.items():
            x = x.copy()
            x.setflags(write=False)
            self.predictions[k] = x
        self.jacobians = {}
        for name in graph.order:
            v = graph.vertices[name]
            if v.is_input:
                continue
            pvals = [self.predictions[p] for p in v.parents]
            prm = graph.params.get(name, {})
            for k, p in enumerate(v.parents):
                J = _local_jacobian(v, k, pvals, prm).copy()
                J.setflags(write=False)
                self.jacobians[(name, p)] = J
        # experimental: per-vertex scalar precision reweighting of child errors
        self.precision_weights = precision_weights or {}
        self.eps = {n: np.zeros(graph.vertices[n].dim) for n in graph.order}
        self.eps[graph.output] = graph.loss.grad(self.predictions[graph.output])
        self.relaxed = False
        self.iterations = 0

    def values(self) -> dict:
        """Current vertex values, v_i = v^_i + eps_i (inputs stay clamped)."""
        out = {}
        for n in self.base.order:
            if self.base.vertices[n].is_input:
                out[n] = self.predictions[n]
            else:
                out[n] = self.predictions[n] + self.eps[n]
        return out

    def child_terms(self, name: str):
        w = self.precision_weights
        return [(w.get(c, 1.0) * self.eps[c], self.jacobians[(c, name)]) for c in self.base.children[name]]

    def free_vertices(self):
        g = self.base
        return [n for n in g.order if not g.vertices[n].is_input and n != g.output]

    def fixed_point_residual(self) -> float:
        r = 0.0
        for n in self.free_vertices():
            drive = sum((J.T @ e for e, J in self.child_terms(n)), np.zeros_like(self.eps[n]))
            r = max(r, float(np.max(np.abs(self.eps[n] - drive))))
        return r


def pc_relax(aug: AugmentedGraph, eta: float = 0.5, iters: int | None = None, tol: float = 1e-12,
             schedule: str = "jacobi", callback=None) -> dict:
    """Relax the error units with predictions frozen; returns the error dict.

    ``schedule="jacobi"`` updates all units from the previous sweep;
    ``"sequential"`` sweeps in reverse topological order using fresh values.
    ``iters`` defaults to ``200 * depth``.
    """
    g = aug.base
    if iters is None:
        iters = 200 * max(g.depth(), 1)
    free = list(reversed(aug.free_vertices()))
    n = 0
    for n in range(1, iters + 1):
        if schedule == "jacobi":
            new = {k: vertex_relax_update(aug.eps[k], aug.child_terms(k), eta) for k in free}
            change = max((float(np.max(np.abs(new[k] - aug.eps[k]))) for k in free), default=0.0)
            aug.eps.update(new)
        elif schedule == "sequential":
            change = 0.0
            for k in free:
                upd = vertex_relax_update(aug.eps[k], aug.child_terms(k), eta)
                change = max(change, float(np.max(np.abs(upd - aug.eps[k]))))
                aug.eps[k] = upd
        else:
            raise ArgumentError(f"unknown schedule {schedule!r}")
        if not all(np.all(np.isfinite(aug.eps[k])) for k in free):
            raise DivergenceError(f"graph relaxation diverged at iteration {n}", iteration=n)
        if callback is not None:
            callback(n, aug)
        if change < tol:
            break
    aug.iterations = n
    aug.relaxed = True
    return aug.eps


def pc_weight_update(aug: AugmentedGraph) -> dict:
    """Local parameter gradients ``eps_i * dv^_i/dtheta_i`` for every linear vertex."""
    if not aug.relaxed:
        raise StateError("pc_weight_update requires pc_relax to run first")
    g = aug.base
    out = {}
    for name in g.order:
        v = g.vertices[name]
        if not v.is_input and v.op == "linear":
            out[name] = _param_grads(v, aug.eps[name], [aug.predictions[p] for p in v.parents])
    return out


# ---------------------------------------------------------------------------
# builders and (de)serialisation


def _init_linear(rng, dout, din, scale=None):
    s = scale if scale is not None else 1.0 / np.sqrt(din)
    return rng.normal(0.0, s, size=(dout, din))


def chain_graph(n_edges: int, dim: int = 1, op: str = "identity", loss: Loss | None = None):
    vs = [Vertex("v0", dim)]
    for i in range(1, n_edges + 1):
        vs.append(Vertex(f"v{i}", dim, op, [f"v{i - 1}"]))
    return ComputationGraph(vs, f"v{n_edges}", loss or Loss("sum"))


def scaled_chain(scales, loss: Loss | None = None):
    """Scalar chain v_k = s_k * v_{k-1} built from 1x1 linear vertices."""
    vs = [Vertex("v0", 1)]
    params = {}
    for i, s in enumerate(scales, start=1):
        vs.append(Vertex(f"v{i}", 1, "linear", [f"v{i - 1}"]))
        params[f"v{i}"] = {f"W:v{i - 1}": np.array([[float(s)]]), "b": np.zeros(1)}
    return ComputationGraph(vs, f"v{len(scales)}", loss or Loss("sum"), params)


def mlp_graph(dims, activation: str = "tanh", rng=None, target=None):
    """Layered perceptron: x -> (linear -> activation) * (len(dims) - 1)."""
    rng = np.random.default_rng(rng)
    vs = [Vertex("x", dims[0])]
    params = {}
    prev = "x"
    for k in range(1, len(dims)):
        lin, act = f"z{k}", f"h{k}"
        vs.append(Vertex(lin, dims[k], "linear", [prev]))
        params[lin] = {f"W:{prev}": _init_linear(rng, dims[k], dims[k - 1]),
                       "b": rng.normal(0.0, 0.1, dims[k])}
        vs.append(Vertex(act, dims[k], activation, [lin]))
        prev = act
    if target is None:
        target = rng.normal(0.0, 1.0, dims[-1])
    return ComputationGraph(vs, prev, Loss("mse", np.asarray(target, dtype=float)), params)


def diamond_graph(dim: int = 3, activation: str = "tanh", rng=None, combine: str = "add"):
    """x fans out to two branches that merge again before the output."""
    rng = np.random.default_rng(rng)
    vs = [
        Vertex("x", dim),
        Vertex("a", dim, "linear", ["x"]),
        Vertex("b", dim, "linear", ["x"]),
        Vertex("ta", dim, activation, ["a"]),
        Vertex("tb", dim, activation, ["b"]),
        Vertex("m", dim, combine, ["ta", "tb"]),
        Vertex("y", dim, "linear", ["m", "x"]),
    ]
    params = {
        "a": {"W:x": _init_linear(rng, dim, dim), "b": rng.normal(0, 0.1, dim)},
        "b": {"W:x": _init_linear(rng, dim, dim), "b": rng.normal(0, 0.1, dim)},
        "y": {"W:m": _init_linear(rng, dim, dim), "W:x": _init_linear(rng, dim, dim), "b": np.zeros(dim)},
    }
    return ComputationGraph(vs, "y", Loss("mse", rng.normal(0, 1, dim)), params)


def graph_from_dict(doc: dict, rng=None) -> ComputationGraph:
    """Build a graph from a document with ``vertices``, ``edges``, ``output``,
    ``loss`` and optional ``params``; missing linear weights are drawn from ``rng``.
    """
    rng = np.random.default_rng(rng)
    try:
        raw_vertices = doc["vertices"]
        output = doc["output"]
    except KeyError as exc:
        raise StructuralError(f"graph document is missing {exc.args[0]!r}") from None
    parents = {v["name"]: list(v.get("parents", [])) for v in raw_vertices}
    for edge in doc.get("edges", []):
        src, dst = edge
        if dst not in parents:
            raise StructuralError(f"edge points at unknown vertex {dst!r}")
        if src not in parents[dst]:
            parents[dst].append(src)
    vertices = [Vertex(v["name"], int(v["dim"]), v.get("op", "input"), parents[v["name"]]) for v in raw_vertices]
    dims = {v.name: v.dim for v in vertices}
    params = {}
    for name, prm in (doc.get("params") or {}).items():
        params[name] = {k: np.asarray(x, dtype=float) for k, x in prm.items()}
    for v in vertices:
        if v.op == "linear":
            prm = params.setdefault(v.name, {})
            for p in v.parents:
                prm.setdefault(f"W:{p}", _init_linear(rng, v.dim, dims[p]))
    loss_doc = doc.get("loss", {"kind": "sum"})
    target = loss_doc.get("target")
    loss = Loss(loss_doc.get("kind", "sum"), None if target is None else np.asarray(target, dtype=float))
    return ComputationGraph(vertices, output, loss, params)


def graph_to_dict(graph: ComputationGraph) -> dict:
    verts = [{"name": v.name, "dim": v.dim, "op": v.op} for v in (graph.vertices[n] for n in graph.order)]
    edges = [[p, v.name] for v in (graph.vertices[n] for n in graph.order) for p in v.parents]
    loss = {"kind": graph.loss.kind}
    if graph.loss.target is not None:
        loss["target"] = graph.loss.target.tolist()
    params = {n: {k: np.asarray(x).tolist() for k, x in prm.items()} for n, prm in graph.params.items()}
    return {"vertices": verts, "edges": edges, "output": graph.output, "loss": loss, "params": params}


def load_graph(path, rng=None) -> ComputationGraph:
    with open(path) as fh:
        return graph_from_dict(json.load(fh), rng)
