import inspect
import json

import numpy as np
import pytest

from predcode.errors import ArgumentError, StateError, StructuralError
from predcode.graph import (AugmentedGraph, ComputationGraph, Loss, Vertex, chain_graph, diamond_graph,
                            forward_pass, graph_from_dict, graph_to_dict, load_graph, mlp_graph, pc_relax,
                            pc_weight_update, reverse_oracle, scaled_chain, vertex_relax_update)


def relaxed(graph, inputs, **kw):
    fwd = forward_pass(graph, inputs)
    aug = AugmentedGraph(graph, fwd)
    pc_relax(aug, **kw)
    return fwd, aug


def max_gap(a: dict, b: dict) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def param_gap(a: dict, b: dict) -> float:
    return max(float(np.max(np.abs(a[n][k] - b[n][k]))) for n in a for k in a[n])


def fd_vertex_grads(graph, inputs, fwd, h=1e-6):
    out = {}
    for name in graph.order:
        if graph.vertices[name].is_input:
            continue
        base = fwd.values[name]
        g = np.zeros_like(base)
        for i in range(base.size):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            g[i] = (forward_pass(graph, inputs, {name: up}).loss
                    - forward_pass(graph, inputs, {name: dn}).loss) / (2 * h)
        out[name] = g
    return out


def test_forward_identity_chain():
    g = chain_graph(3)
    fwd = forward_pass(g, {"v0": [2.0]})
    assert fwd.values["v3"][0] == 2.0
    assert fwd.n_evals == len(g.vertices)


def test_forward_matches_direct_formula(rng):
    g = mlp_graph([3, 4, 2], "tanh", rng)
    x = rng.normal(size=3)
    p = g.params
    h1 = np.tanh(p["z1"]["W:x"] @ x + p["z1"]["b"])
    y = np.tanh(p["z2"]["W:h1"] @ h1 + p["z2"]["b"])
    assert np.allclose(forward_pass(g, {"x": x}).values["h2"], y, atol=1e-14)


def test_unbound_input():
    with pytest.raises(ArgumentError):
        forward_pass(chain_graph(2), {})


def test_structure_errors():
    with pytest.raises(StructuralError):
        ComputationGraph([Vertex("a", 1, "identity", ["b"]), Vertex("b", 1, "identity", ["a"])], "a")
    with pytest.raises(StructuralError):
        ComputationGraph([Vertex("x", 1), Vertex("y", 1, "tanh", [])], "y")
    with pytest.raises(StructuralError):
        ComputationGraph([Vertex("x", 1), Vertex("y", 1, "tanh", ["x"])], "x")


def test_oracle_identity_chain_all_ones():
    g = chain_graph(4)
    grads, _ = reverse_oracle(g, forward_pass(g, {"v0": [0.3]}))
    assert all(grads[n][0] == 1.0 for n in g.order)


def test_oracle_hand_chain_rule():
    g = scaled_chain([2.0, 3.0])
    grads, pgrads = reverse_oracle(g, forward_pass(g, {"v0": [1.5]}))
    assert grads["v0"][0] == pytest.approx(6.0)
    # dL/dW2 = dL/dv2 * v1 = 1 * 3
    assert pgrads["v2"]["W:v1"][0, 0] == pytest.approx(3.0)


def test_oracle_matches_finite_differences(rng):
    for _ in range(5):
        g = mlp_graph([3, 5, 4, 2], "tanh", rng)
        x = {"x": rng.normal(size=3)}
        fwd = forward_pass(g, x)
        grads, _ = reverse_oracle(g, fwd)
        fd = fd_vertex_grads(g, x, fwd)
        for name, v in fd.items():
            assert np.max(np.abs(grads[name] - v)) / max(np.max(np.abs(v)), 1e-8) < 1e-5


def test_single_linear_edge_fixed_point(rng):
    W = rng.normal(size=(2, 3))
    g = ComputationGraph([Vertex("x", 3), Vertex("h", 3, "identity", ["x"]), Vertex("y", 2, "linear", ["h"])],
                         "y", Loss("sum"), {"y": {"W:h": W}})
    _, aug = relaxed(g, {"x": np.ones(3)})
    assert np.allclose(aug.eps["h"], W.T @ np.ones(2), atol=1e-10)


def test_identity_chain_equilibrium():
    g = chain_graph(5, dim=2)
    _, aug = relaxed(g, {"v0": [1.0, -1.0]})
    for n in aug.free_vertices():
        assert np.allclose(aug.eps[n], aug.eps[g.output])
    assert aug.fixed_point_residual() < 1e-8


def test_weight_update_matches_oracle(rng):
    g = mlp_graph([4, 6, 5, 3], "tanh", rng)
    fwd, aug = relaxed(g, {"x": rng.normal(size=4)})
    grads, pgrads = reverse_oracle(g, fwd)
    assert aug.fixed_point_residual() < 1e-8
    assert param_gap(pc_weight_update(aug), pgrads) < 1e-5


def test_weight_update_zero_errors_and_state(rng):
    g = mlp_graph([2, 3, 2], "tanh", rng)
    aug = AugmentedGraph(g, forward_pass(g, {"x": np.ones(2)}))
    with pytest.raises(StateError):
        pc_weight_update(aug)
    aug.eps = {k: np.zeros_like(e) for k, e in aug.eps.items()}
    aug.relaxed = True
    for prm in pc_weight_update(aug).values():
        assert all(np.all(x == 0) for x in prm.values())


def test_scalar_chain_weight_gradient():
    g = scaled_chain([2.0, 3.0, 0.5])
    _, aug = relaxed(g, {"v0": [1.0]})
    # dL/dW1 = (3 * 0.5) * v0
    assert pc_weight_update(aug)["v1"]["W:v0"][0, 0] == pytest.approx(1.5, abs=1e-10)


def test_predictions_are_frozen(rng):
    g = mlp_graph([2, 3, 2], "tanh", rng)
    _, aug = relaxed(g, {"x": np.ones(2)})
    with pytest.raises(ValueError):
        aug.predictions["h1"][0] = 1.0


def test_relax_kernel_is_local():
    assert list(inspect.signature(vertex_relax_update).parameters) == ["eps_i", "child_terms", "eta"]


@pytest.mark.parametrize("kind", ["chain", "mlp", "diamond_add", "diamond_mul", "long_chain"])
def test_oracle_equivalence_on_dags(kind, rng):
    if kind == "chain":
        g, x = scaled_chain(rng.uniform(0.5, 1.5, size=6)), {"v0": [0.7]}
    elif kind == "long_chain":
        g, x = chain_graph(49, dim=2, op="tanh"), {"v0": [0.4, -0.2]}
    elif kind == "mlp":
        g, x = mlp_graph([5, 8, 8, 8, 3], "logistic", rng), {"x": rng.normal(size=5)}
    else:
        g = diamond_graph(4, "tanh", rng, combine=kind.split("_")[1])
        x = {"x": rng.normal(size=4)}
    assert len(g.vertices) <= 50
    fwd, aug = relaxed(g, x, tol=0.0)
    assert aug.iterations <= 200 * g.depth()
    grads, pgrads = reverse_oracle(g, fwd)
    free = {n: aug.eps[n] for n in aug.free_vertices()}
    assert max_gap(free, grads) < 1e-5
    if pgrads:
        assert param_gap(pc_weight_update(aug), pgrads) < 1e-5


def test_sequential_schedule_agrees(rng):
    g = diamond_graph(3, "tanh", rng)
    fwd, aug = relaxed(g, {"x": np.ones(3)}, schedule="sequential")
    grads, _ = reverse_oracle(g, fwd)
    assert max_gap({n: aug.eps[n] for n in aug.free_vertices()}, grads) < 1e-8
    with pytest.raises(ArgumentError):
        pc_relax(AugmentedGraph(g, fwd), schedule="random")


def test_chain_error_decreases_after_depth(rng):
    g = scaled_chain(rng.uniform(0.5, 2.0, size=8))
    fwd = forward_pass(g, {"v0": [1.0]})
    grads, _ = reverse_oracle(g, fwd)
    aug = AugmentedGraph(g, fwd)
    gaps = []
    pc_relax(aug, eta=0.5, iters=300, tol=0.0,
             callback=lambda n, a: gaps.append(max(abs(a.eps[k][0] - grads[k][0]) for k in a.free_vertices())))
    tail = np.array(gaps[g.depth():])
    assert np.all(np.diff(tail) <= 1e-15)


def test_graph_document_round_trip(tmp_path, rng):
    g = diamond_graph(3, "tanh", rng)
    path = tmp_path / "g.json"
    path.write_text(json.dumps(graph_to_dict(g)))
    g2 = load_graph(path)
    x = {"x": rng.normal(size=3)}
    assert forward_pass(g2, x).loss == pytest.approx(forward_pass(g, x).loss, abs=1e-14)
    with pytest.raises(StructuralError):
        graph_from_dict({"vertices": []})
