"""Graph, Laplacian, intrinsic-field, and constraint machinery.

Oracles here are all built independently of the module under test:
dense Laplacians assembled edge by edge, eigendecomposition
pseudo-inverses, and hand-computed frozen values.
"""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgmbench import gmrf
from lgmbench.gmrf import (
    AdjacencyGraph,
    Constraint,
    IcarSpec,
    SparseSymMatrix,
    component_labels,
    connected_components,
    cycle_graph,
    graph_laplacian,
    icar_log_density,
    icar_quadratic_form,
    lattice_graph,
    path_graph,
    propriety_check,
    read_edge_list,
    sample_icar_kriging,
    write_edge_list,
)


def dense_laplacian_oracle(graph: AdjacencyGraph) -> np.ndarray:
    """Independent edge-by-edge assembly of D - A."""
    q = np.zeros((graph.n_nodes, graph.n_nodes))
    for i, j in graph.edges:
        q[i, i] += 1.0
        q[j, j] += 1.0
        q[i, j] -= 1.0
        q[j, i] -= 1.0
    return q


def constrained_pseudoinverse_oracle(graph: AdjacencyGraph, tau: float) -> np.ndarray:
    """Covariance of the sum-to-zero intrinsic field via eigendecomposition."""
    w, v = np.linalg.eigh(dense_laplacian_oracle(graph) * tau)
    keep = w > 1e-9 * w[-1]
    return (v[:, keep] / w[keep]) @ v[:, keep].T


# ---------------------------------------------------------------------------
# Graphs


def test_graph_canonicalizes_edges():
    g = AdjacencyGraph(4, ((3, 1), (0, 2)))
    assert g.edges == ((0, 2), (1, 3))
    assert g.n_edges == 2


@pytest.mark.parametrize(
    "edges, message",
    [
        (((0, 0),), "self loop"),
        (((0, 5),), "out of range"),
        (((0, 1), (1, 0)), "duplicate"),
    ],
)
def test_graph_rejects_malformed_edges(edges, message):
    with pytest.raises(ValueError, match=message):
        AdjacencyGraph(3 if edges != (((0, 5),)) else 3, edges)


def test_lattice_structure():
    g = lattice_graph(3, 4)
    assert g.n_nodes == 12
    # 3 rows x 3 horizontal + 2 x 4 vertical
    assert g.n_edges == 3 * 3 + 2 * 4
    deg = g.degrees()
    assert deg.min() == 2 and deg.max() == 4  # corners vs interior
    assert deg.sum() == 2 * g.n_edges


def test_path_and_cycle_degrees():
    assert list(path_graph(4).degrees()) == [1, 2, 2, 1]
    assert list(cycle_graph(5).degrees()) == [2, 2, 2, 2, 2]
    with pytest.raises(ValueError):
        cycle_graph(2)


def test_neighbor_lists_match_edges(lattice_5x4):
    nbrs = lattice_5x4.neighbor_lists()
    for i, j in lattice_5x4.edges:
        assert j in nbrs[i] and i in nbrs[j]
    assert sum(len(x) for x in nbrs) == 2 * lattice_5x4.n_edges


def test_component_labels(two_component_graph):
    assert list(component_labels(two_component_graph)) == [0, 0, 0, 0, 1, 1, 1]
    assert connected_components(two_component_graph) == 2
    assert connected_components(lattice_graph(4, 4)) == 1
    # isolated nodes each form their own component
    assert connected_components(AdjacencyGraph(3, ())) == 3


# ---------------------------------------------------------------------------
# Laplacian and quadratic form


def test_laplacian_matches_dense_oracle(lattice_5x4, two_component_graph):
    for g in (lattice_5x4, two_component_graph, path_graph(6)):
        np.testing.assert_allclose(
            graph_laplacian(g).to_dense(), dense_laplacian_oracle(g), atol=0.0
        )


def test_laplacian_frozen_2x2():
    expected = np.array(
        [
            [2, -1, -1, 0],
            [-1, 2, 0, -1],
            [-1, 0, 2, -1],
            [0, -1, -1, 2],
        ],
        dtype=float,
    )
    np.testing.assert_array_equal(graph_laplacian(lattice_graph(2, 2)).to_dense(), expected)


def test_quadratic_form_frozen_path():
    # (0-1)^2 + (1-3)^2 = 5 on the 3-node path
    assert icar_quadratic_form(np.array([0.0, 1.0, 3.0]), path_graph(3)) == 5.0


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_quadratic_form_equals_dense_form(n, seed):
    g = np.random.default_rng(seed)
    n_edges = g.integers(0, n * (n - 1) // 2 + 1)
    pairs = {tuple(sorted(g.choice(n, 2, replace=False))) for _ in range(n_edges)}
    graph = AdjacencyGraph(n, tuple(pairs))
    mu = g.standard_normal(n)
    dense = mu @ dense_laplacian_oracle(graph) @ mu
    assert icar_quadratic_form(mu, graph) == pytest.approx(dense, rel=1e-12, abs=1e-12)


def test_quadratic_form_shift_invariant(two_component_graph):
    rng = np.random.default_rng(3)
    mu = rng.standard_normal(7)
    labels = component_labels(two_component_graph)
    shifted = mu + np.array([10.0, -3.0])[labels]
    assert icar_quadratic_form(mu, two_component_graph) == pytest.approx(
        icar_quadratic_form(shifted, two_component_graph), rel=1e-12
    )


def test_icar_log_density_exponent_conventions(two_component_graph):
    mu = np.linspace(-1, 1, 7)
    tau = 2.5
    n_minus_k = 7 - 2
    quad = icar_quadratic_form(mu, two_component_graph)
    full = icar_log_density(mu, IcarSpec(two_component_graph, tau))
    half = icar_log_density(
        mu, IcarSpec(two_component_graph, tau, half_exponent=True)
    )
    assert full == pytest.approx(n_minus_k * np.log(tau) - 0.5 * tau * quad, rel=1e-12)
    assert half == pytest.approx(0.5 * n_minus_k * np.log(tau) - 0.5 * tau * quad, rel=1e-12)


# ---------------------------------------------------------------------------
# Constrained sampling


def test_kriging_draws_sum_to_zero_per_component(two_component_graph, rng):
    spec = IcarSpec(two_component_graph, 1.3, Constraint.SUM_TO_ZERO_KRIGING)
    draws = sample_icar_kriging(spec, rng, size=200)
    labels = component_labels(two_component_graph)
    for c in range(2):
        sums = draws[:, labels == c].sum(axis=1)
        assert np.abs(sums).max() < 1e-10


def test_kriging_covariance_matches_pseudoinverse(lattice_5x4, rng):
    tau = 0.7
    spec = IcarSpec(lattice_5x4, tau, Constraint.SUM_TO_ZERO_KRIGING)
    draws = sample_icar_kriging(spec, rng, size=60_000)
    emp = np.cov(draws.T)
    oracle = constrained_pseudoinverse_oracle(lattice_5x4, tau)
    rel = np.linalg.norm(emp - oracle) / np.linalg.norm(oracle)
    assert rel < 0.02
    assert abs(draws.mean()) < 0.01


def test_kriging_variance_scales_inversely_with_tau(lattice_5x4):
    rng = np.random.default_rng(9)
    spec1 = IcarSpec(lattice_5x4, 1.0, Constraint.SUM_TO_ZERO_KRIGING)
    spec4 = IcarSpec(lattice_5x4, 4.0, Constraint.SUM_TO_ZERO_KRIGING)
    v1 = sample_icar_kriging(spec1, rng, size=20_000).var()
    v4 = sample_icar_kriging(spec4, rng, size=20_000).var()
    assert v1 / v4 == pytest.approx(4.0, rel=0.1)


def test_kriging_single_draw_matches_batch_head(lattice_5x4):
    # Same underlying normals; LAPACK may block (n,1) and (n,3) solves
    # differently, so agreement is to solver rounding, not bitwise.
    spec = IcarSpec(lattice_5x4, 1.0, Constraint.SUM_TO_ZERO_KRIGING)
    single = sample_icar_kriging(spec, np.random.default_rng(5))
    batch = sample_icar_kriging(spec, np.random.default_rng(5), size=3)
    np.testing.assert_allclose(single, batch[0], rtol=1e-10, atol=1e-12)


def test_kriging_requires_kriging_constraint(lattice_5x4, rng):
    with pytest.raises(ValueError, match="kriging"):
        sample_icar_kriging(IcarSpec(lattice_5x4, 1.0), rng)


def test_icar_spec_rejects_bad_tau(lattice_5x4):
    with pytest.raises(ValueError):
        IcarSpec(lattice_5x4, 0.0)
    with pytest.raises(ValueError):
        IcarSpec(lattice_5x4, np.inf)


# ---------------------------------------------------------------------------
# Propriety checks


def test_laplacian_is_rank_deficient_by_component_count(two_component_graph):
    res = propriety_check(graph_laplacian(two_component_graph))
    assert not res.proper
    assert res.deficiency == 2
    assert str(res) == "RankDeficient(2)"


def test_laplacian_proper_on_constraint_subspace(two_component_graph):
    labels = component_labels(two_component_graph)
    rows = np.zeros((2, 7))
    for c in range(2):
        rows[c, labels == c] = 1.0
    res = propriety_check(graph_laplacian(two_component_graph), constraints=rows)
    assert res.proper
    assert res.deficiency == 0
    assert str(res) == "Proper"


def test_propriety_identity_and_negative():
    assert propriety_check(np.eye(4)).proper
    res = propriety_check(-np.eye(4))
    assert not res.proper and res.deficiency == 4


def test_propriety_fully_constrained_space_is_vacuously_proper():
    res = propriety_check(np.zeros((2, 2)), constraints=np.eye(2))
    assert res.proper


# ---------------------------------------------------------------------------
# Sparse symmetric storage


def test_sparse_round_trip_and_diagonal():
    a = np.array([[2.0, -1.0, 0.0], [-1.0, 3.0, 0.5], [0.0, 0.5, 1.0]])
    m = SparseSymMatrix.from_dense(a)
    np.testing.assert_array_equal(m.to_dense(), a)
    np.testing.assert_array_equal(m.diagonal(), np.diag(a))
    assert m.nnz_upper == 5  # three diagonal + two off-diagonal entries


@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_sparse_from_dense_round_trips_random_symmetric(n, seed):
    g = np.random.default_rng(seed)
    a = g.standard_normal((n, n))
    a = a + a.T
    a[np.abs(a) < 0.5] = 0.0  # introduce structural zeros
    np.testing.assert_array_equal(SparseSymMatrix.from_dense(a).to_dense(), a)


def test_sparse_rejects_bad_input():
    with pytest.raises(ValueError, match="upper triangle"):
        SparseSymMatrix(2, np.array([1]), np.array([0]), np.array([1.0]))
    with pytest.raises(ValueError, match="duplicate"):
        SparseSymMatrix(2, np.array([0, 0]), np.array([1, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError, match="symmetric"):
        SparseSymMatrix.from_dense(np.array([[0.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------------------
# Edge-list files


def test_edge_list_round_trip(tmp_path, two_component_graph):
    path = tmp_path / "graph.edges"
    write_edge_list(two_component_graph, path)
    assert read_edge_list(path) == two_component_graph
    assert read_edge_list(path, n_nodes=9).n_nodes == 9


def test_edge_list_parsing(tmp_path):
    path = tmp_path / "g.edges"
    path.write_text("# comment\n\n1 0\n2 1\n")
    g = read_edge_list(path)
    assert g.n_nodes == 3
    assert g.edges == ((0, 1), (1, 2))
    bad = tmp_path / "bad.edges"
    bad.write_text("0 1 2\n")
    with pytest.raises(ValueError, match="expected"):
        read_edge_list(bad)
