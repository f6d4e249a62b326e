import math

import numpy as np
import pytest

from src import graph_spectra
from src.errors import DimensionMismatch, DisconnectedGraph, InvalidEdge


# ==========================================================
# Construction Tests
# Function under test: graph_spectra.laplacian_from_edges(m, edges)
# ==========================================================

def test_two_node_laplacian(two_node_graph):
    assert np.array_equal(two_node_graph.laplacian, np.array([[1.0, -1.0], [-1.0, 1.0]]))


def test_two_node_spectrum(two_node_graph):
    assert two_node_graph.lambda_max == pytest.approx(2.0)
    assert two_node_graph.lambda_min_plus == pytest.approx(2.0)
    assert two_node_graph.chi == pytest.approx(1.0)


def test_laplacian_rows_sum_to_zero():
    g = graph_spectra.laplacian_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)])
    assert np.allclose(g.laplacian.sum(axis=1), 0.0)


def test_duplicate_edges_collapse():
    g = graph_spectra.laplacian_from_edges(3, [(0, 1), (1, 0), (1, 2)])
    assert g.edges == ((0, 1), (1, 2))


def test_neighbors_are_sorted():
    g = graph_spectra.laplacian_from_edges(4, [(3, 0), (2, 0), (1, 0)])
    assert g.neighbors[0] == (1, 2, 3)


def test_directed_messages_counts_both_directions(path4):
    assert path4.directed_messages == 6


def test_self_loop_rejected():
    with pytest.raises(InvalidEdge):
        graph_spectra.laplacian_from_edges(2, [(0, 0), (0, 1)])


def test_out_of_range_edge_rejected():
    with pytest.raises(InvalidEdge):
        graph_spectra.laplacian_from_edges(2, [(0, 2)])


def test_disconnected_graph_rejected():
    with pytest.raises(DisconnectedGraph):
        graph_spectra.laplacian_from_edges(4, [(0, 1), (2, 3)])


def test_single_node_graph():
    """A lone node has no edges, W̄ = 0 and chi = 1 by convention."""
    g = graph_spectra.laplacian_from_edges(1, [])
    assert (g.lambda_max, g.lambda_min_plus, g.chi) == (0.0, 0.0, 1.0)


# ==========================================================
# Spectrum Tests
# ==========================================================

@pytest.mark.parametrize("m", [3, 5, 8])
def test_complete_graph_spectrum(m):
    g = graph_spectra.make_graph("complete", m)
    assert g.lambda_max == pytest.approx(m)
    assert g.lambda_min_plus == pytest.approx(m)
    assert g.chi == pytest.approx(1.0)


@pytest.mark.parametrize("m", [4, 7, 10])
def test_path_graph_spectrum(m):
    g = graph_spectra.make_graph("path", m)
    assert g.lambda_max == pytest.approx(2 - 2 * math.cos(math.pi * (m - 1) / m))
    assert g.lambda_min_plus == pytest.approx(2 - 2 * math.cos(math.pi / m))


def test_star_graph_spectrum():
    g = graph_spectra.make_graph("star", 6)
    assert g.lambda_max == pytest.approx(6.0)
    assert g.lambda_min_plus == pytest.approx(1.0)


def test_iterative_spectra_match_dense():
    """Forcing the iterative path must agree with the dense eigendecomposition."""
    g = graph_spectra.make_graph("cycle", 12)
    lam_max, lam_min, chi = graph_spectra.spectral_bounds(g.laplacian, dense_max_m=0)
    assert lam_max == pytest.approx(g.lambda_max, rel=1e-8)
    assert lam_min == pytest.approx(g.lambda_min_plus, rel=1e-8)
    assert chi == pytest.approx(g.chi, rel=1e-8)


@pytest.mark.parametrize("topology", ["path", "random_geometric"])
def test_iterative_spectra_match_dense_on_large_graphs(topology):
    """The slow-mixing path at m = 300 has χ ≈ 3.6·10⁴; the residual stop must still be exact."""
    g = graph_spectra.make_graph(topology, 300, seed=1)
    lam_max, lam_min, chi = graph_spectra.spectral_bounds(g.laplacian, dense_max_m=100)
    assert lam_max == pytest.approx(g.lambda_max, rel=1e-8)
    assert lam_min == pytest.approx(g.lambda_min_plus, rel=1e-8)
    assert chi == pytest.approx(g.chi, rel=1e-8)


def test_iterative_spectra_detect_disconnection():
    W = np.zeros((6, 6))
    for i, j in [(0, 1), (1, 2), (3, 4), (4, 5)]:
        W[i, j] = W[j, i] = -1.0
    W[np.diag_indices(6)] = -W.sum(axis=1)
    with pytest.raises(DisconnectedGraph):
        graph_spectra.spectral_bounds(W, dense_max_m=0)


@pytest.mark.parametrize("seed", range(50))
@pytest.mark.parametrize("topology", ["erdos_renyi", "random_geometric"])
def test_chi_at_least_one_on_random_graphs(topology, seed):
    g = graph_spectra.make_graph(topology, 10 + seed % 7, seed=seed)
    assert g.chi >= 1.0
    assert g.lambda_min_plus <= g.lambda_max



def test_sqrt_laplacian_squares_to_laplacian(path4):
    S = graph_spectra.sqrt_laplacian(path4)
    assert np.allclose(S @ S, path4.laplacian, atol=1e-10)


# ==========================================================
# Generator Tests
# Function under test: graph_spectra.make_graph(topology, m, ...)
# ==========================================================

@pytest.mark.parametrize("topology", ["random_geometric", "erdos_renyi"])
def test_random_topologies_are_connected_and_reproducible(topology):
    a = graph_spectra.make_graph(topology, 12, seed=3)
    b = graph_spectra.make_graph(topology, 12, seed=3)
    assert a.edges == b.edges
    assert a.lambda_min_plus > 0


def test_random_topology_gives_up_when_never_connected():
    with pytest.raises(DisconnectedGraph):
        graph_spectra.make_graph("erdos_renyi", 10, probability=0.0, max_attempts=3)


def test_unknown_topology_rejected():
    with pytest.raises(InvalidEdge):
        graph_spectra.make_graph("torus", 4)


# ==========================================================
# Block Product Tests
# ==========================================================

def test_apply_block_matches_kronecker(path4):
    v = np.random.default_rng(0).normal(size=(4, 3))
    expected = (np.kron(path4.laplacian, np.eye(3)) @ v.reshape(-1)).reshape(4, 3)
    assert np.allclose(graph_spectra.apply_block(path4, v), expected)


def test_apply_block_accepts_flat_vectors(path4):
    v = np.arange(8, dtype=float)
    out = graph_spectra.apply_block(path4, v)
    assert out.shape == (8,)
    assert np.allclose(out, graph_spectra.apply_block(path4, v.reshape(4, 2)).reshape(-1))


def test_apply_block_kills_consensus(path4):
    v = np.tile([1.5, -2.0], (4, 1))
    assert np.allclose(graph_spectra.apply_block(path4, v), 0.0)


def test_apply_block_is_linear(path4):
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=(2, 4, 3))
    combined = graph_spectra.apply_block(path4, 2.5 * u - 0.75 * v)
    expected = 2.5 * graph_spectra.apply_block(path4, u) - 0.75 * graph_spectra.apply_block(path4, v)
    assert np.allclose(combined, expected, atol=1e-12)


@pytest.mark.parametrize("topology", ["path", "star", "cycle", "complete"])
def test_consensus_residual_is_laplacian_quadratic_form(topology):
    """consensus_residual(v)² = ⟨v, (W̄⊗I)v⟩ = ‖(√W̄⊗I)v‖²."""
    g = graph_spectra.make_graph(topology, 6)
    v = np.random.default_rng(2).normal(size=(6, 3))
    quadratic = float(np.sum(v * graph_spectra.apply_block(g, v)))
    residual = graph_spectra.consensus_residual(g, v)
    assert residual ** 2 == pytest.approx(quadratic, rel=1e-10)
    assert residual == pytest.approx(np.linalg.norm(graph_spectra.sqrt_laplacian(g) @ v), rel=1e-8)



def test_as_blocks_rejects_bad_length():
    with pytest.raises(DimensionMismatch):
        graph_spectra.as_blocks(np.zeros(7), 4)


def test_consensus_residual_zero_on_consensus(path4):
    assert graph_spectra.consensus_residual(path4, np.ones((4, 2))) == pytest.approx(0.0)


def test_consensus_residual_two_nodes(two_node_graph):
    """‖√W v‖² = (v_1 − v_2)² for a single edge."""
    v = np.array([[3.0], [1.0]])
    assert graph_spectra.consensus_residual(two_node_graph, v) == pytest.approx(2.0)


def test_consensus_average():
    assert np.allclose(graph_spectra.consensus_average(np.array([[1.0], [3.0]]), 2), [2.0])


# ==========================================================
# CentralizedNetwork Tests
# ==========================================================

def test_network_counts_rounds(path4):
    net = graph_spectra.CentralizedNetwork(path4)
    net.mix(np.ones((4, 1)))
    net.mix(np.ones((4, 1)))
    assert net.rounds == 2


def test_network_local_counts_calls(path4):
    net = graph_spectra.CentralizedNetwork(path4)
    out = net.local(lambda k, x: x * k, np.ones((4, 2)), calls=3)
    assert np.array_equal(net.oracle_calls, [3, 3, 3, 3])
    assert np.allclose(out[:, 0], [0, 1, 2, 3])


# ==========================================================
# Graph File Tests
# ==========================================================

def test_graph_file_round_trip(tmp_path, path4):
    path = tmp_path / "graph.txt"
    graph_spectra.write_graph(path4, path)
    assert graph_spectra.read_graph(path).edges == path4.edges


def test_graph_file_requires_node_count(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("0 1\n")
    with pytest.raises(InvalidEdge):
        graph_spectra.read_graph(path)
