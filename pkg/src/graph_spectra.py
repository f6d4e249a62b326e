"""
Communication graphs, their Laplacians and spectra, and the block
(Kronecker-with-identity) Laplacian product used for every communication round.

Stacked vectors are numpy arrays of shape (m, n): row k is node k's n-vector.
A flat array of length m*n is accepted wherever a stacked vector is expected.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from src.config import DENSE_SPECTRA_MAX_M, KERNEL_TOL, TOPOLOGIES
from src.errors import DimensionMismatch, DisconnectedGraph, InvalidEdge, NotConverged


# ==========================================================
# Domain Types
# ==========================================================

@dataclass(frozen=True, eq=False)
class LaplacianGraph:
    """
    Undirected connected graph with its Laplacian W̄ = D − A and extreme spectra.

    Immutable after construction; safe to share across threads.
    """
    m: int
    edges: tuple
    laplacian: np.ndarray
    lambda_max: float
    lambda_min_plus: float
    chi: float
    neighbors: tuple = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    @property
    def directed_messages(self) -> int:
        """Messages sent in one synchronous exchange: every edge carries two."""
        return 2 * len(self.edges)


# ==========================================================
# Construction
# ==========================================================

def _normalize_edges(m: int, edges) -> tuple:
    seen = set()
    for pair in edges:
        i, j = (int(v) for v in pair)
        if not (0 <= i < m and 0 <= j < m):
            raise InvalidEdge(f"Edge ({i}, {j}) references a node outside [0, {m})")
        if i == j:
            raise InvalidEdge(f"Self-loop on node {i}")
        seen.add((min(i, j), max(i, j)))
    return tuple(sorted(seen))


def laplacian_from_edges(m: int, edges) -> LaplacianGraph:
    """
    Build the Laplacian of an undirected graph and compute its spectra.

    Duplicate edges are collapsed. Raises InvalidEdge on out-of-range nodes or
    self-loops and DisconnectedGraph when the zero eigenvalue is not simple.
    """
    if m < 1:
        raise InvalidEdge(f"Node count must be at least 1, got {m}")

    edge_tuple = _normalize_edges(m, edges)

    G = nx.Graph()
    G.add_nodes_from(range(m))
    G.add_edges_from(edge_tuple)
    if not nx.is_connected(G):
        raise DisconnectedGraph(
            f"Graph with {m} nodes has {nx.number_connected_components(G)} components"
        )

    W = np.zeros((m, m))
    for i, j in edge_tuple:
        W[i, j] = W[j, i] = -1.0
    degrees = -W.sum(axis=1)
    W[np.diag_indices(m)] = degrees

    lambda_max, lambda_min_plus, chi = spectral_bounds(W)
    neighbors = tuple(tuple(sorted(G.neighbors(i))) for i in range(m))

    return LaplacianGraph(
        m=m,
        edges=edge_tuple,
        laplacian=W,
        lambda_max=lambda_max,
        lambda_min_plus=lambda_min_plus,
        chi=chi,
        neighbors=neighbors,
        degrees=degrees,
    )


def make_graph(
    topology: str,
    m: int,
    seed: int = 0,
    radius: float | None = None,
    probability: float | None = None,
    max_attempts: int = 200,
) -> LaplacianGraph:
    """
    Generate one of the shipped topologies.

    Random topologies are rejection-sampled for connectivity: seeds seed, seed+1, ...
    are tried until a connected graph appears or max_attempts runs out.
    """
    if topology not in TOPOLOGIES:
        raise InvalidEdge(f"Unknown topology '{topology}', expected one of {TOPOLOGIES}")

    if topology == "path" or (topology == "cycle" and m < 3):
        G = nx.path_graph(m)
    elif topology == "cycle":
        G = nx.cycle_graph(m)
    elif topology == "star":
        G = nx.star_graph(m - 1) if m > 1 else nx.empty_graph(1)
    elif topology == "complete":
        G = nx.complete_graph(m)
    else:
        G = None
        for attempt in range(max_attempts):
            if topology == "random_geometric":
                r = radius if radius is not None else min(1.0, 2.0 * math.sqrt(math.log(max(m, 2)) / m))
                candidate = nx.random_geometric_graph(m, r, seed=seed + attempt)
            else:
                p = probability if probability is not None else min(1.0, 2.0 * math.log(max(m, 2)) / m)
                candidate = nx.erdos_renyi_graph(m, p, seed=seed + attempt)
            if nx.is_connected(candidate):
                G = candidate
                break
        if G is None:
            raise DisconnectedGraph(
                f"No connected {topology} graph with m={m} after {max_attempts} attempts"
            )

    return laplacian_from_edges(m, list(G.edges()))


# ==========================================================
# Spectra
# ==========================================================

def _sparse_lambda_max(Ws, tol: float, max_iter: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=Ws.shape[0])
    try:
        eigenvalues = scipy.sparse.linalg.eigsh(Ws, k=1, which="LA", v0=v0, tol=tol,
                                                maxiter=max_iter, return_eigenvectors=False)
    except scipy.sparse.linalg.ArpackNoConvergence as e:
        raise NotConverged(f"Lanczos iteration for lambda_max did not converge in {max_iter} steps") from e
    return float(eigenvalues[-1])


def _inverse_lambda_min_plus(Ws, lambda_max: float, tol: float, max_iter: int, seed: int) -> float:
    """
    Inverse iteration on W̄ + δI, δ = KERNEL_TOL·lambda_max, restricted to the complement of 1.

    The shift keeps the factorization nonsingular without changing eigenvectors;
    the Rayleigh quotient is taken with W̄ itself. Stops on the eigen-residual
    ‖W̄v − λv‖ ≤ tol·λ, floored at rounding level.
    """
    m = Ws.shape[0]
    shift = KERNEL_TOL * lambda_max
    solve = scipy.sparse.linalg.splu((Ws + shift * scipy.sparse.identity(m, format="csc")).tocsc()).solve
    floor = 100.0 * np.finfo(float).eps * lambda_max

    rng = np.random.default_rng(seed + 1)
    v = rng.normal(size=m)
    v -= v.mean()
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        v = solve(v)
        v -= v.mean()  # deflate the kernel
        v /= np.linalg.norm(v)
        Wv = Ws @ v
        lam = float(v @ Wv)
        if np.linalg.norm(Wv - lam * v) <= max(tol * lam, floor):
            return lam
    raise NotConverged(f"Inverse iteration for lambda_min_plus did not converge in {max_iter} steps")


def spectral_bounds(
    W: np.ndarray,
    dense_max_m: int | None = None,
    tol: float = 1e-12,
    max_iter: int = 10_000,
    seed: int = 0,
) -> tuple:
    """
    Return (lambda_max, lambda_min_plus, chi) of a Laplacian.

    Dense symmetric eigendecomposition up to `dense_max_m` nodes; beyond that
    Lanczos for lambda_max and deflated inverse iteration for lambda_min_plus,
    both on the sparse Laplacian. Eigenvalues below KERNEL_TOL·lambda_max
    count as zero. A single node has no nonzero eigenvalue; chi is 1 by
    convention.
    """
    W = np.asarray(W, dtype=float)
    m = W.shape[0]
    dense_max_m = DENSE_SPECTRA_MAX_M if dense_max_m is None else dense_max_m

    if m == 1:
        return 0.0, 0.0, 1.0

    if m <= dense_max_m:
        eigenvalues = scipy.linalg.eigh(W, eigvals_only=True)
        lambda_max = float(eigenvalues[-1])
        nonzero = eigenvalues[eigenvalues > KERNEL_TOL * lambda_max]
        if nonzero.size < m - 1:
            raise DisconnectedGraph(f"Zero eigenvalue has multiplicity {m - nonzero.size}")
        lambda_min_plus = float(nonzero[0])
    else:
        Ws = scipy.sparse.csc_matrix(W)
        lambda_max = _sparse_lambda_max(Ws, tol, max_iter, seed)
        lambda_min_plus = _inverse_lambda_min_plus(Ws, lambda_max, tol, max_iter, seed)
        logging.info(f"Iterative spectra for m={m}: {lambda_max:.6g}, {lambda_min_plus:.6g}")

    if lambda_min_plus <= KERNEL_TOL * lambda_max:
        raise DisconnectedGraph(f"lambda_2 = {lambda_min_plus:.3e} is below the kernel tolerance")

    return lambda_max, lambda_min_plus, lambda_max / lambda_min_plus


def sqrt_laplacian(graph: LaplacianGraph) -> np.ndarray:
    """Eigen-based √W̄. Validation only: no method applies it."""
    eigenvalues, vectors = scipy.linalg.eigh(graph.laplacian)
    return (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T


# ==========================================================
# Block products
# ==========================================================

def as_blocks(v, m: int) -> np.ndarray:
    """View a stacked vector as an (m, n) array; raises DimensionMismatch."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        if arr.size % m != 0 or arr.size == 0:
            raise DimensionMismatch(f"Length {arr.size} is not a positive multiple of m={m}")
        return arr.reshape(m, -1)
    if arr.ndim != 2 or arr.shape[0] != m:
        raise DimensionMismatch(f"Expected {m} blocks, got array of shape {arr.shape}")
    return arr


def laplacian_stencil(own: np.ndarray, degree: float, neighbor_blocks: np.ndarray) -> np.ndarray:
    """
    One node's share of W̄⊗I: deg(i)·v_i − Σ_{j∼i} v_j.

    neighbor_blocks is summed in the order given (ascending neighbour id
    everywhere in this package) so every execution path is bit-identical.
    """
    return degree * own - np.sum(neighbor_blocks, axis=0)


def apply_block(graph: LaplacianGraph, v) -> np.ndarray:
    """(W̄ ⊗ I_n) v without forming the Kronecker product."""
    V = as_blocks(v, graph.m)
    out = np.empty_like(V)
    for i in range(graph.m):
        out[i] = laplacian_stencil(V[i], graph.degrees[i], V[list(graph.neighbors[i])])
    return out.reshape(np.shape(v)) if np.ndim(v) == 1 else out


def consensus_residual(graph: LaplacianGraph, v) -> float:
    """‖√W v‖₂ computed as sqrt(vᵀ(W̄⊗I)v)."""
    V = as_blocks(v, graph.m)
    return math.sqrt(max(float(np.vdot(V, apply_block(graph, V))), 0.0))


def consensus_average(v, m: int) -> np.ndarray:
    """Block mean (1/m)Σ_k v_k. Diagnostics only."""
    return as_blocks(v, m).mean(axis=0)


class CentralizedNetwork:
    """
    Counted W-application backend used by every method.

    One `mix` call is one synchronous communication round. `local` evaluates a
    per-node function on each node's own blocks and charges oracle calls.
    """

    def __init__(self, graph: LaplacianGraph):
        self.graph = graph
        self.rounds = 0
        self.oracle_calls = np.zeros(graph.m, dtype=np.int64)

    def mix(self, V: np.ndarray) -> np.ndarray:
        self.rounds += 1
        return apply_block(self.graph, V)

    def local(self, fn, *arrays, calls: int = 1) -> np.ndarray:
        self.oracle_calls += calls
        return np.stack([fn(k, *(a[k] for a in arrays)) for k in range(self.graph.m)])


# ==========================================================
# Graph file format
# ==========================================================

def write_graph(graph: LaplacianGraph, path) -> None:
    """First line "m", then one "i j" line per edge."""
    lines = [str(graph.m)] + [f"{i} {j}" for i, j in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> LaplacianGraph:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows or len(rows[0]) != 1:
        raise InvalidEdge(f"Graph file {path} must start with the node count")
    m = int(rows[0][0])
    edges = []
    for row in rows[1:]:
        if len(row) != 2:
            raise InvalidEdge(f"Malformed edge line in {path}: {' '.join(row)}")
        edges.append((int(row[0]), int(row[1])))
    return laplacian_from_edges(m, edges)
