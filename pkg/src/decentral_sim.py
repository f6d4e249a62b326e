"""
Message-passing execution of the methods.

NodeNetwork has the same surface as graph_spectra.CentralizedNetwork (`graph`,
`rounds`, `oracle_calls`, `mix`, `local`), so every method runs unchanged on
either backend. A `mix` here is one synchronous round: every node posts its
block to each neighbour, a barrier, then every node applies the shared
Laplacian stencil to its own block and its inbox.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from src.config import DEFAULT_WORKERS
from src.constrained_methods import MethodResult, MethodSettings, run_method
from src.errors import TopologyViolation
from src.graph_spectra import CentralizedNetwork, LaplacianGraph, as_blocks, laplacian_stencil
from src.problem_oracles import ProblemInstance

FLOAT_BYTES = 8


# ==========================================================
# Domain Types
# ==========================================================

@dataclass
class NodeState:
    node_id: int
    neighbors: tuple
    degree: float
    lineage_root: tuple
    inbox: dict = field(default_factory=dict)
    oracle_calls: int = 0


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    messages: int
    bytes_exchanged: int
    wall: float | None = None


@dataclass(frozen=True)
class AccessRecord:
    round_index: int
    reader: int
    source: int


# ==========================================================
# Network
# ==========================================================

class NodeNetwork:
    """
    m node state machines joined by the graph's edges.

    With strict=True a read of a non-neighbour's block raises
    TopologyViolation; with strict=False it is served from the wire and only
    counted in `locality_violations`.

    Message and violation totals are always kept. Per-round logs, the access
    log and per-node events are held only with record=True; they grow
    with rounds·|E|.
    """

    def __init__(self, graph: LaplacianGraph, workers: int | None = None, strict: bool = True,
                 master_seed: int = 0, record: bool = False):
        self.graph = graph
        self.workers = DEFAULT_WORKERS if workers is None else workers
        self.strict = strict
        self.record = record
        self.nodes = [
            NodeState(
                node_id=i,
                neighbors=graph.neighbors[i],
                degree=float(graph.degrees[i]),
                lineage_root=(master_seed, i),
            )
            for i in range(graph.m)
        ]
        self.rounds = 0
        self.messages = 0
        self.bytes_exchanged = 0
        self.locality_violations = 0
        self.round_logs = []
        self.access_log = []
        self.events = []
        self._wire = None

    @property
    def oracle_calls(self) -> np.ndarray:
        return np.array([node.oracle_calls for node in self.nodes], dtype=np.int64)

    def _map_nodes(self, fn) -> list:
        if self.workers > 1 and self.graph.m > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, range(self.graph.m)))
        return [fn(i) for i in range(self.graph.m)]

    # --- exchange phase ---

    def _exchange(self, V: np.ndarray) -> int:
        self._wire = V
        for node in self.nodes:
            node.inbox = {}
        messages = 0
        for sender in self.nodes:
            for j in sender.neighbors:
                self.nodes[j].inbox[sender.node_id] = V[sender.node_id].copy()
                messages += 1
        return messages

    # --- compute phase ---

    def read(self, reader: int, source: int, own: np.ndarray) -> np.ndarray:
        if self.record:
            self.access_log.append(AccessRecord(self.rounds, reader, source))
        if source == reader:
            return own
        node = self.nodes[reader]
        if source in node.inbox:
            return node.inbox[source]
        if self.strict:
            raise TopologyViolation(f"Node {reader} read node {source}, which is not a neighbour")
        self.locality_violations += 1
        logging.debug(f"Round {self.rounds}: node {reader} read non-neighbour {source}")
        return self._wire[source]

    def neighbor_sources(self, i: int) -> tuple:
        """Blocks node i combines in its stencil; ascending neighbour id."""
        return self.nodes[i].neighbors

    def _stencil(self, i: int, V: np.ndarray) -> np.ndarray:
        own = self.read(i, i, V[i])
        sources = self.neighbor_sources(i)
        if sources:
            blocks = np.stack([self.read(i, j, V[i]) for j in sources])
        else:
            blocks = np.zeros((0, V.shape[1]))
        return laplacian_stencil(own, self.nodes[i].degree, blocks)

    def mix(self, V) -> np.ndarray:
        start = time.perf_counter()
        V = as_blocks(V, self.graph.m)
        messages = self._exchange(V)
        # barrier: every inbox is complete before any node computes
        out = np.stack(self._map_nodes(lambda i: self._stencil(i, V)))
        self.rounds += 1
        self.messages += messages
        self.bytes_exchanged += messages * V.shape[1] * FLOAT_BYTES
        if not self.record:
            return out

        self.round_logs.append(RoundLog(
            round_index=self.rounds,
            messages=messages,
            bytes_exchanged=messages * V.shape[1] * FLOAT_BYTES,
            wall=time.perf_counter() - start,
        ))
        for node in self.nodes:
            self.events.append({
                "round": self.rounds,
                "node": node.node_id,
                "msg_count": len(node.inbox),
                "oracle_calls": node.oracle_calls,
            })
        return out

    def local(self, fn, *arrays, calls: int = 1) -> np.ndarray:
        def run(i):
            self.nodes[i].oracle_calls += calls
            return fn(i, *(a[i] for a in arrays))
        return np.stack(self._map_nodes(run))

    def write_event_log(self, path) -> Path:
        """One JSON object per line: round, node, msg_count, oracle_calls."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for event in self.events:
                f.write(json.dumps(event, sort_keys=True) + "\n")
        return path


# ==========================================================
# Audit
# ==========================================================

def audit_locality(access_log: list, graph: LaplacianGraph) -> bool:
    """True iff every recorded read came from the reader itself or a graph neighbour."""
    for record in access_log:
        if record.source != record.reader and record.source not in graph.neighbors[record.reader]:
            logging.error(f"Locality violation in round {record.round_index}: node {record.reader} read node {record.source}")
            return False
    return True


# ==========================================================
# Execution
# ==========================================================

def simulate(method: str, p: ProblemInstance, g: LaplacianGraph, settings: MethodSettings,
             workers: int | None = None, event_log=None, network: NodeNetwork | None = None) -> MethodResult:
    """Run a registered method on the message-passing backend."""
    network = network or NodeNetwork(g, workers=workers, master_seed=settings.stochastic.master_seed,
                                     record=event_log is not None)
    result = run_method(method, p, g, settings, network)

    total_messages = network.messages
    result.report.extras["backend"] = "simulated"
    result.report.extras["messages"] = total_messages
    result.report.extras["locality_ok"] = network.locality_violations == 0

    if event_log is not None:
        if not network.record:
            logging.warning(f"Event log {event_log} requested from a network built with record=False")
        network.write_event_log(event_log)
    logging.info(f"Simulated {method}: {network.rounds} rounds, {total_messages} messages")
    return result


def _max_abs_deviation(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        return float("inf")
    nan_a, nan_b = np.isnan(a), np.isnan(b)
    if np.any(nan_a != nan_b):
        return float("inf")
    if a.size == 0 or np.all(nan_a):
        return 0.0
    return float(np.max(np.abs(a[~nan_a] - b[~nan_b])))


def equivalence_check(method: str, p: ProblemInstance, g: LaplacianGraph, settings: MethodSettings,
                      seeds=(0,), sim_seed_offset: int = 0, workers: int | None = None) -> float:
    """
    Largest absolute deviation between centralized and simulated runs.

    Compares final primal and dual states and every numeric trace entry.
    sim_seed_offset shifts the simulated run's master seed (comparator check).
    """
    deviation = 0.0
    for seed in seeds:
        central_cfg = replace(settings.stochastic, master_seed=seed)
        sim_cfg = replace(settings.stochastic, master_seed=seed + sim_seed_offset)

        central = run_method(method, p, g, replace(settings, stochastic=central_cfg), CentralizedNetwork(g))
        simulated = simulate(method, p, g, replace(settings, stochastic=sim_cfg), workers=workers)

        deviation = max(
            deviation,
            _max_abs_deviation(central.x, simulated.x),
            _max_abs_deviation(central.trace.to_numpy(dtype=float), simulated.trace.to_numpy(dtype=float)),
        )
        if central.y_hat is not None and simulated.y_hat is not None:
            deviation = max(deviation, _max_abs_deviation(central.y_hat, simulated.y_hat))

    logging.info(f"Equivalence check for {method}: max deviation {deviation:.3e}")
    return deviation
