import numpy as np
import pytest

from src import experiment, report


@pytest.fixture
def temp_dirs(tmp_path, monkeypatch):
    """
    Redirect report and trace directories to pytest temp dir so tests
    never touch real project data folders.
    """
    reports_dir = tmp_path / "reports"
    traces_dir = tmp_path / "traces"

    reports_dir.mkdir()
    traces_dir.mkdir()

    monkeypatch.setattr(report, "DATA_REPORTS_DIR", reports_dir)
    monkeypatch.setattr(report, "DATA_TRACES_DIR", traces_dir)
    monkeypatch.setattr(experiment, "DATA_REPORTS_DIR", reports_dir)

    return reports_dir, traces_dir


# ==========================================================
# Graph and Instance Fixtures
# ==========================================================

@pytest.fixture
def two_node_graph():
    """Single edge between nodes 0 and 1: W̄ = [[1, -1], [-1, 1]]."""
    from src.graph_spectra import laplacian_from_edges

    return laplacian_from_edges(2, [(0, 1)])


@pytest.fixture
def two_node_instance():
    """
    f_1(x) = ½x², f_2(x) = ½(x − 2)².
    F = (f_1 + f_2)/2 is minimised at x* = 1 with F* = 0.5.
    """
    from src.problem_oracles import quadratic_instance

    return quadratic_instance(np.ones((2, 1, 1)), np.array([[0.0], [2.0]]))


@pytest.fixture
def path4():
    from src.graph_spectra import make_graph

    return make_graph("path", 4)


@pytest.fixture
def quad4():
    """Well-conditioned 4-node quadratic in two dimensions."""
    from src.problem_oracles import make_quadratic_instance

    return make_quadratic_instance(seed=1, m=4, n=2, mu=1.0, L=3.0)


# ==========================================================
# Load Layer Fixtures
# ==========================================================

@pytest.fixture
def db_engine():
    """
    Isolated SQLite in-memory engine, fresh for every test.
    StaticPool ensures all connections within one engine see the same
    in-memory database, which is required for SQLite :memory: to work correctly
    with SQLAlchemy's connection pool.
    """
    from sqlalchemy import create_engine
    from sqlalchemy.pool import StaticPool

    engine = create_engine(
        "sqlite:///:memory:",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    yield engine
    engine.dispose()


@pytest.fixture
def sample_reports():
    """
    Two run reports of one configuration.
    The second has no objective gap to exercise NULL handling.
    """
    from src.report import RunReport

    return [
        RunReport(
            config_hash="a" * 64, method="pdstm", rounds=40, oracle_calls_per_node=40,
            duality_gap=1e-3, feasibility=2e-3, f_gap=5e-4, success=True, seed=0,
            extras={"iterations": 40, "eps": 1e-2},
        ),
        RunReport(
            config_hash="a" * 64, method="pdstm", rounds=40, oracle_calls_per_node=40,
            duality_gap=3e-2, feasibility=1e-1, f_gap=None, success=False, seed=1,
            extras={"iterations": 40, "eps": 1e-2},
        ),
    ]


@pytest.fixture
def minimal_config():
    """Smallest valid experiment configuration as raw JSON data."""
    return {
        "problem": {"family": "quadratic", "m": 4, "n": 2, "mu": 1.0, "L": 3.0, "seed": 1},
        "graph": {"topology": "path"},
        "method": {"name": "pdstm"},
        "budgets": {"eps": 0.05, "n_constant": 2},
        "output": {"simulate": False, "store": False},
    }
