import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# Project Paths
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_REPORTS_DIR = BASE_DIR / "data" / "reports"
DATA_TRACES_DIR = BASE_DIR / "data" / "traces"

DATA_REPORTS_DIR.mkdir(parents=True, exist_ok=True)
DATA_TRACES_DIR.mkdir(parents=True, exist_ok=True)

# Database (run-report store)
DATABASE_URL = os.getenv(
    "DATABASE_URL",
    "sqlite:///" + (BASE_DIR / "data" / "experiments.db").as_posix(),
)

# --- Numeric defaults (overridable from .env) ---

# Graphs up to this size get a dense symmetric eigendecomposition;
# larger ones use sparse Lanczos and inverse iteration.
DENSE_SPECTRA_MAX_M = int(os.getenv("DENSE_SPECTRA_MAX_M", "512"))

# Eigenvalues below KERNEL_TOL * lambda_max count as zero.
KERNEL_TOL = float(os.getenv("KERNEL_TOL", "1e-10"))

# Hard cap on outer iterations of any method.
HARD_ITERATION_CAP = int(os.getenv("HARD_ITERATION_CAP", "100000"))

# Floor for the inner (Chebyshev) auxiliary-problem accuracy.
INNER_TOL_FLOOR = float(os.getenv("INNER_TOL_FLOOR", "1e-14"))

# Abort a run when the objective gap exceeds this multiple of the initial gap.
DIVERGENCE_FACTOR = float(os.getenv("DIVERGENCE_FACTOR", "1e6"))

# Worker threads for the per-node local phase of the simulator.
DEFAULT_WORKERS = int(os.getenv("DEFAULT_WORKERS", "1"))

TOPOLOGIES = ("path", "cycle", "star", "complete", "random_geometric", "erdos_renyi")
