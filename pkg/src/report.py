import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from src.config import DATA_REPORTS_DIR, DATA_TRACES_DIR

TRACE_COLUMNS = ["k", "A_k", "alpha_k", "r_k", "f_gap", "grad_norm", "rounds", "oracle_calls"]

REPORT_FIELDS = [
    "config_hash",
    "method",
    "rounds",
    "oracle_calls_per_node",
    "duality_gap",
    "feasibility",
    "f_gap",
    "success",
    "seed",
]


# ==========================================================
# Utility Functions
# ==========================================================

def compute_hash(data) -> str:
    """Create SHA256 hash of JSON data for run identity and RNG keys."""
    encoded = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(encoded).hexdigest()


def _clean(value):
    """Plain-JSON scalar: numpy types unwrapped, non-finite floats become None."""
    if value is None or isinstance(value, (bool, str)):
        return value
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


# ==========================================================
# Run reports
# ==========================================================

@dataclass
class RunReport:
    """
    Outcome of one method run on one seed.

    The first nine fields are the fixed report schema; `extras` carries
    method-specific diagnostics (iterations, mode, flags, errors).
    """
    config_hash: str
    method: str
    rounds: int
    oracle_calls_per_node: int
    duality_gap: float | None
    feasibility: float | None
    f_gap: float | None
    success: bool
    seed: int | None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = {name: _clean(getattr(self, name)) for name in REPORT_FIELDS}
        data.update({key: _clean(value) for key, value in self.extras.items()})
        return data


def report_from_dict(data: dict) -> RunReport:
    extras = {k: v for k, v in data.items() if k not in REPORT_FIELDS}
    return RunReport(**{name: data.get(name) for name in REPORT_FIELDS}, extras=extras)


def report_path(config_hash: str, method: str, seed, out_dir: Path | None = None) -> Path:
    """Naming convention: <method>_<hash prefix>_seed<seed>.json."""
    out_dir = DATA_REPORTS_DIR if out_dir is None else Path(out_dir)
    return out_dir / f"{method}_{config_hash[:12]}_seed{seed}.json"


def save_report(report: RunReport, out_dir: Path | None = None) -> Path:
    """
    Write a RunReport as sorted, indented JSON.

    An existing file with identical content is left untouched.
    """
    path = report_path(report.config_hash, report.method, report.seed, out_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)

    if path.exists() and path.read_text() == payload:
        logging.info(f"No changes for {path.name}, skipping write")
        return path

    path.write_text(payload)
    return path


def load_report(path) -> RunReport:
    with open(path, "r") as f:
        return report_from_dict(json.load(f))


# ==========================================================
# Traces and tables
# ==========================================================

def trace_frame(rows: list) -> pd.DataFrame:
    """
    Build a trace DataFrame from per-iteration dicts.

    Parameters
    ----------
    rows : list of dicts keyed by TRACE_COLUMNS; missing keys become NaN

    Returns
    -------
    DataFrame with columns: k, A_k, alpha_k, r_k, f_gap, grad_norm, rounds, oracle_calls
    """
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def save_trace(trace: pd.DataFrame, name: str, out_dir: Path | None = None) -> Path:
    out_dir = DATA_TRACES_DIR if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.csv"
    trace.to_csv(path, index=False)
    return path


def reports_frame(reports: list) -> pd.DataFrame:
    """One row per RunReport, fixed fields first."""
    df = pd.DataFrame([r.to_dict() for r in reports])
    if df.empty:
        return pd.DataFrame(columns=REPORT_FIELDS)
    extra_cols = sorted(c for c in df.columns if c not in REPORT_FIELDS)
    return df[REPORT_FIELDS + extra_cols]


def aggregate_reports(reports: list) -> dict:
    """
    Summarise the per-seed reports of one configuration.

    Returns
    -------
    dict with keys: config_hash, method, seeds, success_rate, failed_seeds,
    max_rounds, max_oracle_calls_per_node, worst_duality_gap, worst_feasibility,
    worst_f_gap
    """
    def worst(key):
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return max(values) if values else None

    return {
        "config_hash": reports[0].config_hash if reports else None,
        "method": reports[0].method if reports else None,
        "seeds": len(reports),
        "success_rate": sum(bool(r.success) for r in reports) / len(reports) if reports else 0.0,
        "failed_seeds": [r.seed for r in reports if not r.success],
        "max_rounds": worst("rounds"),
        "max_oracle_calls_per_node": worst("oracle_calls_per_node"),
        "worst_duality_gap": _clean(worst("duality_gap")),
        "worst_feasibility": _clean(worst("feasibility")),
        "worst_f_gap": _clean(worst("f_gap")),
    }


def save_aggregate(aggregate: dict, name: str, out_dir: Path | None = None) -> Path:
    out_dir = DATA_REPORTS_DIR if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}_aggregate.json"
    path.write_text(json.dumps(aggregate, sort_keys=True, indent=2))
    return path
