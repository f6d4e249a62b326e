import json

import pandas as pd
from sqlalchemy import text

from src.report import REPORT_FIELDS

VALUE_COLUMNS = ["rounds", "oracle_calls_per_node", "duality_gap", "feasibility", "f_gap", "success", "extras"]


def ensure_tables_exist(engine) -> None:
    with engine.connect() as conn:
        conn.execute(text("""
            CREATE TABLE IF NOT EXISTS run_reports (
                config_hash           TEXT NOT NULL,
                method                TEXT NOT NULL,
                seed                  INTEGER NOT NULL,
                rounds                INTEGER NOT NULL,
                oracle_calls_per_node INTEGER NOT NULL,
                duality_gap           REAL,
                feasibility           REAL,
                f_gap                 REAL,
                success               INTEGER NOT NULL,
                extras                TEXT,
                PRIMARY KEY (config_hash, method, seed)
            )
        """))
        conn.commit()


def _nan_equal(a, b) -> bool:
    """True when both values are missing, or both are numerically equal."""
    a_nan = pd.isna(a)
    b_nan = pd.isna(b)
    if a_nan and b_nan:
        return True
    if a_nan or b_nan:
        return False
    if isinstance(a, str) or isinstance(b, str):
        return str(a) == str(b)
    return abs(float(a) - float(b)) < 1e-12


def reports_to_rows(reports: list) -> pd.DataFrame:
    """
    Flatten RunReports into the run_reports table layout.

    Method-specific fields are kept as one sorted JSON string in `extras`.
    Reports without a seed are stored under seed -1.
    """
    rows = []
    for report in reports:
        data = report.to_dict()
        extras = {k: v for k, v in data.items() if k not in REPORT_FIELDS}
        rows.append({
            "config_hash": data["config_hash"],
            "method": data["method"],
            "seed": -1 if data["seed"] is None else int(data["seed"]),
            "rounds": int(data["rounds"]),
            "oracle_calls_per_node": int(data["oracle_calls_per_node"]),
            "duality_gap": data["duality_gap"],
            "feasibility": data["feasibility"],
            "f_gap": data["f_gap"],
            "success": int(bool(data["success"])),
            "extras": json.dumps(extras, sort_keys=True),
        })
    return pd.DataFrame(rows, columns=["config_hash", "method", "seed"] + VALUE_COLUMNS)


def upsert_run_reports(reports: list, engine) -> dict:
    """
    Upsert RunReports into run_reports.

    Primary key: (config_hash, method, seed).
    Missing floats are stored as NULL.

    Returns
    -------
    dict with keys: inserted, updated, unchanged
    """
    stats = {"inserted": 0, "updated": 0, "unchanged": 0}
    df = reports_to_rows(reports)

    # NOTE: loads the full table into memory for comparison.
    # Fine for desk-scale sweeps; revisit if the store grows large.
    with engine.connect() as conn:
        existing = pd.read_sql("SELECT * FROM run_reports", conn)

    existing_map = {
        (row["config_hash"], row["method"], int(row["seed"])): row
        for _, row in existing.iterrows()
    }

    to_insert = []
    to_update = []

    for _, row in df.iterrows():
        key = (row["config_hash"], row["method"], int(row["seed"]))
        if key not in existing_map:
            to_insert.append(row)
            stats["inserted"] += 1
        elif all(_nan_equal(row[col], existing_map[key][col]) for col in VALUE_COLUMNS):
            stats["unchanged"] += 1
        else:
            to_update.append(row)
            stats["updated"] += 1

    if to_insert:
        pd.DataFrame(to_insert).to_sql("run_reports", engine, if_exists="append", index=False)

    if to_update:
        with engine.connect() as conn:
            for row in to_update:
                conn.execute(
                    text("""
                        UPDATE run_reports
                        SET rounds = :rounds, oracle_calls_per_node = :oracle_calls_per_node,
                            duality_gap = :duality_gap, feasibility = :feasibility, f_gap = :f_gap,
                            success = :success, extras = :extras
                        WHERE config_hash = :config_hash AND method = :method AND seed = :seed
                    """),
                    {
                        "config_hash": row["config_hash"],
                        "method": row["method"],
                        "seed": int(row["seed"]),
                        "rounds": int(row["rounds"]),
                        "oracle_calls_per_node": int(row["oracle_calls_per_node"]),
                        "duality_gap": None if pd.isna(row["duality_gap"]) else float(row["duality_gap"]),
                        "feasibility": None if pd.isna(row["feasibility"]) else float(row["feasibility"]),
                        "f_gap": None if pd.isna(row["f_gap"]) else float(row["f_gap"]),
                        "success": int(row["success"]),
                        "extras": row["extras"],
                    },
                )
            conn.commit()

    return stats


def fetch_run_reports(engine, config_hash: str | None = None) -> pd.DataFrame:
    """Stored reports, optionally restricted to one configuration."""
    query = "SELECT * FROM run_reports"
    params = {}
    if config_hash is not None:
        query += " WHERE config_hash = :config_hash"
        params["config_hash"] = config_hash
    with engine.connect() as conn:
        return pd.read_sql(text(query + " ORDER BY method, seed"), conn, params=params)
