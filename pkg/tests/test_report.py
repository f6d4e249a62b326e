import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

from src import report
from src.report import RunReport


# ==========================================================
# Hashing Tests
# ==========================================================

def test_compute_hash_consistency():
    data = {"a": 1}
    assert report.compute_hash(data) == report.compute_hash(data)


def test_compute_hash_difference():
    assert report.compute_hash({"a": 1}) != report.compute_hash({"a": 2})


def test_compute_hash_key_order_independent():
    """sort_keys=True means insertion order must not affect the hash."""
    assert report.compute_hash({"b": 2, "a": 1}) == report.compute_hash({"a": 1, "b": 2})


def test_compute_hash_length():
    assert len(report.compute_hash({})) == 64


# ==========================================================
# RunReport Tests
# ==========================================================

def test_to_dict_has_fixed_fields_and_extras(sample_reports):
    data = sample_reports[0].to_dict()
    for name in report.REPORT_FIELDS:
        assert name in data
    assert data["iterations"] == 40


def test_to_dict_unwraps_numpy_scalars():
    r = RunReport("h", "pdstm", np.int64(3), np.int64(4), np.float64(0.1), 0.2, 0.3, np.bool_(True), 0)
    data = r.to_dict()
    assert type(data["rounds"]) is int
    assert type(data["duality_gap"]) is float
    assert data["success"] is True
    json.dumps(data)


def test_non_finite_values_become_null():
    r = RunReport("h", "pdstm", 1, 1, float("nan"), float("inf"), None, False, 0, extras={"eps": float("inf")})
    data = r.to_dict()
    assert data["duality_gap"] is None
    assert data["feasibility"] is None
    assert data["eps"] is None


def test_report_file_naming(temp_dirs, sample_reports):
    """Report filename must follow the <method>_<hash12>_seed<seed>.json convention."""
    reports_dir, _ = temp_dirs
    path = report.save_report(sample_reports[0])
    assert path == reports_dir / f"pdstm_{'a' * 12}_seed0.json"


def test_report_file_is_sorted_json(temp_dirs, sample_reports):
    path = report.save_report(sample_reports[0])
    data = json.loads(path.read_text())
    assert list(data) == sorted(data)


def test_report_save_and_load(temp_dirs, sample_reports):
    path = report.save_report(sample_reports[1])
    loaded = report.load_report(path)
    assert loaded.f_gap is None
    assert loaded.success is False
    assert loaded.extras["iterations"] == 40


def test_unchanged_report_is_not_rewritten(temp_dirs, sample_reports, caplog):
    report.save_report(sample_reports[0])
    with caplog.at_level(logging.INFO):
        report.save_report(sample_reports[0])
    assert "No changes" in caplog.text


# ==========================================================
# Trace Tests
# ==========================================================

def test_trace_frame_columns():
    df = report.trace_frame([{"k": 1, "A_k": 1.0}])
    assert list(df.columns) == report.TRACE_COLUMNS
    assert math.isnan(df["f_gap"].iloc[0])


def test_save_trace_writes_csv(temp_dirs):
    _, traces_dir = temp_dirs
    path = report.save_trace(report.trace_frame([{"k": 1, "rounds": 2}]), "run")
    assert path == traces_dir / "run.csv"
    assert pd.read_csv(path)["rounds"].iloc[0] == 2


# ==========================================================
# Aggregate Tests
# ==========================================================

def test_reports_frame_orders_fixed_fields_first(sample_reports):
    df = report.reports_frame(sample_reports)
    assert list(df.columns[: len(report.REPORT_FIELDS)]) == report.REPORT_FIELDS
    assert len(df) == 2


def test_reports_frame_empty():
    assert list(report.reports_frame([]).columns) == report.REPORT_FIELDS


def test_aggregate_success_rate(sample_reports):
    agg = report.aggregate_reports(sample_reports)
    assert agg["success_rate"] == pytest.approx(0.5)
    assert agg["failed_seeds"] == [1]
    assert agg["worst_feasibility"] == pytest.approx(0.1)
    assert agg["worst_f_gap"] == pytest.approx(5e-4)


def test_aggregate_of_nothing():
    agg = report.aggregate_reports([])
    assert agg["seeds"] == 0
    assert agg["success_rate"] == 0.0


def test_save_aggregate(temp_dirs, sample_reports):
    reports_dir, _ = temp_dirs
    path = report.save_aggregate(report.aggregate_reports(sample_reports), "pdstm_run")
    assert path == reports_dir / "pdstm_run_aggregate.json"
    assert json.loads(path.read_text())["seeds"] == 2
