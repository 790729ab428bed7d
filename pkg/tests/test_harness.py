import csv
import json
import math

import numpy as np
import pytest

import fedmask.harness as H
from fedmask.adversary import AttackPlan
from fedmask.config import STRATEGIES
from fedmask.data import generate_blobs, write_idx
from fedmask.harness import (CSV_COLUMNS, RoundMetrics, compare_runs, emit_metrics,
                             format_summary, read_metrics_csv, run_experiment)

from conftest import blob_config


def _csv_bytes(cfg, tmp_path, name, workers=None):
    path = tmp_path / name
    emit_metrics(run_experiment(cfg, workers), "csv", path)
    return path.read_bytes()


def test_zero_rounds_gives_initial_row():
    rows = list(run_experiment(blob_config(rounds=0)))
    assert len(rows) == 1 and rows[0].round == 0


def test_rounds_are_monotone_and_bounded():
    rows = list(run_experiment(blob_config(rounds=4)))
    assert [r.round for r in rows] == [0, 1, 2, 3, 4]
    assert all(0 <= r.clean_accuracy <= 1 for r in rows)


def test_rerun_is_bit_identical(tmp_path):
    cfg = blob_config()
    assert _csv_bytes(cfg, tmp_path, "a.csv") == _csv_bytes(cfg, tmp_path, "b.csv")


@pytest.mark.parametrize("strategy", ["masked", "scaffold", "fedavg"])
def test_worker_count_does_not_change_output(tmp_path, strategy):
    cfg = blob_config(strategy=strategy)
    assert _csv_bytes(cfg, tmp_path, "1.csv", 1) == _csv_bytes(cfg, tmp_path, "4.csv", 4)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_completes(strategy):
    rows = list(run_experiment(blob_config(strategy=strategy, rounds=3)))
    assert len(rows) == 4
    assert all(math.isfinite(r.clean_accuracy) for r in rows)


def test_scaffold_gradient_diff_mode_runs():
    rows = list(run_experiment(blob_config(strategy="scaffold", scaffold_mode="gradient_diff")))
    assert len(rows) == 4


def test_dba_reports_asr():
    cfg = blob_config(attack={"kind": "dba", "malicious_ratio": 0.3,
                              "poisoned_data_ratio": 0.5}, hidden=8)
    rows = list(run_experiment(cfg))
    assert all(r.asr is not None and 0 <= r.asr <= 1 for r in rows)


def test_attack_none_matches_disabled_adversary(tmp_path, monkeypatch):
    cfg = blob_config()
    normal = _csv_bytes(cfg, tmp_path, "a.csv")
    monkeypatch.setattr(H, "plan_attack", lambda spec, n, shape=None: AttackPlan(spec))
    assert _csv_bytes(cfg, tmp_path, "b.csv") == normal


class _ShuffledPool:
    """Stands in for the thread pool: runs clients in reverse and returns them shuffled."""

    def __init__(self, max_workers=None):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def map(self, fn, items):
        items = list(items)
        results = [fn(i) for i in reversed(items)]
        order = np.random.default_rng(len(items)).permutation(len(results))
        return [results[i] for i in order]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_client_order_independence(tmp_path, monkeypatch, strategy):
    cfg = blob_config(strategy=strategy)
    normal = _csv_bytes(cfg, tmp_path, "a.csv")
    monkeypatch.setattr(H, "ThreadPoolExecutor", _ShuffledPool)
    assert _csv_bytes(cfg, tmp_path, "b.csv") == normal


def test_round_errors_carry_context(monkeypatch):
    def boom(updates):
        raise ValueError("bad")

    monkeypatch.setattr(H.agg, "agg_nwfedavg", boom)
    with pytest.raises(RuntimeError, match=r"round 1 \(nwfedavg\)"):
        list(run_experiment(blob_config(strategy="nwfedavg")))


def test_non_finite_model_rejected(monkeypatch):
    monkeypatch.setattr(H.agg, "agg_fedavg", lambda u: u[0].model.like(
        np.full(u[0].model.values.size, np.nan)))
    with pytest.raises(RuntimeError, match="non-finite"):
        list(run_experiment(blob_config(strategy="fedavg")))


def test_timing_recorded_when_enabled():
    rows = list(run_experiment(blob_config(record_timing=True, rounds=2)))
    assert rows[0].agg_wall_ms == 0.0 and all(r.agg_wall_ms > 0 for r in rows[1:])


def test_idx_dataset_config(tmp_path):
    full = generate_blobs(3, 30, 16, 0.5, seed=2, image_shape=(4, 4))
    within = np.arange(len(full)) % 30
    write_idx(full.subset(np.flatnonzero(within < 20)), tmp_path / "ti", tmp_path / "tl")
    write_idx(full.subset(np.flatnonzero(within >= 20)), tmp_path / "vi", tmp_path / "vl")
    cfg = blob_config(dataset={"idx": {
        "train_images": str(tmp_path / "ti"), "train_labels": str(tmp_path / "tl"),
        "test_images": str(tmp_path / "vi"), "test_labels": str(tmp_path / "vl")}})
    rows = list(run_experiment(cfg))
    assert len(rows) == 4 and len(rows[-1].per_class_accuracy) == 3


# --- output --------------------------------------------------------------------


def _rows():
    return [RoundMetrics(0, "masked", 0.25, [0.5, 0.0, -1.0], None, 0.0),
            RoundMetrics(1, "masked", 1 / 3, [0.1, 0.2, 0.3], 0.125, 1.5)]


def test_empty_stream_is_header_only(tmp_path):
    p = emit_metrics([], "csv", tmp_path / "e.csv")
    assert p.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_absent_asr_is_empty_field(tmp_path):
    p = emit_metrics(_rows()[:1], "csv", tmp_path / "m.csv")
    line = p.read_text().splitlines()[1]
    assert next(csv.reader([line]))[3] == ""


def test_csv_and_json_agree(tmp_path):
    emit_metrics(_rows(), "csv", tmp_path / "m.csv")
    emit_metrics(_rows(), "json", tmp_path / "m.json")
    from_json = json.loads((tmp_path / "m.json").read_text())
    from_csv = [r.as_dict() for r in read_metrics_csv(tmp_path / "m.csv")]
    assert from_csv == from_json
    assert list(from_json[0]) == list(CSV_COLUMNS)
    assert from_json[0]["asr"] is None


def test_emit_creates_parent_and_reports_path(tmp_path):
    p = emit_metrics(_rows(), "csv", tmp_path / "sub" / "m.csv")
    assert p.exists()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_metrics(_rows(), "csv", blocker / "m.csv")


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_metrics(_rows(), "xml", tmp_path / "m.xml")


# --- compare -------------------------------------------------------------------


def test_compare_single_config():
    rows = compare_runs([blob_config(rounds=2)])
    assert len(rows) == 1 and rows[0].improvement is None
    assert "improvement_%" in format_summary(rows)


def test_compare_self_is_zero_percent():
    a = blob_config(strategy="fedavg", label="one", rounds=2)
    b = blob_config(strategy="fedavg", label="two", rounds=2)
    rows = compare_runs([a, b], reference="fedavg")
    assert rows[0].accuracy == rows[1].accuracy
    assert rows[1].improvement == 0.0


def test_compare_rejects_off_axis_differences():
    with pytest.raises(ValueError, match="rounds"):
        compare_runs([blob_config(), blob_config(rounds=5)])


def test_compare_improvement_is_relative():
    cfgs = [blob_config(strategy=s, rounds=2) for s in ("masked", "fedavg")]
    rows = compare_runs(cfgs)
    ref, other = rows[0].accuracy, rows[1].accuracy
    assert rows[1].improvement == pytest.approx((ref - other) / other * 100)


def test_compare_equals_independent_runs():
    cfgs = [blob_config(strategy=s, rounds=2) for s in STRATEGIES]
    rows = compare_runs(cfgs)
    for cfg, row in zip(cfgs, rows):
        assert row.accuracy == list(run_experiment(cfg))[-1].clean_accuracy
