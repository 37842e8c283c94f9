import csv
import json
import math

import numpy as np
import pytest

from conftest import toy_six
from milr.engine import initialize
from milr.experiments import (
    CSV_COLUMNS,
    AvailabilityParams,
    DomainError,
    EvalSet,
    availability_curve,
    box_stats,
    errors_tolerated,
    linear_accuracy,
    run_rber,
    run_whole_layer,
    run_whole_weight,
    storage_report,
    synthetic_eval_set,
    time_between_errors,
    write_results,
)
from milr.faults import inject_whole_weight
from milr.network import build_network


@pytest.fixture(scope="module")
def toy():
    net = toy_six(np.float32, seed=3)
    return net, initialize(net, seed=1), synthetic_eval_set(net, 64, seed=2)


@pytest.fixture(scope="module")
def small():
    net = build_network("cifar-small", seed=4)
    return net, initialize(net, seed=1), synthetic_eval_set(net, 32, seed=2)


def _stable(r):
    d = dict(vars(r))
    d.pop("detect_s"), d.pop("recover_s")
    return d


def test_zero_rate_is_exactly_one(toy):
    net, state, ev = toy
    res = run_rber(net, state, ev, [0.0], trials=3)
    res += run_whole_weight(net, state, ev, [0.0], trials=3)
    assert len(res) == 3 * 4 + 3 * 2
    assert all(r.normalized_accuracy == 1.0 and r.flips == 0 for r in res)
    assert all(r.detected_all for r in res if "milr" in r.arm)


def test_reproducible(toy):
    net, state, ev = toy
    a = run_rber(net, state, ev, [1e-3], trials=3, seed_base=10)
    b = run_rber(net, state, ev, [1e-3], trials=3, seed_base=10)
    assert [_stable(r) for r in a] == [_stable(r) for r in b]
    assert [r.seed for r in a if r.arm == "none"] == [10, 11, 12]
    assert any(r.flips for r in a)


def test_ecc_single_bit_regime_is_pristine(small):
    net, state, ev = small
    res = run_rber(net, state, ev, [1e-6], trials=4, arms=["ecc"])
    for r in res:
        assert r.flips > 0 and r.ecc_uncorrectable == 0
        assert r.max_rel_err == 0.0 and r.normalized_accuracy == 1.0


def test_whole_weight_milr_restores_when_brackets_hold_one_layer(toy):
    net, state, ev = toy
    q = 2e-3
    res = run_whole_weight(net, state, ev, [q], trials=12, arms=["none", "milr"])
    checked = 0
    for r in res:
        if r.arm != "milr":
            continue
        hit = inject_whole_weight(net.copy(), q, r.seed).layers_hit
        brackets = [state.bracket(k) for k in hit]
        if hit and len(set(brackets)) == len(brackets):
            checked += 1
            assert r.params_restored and r.detected_all and r.failed == 0
            assert r.normalized_accuracy == 1.0
    assert checked >= 3


def test_ecc_cannot_fix_whole_weight(small):
    net, state, ev = small
    res = run_whole_weight(net, state, ev, [1e-5], trials=2, arms=["ecc"])
    assert all(r.ecc_corrected == 0 and r.ecc_uncorrectable + (r.max_rel_err == 0) > 0 for r in res)


def test_bad_arm_and_rate(toy):
    net, state, ev = toy
    with pytest.raises(DomainError):
        run_rber(net, state, ev, [0.0], arms=["magic"])
    with pytest.raises(DomainError):
        run_rber(net, state, ev, [1.5], arms=["none"])
    net64 = toy_six(np.float64)
    ev64 = EvalSet(ev.inputs.astype(np.float64), ev.labels)
    with pytest.raises(DomainError):
        run_rber(net64, initialize(net64), ev64, [0.0], arms=["ecc"])


def test_whole_layer_toy(toy):
    net, state, ev = toy
    rows = run_whole_layer(net, state, ev)
    assert [r.layer for r in rows] == net.param_layers()
    assert all(r.detected and r.status == "recovered" and r.max_rel_err < 1e-6 for r in rows)
    assert all(r.accuracy_after == 1.0 for r in rows)


def test_box_stats_hand_values():
    s = box_stats([1, 2, 3, 4, 5, 6, 7, 8, 9, 100])
    # numpy linear percentiles: positions 2.25 and 6.75 of the sorted list
    assert s["q1"] == 3.25 and s["q3"] == 7.75 and s["median"] == 5.5
    assert s["whisker_low"] == 1 and s["whisker_high"] == 9
    assert s["outliers"] == [100.0]
    flat = box_stats([1.0] * 5)
    assert flat["outliers"] == [] and flat["whisker_low"] == flat["whisker_high"] == 1.0


def test_write_results(toy, tmp_path):
    net, state, ev = toy
    res = run_rber(net, state, ev, [0.0, 1e-3], trials=2, arms=["none", "milr"])
    write_results(res, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 8
    assert {r["arm"]: r["detected_all"] for r in rows[:2]} == {"none": "", "milr": "True"}
    summary = list(csv.DictReader(open(tmp_path / "r_summary.csv")))
    assert len(summary) == 4
    write_results(res, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert len(data["trials"]) == 8 and len(data["summary"]) == 4


def test_storage_report():
    net = build_network("cifar-small")
    rep = storage_report(net, initialize(net, sidecar_dtype=np.float32))
    assert rep["ecc_bytes"] / rep["backup_bytes"] == 7 / 32
    assert rep["milr_bytes"] < rep["backup_bytes"]
    assert rep["ecc_plus_milr_bytes"] == rep["ecc_bytes"] + rep["milr_bytes"]
    net64 = toy_six(np.float64)
    assert storage_report(net64, initialize(net64))["ecc_bytes"] is None


def test_availability_hand_point():
    p = AvailabilityParams(0.5, 3, 2.0, 100.0, linear_accuracy(0.9, 10.0, 0.4))
    # n = (0.5*3 + 2) / ((1/0.8 - 1) * 100) = 3.5 / 25 = 0.14; A = 0.9 - 0.05*0.14
    a, acc = availability_curve(p, [0.8])
    assert math.isclose(errors_tolerated(p, 0.8), 0.14, rel_tol=1e-14)
    assert abs(acc[0] - 0.893) < 1e-12


def test_availability_shape():
    grid = np.linspace(0.5, 0.999999, 200)
    p = AvailabilityParams(0.01, 2, 0.2, 1e4, linear_accuracy(1.0, 1.0, 0.5))
    _, acc = availability_curve(p, grid)
    assert np.all(np.diff(acc) <= 0) and acc.min() >= 0.0
    flat = AvailabilityParams(0.01, 2, 0.2, 1e4, lambda n: np.full_like(n, 0.7))
    assert np.all(availability_curve(flat, grid)[1] == 0.7)
    double = AvailabilityParams(0.01, 2, 0.2, 2e4)
    np.testing.assert_allclose(errors_tolerated(double, grid), errors_tolerated(p, grid) / 2, rtol=1e-15)


def test_availability_domain():
    p = AvailabilityParams(0.01, 2, 0.2, 1e4)
    for bad in (1.0, 0.0, 1.2):
        with pytest.raises(DomainError):
            availability_curve(p, [bad])
    with pytest.raises(DomainError):
        AvailabilityParams(0.0, 2, 0.2, 1e4)


def test_time_between_errors():
    # 6.68 MB = 53.44 Mbit at 75,000 errors per 1e9 device hours per Mbit
    assert math.isclose(time_between_errors(6.68e6), 1e9 / (75_000 * 53.44) * 3600, rel_tol=1e-12)
