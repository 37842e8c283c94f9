"""Fault-injection experiments, storage accounting and the availability model."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .engine import MilrState, detect, recover
from .faults import corrupt_layer, inject_bitflips, inject_whole_weight
from .linalg import Rng
from .network import Network, classify_accuracy, layer_names, predict
from .secded import EccMemory, ecc_overhead_bytes, scrub

RBER_ARMS = ("none", "ecc", "milr", "ecc+milr")
WHOLE_WEIGHT_ARMS = ("none", "milr")
CSV_COLUMNS = (
    "arm", "rate", "trial", "seed", "flips", "accuracy", "normalized_accuracy",
    "detected_all", "recovered", "failed", "detect_s", "recover_s",
)
PARAM_RTOL = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-10}
SECONDS_PER_YEAR = 365 * 24 * 3600


class DomainError(ValueError):
    pass


@dataclass
class EvalSet:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def synthetic_eval_set(network: Network, n: int = 256, seed: int = 0) -> EvalSet:
    """Uniform [-1, 1) inputs labelled by the pristine network's own predictions.

    Without a dataset the error-free accuracy is 1.0 by construction, so
    accuracy measures agreement with the undamaged network.  Signed inputs
    spread a random-weight network's predictions over more classes than
    [0, 1) pixels do.
    """
    x = Rng(seed).units(n * int(np.prod(network.input_shape)))
    x = x.reshape((n,) + network.input_shape).astype(network.dtype)
    return EvalSet(x, predict(network, x))


@dataclass
class ExperimentResult:
    arm: str
    rate: float
    trial: int
    seed: int
    flips: int
    accuracy: float
    normalized_accuracy: float
    detected_all: bool | None = None  # None for arms without MILR
    recovered: int = 0
    failed: int = 0
    detect_s: float = 0.0
    recover_s: float = 0.0
    # not part of the CSV
    words_hit: int = 0
    ecc_corrected: int = 0
    ecc_uncorrectable: int = 0
    max_rel_err: float = 0.0
    params_restored: bool = True

    def csv_row(self) -> dict:
        row = {c: getattr(self, c) for c in CSV_COLUMNS}
        if row["detected_all"] is None:
            row["detected_all"] = ""
        return row


def _normalize(acc: float, base: float) -> float:
    if base <= 0:
        raise DomainError("error-free accuracy is zero; normalized accuracy is undefined")
    return acc / base


def param_damage(network: Network, pristine: Network) -> tuple[float, list[int]]:
    """``(max relative error, bitwise-corrupted layers)`` against the pristine copy.

    Relative error of a layer is ``max |w - w0| / max |w0|``; non-finite values count as infinite.
    """
    worst, hit = 0.0, []
    for k in pristine.param_layers():
        a = network.layers[k].params
        b = pristine.layers[k].params
        if a.tobytes() == b.tobytes():
            continue
        hit.append(k)
        with np.errstate(invalid="ignore", over="ignore"):
            diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
        scale = float(np.max(np.abs(b))) or 1.0
        err = float(np.max(np.where(np.isfinite(diff), diff, np.inf))) / scale
        worst = max(worst, err)
    return worst, hit


def _run_arm(arm, network, state, evalset, base_acc, inject: Callable, rate, trial, seed) -> ExperimentResult:
    net = network.copy()
    ecc = EccMemory.build(net) if "ecc" in arm else None
    report = inject(net, ecc)
    res = ExperimentResult(arm, rate, trial, seed, report.flips, 0.0, 0.0, words_hit=report.words)
    if ecc is not None:
        s = scrub(net, ecc)
        res.ecc_corrected, res.ecc_uncorrectable = s.total_corrected, s.total_uncorrectable
    if "milr" in arm:
        _, truly_hit = param_damage(net, network)
        t0 = time.perf_counter()
        log = detect(net, state)
        t1 = time.perf_counter()
        outcome = recover(net, state, log)
        t2 = time.perf_counter()
        res.detected_all = set(truly_hit) <= set(log.layers)
        res.recovered = len(outcome.recovered)
        res.failed = len(outcome.outcomes) - len(outcome.recovered)
        res.detect_s, res.recover_s = t1 - t0, t2 - t1
    res.max_rel_err, _ = param_damage(net, network)
    res.params_restored = res.max_rel_err <= PARAM_RTOL[network.dtype]
    res.accuracy = classify_accuracy(net, evalset.inputs, evalset.labels)
    res.normalized_accuracy = _normalize(res.accuracy, base_acc)
    return res


def _check_arms(arms, allowed):
    bad = [a for a in arms if a not in allowed]
    if bad:
        raise DomainError(f"unknown arm(s) {bad}; choose from {list(allowed)}")


def _check_rate(rate):
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"rate must lie in [0, 1], got {rate}")


def run_rber(network, state, evalset: EvalSet, rates, trials: int = 10, arms=RBER_ARMS, seed_base: int = 0):
    """Random bit flips at each rate; trial ``t`` uses seed ``seed_base + t`` in every arm."""
    _check_arms(arms, RBER_ARMS)
    if any("ecc" in a for a in arms) and network.dtype != np.float32:
        raise DomainError("ECC arms need a float32 network")
    base = classify_accuracy(network, evalset.inputs, evalset.labels)
    out = []
    for rate in rates:
        _check_rate(rate)
        for t in range(trials):
            seed = seed_base + t
            for arm in arms:
                inject = lambda net, ecc, r=rate, s=seed: inject_bitflips(net, r, s, ecc)
                out.append(_run_arm(arm, network, state, evalset, base, inject, rate, t, seed))
    return out


def run_whole_weight(network, state, evalset: EvalSet, rates, trials: int = 10, arms=WHOLE_WEIGHT_ARMS, seed_base: int = 0):
    """Whole-weight errors (all data bits of a word flipped) with probability ``q`` per word.

    An ``ecc`` arm is accepted for comparison; its scrub sees only multi-bit words.
    """
    _check_arms(arms, RBER_ARMS)
    base = classify_accuracy(network, evalset.inputs, evalset.labels)
    out = []
    for rate in rates:
        _check_rate(rate)
        for t in range(trials):
            seed = seed_base + t
            for arm in arms:
                inject = lambda net, ecc, r=rate, s=seed: inject_whole_weight(net, r, s)
                out.append(_run_arm(arm, network, state, evalset, base, inject, rate, t, seed))
    return out


@dataclass
class WholeLayerRow:
    layer: int
    name: str
    kind: str
    strategy: str
    detected: bool
    status: str  # recovered | degraded | failed | N/A
    max_rel_err: float
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    recover_s: float = 0.0


def run_whole_layer(network: Network, state: MilrState, evalset: EvalSet | None = None, seed: int = 0) -> list[WholeLayerRow]:
    """Replace each parameterized layer in turn by random values, then detect and recover.

    Partial-crc conv layers cannot be rebuilt from a whole-layer error by
    design; their recovery is still attempted and reported ``N/A`` unless it
    happens to succeed.
    """
    names = layer_names(network)
    base = classify_accuracy(network, evalset.inputs, evalset.labels) if evalset is not None else None
    rows = []
    for k in network.param_layers():
        net = network.copy()
        corrupt_layer(net, k, seed + k)
        before = None if evalset is None else _normalize(classify_accuracy(net, evalset.inputs, evalset.labels), base)
        log = detect(net, state)
        t0 = time.perf_counter()
        outcome = recover(net, state, log)
        elapsed = time.perf_counter() - t0
        err, _ = param_damage(net, network)
        status = outcome.status(k) or "failed"
        strategy = state.strategy(k)
        if strategy == "partial-crc" and status != "recovered":
            status = "N/A"
        after = None if evalset is None else _normalize(classify_accuracy(net, evalset.inputs, evalset.labels), base)
        rows.append(WholeLayerRow(k, names[k], net.layers[k].kind, strategy, k in log.layers, status, err, before, after, elapsed))
    return rows


# --- statistics and output --------------------------------------------------------


def box_stats(values) -> dict:
    """Median, quartiles, whiskers at the furthest points within 1.5 IQR, and the outliers."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "n": int(v.size),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": v[(v < lo_fence) | (v > hi_fence)].tolist(),
        "mean": float(v.mean()),
    }


def summarize(results: list[ExperimentResult]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in results:
        groups.setdefault((r.arm, r.rate), []).append(r.normalized_accuracy)
    return [{"arm": a, "rate": rate, **box_stats(v)} for (a, rate), v in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0]))]


def write_results(results: list[ExperimentResult], path) -> None:
    """CSV (one row per trial) or JSON (trials plus box statistics), by file suffix."""
    results = sorted(results, key=lambda r: (r.rate, r.trial, r.arm))
    path = str(path)
    if path.endswith(".json"):
        with open(path, "w") as fh:
            json.dump({"trials": [asdict(r) for r in results], "summary": summarize(results)}, fh, indent=1)
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.csv_row())
    summary = summarize(results)
    with open(path.rsplit(".", 1)[0] + "_summary.csv" if "." in path else path + "_summary.csv", "w", newline="") as fh:
        cols = ["arm", "rate", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "mean", "outliers"]
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for s in summary:
            writer.writerow({**s, "outliers": " ".join(repr(x) for x in s["outliers"])})


# --- storage -----------------------------------------------------------------------


def storage_report(network: Network, state: MilrState) -> dict:
    backup = network.param_bytes()
    ecc = ecc_overhead_bytes(network) if network.dtype == np.float32 else None
    milr = state.plan_cost_bytes
    return {
        "backup_bytes": backup,
        "ecc_bytes": ecc,
        "milr_bytes": milr,
        "ecc_plus_milr_bytes": None if ecc is None else ecc + milr,
        "milr_breakdown": state.breakdown(),
    }


# --- availability ------------------------------------------------------------------


@dataclass
class AvailabilityParams:
    """Inputs of the availability / minimum-accuracy trade-off.

    ``accuracy`` maps an error count to accuracy; see :func:`linear_accuracy`.
    """

    t_d: float
    i: float
    t_r: float
    t_be: float
    accuracy: Callable[[np.ndarray], np.ndarray] = field(default=lambda n: np.ones_like(n))

    def __post_init__(self):
        for name in ("t_d", "t_r", "t_be"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not self.i > 0:
            raise DomainError("detection runs between errors must be positive")


def linear_accuracy(acc0: float, n1: float, acc1: float) -> Callable:
    """Straight line through ``(0, acc0)`` and ``(n1, acc1)``, floored at 0."""
    if n1 <= 0:
        raise DomainError("second anchor must sit at a positive error count")
    slope = (acc1 - acc0) / n1
    return lambda n: np.maximum(acc0 + slope * np.asarray(n, dtype=np.float64), 0.0)


def time_between_errors(nbytes: float, fit_per_mbit: float = 75_000.0) -> float:
    """Seconds between errors for ``nbytes`` of memory at ``fit_per_mbit`` errors per 1e9 device hours per Mbit."""
    mbit = nbytes * 8 / 1e6
    return 1e9 / (fit_per_mbit * mbit) * 3600.0


def errors_tolerated(params: AvailabilityParams, a) -> np.ndarray:
    """Error count the network may accumulate before recovery while meeting availability ``a``."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0) or np.any(a >= 1):
        raise DomainError("availability must lie strictly between 0 and 1")
    return (params.t_d * params.i + params.t_r) / ((1.0 / a - 1.0) * params.t_be)


def availability_curve(params: AvailabilityParams, a_grid) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a_grid, dtype=np.float64)
    return a, np.asarray(params.accuracy(errors_tolerated(params, a)), dtype=np.float64)


def mnist_availability(t_r: float = 0.182, acc_at_year: float = 0.0, backup_bytes: float = 6.68e6) -> AvailabilityParams:
    """Defaults for the MNIST network: 0.010 s detection, two detections per error interval."""
    t_be = time_between_errors(backup_bytes)
    per_year = SECONDS_PER_YEAR / t_be
    return AvailabilityParams(0.010, 2, t_r, t_be, linear_accuracy(1.0, per_year, acc_at_year))

