"""Layer recovery: plan and sidecar construction, error detection, and parameter healing.

Boundary ``i`` is the output of layer ``i``; boundary 0 is the network
input.  A full checkpoint stores the golden activation at a boundary.  The
span between two consecutive checkpoints is a bracket; a flagged layer ``k``
in bracket ``(a, b]`` is healed by running the golden value at ``a``
forward to ``k``'s input, running the golden value at ``b`` backward to
``k``'s output, and solving the layer's linear system for its parameters.

Golden activations come from a seeded input propagated with every
activation treated as the identity, in float64.  Checkpoints are rounded
to the sidecar dtype when stored and propagation continues from the
rounded value, so all stored data of a bracket is mutually consistent.
"""

from __future__ import annotations

import copy
import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crc import DEFAULT_POLY, CrcGrid, build_crc_grid, crc_localize, crc_snap
from .io import DTYPE_TAGS, LAYER_TAGS, TAG_DTYPES, TAG_LAYERS, FormatError, Reader, write_tensor
from .linalg import (
    RANK_TOL,
    LinearSolver,
    Rng,
    ShapeError,
    SingularSystemError,
    col2im_mean,
    conv2d,
    conv_geometry,
    derive_seed,
    im2col,
    matmul,
)
from .network import Network, run_layers

SOLVE_MODES = ("none", "full", "dummy", "partial-crc")
BACKWARD_MODES = ("none", "native", "dummy", "checkpoint")
STRATEGIES = ("none", "invertible", "checkpointed", "dummy-padded", "partial-crc")

SIDECAR_MAGIC = b"MILRCKP\0"
SIDECAR_VERSION = 1
SEED_BYTES = 16  # detect seed + dummy seed

# seed purposes
_SOLVE_DUMMY, _BACKWARD_DUMMY, _GOLDEN = 1, 2, 3

F64 = np.dtype(np.float64)
DEFAULT_RTOL = {np.dtype(np.float32): 1e-13, F64: 1e-10}


class PlanError(RuntimeError):
    """The recovery plan cannot support the requested operation."""


class StateMismatchError(ValueError):
    """Sidecar state was built for a different network architecture."""


class RecoveryError(RuntimeError):
    """A layer's parameters cannot be solved from the available data."""


# --- plan ------------------------------------------------------------------------


@dataclass
class LayerPlan:
    """How one parameterized layer is solved, and how its input is reached from its output.

    ``n_dummy`` counts dummy input rows (dense) or dummy input images (conv)
    appended to the parameter solve.  ``n_dummy_backward`` counts dummy
    columns (dense) or dummy filters (conv) whose golden outputs are stored
    so a backward pass through the layer becomes square.
    """

    solve: str = "full"
    n_dummy: int = 0
    backward: str = "none"
    n_dummy_backward: int = 0


def _conv_dims(network: Network, k: int):
    layer = network.layers[k]
    f, _, z, y = layer.filters.shape
    m = network.shapes[k][0][0]
    g = network.shapes[k][1][0]
    return f, z, y, m, g


def _conv_backward_covered(m, f, stride, padding) -> bool:
    g = conv_geometry(m, f, stride, padding)[0]
    try:
        col2im_mean(np.zeros((g * g, f * f)), m, 1, f, stride, padding)
    except ShapeError:
        return False
    return True


def crc_grid_bytes(filter_shape) -> int:
    f, _, z, y = filter_shape
    return 4 * f * f * (z * -(-y // 4) + -(-z // 4) * y)


def _backward_options(network: Network, k: int, batch: int, itemsize: int) -> dict[str, int]:
    """Byte cost of each feasible way to pass backward through layer ``k``."""
    layer = network.layers[k]
    in_shape = network.shapes[k][0]
    opts = {"checkpoint": batch * math.prod(in_shape) * itemsize}
    if layer.kind == "dense":
        n, p = layer.weights.shape
        if p >= n:
            opts["native"] = 0
        else:
            opts["dummy"] = batch * (n - p) * itemsize
    elif layer.kind == "conv":
        f, z, y, m, g = _conv_dims(network, k)
        if _conv_backward_covered(m, f, layer.stride, layer.padding):
            if y >= f * f * z:
                opts["native"] = 0
            else:
                opts["dummy"] = batch * g * g * (f * f * z - y) * itemsize
    return opts


def _solve_options(network: Network, k: int, batch: int, itemsize: int) -> dict[str, tuple[int, int]]:
    """``mode -> (byte cost, dummy count)`` for solving layer ``k``'s parameters."""
    layer = network.layers[k]
    if layer.kind == "bias":
        return {"full": (0, 0)}
    if layer.kind == "dense":
        n, p = layer.weights.shape
        if batch >= n:
            return {"full": (0, 0)}
        return {"dummy": ((n - batch) * p * itemsize, n - batch)}
    f, z, y, m, g = _conv_dims(network, k)
    unknowns = f * f * z
    if batch * g * g >= unknowns:
        return {"full": (0, 0)}
    extra = -(-(unknowns - batch * g * g) // (g * g))
    return {
        "dummy": (extra * g * g * y * itemsize, extra),
        "partial-crc": (crc_grid_bytes(layer.filters.shape), 0),
    }


# A new bracket is taken when it costs at most this fraction more than stored
# dummy outputs: one corrupted layer per bracket heals, several may not.
CHECKPOINT_SLACK = 0.10


def plan_recovery(
    network: Network,
    batch: int = 1,
    itemsize: int = 8,
    overrides=None,
    extra_checkpoints=(),
    checkpoint_slack: float = CHECKPOINT_SLACK,
):
    """Choose full checkpoints and per-layer strategies by minimal stored bytes.

    Walks the network left to right.  The first parameterized layer of a
    bracket needs no backward pass; any later one needs its output mapped
    back to its input natively, through stored dummy outputs, or by
    starting a new bracket at its input, whichever stores fewer bytes.  The
    checkpoint wins when it costs no more than ``1 + checkpoint_slack`` times
    the dummies, since smaller brackets survive more multi-layer errors.
    Pooling after a parameterized layer always
    starts a new bracket.  ``overrides`` maps a layer index to
    ``{"solve": ..., "backward": ...}`` to force a choice.

    Returns ``(checkpoints, plans)``.
    """
    overrides = overrides or {}
    last = len(network.layers) - 1
    ckpts = {0, last} | {int(c) for c in extra_checkpoints}
    if not all(0 <= c <= last for c in ckpts):
        raise PlanError(f"checkpoint boundaries must lie in [0, {last}]")
    plans: dict[int, LayerPlan] = {}
    param_in_bracket = False
    for k in range(1, last + 1):
        if k - 1 in ckpts:
            param_in_bracket = False
        layer = network.layers[k]
        want = overrides.get(k, {})
        plan = LayerPlan()
        if layer.kind == "maxpool" and param_in_bracket:
            ckpts.add(k - 1)
            param_in_bracket = False
        elif layer.kind in ("dense", "conv") and param_in_bracket:
            opts = _backward_options(network, k, batch, itemsize)
            choice = want.get("backward")
            if choice is None:
                if "native" in opts:
                    choice = "native"
                elif "dummy" in opts and opts["dummy"] * (1 + checkpoint_slack) < opts["checkpoint"]:
                    choice = "dummy"
                else:
                    choice = "checkpoint"
            elif choice not in opts:
                raise PlanError(f"layer {k}: backward strategy {choice!r} is not feasible ({sorted(opts)})")
            plan.backward = choice
            if choice == "checkpoint":
                ckpts.add(k - 1)
                plan.backward = "none"
            elif choice == "dummy":
                plan.n_dummy_backward = _n_backward_dummies(layer)
        elif "backward" in want and want["backward"] != "none":
            if want["backward"] == "checkpoint":
                ckpts.add(k - 1)
            else:
                raise PlanError(f"layer {k}: no backward pass is needed here")
        if layer.has_params:
            opts = _solve_options(network, k, batch, itemsize)
            choice = want.get("solve")
            if choice is None:
                choice = min(opts, key=lambda o: (opts[o][0], o != "dummy"))
            elif choice not in opts:
                raise PlanError(f"layer {k}: solve strategy {choice!r} is not feasible ({sorted(opts)})")
            plan.solve = choice
            plan.n_dummy = opts[choice][1]
            plans[k] = plan
            param_in_bracket = True
    return sorted(ckpts), plans


def _n_backward_dummies(layer) -> int:
    if layer.kind == "dense":
        n, p = layer.weights.shape
        return n - p
    f, _, z, y = layer.filters.shape
    return f * f * z - y


# --- state -----------------------------------------------------------------------


@dataclass
class MilrState:
    """Everything stored alongside a network to detect and heal parameter errors."""

    detect_seed: int
    dummy_seed: int
    sidecar_dtype: np.dtype
    detect_rtol: float
    batch: int
    poly_id: int
    kinds: list[str]
    param_shapes: list[tuple]
    plans: dict[int, LayerPlan] = field(default_factory=dict)
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)
    partials: dict[int, np.ndarray] = field(default_factory=dict)
    crc: dict[int, CrcGrid] = field(default_factory=dict)
    dummy_outputs: dict[int, np.ndarray] = field(default_factory=dict)
    backward_outputs: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def checkpoint_ids(self) -> list[int]:
        return sorted(self.checkpoints)

    def bracket(self, k: int) -> tuple[int, int]:
        ids = self.checkpoint_ids
        left = max(c for c in ids if c < k)
        right = min(c for c in ids if c >= k)
        return left, right

    def strategy(self, k: int) -> str:
        plan = self.plans.get(k)
        if plan is None:
            return "none"
        if plan.solve == "partial-crc":
            return "partial-crc"
        if plan.solve == "dummy" or plan.backward == "dummy":
            return "dummy-padded"
        if k - 1 in self.checkpoints:
            return "checkpointed"
        return "invertible"

    def breakdown(self) -> dict[str, int]:
        return {
            "checkpoints": sum(a.nbytes for a in self.checkpoints.values()),
            "partial_checkpoints": sum(a.nbytes for a in self.partials.values()),
            "crc_grids": sum(g.nbytes for g in self.crc.values()),
            "dummy_outputs": sum(a.nbytes for a in self.dummy_outputs.values()),
            "backward_dummy_outputs": sum(a.nbytes for a in self.backward_outputs.values()),
            "seeds": SEED_BYTES,
        }

    @property
    def plan_cost_bytes(self) -> int:
        return sum(self.breakdown().values())


def _check_compatible(network: Network, state: MilrState) -> None:
    kinds = [layer.kind for layer in network.layers]
    shapes = [tuple(layer.params.shape) if layer.has_params else () for layer in network.layers]
    if kinds != state.kinds or shapes != state.param_shapes:
        raise StateMismatchError("sidecar state does not match this network's layers")


def _as64(layer):
    if not layer.has_params:
        return layer
    out = copy.copy(layer)
    attr = {"conv": "filters", "dense": "weights", "bias": "values"}[layer.kind]
    setattr(out, attr, getattr(layer, attr).astype(F64))
    return out


def forward_linear(network: Network, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Float64 forward pass over ``layers[start:stop]`` with activations as identity."""
    layers = list(network.layers)
    for i in range(start, min(stop, len(layers))):
        layers[i] = _as64(layers[i])
    return run_layers(layers, network.shapes, x, start, stop, F64, exact=False, linear=True)


def _dummy(state: MilrState, k: int, purpose: int, shape: tuple) -> np.ndarray:
    return Rng(derive_seed(state.dummy_seed, k, purpose)).units(math.prod(shape)).reshape(shape)


def _dense_backward_dummies(state, k, n, alpha):
    return _dummy(state, k, _BACKWARD_DUMMY, (n, alpha))


def _conv_backward_dummies(state, k, f, z, alpha):
    return _dummy(state, k, _BACKWARD_DUMMY, (f, f, z, alpha))


def _solve_dummy_inputs(network, state, k):
    layer = network.layers[k]
    n = state.plans[k].n_dummy
    if layer.kind == "dense":
        return _dummy(state, k, _SOLVE_DUMMY, (n, layer.weights.shape[0]))
    return _dummy(state, k, _SOLVE_DUMMY, (n,) + network.shapes[k][0])


# --- detection -------------------------------------------------------------------


def _safe_fsum(values) -> float:
    try:
        return math.fsum(values)
    except (ValueError, OverflowError):
        return math.nan


def _probe_input(state: MilrState, k: int, n: int) -> np.ndarray:
    return Rng(derive_seed(state.detect_seed, k)).units(n)[None]


def _probe(network: Network, state: MilrState, k: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Designated detection outputs of layer ``k`` and, if tolerant comparison is on, their magnitude scale."""
    layer = network.layers[k]
    w = layer.params.astype(F64)
    tolerant = state.detect_rtol > 0
    with np.errstate(all="ignore"):
        if layer.kind == "bias":
            out = np.array(_safe_fsum(w.ravel()))
            scale = np.array(_safe_fsum(np.abs(w).ravel())) if tolerant else None
            return out, scale
        w2 = w.reshape(-1, w.shape[-1])
        x = _probe_input(state, k, w2.shape[0])
        out = matmul(x, w2, exact=True)[0]
        scale = (np.abs(x) @ np.abs(w2))[0] if tolerant else None
    return out, scale


def _mismatch(current: np.ndarray, stored: np.ndarray, scale, rtol: float) -> bool:
    if rtol == 0:
        return current.tobytes() != stored.tobytes()
    with np.errstate(all="ignore"):
        ok = np.abs(current - stored) <= rtol * scale
    return not bool(np.all(ok))


@dataclass
class Flag:
    layer: int
    left: int  # nearest preceding checkpoint boundary
    right: int  # nearest succeeding checkpoint boundary
    crc_coords: np.ndarray | None = None  # (k, 4) filter coordinates for partial-crc layers


@dataclass
class DetectionLog:
    entries: list[Flag] = field(default_factory=list)

    @property
    def layers(self) -> list[int]:
        return [e.layer for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __bool__(self):
        return bool(self.entries)


def detect(network: Network, state: MilrState, layers=None) -> DetectionLog:
    """Compare each parameterized layer's designated outputs against the stored partial checkpoints."""
    _check_compatible(network, state)
    entries = []
    for k in sorted(state.partials):
        if layers is not None and k not in layers:
            continue
        current, scale = _probe(network, state, k)
        flagged = _mismatch(current, state.partials[k], scale, state.detect_rtol)
        coords = None
        if k in state.crc:
            coords = crc_localize(network.layers[k].filters, state.crc[k])
            flagged = flagged or len(coords) > 0
        if flagged:
            entries.append(Flag(k, *state.bracket(k), coords))
    return DetectionLog(entries)


# --- initialization --------------------------------------------------------------


def initialize(
    network: Network,
    seed: int = 0,
    *,
    sidecar_dtype=np.float64,
    batch: int = 1,
    detect_rtol: float | None = None,
    poly_id: int = DEFAULT_POLY,
    overrides=None,
    extra_checkpoints=(),
    checkpoint_slack: float = CHECKPOINT_SLACK,
) -> MilrState:
    """Plan recovery and compute every stored value for ``network``.

    ``sidecar_dtype`` sets the precision of stored activations and dummy
    outputs; float32 halves storage at the price of recovery precision.
    ``detect_rtol`` bounds the accepted deviation of each designated output
    relative to its sum of absolute products.  The defaults (1e-13 for
    float32 networks, 1e-10 for float64) sit above the residue a healed layer
    leaves behind (parameters too small for the golden data to fix to the
    last bit) and below nearly every single-bit flip.  ``0`` demands exact
    bit equality.
    """
    sd = np.dtype(sidecar_dtype)
    if sd not in (np.dtype(np.float32), F64):
        raise ValueError(f"sidecar dtype must be float32 or float64, got {sd}")
    if batch < 1:
        raise ValueError("golden batch must hold at least one sample")
    if detect_rtol is None:
        detect_rtol = DEFAULT_RTOL[network.dtype]
    ckpts, plans = plan_recovery(network, batch, sd.itemsize, overrides, extra_checkpoints, checkpoint_slack)
    state = MilrState(
        detect_seed=derive_seed(seed, 1),
        dummy_seed=derive_seed(seed, 2),
        sidecar_dtype=sd,
        detect_rtol=float(detect_rtol),
        batch=batch,
        poly_id=poly_id,
        kinds=[layer.kind for layer in network.layers],
        param_shapes=[tuple(layer.params.shape) if layer.has_params else () for layer in network.layers],
        plans=plans,
    )
    for k in plans:
        state.partials[k] = _probe(network, state, k)[0]
        if plans[k].solve == "partial-crc":
            state.crc[k] = build_crc_grid(network.layers[k].filters, poly_id)

    in_shape = network.input_shape
    x0 = _dummy(state, 0, _GOLDEN, (batch,) + in_shape).astype(sd)
    state.checkpoints[0] = x0
    x = x0.astype(F64)
    for k in range(1, len(network.layers)):
        if k in plans:
            _fit_solve_plan(network, state, k, x)
            _record_dummies(network, state, k, x)
        x = forward_linear(network, x, k, k + 1)
        if k in ckpts:
            state.checkpoints[k] = x.astype(sd)
            x = state.checkpoints[k].astype(F64)
    return state


def _numerical_rank(a: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.count_nonzero(s > tol * s[0])) if s.size and s[0] > 0 else 0


def _fit_solve_plan(network: Network, state: MilrState, k: int, x: np.ndarray) -> None:
    """Add dummy inputs when the golden rows alone do not pin down every parameter.

    Row count is not enough: activations downstream of a narrow layer span a
    low-dimensional space (a 1-channel input feeds 32 conv channels that are
    combinations of 9 values), so the golden system can be rank deficient
    even when it has more rows than unknowns.
    """
    layer = network.layers[k]
    plan = state.plans[k]
    if layer.kind == "bias" or plan.solve == "partial-crc":
        return
    # directions weaker than the stored data's own rounding noise carry no information
    tol = max(RANK_TOL, math.sqrt(np.finfo(state.sidecar_dtype).eps))
    if layer.kind == "dense":
        n = layer.weights.shape[0]
        missing = n - _numerical_rank(x.reshape(-1, n), tol)
        if missing > 0:
            plan.solve, plan.n_dummy = "dummy", missing
        return
    f, z, _, _, g = _conv_dims(network, k)
    unknowns = f * f * z
    rows = im2col(x, f, layer.stride, layer.padding).reshape(-1, unknowns)
    missing = unknowns - _numerical_rank(rows, tol)
    if missing > 0:
        plan.solve, plan.n_dummy = "dummy", -(-missing // (g * g))


def _record_dummies(network: Network, state: MilrState, k: int, x: np.ndarray) -> None:
    layer = _as64(network.layers[k])
    plan = state.plans[k]
    sd = state.sidecar_dtype
    if plan.solve == "dummy":
        d = _solve_dummy_inputs(network, state, k)
        state.dummy_outputs[k] = layer.forward(d).astype(sd)
    if plan.backward == "dummy":
        if layer.kind == "dense":
            d = _dense_backward_dummies(state, k, layer.weights.shape[0], plan.n_dummy_backward)
            state.backward_outputs[k] = (x @ d).astype(sd)
        else:
            f, _, z, _ = layer.filters.shape
            d = _conv_backward_dummies(state, k, f, z, plan.n_dummy_backward)
            state.backward_outputs[k] = conv2d(x, d, layer.stride, layer.padding, exact=False).astype(sd)


# --- linear systems --------------------------------------------------------------

_CACHE: OrderedDict = OrderedDict()
_CACHE_ENTRIES = 3
_CACHE_MIN_DIM = 1024


def _solver(a: np.ndarray) -> LinearSolver:
    """Factor ``a``, reusing factorizations of large matrices seen recently."""
    a = np.ascontiguousarray(a, dtype=F64)
    if min(a.shape) < _CACHE_MIN_DIM:
        return LinearSolver(a)
    key = (a.shape, hashlib.blake2b(a.data, digest_size=16).digest())
    if key in _CACHE:
        _CACHE.move_to_end(key)
        return _CACHE[key]
    solver = LinearSolver(a)
    _CACHE[key] = solver
    while len(_CACHE) > _CACHE_ENTRIES:
        _CACHE.popitem(last=False)
    return solver


def clear_solver_cache() -> None:
    _CACHE.clear()


@dataclass
class Solution:
    params: np.ndarray
    full_rank: bool


def solve_dense_params(inputs, outputs, dummy_inputs=None, dummy_outputs=None) -> Solution:
    """Solve ``A @ W = C`` for ``W`` from golden rows plus optional dummy rows."""
    a = np.asarray(inputs, dtype=F64)
    c = np.asarray(outputs, dtype=F64)
    if dummy_inputs is not None:
        a = np.vstack([a, np.asarray(dummy_inputs, dtype=F64)])
        c = np.vstack([c, np.asarray(dummy_outputs, dtype=F64)])
    if a.shape[0] != c.shape[0]:
        raise ShapeError(f"{a.shape[0]} input rows but {c.shape[0]} output rows")
    solver = _solver(a)
    return Solution(solver.solve(c), bool(solver.full_rank))


def solve_conv_params(
    inputs,
    outputs,
    filter_shape: tuple,
    stride: int = 1,
    padding: str = "valid",
    mode: str = "full",
    flagged=None,
    current=None,
    dummy_inputs=None,
    dummy_outputs=None,
) -> Solution:
    """Solve for conv filters from ``im2col(inputs) @ W = outputs``.

    ``mode="partial"`` keeps ``current`` fixed except at the ``flagged``
    ``(f1, f2, z, y)`` coordinates, which are solved from the output
    residual after removing the known parameters' contribution.
    """
    f, _, z, y = filter_shape
    x = np.asarray(inputs, dtype=F64)
    x = x[None] if x.ndim == 3 else x
    c = np.asarray(outputs, dtype=F64).reshape(-1, y)
    a = im2col(x, f, stride, padding).reshape(-1, f * f * z)
    if dummy_inputs is not None:
        a = np.vstack([a, im2col(np.asarray(dummy_inputs, F64), f, stride, padding).reshape(-1, f * f * z)])
        c = np.vstack([c, np.asarray(dummy_outputs, dtype=F64).reshape(-1, y)])
    if a.shape[0] != c.shape[0]:
        raise ShapeError(f"{a.shape[0]} receptive fields but {c.shape[0]} outputs")
    if mode == "full":
        solver = _solver(a)
        return Solution(solver.solve(c).reshape(filter_shape), bool(solver.full_rank))
    if mode != "partial":
        raise ValueError(f"unknown conv solve mode {mode!r}")
    w = np.asarray(current, dtype=F64).reshape(-1, y).copy()
    coords = np.asarray(flagged, dtype=np.int64).reshape(-1, 4)
    flat = (coords[:, 0] * f + coords[:, 1]) * z + coords[:, 2]
    full_rank = True
    for col in np.unique(coords[:, 3]):
        idx = np.unique(flat[coords[:, 3] == col])
        if len(idx) > a.shape[0]:
            raise RecoveryError(f"filter {col}: {len(idx)} flagged parameters exceed {a.shape[0]} equations")
        known = np.ones(a.shape[1], dtype=bool)
        known[idx] = False
        residual = c[:, col] - a[:, known] @ w[known, col]
        solver = LinearSolver(a[:, idx])
        w[idx, col] = solver.solve(residual)
        full_rank = full_rank and bool(solver.full_rank)
    return Solution(w.reshape(filter_shape), full_rank)


def solve_bias_params(inputs, outputs) -> np.ndarray:
    """Bias = output - input, read at the first position of the broadcast axes."""
    diff = np.asarray(outputs, dtype=F64) - np.asarray(inputs, dtype=F64)
    return diff.reshape(-1, diff.shape[-1])[0]


# --- backward pass ---------------------------------------------------------------


def backward_pass(network: Network, state: MilrState, k: int, output: np.ndarray) -> np.ndarray:
    """Reconstruct layer ``k``'s batched input from its batched output (float64)."""
    layer = network.layers[k]
    y = np.asarray(output, dtype=F64)
    if layer.kind in ("relu", "input"):
        return y
    if layer.kind == "bias":
        return y - layer.values.astype(F64)
    if layer.kind == "flatten":
        return y.reshape((y.shape[0],) + network.shapes[k][0])
    if layer.kind == "maxpool":
        raise PlanError(f"layer {k}: pooling is not invertible and no checkpoint covers it")
    plan = state.plans[k]
    if plan.backward not in ("native", "dummy"):
        raise PlanError(f"layer {k}: plan has no backward pass for this layer")
    if layer.kind == "dense":
        w = layer.weights.astype(F64)
        if plan.backward == "dummy":
            d = _dense_backward_dummies(state, k, w.shape[0], plan.n_dummy_backward)
            w = np.hstack([w, d])
            y = np.hstack([y, _stored(state.backward_outputs[k], y.shape[0], k)])
        solver = _solver(w.T)
        x = solver.solve(y.T).T
    else:
        f, z, yy, m, g = _conv_dims(network, k)
        w = layer.filters.astype(F64).reshape(-1, yy)
        rows = y.reshape(-1, yy)
        if plan.backward == "dummy":
            d = _conv_backward_dummies(state, k, f, z, plan.n_dummy_backward)
            w = np.hstack([w, d.reshape(-1, plan.n_dummy_backward)])
            extra = _stored(state.backward_outputs[k], y.shape[0], k)
            rows = np.hstack([rows, extra.reshape(-1, plan.n_dummy_backward)])
        solver = _solver(w.T)
        patches = solver.solve(rows.T).T
        x = col2im_mean(patches.reshape(y.shape[0], g * g, -1), m, z, f, layer.stride, layer.padding)
    if not solver.full_rank:
        raise SingularSystemError(f"layer {k}: backward system is rank deficient")
    return x


def _stored(values: np.ndarray, batch: int, k: int) -> np.ndarray:
    if values.shape[0] != batch:
        raise ShapeError(f"layer {k}: stored dummy outputs cover {values.shape[0]} samples, got {batch}")
    return values.astype(F64)


def golden_output(network: Network, state: MilrState, k: int, right: int | None = None) -> np.ndarray:
    """Layer ``k``'s golden output, from the checkpoint at ``right`` walked backward."""
    right = state.bracket(k)[1] if right is None else right
    y = state.checkpoints[right].astype(F64)
    for j in range(right, k, -1):
        y = backward_pass(network, state, j, y)
    return y


def golden_input(network: Network, state: MilrState, k: int, left: int | None = None) -> np.ndarray:
    """Layer ``k``'s golden input, from the checkpoint at ``left`` run forward."""
    left = state.bracket(k)[0] if left is None else left
    return forward_linear(network, state.checkpoints[left].astype(F64), left + 1, k)


# --- recovery --------------------------------------------------------------------


@dataclass
class LayerOutcome:
    layer: int
    status: str  # recovered | degraded | failed
    detail: str = ""


@dataclass
class RecoveryReport:
    outcomes: list[LayerOutcome] = field(default_factory=list)
    remaining: DetectionLog = field(default_factory=DetectionLog)

    def status(self, layer: int) -> str | None:
        for o in self.outcomes:
            if o.layer == layer:
                return o.status
        return None

    @property
    def recovered(self) -> list[int]:
        return [o.layer for o in self.outcomes if o.status == "recovered"]

    @property
    def failed(self) -> list[int]:
        return [o.layer for o in self.outcomes if o.status == "failed"]

    @property
    def healed(self) -> bool:
        return all(o.status == "recovered" for o in self.outcomes) and not self.remaining


def _heal_layer(network: Network, state: MilrState, entry: Flag) -> bool:
    k = entry.layer
    layer = network.layers[k]
    plan = state.plans[k]
    x = golden_input(network, state, k, entry.left)
    y = golden_output(network, state, k, entry.right)
    if layer.kind == "bias":
        params, full_rank = solve_bias_params(x, y), True
    elif layer.kind == "dense":
        dummy_in = dummy_out = None
        if plan.solve == "dummy":
            dummy_in = _solve_dummy_inputs(network, state, k)
            dummy_out = state.dummy_outputs[k]
        sol = solve_dense_params(x, y, dummy_in, dummy_out)
        params, full_rank = sol.params, sol.full_rank
    else:
        kwargs = {}
        if plan.solve == "dummy":
            kwargs = {"dummy_inputs": _solve_dummy_inputs(network, state, k), "dummy_outputs": state.dummy_outputs[k]}
        if plan.solve == "partial-crc":
            if entry.crc_coords is None or len(entry.crc_coords) == 0:
                raise RecoveryError(f"layer {k}: no parameters localized by the CRC grid")
            kwargs = {"mode": "partial", "flagged": entry.crc_coords, "current": layer.filters}
        sol = solve_conv_params(x, y, layer.filters.shape, layer.stride, layer.padding, **kwargs)
        params, full_rank = sol.params, sol.full_rank
    if not np.isfinite(params).all():
        raise RecoveryError(f"layer {k}: solution is not finite")
    prior = layer.params.copy()
    # astype rounds to nearest even
    layer.params[...] = params.astype(network.dtype)
    if plan.solve == "partial-crc":
        # the grid pins the exact bits; recover them from the near-miss solution
        crc_snap(layer.filters, state.crc[k], entry.crc_coords, prior)
    return full_rank


def recover(network: Network, state: MilrState, log: DetectionLog | None = None) -> RecoveryReport:
    """Heal every flagged layer in place and re-check detection afterwards.

    Layers sharing a bracket are processed in order with no guarantee and are
    at best ``degraded``.  A layer that still mismatches its partial
    checkpoint after write-back is ``failed``.
    """
    _check_compatible(network, state)
    log = detect(network, state) if log is None else log
    if not log:
        return RecoveryReport([], log)
    per_bracket: dict[tuple, int] = {}
    for e in log.entries:
        per_bracket[(e.left, e.right)] = per_bracket.get((e.left, e.right), 0) + 1
    outcomes = []
    for e in sorted(log.entries, key=lambda e: e.layer):
        shared = per_bracket[(e.left, e.right)] > 1
        try:
            full_rank = _heal_layer(network, state, e)
        except (SingularSystemError, PlanError, ShapeError, RecoveryError) as exc:
            outcomes.append(LayerOutcome(e.layer, "failed", str(exc)))
            continue
        if shared:
            outcomes.append(LayerOutcome(e.layer, "degraded", "several flagged layers share this bracket"))
        elif not full_rank:
            outcomes.append(LayerOutcome(e.layer, "degraded", "rank-deficient system, least-squares fallback"))
        else:
            outcomes.append(LayerOutcome(e.layer, "recovered"))
    remaining = detect(network, state)
    for o in outcomes:
        if o.layer in remaining.layers and o.status != "failed":
            o.status = "failed"
            o.detail = "still flagged after write-back"
    return RecoveryReport(outcomes, remaining)


# --- sidecar file ----------------------------------------------------------------

_FLAG_CKPT, _FLAG_PARTIAL, _FLAG_CRC, _FLAG_DUMMY, _FLAG_BACKWARD = 1, 2, 4, 8, 16


def encode_state(state: MilrState) -> bytes:
    out = bytearray(SIDECAR_MAGIC)
    out += struct.pack(
        "<IBQQBdII",
        SIDECAR_VERSION,
        state.poly_id,
        state.detect_seed,
        state.dummy_seed,
        DTYPE_TAGS[state.sidecar_dtype],
        state.detect_rtol,
        state.batch,
        len(state.kinds),
    )
    for k, kind in enumerate(state.kinds):
        shape = state.param_shapes[k]
        plan = state.plans.get(k, LayerPlan(solve="none"))
        out += struct.pack("<BB", LAYER_TAGS[kind], len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack(
            "<BBIBI",
            STRATEGIES.index(state.strategy(k)),
            SOLVE_MODES.index(plan.solve),
            plan.n_dummy,
            BACKWARD_MODES.index(plan.backward),
            plan.n_dummy_backward,
        )
        tensors = [
            (_FLAG_CKPT, state.checkpoints.get(k)),
            (_FLAG_PARTIAL, state.partials.get(k)),
            (_FLAG_CRC, state.crc[k].rows if k in state.crc else None),
            (_FLAG_DUMMY, state.dummy_outputs.get(k)),
            (_FLAG_BACKWARD, state.backward_outputs.get(k)),
        ]
        flags = sum(bit for bit, t in tensors if t is not None)
        out += struct.pack("<B", flags)
        for bit, t in tensors:
            if t is None:
                continue
            write_tensor(out, t)
            if bit == _FLAG_CRC:
                write_tensor(out, state.crc[k].cols)
    return bytes(out)


def decode_state(data: bytes) -> MilrState:
    r = Reader(data)
    if bytes(r.take(len(SIDECAR_MAGIC))) != SIDECAR_MAGIC:
        raise FormatError("bad magic: not a sidecar file")
    version, poly_id, detect_seed, dummy_seed, sd_tag, rtol, batch, count = r.unpack("IBQQBdII")
    if version != SIDECAR_VERSION:
        raise FormatError(f"unsupported sidecar version {version}")
    if sd_tag not in TAG_DTYPES:
        raise FormatError(f"unknown sidecar dtype tag {sd_tag}")
    state = MilrState(detect_seed, dummy_seed, TAG_DTYPES[sd_tag], rtol, batch, poly_id, [], [])
    for k in range(count):
        tag = r.u8()
        if tag not in TAG_LAYERS:
            raise FormatError(f"unknown layer tag {tag}")
        state.kinds.append(TAG_LAYERS[tag])
        rank = r.u8()
        state.param_shapes.append(tuple(r.unpack(f"{rank}I")))
        strategy, solve, n_dummy, backward, n_back, flags = r.unpack("BBIBIB")
        if solve >= len(SOLVE_MODES) or backward >= len(BACKWARD_MODES) or strategy >= len(STRATEGIES):
            raise FormatError(f"layer {k}: bad strategy tags")
        if SOLVE_MODES[solve] != "none":
            state.plans[k] = LayerPlan(SOLVE_MODES[solve], n_dummy, BACKWARD_MODES[backward], n_back)
        if flags & _FLAG_CKPT:
            state.checkpoints[k] = r.tensor()
        if flags & _FLAG_PARTIAL:
            state.partials[k] = r.tensor()
        if flags & _FLAG_CRC:
            rows = r.tensor()
            state.crc[k] = CrcGrid(rows, r.tensor(), poly_id)
        if flags & _FLAG_DUMMY:
            state.dummy_outputs[k] = r.tensor()
        if flags & _FLAG_BACKWARD:
            state.backward_outputs[k] = r.tensor()
    r.expect_end()
    if 0 not in state.checkpoints or count - 1 not in state.checkpoints:
        raise FormatError("sidecar lacks the terminal checkpoints")
    return state


def save_state(state: MilrState, path) -> None:
    Path(path).write_bytes(encode_state(state))


def load_state(path) -> MilrState:
    return decode_state(Path(path).read_bytes())
