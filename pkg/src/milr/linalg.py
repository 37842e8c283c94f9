"""Dense tensor arithmetic, convolution lowering, linear solving and the seeded stream.

Tensors are plain ``numpy.ndarray`` objects (float32 or float64, C-contiguous).
Convolution tensors are channel-last: inputs ``(M, M, Z)`` (optionally with a
leading batch axis) and filters ``(F, F, Z, Y)``.

The pseudo-random stream is SplitMix64.  Each draw advances the 64-bit state by
the golden-gamma constant and runs the standard finalizer; unit values take the
top 53 bits, so ``next_unit`` returns ``(z >> 11) * 2**-52 - 1`` in ``[-1, 1)``.
The vectorized helpers produce exactly the same values as repeated scalar
calls, which is what makes persisted seeds reproduce sidecar data bit-for-bit.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as spla
from numpy.lib.stride_tricks import sliding_window_view

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# sigma_min / sigma_max below this is treated as singular
RANK_TOL = 1e-10
# systems at most this large (min dimension) are solved through a full SVD
_SVD_LIMIT = 1024
_CHUNK = 1 << 20


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


class SingularSystemError(ArithmeticError):
    """Raised when an exact solve was requested on a rank-deficient system."""


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child seed from ``seed`` and integer keys."""
    s = seed & MASK64
    for k in keys:
        s = mix64(s + GAMMA * (int(k) + 1))
    return s


class Rng:
    """SplitMix64 generator.  Single-owner mutable state; do not share."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_unit(self) -> float:
        """Next value in ``[-1, 1)``."""
        return (self.next_u64() >> 11) * 2.0**-52 - 1.0

    def next_uniform(self) -> float:
        """Next value in ``[0, 1)``."""
        return (self.next_u64() >> 11) * 2.0**-53

    def u64s(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs as a uint64 array (advances the state by ``n``)."""
        out = np.empty(n, dtype=np.uint64)
        start = self.state
        for lo in range(0, n, _CHUNK):
            hi = min(n, lo + _CHUNK)
            steps = np.arange(lo + 1, hi + 1, dtype=np.uint64)
            with np.errstate(over="ignore"):
                z = np.uint64(start) + steps * np.uint64(GAMMA)
                out[lo:hi] = _mix64_array(z)
        self.state = (start + GAMMA * n) & MASK64
        return out

    def units(self, n: int, dtype=np.float64) -> np.ndarray:
        """Next ``n`` values in ``[-1, 1)``; rounded to ``dtype`` after generation."""
        out = np.empty(n, dtype=np.float64)
        for lo in range(0, n, _CHUNK):
            hi = min(n, lo + _CHUNK)
            z = self.u64s(hi - lo)
            out[lo:hi] = (z >> np.uint64(11)).astype(np.float64) * 2.0**-52 - 1.0
        return out.astype(dtype, copy=False)

    def uniforms(self, n: int) -> np.ndarray:
        """Next ``n`` values in ``[0, 1)``."""
        z = self.u64s(n)
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def rng_next_unit(rng: Rng) -> float:
    return rng.next_unit()


def matmul(a: np.ndarray, b: np.ndarray, exact: bool = True) -> np.ndarray:
    """Matrix product ``a @ b``.

    With ``exact=True`` the sum over the inner index runs in ascending order
    with one rounding per multiply and per add, in the operands' dtype.  The
    result is bit-identical to a naive triple loop, which is what the
    detection path relies on.  ``exact=False`` hands the product to BLAS.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if not exact:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    with np.errstate(all="ignore"):
        for k in range(a.shape[1]):
            out += a[:, k : k + 1] * b[k]
    return out


def conv_geometry(m: int, f: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(G, pad_before, pad_after)`` for one spatial axis.

    ``G = (M - F + 2P) / S + 1``; ``same`` pads so that ``G = ceil(M / S)``
    (``G = M`` at stride 1) with any odd leftover on the trailing side.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if f > m or (m - f) % stride:
            raise ShapeError(f"valid conv: (M - F) / S not integral for M={m}, F={f}, S={stride}")
        return (m - f) // stride + 1, 0, 0
    if padding == "same":
        g = -(-m // stride)
        total = max((g - 1) * stride + f - m, 0)
        return g, total // 2, total - total // 2
    raise ShapeError(f"unknown padding {padding!r}")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (M, M, Z) or (B, M, M, Z), got {x.shape}")


def im2col(x: np.ndarray, f: int, stride: int = 1, padding: str = "valid") -> np.ndarray:
    """Lower a convolution input to its receptive-field matrix.

    Row ``r = i * G + j`` holds the flattened ``(f1, f2, z)`` window feeding
    output position ``(i, j)``, so ``im2col(x) @ filters.reshape(-1, Y)``
    reproduces the convolution.  Batched inputs return ``(B, G*G, F*F*Z)``.
    """
    xb, single = _as_batch(x)
    _, m, m2, z = xb.shape
    if m != m2:
        raise ShapeError(f"square inputs only, got {x.shape}")
    g, lo, hi = conv_geometry(m, f, stride, padding)
    if lo or hi:
        xb = np.pad(xb, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    win = sliding_window_view(xb, (f, f), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :g, :g]
    # (B, G, G, Z, F, F) -> (B, G, G, F, F, Z)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(xb.shape[0], g * g, f * f * z)
    return cols[0] if single else cols


def col2im_mean(cols: np.ndarray, m: int, z: int, f: int, stride: int = 1, padding: str = "valid") -> np.ndarray:
    """Fold receptive-field rows back into an input tensor.

    Overlapping estimates of the same input element are averaged.  Raises
    ``ShapeError`` if some input element is not covered by any window.
    """
    single = cols.ndim == 2
    cb = cols[None] if single else cols
    b = cb.shape[0]
    g, lo, hi = conv_geometry(m, f, stride, padding)
    mp = m + lo + hi
    acc = np.zeros((b, mp, mp, z), dtype=np.float64)
    cnt = np.zeros((mp, mp), dtype=np.int64)
    patches = cb.reshape(b, g, g, f, f, z)
    for f1 in range(f):
        for f2 in range(f):
            rows = slice(f1, f1 + stride * (g - 1) + 1, stride)
            colsl = slice(f2, f2 + stride * (g - 1) + 1, stride)
            acc[:, rows, colsl, :] += patches[:, :, :, f1, f2, :]
            cnt[rows, colsl] += 1
    acc = acc[:, lo : lo + m, lo : lo + m]
    cnt = cnt[lo : lo + m, lo : lo + m]
    if (cnt == 0).any():
        raise ShapeError("some input positions are not covered by any receptive field")
    out = acc / cnt[None, :, :, None]
    return out[0] if single else out


def conv2d(x: np.ndarray, filters: np.ndarray, stride: int = 1, padding: str = "valid", exact: bool = True) -> np.ndarray:
    """2-D convolution (cross-correlation) of channel-last input with ``(F, F, Z, Y)`` filters."""
    f, f2, z, y = filters.shape
    if f != f2:
        raise ShapeError(f"square filters only, got {filters.shape}")
    xb, single = _as_batch(x)
    if xb.shape[-1] != z:
        raise ShapeError(f"input has {xb.shape[-1]} channels, filters expect {z}")
    cols = im2col(xb, f, stride, padding)
    b, gg, k = cols.shape
    g = int(round(gg**0.5))
    out = matmul(cols.reshape(b * gg, k), filters.reshape(k, y), exact=exact)
    out = out.reshape(b, g, g, y)
    return out[0] if single else out


class LinearSolver:
    """Factor ``a`` once and solve ``a @ x ~= c`` for many right-hand sides.

    Everything runs in float64.  Small systems go through a truncated SVD
    (minimum-norm least squares, rank from ``sigma_min / sigma_max``).  Large
    square systems use LU with LAPACK's reciprocal condition estimate and fall
    back to complete orthogonal factorization (``gelsy``) when that estimate
    falls below the tolerance; large rectangular systems go to ``gelsy``
    directly.
    """

    def __init__(self, a: np.ndarray, rcond: float = RANK_TOL):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"system matrix must be 2-D and non-empty, got {a.shape}")
        self.shape = a.shape
        self.rcond = rcond
        self._lu = None
        self._svd = None
        self._a = None
        self.rank: int | None = None
        m, n = a.shape
        if not np.isfinite(a).all():
            raise SingularSystemError("system matrix contains non-finite values")
        if min(m, n) <= _SVD_LIMIT:
            u, s, vt = np.linalg.svd(a, full_matrices=False)
            r = int(np.count_nonzero(s > rcond * s[0])) if s[0] > 0 else 0
            self._svd = (u[:, :r], s[:r], vt[:r])
            self.rank = r
        elif m == n:
            lu, piv = spla.lu_factor(a, check_finite=False)
            anorm = np.abs(a).sum(axis=0).max()
            rc, _ = spla.lapack.dgecon(lu, anorm, norm="1")
            if rc >= rcond:
                self._lu = (lu, piv)
                self.rank = n
            else:
                self._a = a
        else:
            self._a = a

    @property
    def full_rank(self) -> bool | None:
        return None if self.rank is None else self.rank == self.shape[1]

    def solve(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape[0] != self.shape[0]:
            raise ShapeError(f"rhs has {c.shape[0]} rows, system has {self.shape[0]}")
        if self._svd is not None:
            u, s, vt = self._svd
            if s.size == 0:
                return np.zeros((self.shape[1],) + c.shape[1:])
            coef = u.T @ c
            coef = coef / (s[:, None] if c.ndim == 2 else s)
            return vt.T @ coef
        if self._lu is not None:
            return spla.lu_solve(self._lu, c, check_finite=False)
        x, _, rank, _ = spla.lstsq(self._a, c, cond=self.rcond, lapack_driver="gelsy", check_finite=False)
        self.rank = int(rank)
        return x


def solve_least_squares(a: np.ndarray, c: np.ndarray, require_full_rank: bool = False) -> np.ndarray:
    """Minimum-norm least-squares solution of ``a @ x ~= c`` computed in float64.

    ``require_full_rank`` turns a numerically rank-deficient ``a``
    (``sigma_min / sigma_max < 1e-10``) into a ``SingularSystemError``.
    """
    solver = LinearSolver(a)
    x = solver.solve(c)
    if require_full_rank and not solver.full_rank:
        raise SingularSystemError(f"rank {solver.rank} < {a.shape[1]} unknowns")
    return x
