"""Table-driven CRC-32 and the two-dimensional CRC grid used to localize
corrupted convolution parameters.

For a filter tensor ``(F, F, Z, Y)`` every ``(f1, f2)`` plane is a ``Z x Y``
matrix.  Row CRCs cover groups of 4 consecutive ``y`` for a fixed ``z``;
column CRCs cover groups of 4 consecutive ``z`` for a fixed ``y``.  Partial
groups at the edge are zero padded.  A parameter is flagged when both its row
group and its column group mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUP = 4

# id -> reflected polynomial
POLYNOMIALS = {
    1: 0x82F63B78,  # CRC-32C (Castagnoli)
    2: 0xEDB88320,  # CRC-32 (IEEE 802.3, as in zlib)
}
DEFAULT_POLY = 1

_TABLES: dict[int, np.ndarray] = {}


def crc_table(poly_id: int) -> np.ndarray:
    if poly_id not in _TABLES:
        if poly_id not in POLYNOMIALS:
            raise ValueError(f"unknown CRC polynomial id {poly_id}")
        poly = POLYNOMIALS[poly_id]
        table = np.zeros(256, dtype=np.uint32)
        for n in range(256):
            c = n
            for _ in range(8):
                c = (c >> 1) ^ poly if c & 1 else c >> 1
            table[n] = c
        _TABLES[poly_id] = table
    return _TABLES[poly_id]


def crc32_rows(data: np.ndarray, poly_id: int = DEFAULT_POLY) -> np.ndarray:
    """CRC of every row of a ``(n, L)`` uint8 array (init and final xor 0xFFFFFFFF)."""
    table = crc_table(poly_id)
    data = np.asarray(data, dtype=np.uint8)
    crc = np.full(data.shape[0], 0xFFFFFFFF, dtype=np.uint32)
    for k in range(data.shape[1]):
        crc = table[(crc ^ data[:, k]) & 0xFF] ^ (crc >> np.uint32(8))
    return crc ^ np.uint32(0xFFFFFFFF)


def crc32(data: bytes, poly_id: int = DEFAULT_POLY) -> int:
    return int(crc32_rows(np.frombuffer(data, dtype=np.uint8)[None], poly_id)[0])


@dataclass
class CrcGrid:
    rows: np.ndarray  # (F, F, Z, ceil(Y/4)) uint32
    cols: np.ndarray  # (F, F, ceil(Z/4), Y) uint32
    poly_id: int = DEFAULT_POLY

    @property
    def nbytes(self) -> int:
        return self.rows.nbytes + self.cols.nbytes


def _pad_axis(a: np.ndarray, axis: int) -> np.ndarray:
    extra = -a.shape[axis] % GROUP
    if not extra:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, extra)
    return np.pad(a, widths)


def _group_crcs(filters: np.ndarray, poly_id: int) -> tuple[np.ndarray, np.ndarray]:
    f1, f2, z, y = filters.shape
    w = np.ascontiguousarray(filters)
    item = w.dtype.itemsize
    # rows: groups along y
    r = _pad_axis(w, 3).reshape(f1, f2, z, -1, GROUP)
    rows = crc32_rows(r.view(np.uint8).reshape(-1, GROUP * item), poly_id).reshape(f1, f2, z, -1)
    # columns: groups along z, laid out contiguously per (gz, y)
    c = _pad_axis(w, 2).reshape(f1, f2, -1, GROUP, y).transpose(0, 1, 2, 4, 3)
    c = np.ascontiguousarray(c)
    cols = crc32_rows(c.view(np.uint8).reshape(-1, GROUP * item), poly_id).reshape(f1, f2, -1, y)
    return rows, cols


def build_crc_grid(filters: np.ndarray, poly_id: int = DEFAULT_POLY) -> CrcGrid:
    rows, cols = _group_crcs(filters, poly_id)
    return CrcGrid(rows, cols, poly_id)


def crc_localize(filters: np.ndarray, grid: CrcGrid) -> np.ndarray:
    """Coordinates ``(f1, f2, z, y)`` whose row and column groups both mismatch, as a ``(k, 4)`` array."""
    rows, cols = _group_crcs(filters, grid.poly_id)
    if rows.shape != grid.rows.shape or cols.shape != grid.cols.shape:
        raise ValueError("CRC grid was built for a different filter shape")
    bad_rows = rows != grid.rows
    bad_cols = cols != grid.cols
    z, y = filters.shape[2:]
    zi = np.arange(z)
    yi = np.arange(y)
    # expand group flags back to per-parameter masks
    row_mask = bad_rows[:, :, :, yi // GROUP]
    col_mask = bad_cols[:, :, zi // GROUP, :]
    return np.argwhere(row_mask & col_mask)


def _group_crc(values: np.ndarray, poly_id: int) -> np.ndarray:
    """CRC of each row of a ``(n, GROUP)`` float array, hashed as raw bytes like the grid."""
    return crc32_rows(np.ascontiguousarray(values).view(np.uint8).reshape(len(values), -1), poly_id)


def _candidates(value, int_t, dtype, max_ulps):
    """Floats within ``max_ulps`` of ``value``, nearest first."""
    base = int(np.asarray(value).view(int_t))
    lo = max(0, base - max_ulps)
    hi = min(int(np.iinfo(int_t).max), base + max_ulps)
    ints = np.arange(lo, hi + 1, dtype=np.uint64)
    # unsigned wraparound gives the signed distance
    dist = np.abs((ints - np.uint64(base)).astype(np.int64))
    return ints[np.argsort(dist, kind="stable")].astype(int_t).view(dtype)


def _snap_pass(filters, grid, pending: set, max_ulps: int) -> int:
    int_t = np.uint32 if filters.dtype.itemsize == 4 else np.uint64
    z_dim, y_dim = filters.shape[2:]
    fixed = 0
    progress = True
    while pending and progress:
        progress = False
        rows, cols = _group_crcs(filters, grid.poly_id)
        for c in sorted(pending):
            a, b, z, y = c
            gy, gz = y // GROUP, z // GROUP
            if rows[a, b, z, gy] == grid.rows[a, b, z, gy] and cols[a, b, gz, y] == grid.cols[a, b, gz, y]:
                pending.discard(c)
                continue
            row_alone = not any(p != c and p[:3] == (a, b, z) and p[3] // GROUP == gy for p in pending)
            col_alone = not any(p != c and p[:2] == (a, b) and p[3] == y and p[2] // GROUP == gz for p in pending)
            if not (row_alone or col_alone):
                continue
            cand = _candidates(filters[c], int_t, filters.dtype, max_ulps)
            keep = np.ones(cand.size, dtype=bool)
            if row_alone:
                lo = gy * GROUP
                group = np.zeros((cand.size, GROUP), filters.dtype)
                group[:, : min(GROUP, y_dim - lo)] = filters[a, b, z, lo : lo + GROUP]
                group[:, y - lo] = cand
                keep &= _group_crc(group, grid.poly_id) == grid.rows[a, b, z, gy]
            if col_alone:
                lo = gz * GROUP
                group = np.zeros((cand.size, GROUP), filters.dtype)
                group[:, : min(GROUP, z_dim - lo)] = filters[a, b, lo : lo + GROUP, y]
                group[:, z - lo] = cand
                keep &= _group_crc(group, grid.poly_id) == grid.cols[a, b, gz, y]
            hits = np.flatnonzero(keep)
            if hits.size:
                filters[c] = cand[hits[0]]
                pending.discard(c)
                fixed += 1
                progress = True
                rows, cols = _group_crcs(filters, grid.poly_id)
    return fixed


def crc_snap(filters: np.ndarray, grid: CrcGrid, coords, prior: np.ndarray | None = None, max_ulps: int = 1 << 18) -> int:
    """Nudge approximately solved parameters onto the exact values recorded by the grid.

    A solved value is usually some ulps off the original, which is enough to
    keep its CRC groups mismatching.  For every flagged coordinate that is
    the only unresolved one in its row or column group, the values within
    ``max_ulps`` are tried and the one reproducing the stored CRC(s) is kept.

    ``prior`` holds the values before the solve.  Flagged coordinates that
    were never corrupted (false hits where two bad groups cross) keep their
    prior value exactly, so that value is tried first, and taken as settled,
    whenever the solve landed within the window of it.  If groups still
    mismatch afterwards, every coordinate is searched once more.

    Returns the number of coordinates moved by the search.
    """
    coords = [tuple(int(v) for v in c) for c in np.asarray(coords).reshape(-1, 4)]
    if not coords:
        return 0
    int_t = np.uint32 if filters.dtype.itemsize == 4 else np.uint64
    pending = set(coords)
    if prior is not None:
        for c in coords:
            before = int(np.asarray(prior[c]).view(int_t))
            after = int(np.asarray(filters[c]).view(int_t))
            if abs(before - after) <= max_ulps:
                filters[c] = prior[c]
                pending.discard(c)
    fixed = _snap_pass(filters, grid, pending, max_ulps)
    left = {tuple(int(v) for v in c) for c in crc_localize(filters, grid)} & set(coords)
    if left:
        fixed += _snap_pass(filters, grid, left, max_ulps)
    return fixed
