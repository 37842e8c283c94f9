"""SECDED (39,32) Hamming code over 32-bit parameter words.

Codeword layout (bit ``i`` of the 64-bit cell holds Hamming position ``i + 1``):

* positions 1, 2, 4, 8, 16, 32 are check bits ``c0..c5``
* the other positions in 1..38, ascending, carry data bits 0..31
* bit 38 is the overall parity of bits 0..37

An :class:`EccMemory` keeps only the 7 redundant bits per word (``c0..c5`` in
bits 0..5 and overall parity in bit 6); the data bits are the live parameter
words themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .network import Network, layer_names

CODE_BITS = 39
CHECK_POSITIONS = (1, 2, 4, 8, 16, 32)
DATA_POSITIONS = tuple(p for p in range(1, 39) if p & (p - 1))
PARITY_BIT = 38

assert len(DATA_POSITIONS) == 32

_U64 = np.uint64
# Hamming position masks for each syndrome bit, over the 38-bit Hamming part
_SYNDROME_MASKS = [sum(1 << (pos - 1) for pos in range(1, 39) if pos & (1 << b)) for b in range(6)]
_CHECK_MASK = sum(1 << (p - 1) for p in CHECK_POSITIONS) | (1 << PARITY_BIT)


class Status(IntEnum):
    CLEAN = 0
    CORRECTED = 1
    UNCORRECTABLE = 2  # detected, not correctable


def _parity(x: np.ndarray) -> np.ndarray:
    return (np.bitwise_count(x) & 1).astype(_U64)


def _spread(words: np.ndarray) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint32).astype(_U64)
    cw = np.zeros(w.shape, dtype=_U64)
    for j, pos in enumerate(DATA_POSITIONS):
        cw |= ((w >> _U64(j)) & _U64(1)) << _U64(pos - 1)
    return cw


def _gather(cw: np.ndarray) -> np.ndarray:
    w = np.zeros(cw.shape, dtype=_U64)
    for j, pos in enumerate(DATA_POSITIONS):
        w |= ((cw >> _U64(pos - 1)) & _U64(1)) << _U64(j)
    return w.astype(np.uint32)


def encode(words) -> np.ndarray:
    """32-bit words -> 39-bit codewords in uint64 cells."""
    cw = _spread(words)
    for b, mask in enumerate(_SYNDROME_MASKS):
        cw |= _parity(cw & _U64(mask)) << _U64((1 << b) - 1)
    cw |= _parity(cw) << _U64(PARITY_BIT)
    return cw


def decode(codewords) -> tuple[np.ndarray, np.ndarray]:
    """Codewords -> (words, statuses).  Uncorrectable words are returned as read."""
    cw = np.asarray(codewords, dtype=_U64)
    syndrome = np.zeros(cw.shape, dtype=np.int64)
    for b, mask in enumerate(_SYNDROME_MASKS):
        syndrome |= _parity(cw & _U64(mask)).astype(np.int64) << b
    overall = _parity(cw & _U64((1 << CODE_BITS) - 1)).astype(bool)
    status = np.full(cw.shape, Status.CLEAN, dtype=np.int8)
    single = overall & (syndrome <= 38)
    status[single] = Status.CORRECTED
    status[(overall & (syndrome > 38)) | (~overall & (syndrome != 0))] = Status.UNCORRECTABLE
    fix = single & (syndrome > 0)
    fixed = cw.copy()
    fixed[fix] ^= _U64(1) << (syndrome[fix] - 1).astype(_U64)
    return _gather(fixed), status


def check_bits(words) -> np.ndarray:
    """The 7 redundant bits of each word's codeword, packed into uint8."""
    cw = encode(words)
    out = np.zeros(cw.shape, dtype=np.uint8)
    for i, pos in enumerate(CHECK_POSITIONS):
        out |= (((cw >> _U64(pos - 1)) & _U64(1)) << _U64(i)).astype(np.uint8)
    out |= (((cw >> _U64(PARITY_BIT)) & _U64(1)) << _U64(6)).astype(np.uint8)
    return out


def assemble(words, checks) -> np.ndarray:
    """Rebuild full codewords from data words and packed check bits."""
    cw = _spread(words)
    c = np.asarray(checks, dtype=np.uint8).astype(_U64)
    for i, pos in enumerate(CHECK_POSITIONS):
        cw |= ((c >> _U64(i)) & _U64(1)) << _U64(pos - 1)
    cw |= ((c >> _U64(6)) & _U64(1)) << _U64(PARITY_BIT)
    return cw


def codeword_bit_role(bit: int) -> tuple[str, int]:
    """Map codeword bit ``0..38`` to ``("data", j)``, ``("check", i)`` or ``("parity", 6)``."""
    if bit == PARITY_BIT:
        return "parity", 6
    pos = bit + 1
    if pos in CHECK_POSITIONS:
        return "check", CHECK_POSITIONS.index(pos)
    return "data", DATA_POSITIONS.index(pos)


# lookup tables for vectorized bit routing: codeword bit -> data bit / check bit (-1 if n/a)
DATA_BIT_OF = np.full(CODE_BITS, -1, dtype=np.int64)
CHECK_BIT_OF = np.full(CODE_BITS, -1, dtype=np.int64)
for _b in range(CODE_BITS):
    _role, _i = codeword_bit_role(_b)
    (DATA_BIT_OF if _role == "data" else CHECK_BIT_OF)[_b] = _i


def _words(network: Network, k: int) -> np.ndarray:
    return network.layers[k].params.reshape(-1).view(np.uint32)


@dataclass
class EccMemory:
    """Check bits for every float32 parameter word, in layer order."""

    checks: np.ndarray
    layout: dict[int, tuple[int, int]]

    @classmethod
    def build(cls, network: Network) -> "EccMemory":
        _require_f32(network)
        layout, parts, start = {}, [], 0
        for k in network.param_layers():
            words = _words(network, k)
            layout[k] = (start, start + words.size)
            parts.append(check_bits(words))
            start += words.size
        checks = np.concatenate(parts) if parts else np.zeros(0, np.uint8)
        return cls(checks, layout)

    @property
    def words(self) -> int:
        return int(self.checks.size)

    def copy(self) -> "EccMemory":
        return EccMemory(self.checks.copy(), dict(self.layout))


@dataclass
class ScrubReport:
    corrected: dict[int, int] = field(default_factory=dict)
    uncorrectable: dict[int, int] = field(default_factory=dict)

    @property
    def total_corrected(self) -> int:
        return sum(self.corrected.values())

    @property
    def total_uncorrectable(self) -> int:
        return sum(self.uncorrectable.values())

    def rows(self, network: Network) -> list[dict]:
        names = layer_names(network)
        return [
            {"layer": k, "name": names.get(k, str(k)), "corrected": self.corrected[k], "uncorrectable": self.uncorrectable[k]}
            for k in sorted(self.corrected)
        ]


def scrub(network: Network, ecc: EccMemory) -> ScrubReport:
    """Decode every word, write corrections back, and count outcomes per layer.

    Uncorrectable words are left as they are for a later recovery step.
    """
    _require_f32(network)
    report = ScrubReport()
    for k, (lo, hi) in ecc.layout.items():
        words = _words(network, k)
        cw = assemble(words, ecc.checks[lo:hi])
        fixed, status = decode(cw)
        hit = status == Status.CORRECTED
        words[hit] = fixed[hit]
        ecc.checks[lo:hi][hit] = check_bits(fixed[hit])
        report.corrected[k] = int(hit.sum())
        report.uncorrectable[k] = int((status == Status.UNCORRECTABLE).sum())
    return report


def ecc_overhead_bytes(network: Network) -> float:
    """Seven check bits per 32-bit parameter word, in bytes."""
    _require_f32(network)
    return network.param_count() * 7 / 8


def _require_f32(network: Network) -> None:
    if network.dtype != np.float32:
        raise ValueError("SECDED (39,32) protects 32-bit parameter words; network dtype is " + str(network.dtype))
