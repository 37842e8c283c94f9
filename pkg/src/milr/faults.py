"""Seeded fault injection on the bit patterns of stored parameters.

Three models: independent bit flips at rate ``p``, whole-weight errors
(every bit of a word flipped) at rate ``q``, and whole-layer replacement by
fresh random values.  Bit-flip and whole-weight reports can be replayed to
undo the injection exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng
from .network import Network
from .secded import CHECK_BIT_OF, CODE_BITS, DATA_BIT_OF, EccMemory


@dataclass
class FaultSpec:
    kind: str  # bitflip | whole-weight | whole-layer
    rate: float = 0.0
    layer: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("bitflip", "whole-weight", "whole-layer"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.rate}")


@dataclass
class InjectionReport:
    """XOR masks applied per touched word.

    ``data_mask`` hits the parameter word; ``check_mask`` hits the word's 7
    stored ECC bits (bit-flip injection into ECC-protected memory only).
    """

    spec: FaultSpec
    layer: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    data_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    check_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    replaced: int = 0  # whole-layer: parameters overwritten

    @property
    def flips(self) -> int:
        return int(np.bitwise_count(self.data_mask).sum() + np.bitwise_count(self.check_mask).sum())

    @property
    def words(self) -> int:
        return int(self.layer.size)

    @property
    def layers_hit(self) -> list[int]:
        if self.spec.kind == "whole-layer":
            return [self.spec.layer]
        return sorted(set(self.layer[self.data_mask != 0].tolist()))

    def bit_flips(self):
        """Yield ``(layer, index, bit)`` for every flipped data bit."""
        for k, i, m in zip(self.layer.tolist(), self.index.tolist(), self.data_mask.tolist()):
            for b in range(64):
                if m >> b & 1:
                    yield k, i, b

    def to_jsonl(self) -> str:
        head = {"kind": self.spec.kind, "rate": self.spec.rate, "layer": self.spec.layer, "seed": self.spec.seed, "flips": self.flips, "replaced": self.replaced}
        lines = [json.dumps(head)]
        for k, i, m, c in zip(self.layer.tolist(), self.index.tolist(), self.data_mask.tolist(), self.check_mask.tolist()):
            lines.append(json.dumps({"layer": k, "index": i, "data_mask": m, "check_mask": c}))
        return "\n".join(lines) + "\n"

    def replay(self, network: Network, ecc: EccMemory | None = None) -> None:
        """Apply the same XOR masks again, which undoes the injection."""
        if self.spec.kind == "whole-layer":
            raise ValueError("whole-layer replacement cannot be undone from its report")
        _apply(network, self.layer, self.index, self.data_mask)
        if ecc is not None and self.check_mask.any():
            _apply_checks(network, ecc, self.layer, self.index, self.check_mask)


def _word_view(network: Network, k: int) -> np.ndarray:
    params = network.layers[k].params.reshape(-1)
    return params.view(np.uint32 if params.dtype.itemsize == 4 else np.uint64)


def _apply(network, layers, index, masks) -> None:
    for k in np.unique(layers):
        sel = layers == k
        view = _word_view(network, int(k))
        np.bitwise_xor.at(view, index[sel], masks[sel].astype(view.dtype))


def _apply_checks(network, ecc, layers, index, masks) -> None:
    for k in np.unique(layers):
        sel = (layers == k) & (masks != 0)
        start = ecc.layout[int(k)][0]
        np.bitwise_xor.at(ecc.checks, start + index[sel], masks[sel])


def bernoulli_positions(total: int, p: float, rng: Rng) -> np.ndarray:
    """Sorted indices in ``[0, total)``, each included independently with probability ``p``.

    Uses geometric gaps, so the cost scales with the number of hits, not ``total``.
    """
    if total <= 0 or p <= 0.0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(total, dtype=np.int64)
    log_q = math.log1p(-p)
    out = []
    pos = -1
    mean = total * p
    while True:
        n = int(mean + 6 * math.sqrt(mean * (1 - p)) + 64)
        u = rng.uniforms(n)
        gaps = np.floor(np.log1p(-u) / log_q).astype(np.int64) + 1
        cum = pos + np.cumsum(gaps)
        inside = cum[cum < total]
        out.append(inside)
        if inside.size < n:
            break
        pos = int(cum[-1])
    return np.concatenate(out)


def _locate(network: Network, flat: np.ndarray, per_word: int):
    """Split global (word * per_word + bit) positions into (layer, word index, bit)."""
    layers = network.param_layers()
    sizes = np.array([network.layers[k].params.size for k in layers], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    word = flat // per_word
    bit = flat % per_word
    which = np.searchsorted(starts, word, side="right") - 1
    return np.asarray(layers, dtype=np.int64)[which], word - starts[which], bit


def _group(layer, index, data_bits, check_bits):
    """Merge per-bit hits into per-word masks."""
    if layer.size == 0:
        return layer, index, np.zeros(0, np.uint64), np.zeros(0, np.uint8)
    key = np.stack([layer, index])
    uniq, inverse = np.unique(key, axis=1, return_inverse=True)
    inverse = inverse.reshape(-1)
    data = np.zeros(uniq.shape[1], dtype=np.uint64)
    checks = np.zeros(uniq.shape[1], dtype=np.uint8)
    d = data_bits >= 0
    np.bitwise_or.at(data, inverse[d], np.uint64(1) << data_bits[d].astype(np.uint64))
    c = check_bits >= 0
    np.bitwise_or.at(checks, inverse[c], (np.uint8(1) << check_bits[c].astype(np.uint8)))
    return uniq[0], uniq[1], data, checks


def inject_bitflips(network: Network, p: float, seed: int, ecc: EccMemory | None = None) -> InjectionReport:
    """Flip every stored bit independently with probability ``p``.

    With ``ecc`` the bit space is the 39-bit codewords, so flips can also land
    on stored check bits.
    """
    spec = FaultSpec("bitflip", p, seed=seed)
    width = CODE_BITS if ecc is not None else network.dtype.itemsize * 8
    total = network.param_count() * width
    hits = bernoulli_positions(total, p, Rng(seed))
    layer, index, bit = _locate(network, hits, width)
    if ecc is not None:
        data_bits, check_bits = DATA_BIT_OF[bit], CHECK_BIT_OF[bit]
    else:
        data_bits, check_bits = bit, np.full(bit.shape, -1, np.int64)
    layer, index, data, checks = _group(layer, index, data_bits, check_bits)
    report = InjectionReport(spec, layer, index, data, checks)
    _apply(network, layer, index, data)
    if ecc is not None:
        _apply_checks(network, ecc, layer, index, checks)
    return report


def inject_whole_weight(network: Network, q: float, seed: int) -> InjectionReport:
    """Select each parameter with probability ``q`` and flip all of its data bits."""
    spec = FaultSpec("whole-weight", q, seed=seed)
    hits = bernoulli_positions(network.param_count(), q, Rng(seed))
    layer, index, _ = _locate(network, hits, 1)
    full = np.uint64(0xFFFFFFFF if network.dtype.itemsize == 4 else 0xFFFFFFFFFFFFFFFF)
    data = np.full(layer.size, full, dtype=np.uint64)
    report = InjectionReport(spec, layer, index, data, np.zeros(layer.size, np.uint8))
    _apply(network, layer, index, data)
    return report


def corrupt_layer(network: Network, layer_id: int, seed: int) -> InjectionReport:
    """Replace every parameter of one layer by a fresh value in [-1, 1) that differs bitwise from the old one."""
    layer = network.layers[layer_id]
    if not layer.has_params:
        raise ValueError(f"layer {layer_id} ({layer.kind}) has no parameters")
    spec = FaultSpec("whole-layer", 1.0, layer=layer_id, seed=seed)
    rng = Rng(seed)
    params = layer.params.reshape(-1)
    old = params.copy()
    new = rng.units(params.size).astype(params.dtype)
    int_t = np.uint32 if params.dtype.itemsize == 4 else np.uint64
    same = new.view(int_t) == old.view(int_t)
    while same.any():
        new[same] = rng.units(int(same.sum())).astype(params.dtype)
        same = new.view(int_t) == old.view(int_t)
    params[...] = new
    return InjectionReport(spec, replaced=int(params.size))
