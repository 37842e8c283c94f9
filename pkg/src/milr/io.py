"""Portable little-endian containers for network weights.

Weights file layout::

    magic   b"MILRWGT\\0"
    u32     version (= 1)
    u32     layer count
    per layer:
        u8   type tag     (0 input, 1 conv, 2 bias, 3 dense, 4 relu, 5 maxpool, 6 flatten)
        u8   dtype tag    (1 = float32, 2 = float64)
        u8   rank
        u32  dims[rank]   (parameter tensor shape; rank 0 for parameter-free layers)
        u8   attr count
        u32  attrs[count] (input: shape; conv: stride, padding 0=valid/1=same;
                           bias: attach 0=conv/1=dense; maxpool: size)
        raw  payload      (prod(dims) elements, parameter layers only)

Tensors elsewhere (sidecar files) use the same ``dtype, rank, dims, payload``
encoding through :func:`write_tensor` / :class:`Reader.tensor`.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .network import Bias, Conv2D, Dense, Flatten, Input, MaxPool, Network, NetworkError, ReLU

WEIGHTS_MAGIC = b"MILRWGT\0"
WEIGHTS_VERSION = 1

DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint32): 3, np.dtype(np.int64): 4}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
LAYER_TAGS = {"input": 0, "conv": 1, "bias": 2, "dense": 3, "relu": 4, "maxpool": 5, "flatten": 6}
TAG_LAYERS = {v: k for k, v in LAYER_TAGS.items()}
PADDINGS = ("valid", "same")
ATTACH = ("conv", "dense")


class FormatError(ValueError):
    """Malformed weights or sidecar file."""


class TruncatedError(FormatError):
    pass


class Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated: wanted {n} bytes at offset {self.pos}, {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def f64(self) -> float:
        return self.unpack("d")[0]

    def tensor(self) -> np.ndarray:
        dtype = self.dtype_tag()
        rank = self.u8()
        dims = self.unpack(f"{rank}I") if rank else ()
        return self.payload(dtype, dims)

    def dtype_tag(self) -> np.dtype:
        tag = self.u8()
        if tag not in TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        return TAG_DTYPES[tag]

    def payload(self, dtype: np.dtype, dims: tuple) -> np.ndarray:
        n = math.prod(dims)
        raw = self.take(n * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def write_tensor(out: bytearray, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    out += struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _layer_attrs(layer) -> list[int]:
    if layer.kind == "input":
        return list(layer.shape)
    if layer.kind == "conv":
        return [layer.stride, PADDINGS.index(layer.padding)]
    if layer.kind == "bias":
        return [ATTACH.index(layer.attach)]
    if layer.kind == "maxpool":
        return [layer.size]
    return []


def encode_weights(network: Network) -> bytes:
    out = bytearray(WEIGHTS_MAGIC)
    out += struct.pack("<II", WEIGHTS_VERSION, len(network.layers))
    for layer in network.layers:
        attrs = _layer_attrs(layer)
        params = layer.params
        shape = params.shape if params is not None else ()
        out += struct.pack("<BBB", LAYER_TAGS[layer.kind], DTYPE_TAGS[network.dtype], len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack(f"<B{len(attrs)}I", len(attrs), *attrs)
        if params is not None:
            out += np.ascontiguousarray(params).astype(network.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(out)


def decode_weights(data: bytes) -> Network:
    r = Reader(data)
    if bytes(r.take(len(WEIGHTS_MAGIC))) != WEIGHTS_MAGIC:
        raise FormatError("bad magic: not a weights file")
    version, count = r.unpack("II")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    layers = []
    dtype = None
    for _ in range(count):
        tag = r.u8()
        if tag not in TAG_LAYERS:
            raise FormatError(f"unknown layer tag {tag}")
        ldtype = r.dtype_tag()
        dtype = dtype or ldtype
        if ldtype != dtype:
            raise FormatError("mixed dtypes in weights file")
        rank = r.u8()
        dims = r.unpack(f"{rank}I") if rank else ()
        attrs = r.unpack(f"{r.u8()}I")
        kind = TAG_LAYERS[tag]
        try:
            if kind == "input":
                layers.append(Input(tuple(attrs)))
            elif kind == "conv":
                layers.append(Conv2D(r.payload(dtype, dims), attrs[0], PADDINGS[attrs[1]]))
            elif kind == "bias":
                layers.append(Bias(r.payload(dtype, dims), ATTACH[attrs[0]]))
            elif kind == "dense":
                layers.append(Dense(r.payload(dtype, dims)))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool":
                layers.append(MaxPool(attrs[0]))
            else:
                layers.append(Flatten())
        except IndexError:
            raise FormatError(f"missing attributes for {kind} layer") from None
    r.expect_end()
    try:
        return Network(layers, dtype or np.float32)
    except NetworkError as exc:
        raise FormatError(f"shape chain violation: {exc}") from exc


def save_weights(network: Network, path) -> None:
    Path(path).write_bytes(encode_weights(network))


def load_weights(path) -> Network:
    return decode_weights(Path(path).read_bytes())


def import_npz(network: Network, path) -> Network:
    """Copy trained arrays into ``network``'s parameter layers, in layer order.

    The archive holds one array per parameter layer (``arr_0``, ``arr_1``, ...),
    e.g. ``numpy.savez(path, *keras_model.get_weights())`` for a Keras model
    with channel-last Conv2D kernels ``(F, F, Z, Y)`` and Dense kernels ``(N, P)``.
    """
    net = network.copy()
    with np.load(path) as archive:
        arrays = [archive[f"arr_{i}"] for i in range(len(archive.files))]
    targets = net.param_layers()
    if len(arrays) != len(targets):
        raise FormatError(f"archive has {len(arrays)} arrays, network has {len(targets)} parameter layers")
    for idx, arr in zip(targets, arrays):
        layer = net.layers[idx]
        if arr.shape != layer.params.shape:
            raise FormatError(f"layer {idx}: array shape {arr.shape} != {layer.params.shape}")
        layer.params[...] = arr.astype(net.dtype)
    return net
