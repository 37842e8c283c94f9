"""CNN layer taxonomy, shape-chain validation, forward inference and built-in architectures.

Bias is its own layer rather than a field of Conv2D/Dense: it has its own
input/parameter/output relationship and is detected and recovered separately.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng, ShapeError, conv2d, conv_geometry, derive_seed, matmul

DTYPES = {"f32": np.float32, "f64": np.float64}


class NetworkError(ValueError):
    """Invalid network construction (bad shape chain, bad layer order, ...)."""


@dataclass(eq=False)
class Layer:
    kind = "layer"
    has_params = False

    @property
    def params(self) -> np.ndarray | None:
        return None

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, exact: bool = False) -> np.ndarray:
        return x


@dataclass(eq=False)
class Input(Layer):
    shape: tuple = ()
    kind = "input"

    def output_shape(self, in_shape):
        return tuple(self.shape)


@dataclass(eq=False)
class Conv2D(Layer):
    filters: np.ndarray = None
    stride: int = 1
    padding: str = "valid"
    kind = "conv"
    has_params = True

    @property
    def params(self):
        return self.filters

    @property
    def size(self) -> int:
        return self.filters.shape[0]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != in_shape[1]:
            raise ShapeError(f"conv needs a square (M, M, Z) input, got {in_shape}")
        f, _, z, y = self.filters.shape
        if in_shape[2] != z:
            raise ShapeError(f"conv filters expect {z} channels, input has {in_shape[2]}")
        g = conv_geometry(in_shape[0], f, self.stride, self.padding)[0]
        return (g, g, y)

    def forward(self, x, exact=False):
        return conv2d(x, self.filters, self.stride, self.padding, exact=exact)


@dataclass(eq=False)
class Bias(Layer):
    values: np.ndarray = None
    attach: str = "conv"
    kind = "bias"
    has_params = True

    @property
    def params(self):
        return self.values

    def output_shape(self, in_shape):
        want = 3 if self.attach == "conv" else 1
        if len(in_shape) != want:
            raise ShapeError(f"{self.attach} bias expects a {want}-D input, got {in_shape}")
        if in_shape[-1] != self.values.shape[0]:
            raise ShapeError(f"bias has {self.values.shape[0]} values for {in_shape[-1]} channels")
        return in_shape

    def forward(self, x, exact=False):
        return x + self.values


@dataclass(eq=False)
class Dense(Layer):
    weights: np.ndarray = None
    kind = "dense"
    has_params = True

    @property
    def params(self):
        return self.weights

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weights.shape[0]:
            raise ShapeError(f"dense expects ({self.weights.shape[0]},) input, got {in_shape}")
        return (self.weights.shape[1],)

    def forward(self, x, exact=False):
        return matmul(x, self.weights, exact=exact)


@dataclass(eq=False)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, exact=False):
        with np.errstate(invalid="ignore"):
            return np.maximum(x, x.dtype.type(0))


@dataclass(eq=False)
class MaxPool(Layer):
    size: int = 2
    kind = "maxpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"pooling needs a 3-D input, got {in_shape}")
        g = in_shape[0] // self.size
        if g < 1:
            raise ShapeError(f"pool size {self.size} larger than input {in_shape}")
        return (g, g, in_shape[2])

    def forward(self, x, exact=False):
        s = self.size
        g = x.shape[1] // s
        # trailing rows/columns that do not fill a window are dropped
        x = x[:, : g * s, : g * s]
        return x.reshape(x.shape[0], g, s, g, s, x.shape[3]).max(axis=(2, 4))


@dataclass(eq=False)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x, exact=False):
        return x.reshape(x.shape[0], -1)


class Network:
    """Ordered layer list with a validated shape chain.

    ``shapes[i]`` is ``(input_shape, output_shape)`` of ``layers[i]``;
    ``layers[0]`` is always ``Input``.  Boundary ``i`` in the recovery
    machinery is the output of layer ``i``.
    """

    def __init__(self, layers: list[Layer], dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(self)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.layers[0].shape)

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1][1]

    def __len__(self):
        return len(self.layers)

    def param_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def param_count(self) -> int:
        return sum(self.layers[i].params.size for i in self.param_layers())

    def param_bytes(self) -> int:
        return sum(self.layers[i].params.nbytes for i in self.param_layers())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def same_params(self, other: "Network") -> bool:
        """Bitwise equality of every parameter payload."""
        for i in self.param_layers():
            a, b = self.layers[i].params, other.layers[i].params
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def summary(self) -> list[tuple[str, tuple, int]]:
        """Rows of ``(layer, output shape, trainable)`` with biases folded into their host layer."""
        rows = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "dense", "maxpool"):
                name = {"conv": "Conv. 2D", "dense": "Dense", "maxpool": "Max Pooling"}[layer.kind]
                count = layer.params.size if layer.has_params else 0
                rows.append([name, self.shapes[i][1], count])
            elif layer.kind == "bias" and rows:
                rows[-1][2] += layer.params.size
        return [tuple(r) for r in rows]


def infer_shapes(network: Network) -> list[tuple[tuple, tuple]]:
    """Annotate every layer with its input and output shape; fail on the first broken link."""
    return _shape_chain(network.layers, network.dtype)


def _shape_chain(layers: list[Layer], dtype=None) -> list[tuple[tuple, tuple]]:
    if not layers or not isinstance(layers[0], Input):
        raise NetworkError("a network must start with an Input layer")
    shapes = []
    shape = tuple(layers[0].shape)
    for i, layer in enumerate(layers):
        if i and isinstance(layer, Input):
            raise NetworkError(f"layer {i}: Input is only allowed first")
        if layer.has_params and dtype is not None and layer.params.dtype != dtype:
            raise NetworkError(f"layer {i} ({layer.kind}): dtype {layer.params.dtype} != network {dtype}")
        try:
            out = layer.output_shape(shape)
        except ShapeError as exc:
            raise NetworkError(f"layer {i} ({layer.kind}): {exc}") from exc
        shapes.append((shape, tuple(out)))
        shape = tuple(out)
    return shapes


def forward(network: Network, x: np.ndarray, start: int = 0, stop: int | None = None, exact: bool = False) -> np.ndarray:
    """Run ``layers[start:stop]`` on ``x`` (single sample or leading batch axis).

    Computation happens in the network dtype.  Non-finite values propagate
    without raising.
    """
    return run_layers(network.layers, network.shapes, x, start, stop, network.dtype, exact)


def run_layers(layers, shapes, x, start=0, stop=None, dtype=None, exact=False, linear=False):
    """Shared forward loop.  ``linear=True`` passes activations through unchanged."""
    stop = len(layers) if stop is None else stop
    in_shape = shapes[start][0] if start < len(layers) else shapes[-1][1]
    x = np.asarray(x, dtype=dtype)
    single = x.shape == in_shape
    if not single and x.shape[1:] != in_shape:
        raise ShapeError(f"input shape {x.shape} does not match {in_shape} at layer {start}")
    if single:
        x = x[None]
    with np.errstate(all="ignore"):
        for layer in layers[start:stop]:
            if linear and layer.kind == "relu":
                continue
            x = layer.forward(x, exact=exact)
    return x[0] if single else x


def predict(network: Network, inputs: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Class index per sample; NaN logits never win and ties go to the lowest index."""
    out = []
    for lo in range(0, len(inputs), batch_size):
        logits = forward(network, inputs[lo : lo + batch_size]).astype(np.float64)
        logits = np.where(np.isnan(logits), -np.inf, logits)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def classify_accuracy(network: Network, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    if len(inputs) != len(labels):
        raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(network, inputs, batch_size) == np.asarray(labels)))


# --- built-in architectures -------------------------------------------------------

@dataclass
class _Arch:
    input_shape: tuple
    # ("conv", F, Y, padding) | ("pool", size) | ("dense", P) | ("flatten",)
    stages: list = field(default_factory=list)


ARCHITECTURES = {
    "mnist": _Arch((28, 28, 1), [
        ("conv", 3, 32, "valid"), ("conv", 3, 32, "valid"), ("pool", 2),
        ("conv", 3, 64, "valid"), ("flatten",), ("dense", 256), ("dense", 10),
    ]),
    "cifar-small": _Arch((32, 32, 3), [
        ("conv", 3, 32, "same"), ("conv", 3, 32, "same"), ("pool", 2),
        ("conv", 3, 64, "same"), ("conv", 3, 64, "same"), ("pool", 2),
        ("conv", 3, 128, "same"), ("conv", 3, 128, "same"), ("conv", 3, 128, "same"), ("pool", 2),
        ("flatten",), ("dense", 128), ("dense", 10),
    ]),
    "cifar-large": _Arch((32, 32, 3), [
        ("conv", 5, 96, "same"), ("pool", 2), ("conv", 5, 96, "same"), ("pool", 2),
        ("conv", 5, 80, "same"), ("conv", 5, 64, "same"), ("conv", 5, 64, "same"), ("conv", 5, 96, "same"),
        ("flatten",), ("dense", 256), ("dense", 10),
    ]),
}


def build_network(name: str, dtype=np.float32, seed: int = 0) -> Network:
    """Build a named architecture with seeded Glorot-uniform weights and small biases.

    Every conv/dense stage is followed by Bias and ReLU except the last dense
    stage, whose bias output is the logits.
    """
    try:
        arch = ARCHITECTURES[name]
    except KeyError:
        raise NetworkError(f"unknown network {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    dtype = np.dtype(dtype)
    layers: list[Layer] = [Input(arch.input_shape)]
    last_param_stage = max(i for i, s in enumerate(arch.stages) if s[0] in ("conv", "dense"))
    for idx, stage in enumerate(arch.stages):
        shape = _shape_chain(layers)[-1][1]
        rng = Rng(derive_seed(seed, idx))
        if stage[0] == "conv":
            _, f, y, padding = stage
            z = shape[2]
            limit = math.sqrt(6.0 / (f * f * (z + y)))
            w = (rng.units(f * f * z * y) * limit).astype(dtype).reshape(f, f, z, y)
            layers.append(Conv2D(w, 1, padding))
            layers.append(Bias((rng.units(y) * 0.05).astype(dtype), "conv"))
        elif stage[0] == "dense":
            n, p = shape[0], stage[1]
            limit = math.sqrt(6.0 / (n + p))
            layers.append(Dense((rng.units(n * p) * limit).astype(dtype).reshape(n, p)))
            layers.append(Bias((rng.units(p) * 0.05).astype(dtype), "dense"))
        elif stage[0] == "pool":
            layers.append(MaxPool(stage[1]))
        elif stage[0] == "flatten":
            layers.append(Flatten())
        if stage[0] in ("conv", "dense") and idx != last_param_stage:
            layers.append(ReLU())
    return Network(layers, dtype)


def layer_names(network: Network) -> dict[int, str]:
    """Human labels for parameterized layers: ``Conv``, ``Conv Bias``, ``Conv 1``, ... ``Dense 1 Bias``."""
    names = {}
    seen = {"conv": 0, "dense": 0}
    host = None
    for i, layer in enumerate(network.layers):
        if layer.kind in seen:
            n = seen[layer.kind]
            seen[layer.kind] += 1
            host = ("Conv" if layer.kind == "conv" else "Dense") + (f" {n}" if n else "")
            names[i] = host
        elif layer.kind == "bias":
            names[i] = f"{host} Bias" if host else f"Bias {i}"
    return names
