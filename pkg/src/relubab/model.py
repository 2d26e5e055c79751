"""Dense ReLU networks, box-bounded linear properties, and their JSON formats."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid network/property data or a dimension mismatch."""


class ModelFormatError(ModelError):
    """A network or property file failed to parse or validate."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class AffineLayer:
    weight: np.ndarray
    bias: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, ndmin=2)
        if w.ndim != 2:
            raise ModelError(f"weight must be a matrix, got shape {w.shape}")
        b = np.zeros(w.shape[0]) if self.bias is None else np.array(self.bias, dtype=np.float64).reshape(-1)
        if b.shape != (w.shape[0],):
            raise ModelError(f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelError("weights and biases must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Network:
    """Affine layers with ReLU between consecutive layers (never after the last)."""

    layers: tuple[AffineLayer, ...]

    def __post_init__(self):
        layers = tuple(
            l if isinstance(l, AffineLayer) else AffineLayer(*l) for l in self.layers
        )
        if not layers:
            raise ModelError("network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ModelError(
                    f"layer {i}: expects {layers[i].in_dim} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_weights(cls, weights: Sequence, biases: Sequence | None = None) -> "Network":
        biases = biases if biases is not None else [None] * len(weights)
        return cls(tuple(AffineLayer(w, b) for w, b in zip(weights, biases)))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def hidden_sizes(self) -> list[int]:
        return [l.out_dim for l in self.layers[:-1]]

    @property
    def num_hidden(self) -> int:
        return sum(self.hidden_sizes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [
                {"weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in self.layers
            ],
        }


@dataclass(frozen=True)
class PropertySpec:
    """Verify ``spec_vector . f(x) + spec_offset >= 0`` for all ``x`` in ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray
    spec_vector: np.ndarray
    spec_offset: float = 0.0
    center: np.ndarray | None = field(default=None)
    epsilon: float | None = None

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64).reshape(-1)
        hi = np.array(self.upper, dtype=np.float64).reshape(-1)
        c = np.array(self.spec_vector, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ModelError("lower and upper must have the same length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ModelError("box bounds must be finite")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi))
            raise ModelError(f"lower > upper in input dimension {bad}")
        if not np.all(np.isfinite(c)) or not np.any(c != 0):
            raise ModelError("spec_vector must be finite and not all zero")
        if not math.isfinite(float(self.spec_offset)):
            raise ModelError("spec_offset must be finite")
        for a in (lo, hi, c):
            a.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "spec_vector", c)
        object.__setattr__(self, "spec_offset", float(self.spec_offset))

    @classmethod
    def linf_ball(cls, center, epsilon: float, spec_vector, spec_offset: float = 0.0) -> "PropertySpec":
        if not epsilon >= 0:
            raise ModelError("epsilon must be nonnegative")
        x0 = np.asarray(center, dtype=np.float64).reshape(-1)
        return cls(x0 - epsilon, x0 + epsilon, spec_vector, spec_offset, center=x0, epsilon=float(epsilon))

    @property
    def input_dim(self) -> int:
        return self.lower.shape[0]

    def check_against(self, net: Network) -> None:
        if self.input_dim != net.input_dim:
            raise ModelError(f"property box has {self.input_dim} dims, network input has {net.input_dim}")
        if self.spec_vector.shape[0] != net.output_dim:
            raise ModelError(
                f"spec_vector has length {self.spec_vector.shape[0]}, network output has {net.output_dim}"
            )

    def to_dict(self) -> dict:
        d: dict = {}
        if self.center is not None and self.epsilon is not None:
            d["center"] = np.asarray(self.center).tolist()
            d["epsilon"] = self.epsilon
        else:
            d["lower"] = self.lower.tolist()
            d["upper"] = self.upper.tolist()
        d["spec_vector"] = self.spec_vector.tolist()
        d["spec_offset"] = self.spec_offset
        return d


def forward(net: Network, x) -> np.ndarray:
    """Exact network output for one input ``(d,)`` or a batch ``(N, d)``."""
    z = np.asarray(x, dtype=np.float64)
    if z.shape[-1] != net.input_dim:
        raise ModelError(f"layer 0: input has {z.shape[-1]} features, expected {net.input_dim}")
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = z @ layer.weight.T + layer.bias
        if i < last:
            z = np.maximum(z, 0.0)
    return z


def merge_property(net: Network, prop: PropertySpec) -> Network:
    """Fold ``c . f(x) + d`` into the last layer, giving a scalar-output network."""
    c = prop.spec_vector
    if c.shape[0] != net.output_dim:
        raise ModelError(
            f"layer {len(net.layers) - 1}: spec_vector has length {c.shape[0]}, "
            f"network output has {net.output_dim}"
        )
    last = net.layers[-1]
    w = (c @ last.weight)[None, :]
    b = np.array([c @ last.bias + prop.spec_offset])
    return Network(net.layers[:-1] + (AffineLayer(w, b),))


# ---------------------------------------------------------------- file formats

def _line_of(text: str, pattern: str) -> int | None:
    m = re.search(pattern, text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def _parse(path) -> tuple[dict, str, str]:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ModelFormatError(f"cannot read file ({e.strerror})", path) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"invalid JSON: {e.msg}", path, e.lineno) from e
    if not isinstance(data, dict):
        raise ModelFormatError("top-level value must be an object", path, 1)
    return data, text, path


def _numeric(value, where: str, path: str, text: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ModelFormatError(f"{where}: expected a numeric array", path) from e
    if arr.ndim != ndim:
        raise ModelFormatError(f"{where}: expected a {ndim}-d array, got shape {arr.shape}", path)
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(
            f"{where}: contains NaN or infinite values", path, _line_of(text, r"NaN|-?Infinity")
        )
    return arr


def load_network(path) -> Network:
    data, text, path = _parse(path)
    if "layers" not in data or not isinstance(data["layers"], list) or not data["layers"]:
        raise ModelFormatError("'layers' must be a non-empty list", path, _line_of(text, r'"layers"'))
    layers = []
    for i, spec in enumerate(data["layers"]):
        if not isinstance(spec, dict) or "weight" not in spec:
            raise ModelFormatError(f"layers[{i}]: missing 'weight'", path)
        w = _numeric(spec["weight"], f"layers[{i}].weight", path, text, 2)
        b = None
        if spec.get("bias") is not None:
            b = _numeric(spec["bias"], f"layers[{i}].bias", path, text, 1)
        try:
            layers.append(AffineLayer(w, b))
        except ModelError as e:
            raise ModelFormatError(f"layers[{i}]: {e}", path) from e
    try:
        net = Network(tuple(layers))
    except ModelError as e:
        raise ModelFormatError(str(e), path) from e
    if "input_dim" in data and data["input_dim"] != net.input_dim:
        raise ModelFormatError(
            f"input_dim is {data['input_dim']} but layers[0] takes {net.input_dim} inputs",
            path,
            _line_of(text, r'"input_dim"'),
        )
    return net


def load_property(path) -> PropertySpec:
    data, text, path = _parse(path)
    for key in ("spec_vector",):
        if key not in data:
            raise ModelFormatError(f"missing '{key}'", path)
    c = _numeric(data["spec_vector"], "spec_vector", path, text, 1)
    d = float(data.get("spec_offset", 0.0))
    try:
        if "center" in data:
            if "epsilon" not in data:
                raise ModelFormatError("'center' given without 'epsilon'", path, _line_of(text, r'"center"'))
            x0 = _numeric(data["center"], "center", path, text, 1)
            return PropertySpec.linf_ball(x0, float(data["epsilon"]), c, d)
        if "lower" in data and "upper" in data:
            lo = _numeric(data["lower"], "lower", path, text, 1)
            hi = _numeric(data["upper"], "upper", path, text, 1)
            return PropertySpec(lo, hi, c, d)
    except ModelFormatError:
        raise
    except ModelError as e:
        raise ModelFormatError(str(e), path) from e
    raise ModelFormatError("need either center+epsilon or lower+upper", path)


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()))


def save_property(prop: PropertySpec, path) -> None:
    Path(path).write_text(json.dumps(prop.to_dict()))
