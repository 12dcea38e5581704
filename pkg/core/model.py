# core/model.py
"""Trainable embedder F_theta: a small MLP over raw feature vectors with exact analytic gradients."""
import enum
import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
_MAGIC = b"PVEC"
_FORMAT_VERSION = 1


class Nonlinearity(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class EmbedderSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(32, ge=1)
    hidden_dims: tuple[int, ...] = (64,)
    output_dim: int = Field(16, ge=1)
    nonlinearity: Nonlinearity = Nonlinearity.RELU
    l2_normalize_output: bool = True

    @field_validator("hidden_dims", mode="before")
    @classmethod
    def _parse_hidden_dims(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @field_validator("hidden_dims")
    @classmethod
    def _check_hidden_dims(cls, value):
        if any(width < 1 for width in value):
            raise ValueError(f"hidden layer widths must be >= 1, got {value}")
        return value

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> tuple[LayerSlot, ...]:
        slots, offset = [], 0
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            slots.append(LayerSlot(f"dense{i}.weight", offset, (fan_out, fan_in)))
            offset += fan_out * fan_in
            slots.append(LayerSlot(f"dense{i}.bias", offset, (fan_out,)))
            offset += fan_out
        return tuple(slots)

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims())


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameters theta in R^p plus the per-layer layout. Values are read-only."""
    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))
        expected_offset = 0
        for slot in self.layout:
            if slot.offset != expected_offset:
                raise ShapeError(f"ParamVector: layer '{slot.name}' starts at {slot.offset}, expected {expected_offset}")
            expected_offset += slot.size
        if expected_offset != values.size:
            raise ShapeError(f"ParamVector: layout covers {expected_offset} values but vector has {values.size}")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def view(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"ParamVector.with_values: expected shape {self.values.shape}, got {values.shape}")
        return ParamVector(values, self.layout)

    def checksum(self) -> str:
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()[:16]

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(self.layout))]
        for slot in self.layout:
            name = slot.name.encode("utf-8")
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack("<QI", slot.offset, len(slot.shape)))
            parts.append(struct.pack(f"<{len(slot.shape)}Q", *slot.shape))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        if data[:4] != _MAGIC:
            raise ShapeError("ParamVector.from_bytes: not a parameter checkpoint (bad magic)")
        pos = 4
        version, n_layers = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != _FORMAT_VERSION:
            raise ShapeError(f"ParamVector.from_bytes: unsupported format version {version}")
        layout = []
        for _ in range(n_layers):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            offset, ndim = struct.unpack_from("<QI", data, pos)
            pos += 12
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            layout.append(LayerSlot(name, int(offset), tuple(int(d) for d in shape)))
        values = np.frombuffer(data, dtype="<f8", offset=pos)
        return cls(values.astype(np.float64), tuple(layout))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        logger.info(f"ParamVector: saved {self.size} parameters to {path} (checksum {self.checksum()}).")

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass(frozen=True, eq=False)
class DescriptorBatch:
    matrix: np.ndarray
    ids: tuple = ()


def init_params(spec: EmbedderSpec, seed: int) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.param_count, dtype=np.float64)
    for slot in spec.layout():
        if slot.name.endswith(".weight"):
            bound = 1.0 / np.sqrt(slot.shape[1])
            values[slot.offset:slot.offset + slot.size] = rng.uniform(-bound, bound, size=slot.size)
    return ParamVector(values, spec.layout())


def _layers(theta: ParamVector, spec: EmbedderSpec):
    if theta.layout != spec.layout():
        raise ShapeError(f"parameter layout does not match embedder spec (p={theta.size}, spec p={spec.param_count})")
    return [(theta.view(f"dense{i}.weight"), theta.view(f"dense{i}.bias")) for i in range(len(spec.layer_dims()))]


def _as_batch(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"forward: expected feature columns = {input_dim}, got array of shape {x.shape}")
    return x


def _activate(z: np.ndarray, kind: Nonlinearity) -> np.ndarray:
    if kind == Nonlinearity.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: Nonlinearity) -> np.ndarray:
    if kind == Nonlinearity.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _forward_with_cache(theta: ParamVector, spec: EmbedderSpec, x):
    layers = _layers(theta, spec)
    h = _as_batch(x, spec.input_dim)
    inputs, pre_activations = [], []
    for i, (weight, bias) in enumerate(layers):
        inputs.append(h)
        z = h @ weight.T + bias
        pre_activations.append(z)
        h = _activate(z, spec.nonlinearity) if i < len(layers) - 1 else z
    raw = h
    if not spec.l2_normalize_output:
        return raw, (layers, inputs, pre_activations, raw, None, None)
    norms = np.sqrt(np.sum(raw * raw, axis=1))
    # degenerate-input guard for (near) zero descriptors
    scale = np.where(norms < NORM_EPS, norms + NORM_EPS, norms)
    return raw / scale[:, None], (layers, inputs, pre_activations, raw, norms, scale)


def forward(theta: ParamVector, spec: EmbedderSpec, x, ids: Sequence[int] = ()) -> DescriptorBatch:
    out, _ = _forward_with_cache(theta, spec, x)
    return DescriptorBatch(out, tuple(ids))


def embed(theta: ParamVector, spec: EmbedderSpec, x) -> np.ndarray:
    return _forward_with_cache(theta, spec, x)[0]


def _backward_from_cache(spec: EmbedderSpec, cache, upstream: np.ndarray) -> np.ndarray:
    layers, inputs, pre_activations, raw, norms, scale = cache
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != raw.shape:
        raise ShapeError(f"backward: upstream gradient shape {g.shape} does not match descriptors {raw.shape}")
    if spec.l2_normalize_output:
        # y = z / s with s = ||z|| (plus eps when tiny): dz = g / s - z (z.g) / (s^2 ||z||)
        zg = np.sum(raw * g, axis=1)
        safe_norms = np.where(norms > 0.0, norms, 1.0)
        coef = np.where(norms > 0.0, zg / (scale * scale * safe_norms), 0.0)
        g = g / scale[:, None] - raw * coef[:, None]

    grads = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        grads[2 * i] = g.T @ inputs[i]
        grads[2 * i + 1] = np.sum(g, axis=0)
        if i > 0:
            g = (g @ weight) * _activation_grad(pre_activations[i - 1], inputs[i], spec.nonlinearity)
    return np.concatenate([part.reshape(-1) for part in grads])


def backward(theta: ParamVector, spec: EmbedderSpec, x, upstream_grad) -> ParamVector:
    """Exact gradient of <upstream_grad, F_theta(x)> with respect to theta."""
    _, cache = _forward_with_cache(theta, spec, x)
    return ParamVector(_backward_from_cache(spec, cache, upstream_grad), theta.layout)


def forward_backward(theta: ParamVector, spec: EmbedderSpec, x, grad_fn):
    """Runs forward once, asks `grad_fn(descriptors)` for (value, upstream), returns (value, flat gradient)."""
    out, cache = _forward_with_cache(theta, spec, x)
    value, upstream = grad_fn(out)
    return value, _backward_from_cache(spec, cache, upstream)


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance: shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


def distances_to(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Euclidean distances from one descriptor to each row of `candidates`."""
    diff = candidates - query[None, :]
    return np.sqrt(np.sum(diff * diff, axis=1))
