"""fMRI-to-embedding regressor with hand-derived gradients.

Topology: an input linear layer (d -> h), ``r`` residual blocks
(h -> h, ``x + act(x W + b)``), a hidden linear layer (h -> h, activated) and
an output linear layer (h -> tokens * c). Layer kind is read from the layer
name prefix, so hand-built parameter sets (e.g. just ``input`` + ``output``)
run through the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from brainfed.numerics import DimensionError, Rng, matmul

TIERS = ("foundational", "intermediate", "advanced")


class ShapeError(ValueError):
    """Two parameter sets are not shape-compatible where they need to be."""


class CacheError(RuntimeError):
    """A forward cache does not belong to the parameters passed to backward."""


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    bias: np.ndarray

    def tensors(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weight, self.bias


@dataclass
class ParamSet:
    layers: list[Layer]
    input_dim: int | None = None

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return ParamSet(self.layers[idx], self.input_dim if idx.start in (None, 0) else None)
        return self.layers[idx]

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        return out

    def copy(self) -> "ParamSet":
        return ParamSet([Layer(l.name, l.weight.copy(), l.bias.copy()) for l in self.layers], self.input_dim)

    def map(self, fn) -> "ParamSet":
        """Apply ``fn`` to every tensor, returning a new ParamSet."""
        return ParamSet([Layer(l.name, fn(l.weight), fn(l.bias)) for l in self.layers], self.input_dim)

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        check_compatible(self, other)
        return ParamSet(
            [Layer(a.name, fn(a.weight, b.weight), fn(a.bias, b.bias)) for a, b in zip(self.layers, other.layers)],
            self.input_dim,
        )

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names != other.names:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.tensors(), other.tensors())
        )


def check_compatible(a: ParamSet, b: ParamSet) -> None:
    if len(a) != len(b):
        raise ShapeError(f"layer counts differ: {len(a)} vs {len(b)}")
    for la, lb in zip(a.layers, b.layers):
        if la.name != lb.name or la.weight.shape != lb.weight.shape or la.bias.shape != lb.bias.shape:
            raise ShapeError(
                f"layer {la.name!r} {la.weight.shape}/{la.bias.shape} incompatible with "
                f"{lb.name!r} {lb.weight.shape}/{lb.bias.shape}"
            )


@dataclass(frozen=True)
class LayerPartition:
    """Index boundaries of the three synchronization tiers.

    ``[0, foundational_end)`` is retained, ``[foundational_end, intermediate_end)``
    is copied from the global model and ``[intermediate_end, total)`` is fused.
    """

    foundational_end: int
    intermediate_end: int
    total: int

    def __post_init__(self):
        if not 0 < self.foundational_end <= self.intermediate_end < self.total:
            raise ValueError(
                f"invalid partition ({self.foundational_end}, {self.intermediate_end}, {self.total}); "
                "need 0 < foundational_end <= intermediate_end < total"
            )

    @property
    def m(self) -> int:
        return self.total - self.intermediate_end

    def tier_range(self, tier: str) -> range:
        if tier == "foundational":
            return range(0, self.foundational_end)
        if tier == "intermediate":
            return range(self.foundational_end, self.intermediate_end)
        if tier == "advanced":
            return range(self.intermediate_end, self.total)
        raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")

    def with_advanced(self, m: int) -> "LayerPartition":
        return LayerPartition(self.foundational_end, self.total - m, self.total)


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dim: int = 64
    num_residual_blocks: int = 4
    output_tokens: int = 4
    token_dim: int = 8

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_residual_blocks", "output_tokens", "token_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def output_dim(self) -> int:
        return self.output_tokens * self.token_dim

    @property
    def num_layers(self) -> int:
        return self.num_residual_blocks + 3

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        h = self.hidden_dim
        shapes = [("input", self.input_dim, h)]
        shapes += [(f"res{i}", h, h) for i in range(self.num_residual_blocks)]
        shapes += [("hidden", h, h), ("output", h, self.output_dim)]
        return shapes

    def default_partition(self) -> LayerPartition:
        return LayerPartition(1, 1 + self.num_residual_blocks, self.num_layers)


def init(config: NetworkConfig, rng: Rng) -> ParamSet:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    layers = []
    for name, fan_in, fan_out in config.layer_shapes():
        w = rng.gaussian((fan_in, fan_out)) / math.sqrt(fan_in)
        layers.append(Layer(name, w, np.zeros(fan_out)))
    return ParamSet(layers, config.input_dim)


# Activation: tanh approximation of GELU,
#   act(x) = 0.5 x (1 + tanh(u)),  u = sqrt(2/pi) (x + 0.044715 x^3)
#   act'(x) = 0.5 (1 + tanh(u)) + 0.5 x (1 - tanh(u)^2) sqrt(2/pi) (1 + 3 * 0.044715 x^2)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    # x * x * x, not x**3: the generic power ufunc is ~50x slower
    return np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))


def gelu(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t)


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def layer_kind(name: str) -> str:
    if name.startswith("res"):
        return "residual"
    if name == "output":
        return "linear"
    return "activated"


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations recorded by :func:`forward`."""

    names: list[str]
    shapes: list[tuple]
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    tanhs: list[np.ndarray | None] = field(default_factory=list)
    output_shape: tuple = ()


def forward(params: ParamSet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.layers[0].weight.shape[0]:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input width {params.layers[0].weight.shape[0]}"
        )
    cache = ForwardCache(params.names, [(l.weight.shape, l.bias.shape) for l in params.layers])
    h = batch
    for layer in params.layers:
        cache.inputs.append(h)
        z = matmul(h, layer.weight) + layer.bias
        cache.preacts.append(z)
        kind = layer_kind(layer.name)
        t = None if kind == "linear" else _gelu_tanh(z)
        cache.tanhs.append(t)
        if kind == "residual":
            h = h + gelu(z, t)
        elif kind == "activated":
            h = gelu(z, t)
        else:
            h = z
    cache.output_shape = h.shape
    return h, cache


def backward(params: ParamSet, cache: ForwardCache, grad_out: np.ndarray) -> ParamSet:
    """Gradient of <grad_out, forward(params, x)> with respect to every tensor."""
    if cache.names != params.names or cache.shapes != [(l.weight.shape, l.bias.shape) for l in params.layers]:
        raise CacheError("forward cache was produced by a different parameter layout")
    if len(cache.inputs) != len(params):
        raise CacheError("forward cache is incomplete")
    if grad_out.shape != cache.output_shape:
        raise CacheError(f"grad_out shape {grad_out.shape} does not match prediction shape {cache.output_shape}")

    grads: list[Layer] = []
    g = grad_out
    for idx in range(len(params) - 1, -1, -1):
        layer = params.layers[idx]
        x, z = cache.inputs[idx], cache.preacts[idx]
        kind = layer_kind(layer.name)
        gz = g if kind == "linear" else g * gelu_grad(z, cache.tanhs[idx])
        gw = matmul(x.T, gz)
        gb = gz.sum(axis=0)
        gx = matmul(gz, layer.weight.T)
        if kind == "residual":
            gx = gx + g
        grads.append(Layer(layer.name, gw, gb))
        g = gx
    grads.reverse()
    return ParamSet(grads, params.input_dim)


def slice_view(params: ParamSet, partition: LayerPartition, tier: str) -> list[np.ndarray]:
    """Weight and bias arrays of one tier, in layer order (no copies)."""
    if partition.total != len(params):
        raise ShapeError(f"partition covers {partition.total} layers, params have {len(params)}")
    out = []
    for i in partition.tier_range(tier):
        out.extend(params.layers[i].tensors())
    return out


def tier_layers(params: ParamSet, partition: LayerPartition, tier: str) -> list[Layer]:
    return [params.layers[i] for i in partition.tier_range(tier)]
