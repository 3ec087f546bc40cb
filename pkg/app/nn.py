"""Inference-only layers shared by pooling, decoding and the auxiliary heads.

Weights are stored input-major: a linear layer maps ``x @ weight + bias``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if weight.ndim != 2 or bias.shape[0] != weight.shape[1]:
            raise ConfigurationError(f"linear layer shapes do not chain: {weight.shape} / {bias.shape}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ConfigurationError("linear layer holds non-finite values")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> Linear:
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim))

    @classmethod
    def random(cls, in_dim: int, out_dim: int, rng: np.random.Generator, scale: float | None = None) -> Linear:
        scale = scale if scale is not None else 1.0 / np.sqrt(in_dim)
        return cls(rng.normal(0.0, scale, (in_dim, out_dim)), rng.normal(0.0, scale, out_dim))

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"expected {self.in_dim} input channels, got {x.shape[-1]}")
        return x @ self.weight + self.bias


@dataclass(frozen=True)
class Mlp:
    """Linear layers with ReLU between them and no activation after the last."""

    layers: tuple[Linear, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ConfigurationError("an MLP needs at least one layer")
        for first, second in zip(layers, layers[1:]):
            if first.out_dim != second.in_dim:
                raise ConfigurationError(f"MLP layers do not chain: {first.out_dim} -> {second.in_dim}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def random(cls, dims: Sequence[int], rng: np.random.Generator) -> Mlp:
        return cls(tuple(Linear.random(a, b, rng) for a, b in zip(dims, dims[1:])))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> Mlp:
        return cls(tuple(Linear.zeros(a, b) for a, b in zip(dims, dims[1:])))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.layers[0](x)
        for layer in self.layers[1:]:
            out = layer(np.maximum(out, 0.0))
        return out


@dataclass(frozen=True)
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        gamma = np.asarray(self.gamma, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if gamma.ndim != 1 or gamma.shape != beta.shape:
            raise ConfigurationError(f"layer norm needs matching 1-D gamma and beta: {gamma.shape} / {beta.shape}")
        if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(beta))):
            raise ConfigurationError("layer norm holds non-finite values")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @property
    def dim(self) -> int:
        return int(self.gamma.shape[0])

    @classmethod
    def identity(cls, dim: int) -> LayerNorm:
        return cls(np.ones(dim), np.zeros(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mean) / np.sqrt(var + self.eps) * self.gamma + self.beta


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)
