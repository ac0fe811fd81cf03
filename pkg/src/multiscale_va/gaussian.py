"""Random Fourier features for the RBF kernel, used as a frozen encoder branch.

``z(x) = sqrt(2/D) * cos(x @ W + b)`` with ``W ~ N(0, 1/sigma^2)`` and
``b ~ U[0, 2pi)`` gives ``z(x) . z(y) ~= exp(-|x - y|^2 / (2 sigma^2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class GaussianProjection:
    weights: np.ndarray  # [d_in, n_features]
    offsets: np.ndarray  # [n_features]
    sigma: float
    seed: int

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GaussianProjection):
            return NotImplemented
        return (self.sigma == other.sigma and self.seed == other.seed
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.offsets, other.offsets))


def sample_projection(seed: int, d_in: int, n_features: int, sigma: float = 1.0) -> GaussianProjection:
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if d_in <= 0 or n_features <= 0:
        raise ParameterError(f"dimensions must be positive, got d_in={d_in}, n_features={n_features}")
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 1.0 / sigma, size=(d_in, n_features))
    offsets = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
    weights.flags.writeable = False
    offsets.flags.writeable = False
    return GaussianProjection(weights, offsets, float(sigma), int(seed))


def _features(x2d: Tensor, proj: GaussianProjection) -> Tensor:
    if x2d.shape[-1] != proj.d_in:
        raise DimensionError(f"input width {x2d.shape[-1]} != projection d_in {proj.d_in}")
    z = T.add_bias(T.matmul(x2d, Tensor(proj.weights)), Tensor(proj.offsets))
    return T.scale(T.cos(z), math.sqrt(2.0 / proj.n_features))


def gaussian_transform(x: Tensor, proj: GaussianProjection) -> Tensor:
    """Map one ``[d_in]`` vector to ``[n_features]`` random Fourier features."""
    x = T.tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"gaussian_transform expects a vector, got {x.shape}")
    return T.reshape(_features(T.reshape(x, (1, -1)), proj), (-1,))


def encode_sequence(signal: Tensor, proj: GaussianProjection) -> Tensor:
    """Per-timestep features of an ``[L, d_in]`` signal, averaged over time."""
    signal = T.tensor(signal)
    if signal.ndim != 2:
        raise DimensionError(f"encode_sequence expects [L, d_in], got {signal.shape}")
    return T.mean(_features(signal, proj), axis=0)
