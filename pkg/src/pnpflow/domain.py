"""Shared numerical primitives: seeded streams, latent/target laws, the straight path.

Grids are plain ``float64`` numpy arrays. Batches of vectors are ``(n, d)``
arrays; images are ``(C, H, W)`` or ``(H, W)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not match."""


class DomainError(ValueError):
    """Raised when a scalar argument lies outside its valid range."""


def as_grid(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("grid contains non-finite entries")
    return arr


class RngState:
    """Counter-based (Philox) random stream with deterministic fork-by-index.

    ``fork(i)`` never consumes draws from the parent, so the children of a
    stream are the same regardless of what the parent has been used for.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def fork(self, index: int) -> "RngState":
        return RngState(self.seed, self.path + (index,))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, size)

    def exponential(self, size) -> np.ndarray:
        return self.generator.standard_exponential(size)

    def laplace(self, scale: float, size) -> np.ndarray:
        return self.generator.laplace(0.0, scale, size)

    def integers(self, high: int, size=None):
        return self.generator.integers(0, high, size)

    def __repr__(self):
        return f"RngState(seed={self.seed}, path={self.path})"


def as_rng(rng: Union[RngState, int, None]) -> RngState:
    if isinstance(rng, RngState):
        return rng
    return RngState(0 if rng is None else rng)


# --------------------------------------------------------------------------
# Latent laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotropicGaussianLatent:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("latent dimension must be >= 1")


@dataclass(frozen=True)
class DirichletUniformLatent:
    """Uniform law on the probability simplex, i.e. Dirichlet(1, ..., 1)."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("latent dimension must be >= 1")


LatentSpec = Union[IsotropicGaussianLatent, DirichletUniformLatent]


def sample_latent(spec: LatentSpec, n: int, rng: RngState) -> np.ndarray:
    """Draw ``n`` latent vectors, returned as an ``(n, dim)`` array."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if isinstance(spec, IsotropicGaussianLatent):
        return rng.normal((n, spec.dim))
    if isinstance(spec, DirichletUniformLatent):
        e = rng.exponential((n, spec.dim))
        return e / e.sum(axis=1, keepdims=True)
    raise TypeError(f"unknown latent spec {spec!r}")


# --------------------------------------------------------------------------
# Target laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotropicGaussianTarget:
    mean: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "mean", as_grid(self.mean).reshape(-1))
        if not self.scale > 0:
            raise DomainError("scale must be positive")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GaussianMixtureTarget:
    """Mixture of isotropic Gaussians, ``sum_k w_k N(mu_k, s_k^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        w = as_grid(self.weights).reshape(-1)
        mu = as_grid(self.means)
        if mu.ndim == 1:
            mu = mu[:, None]
        mu = mu.reshape(w.size, -1)
        s = as_grid(self.scales).reshape(-1)
        if s.size != w.size:
            raise ShapeError("one scale per component required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")
        if np.any(s <= 0):
            raise DomainError("mixture scales must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class EmpiricalTarget:
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = as_grid(self.data)
        if arr.shape[0] == 0:
            raise DomainError("empirical dataset is empty")
        object.__setattr__(self, "data", arr.reshape(arr.shape[0], -1))

    @property
    def dim(self) -> int:
        return self.data.shape[1]


TargetSpec = Union[IsotropicGaussianTarget, GaussianMixtureTarget, EmpiricalTarget]


def sample_target(spec: TargetSpec, n: int, rng: RngState) -> np.ndarray:
    """Draw ``n`` target vectors, returned as an ``(n, dim)`` array."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if isinstance(spec, IsotropicGaussianTarget):
        return spec.mean + spec.scale * rng.normal((n, spec.dim))
    if isinstance(spec, GaussianMixtureTarget):
        k = rng.generator.choice(spec.weights.size, size=n, p=spec.weights)
        eps = rng.normal((n, spec.dim))
        return spec.means[k] + spec.scales[k, None] * eps
    if isinstance(spec, EmpiricalTarget):
        idx = rng.integers(spec.data.shape[0], n)
        return spec.data[idx].copy()
    raise TypeError(f"unknown target spec {spec!r}")


def interp_et(x0, x1, t: float) -> np.ndarray:
    """Point at time ``t`` on the straight segment from ``x0`` to ``x1``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise DomainError("t must lie in [0, 1]")
    if t_arr.ndim == 1 and x0.ndim > 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t_arr) * x0 + t_arr * x1


def check_shapes(*arrays: np.ndarray, names: Sequence[str] = ()):
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        label = ", ".join(names) if names else "operands"
        raise ShapeError(f"{label} have mismatched shapes {sorted(shapes)}")
