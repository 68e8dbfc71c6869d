"""Velocity fields, the flow denoiser, Euler sampling and Monte-Carlo diagnostics."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .domain import (
    DomainError,
    GaussianMixtureTarget,
    IsotropicGaussianLatent,
    IsotropicGaussianTarget,
    LatentSpec,
    RngState,
    ShapeError,
    TargetSpec,
    as_grid,
    interp_et,
    sample_latent,
    sample_target,
)

INDEPENDENT = "independent"
GAUSSIAN_OT = "gaussian_ot"


class NonFiniteError(RuntimeError):
    """Raised when an integrator or iteration produces NaN/Inf."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t_arr


class VelocityField:
    """Map ``(t, x) -> v_t(x)`` on vectors of length ``dim``.

    ``x`` may be any array whose size is a multiple of ``dim``; it is viewed
    as a batch of flat vectors and the result has the shape of ``x``. ``t``
    is a scalar or one time per batch row.
    """

    dim: int

    def __call__(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size % self.dim:
            raise ShapeError(f"input of size {x.size} is not a batch of {self.dim}-vectors")
        flat = x.reshape(-1, self.dim)
        t_arr = _check_t(t)
        if t_arr.ndim:
            t_arr = t_arr.reshape(-1)
            if t_arr.size != flat.shape[0]:
                raise ShapeError("one time per batch row required")
            t_arr = t_arr[:, None]
        else:
            t_arr = float(t_arr)
        return self._velocity(t_arr, flat).reshape(x.shape)

    def _velocity(self, t, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroField(VelocityField):
    def __init__(self, dim: int):
        self.dim = dim

    def _velocity(self, t, x):
        return np.zeros_like(x)


class ConstantField(VelocityField):
    def __init__(self, value):
        self.value = as_grid(value).reshape(-1)
        self.dim = self.value.size

    def _velocity(self, t, x):
        return np.broadcast_to(self.value, x.shape).copy()


class FunctionField(VelocityField):
    """Wrap a plain ``fn(t, x)`` operating on ``(n, dim)`` batches."""

    def __init__(self, fn: Callable, dim: int):
        self.fn = fn
        self.dim = dim

    def _velocity(self, t, x):
        return np.asarray(self.fn(t, x), dtype=np.float64)


class GaussIndepField(VelocityField):
    """Optimal field for N(0, I) -> N(m, s^2 I) under the independent coupling.

    ``v_t(x) = E[X1 - X0 | Xt = x] = m + c_t (x - t m)`` with
    ``c_t = (t s^2 - (1 - t)) / ((1 - t)^2 + t^2 s^2)``.
    """

    def __init__(self, mean, scale: float):
        self.mean = as_grid(mean).reshape(-1)
        if not scale > 0:
            raise DomainError("scale must be positive")
        self.scale = float(scale)
        self.dim = self.mean.size

    def _velocity(self, t, x):
        s2 = self.scale**2
        a2 = (1 - t) ** 2 + t**2 * s2
        coef = (t * s2 - (1 - t)) / a2
        return self.mean + coef * (x - t * self.mean)


class GmmIndepField(VelocityField):
    """Optimal independent-coupling field for a mixture of isotropic Gaussians.

    Each component contributes its own Gaussian conditional mean, weighted by
    the posterior responsibility of that component given ``Xt = x``.
    """

    def __init__(self, weights, means, scales):
        spec = GaussianMixtureTarget(weights, means, scales)
        self.weights = spec.weights
        self.means = spec.means
        self.scales = spec.scales
        self.dim = spec.dim

    @classmethod
    def from_target(cls, target: GaussianMixtureTarget) -> "GmmIndepField":
        return cls(target.weights, target.means, target.scales)

    def _terms(self, t, x):
        t_arr = np.asarray(t, dtype=np.float64)
        tk = t_arr.reshape(-1, 1) if t_arr.ndim else t_arr
        t3 = t_arr.reshape(-1, 1, 1) if t_arr.ndim else t_arr
        s2 = self.scales**2
        a2 = np.broadcast_to((1 - tk) ** 2 + tk**2 * s2, (x.shape[0], s2.size))
        resid = x[:, None, :] - t3 * self.means[None]  # (n, K, d)
        logp = (np.log(self.weights) - 0.5 * self.dim * np.log(a2)
                - 0.5 * np.sum(resid**2, axis=-1) / a2)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        coef = (tk * s2 - (1 - tk)) / a2
        return resp, coef, resid

    def responsibilities(self, t, x) -> np.ndarray:
        """Posterior component weights given ``Xt = x``, shape ``(n, K)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        return self._terms(t, x)[0]

    def _velocity(self, t, x):
        resp, coef, resid = self._terms(t, x)
        comp = self.means[None] + coef[..., None] * resid
        return np.einsum("nk,nkd->nd", resp, comp)


class GaussOtField(VelocityField):
    """Field of the Monge map ``T(x) = m + s x`` between N(0, I) and N(m, s^2 I).

    Along ``x_t = (1 - t) x0 + t T(x0)`` the field equals ``T(x0) - x0``.
    """

    def __init__(self, mean, scale: float):
        self.mean = as_grid(mean).reshape(-1)
        if not scale > 0:
            raise DomainError("scale must be positive")
        self.scale = float(scale)
        self.dim = self.mean.size

    def transport(self, x0) -> np.ndarray:
        return self.mean + self.scale * np.asarray(x0, dtype=np.float64)

    def _velocity(self, t, x):
        s = self.scale
        return self.mean + (s - 1) * (x - t * self.mean) / (1 + t * (s - 1))


def velocity_gauss_indep(field: GaussIndepField, t, x):
    return field(t, x)


def velocity_gmm_indep(field: GmmIndepField, t, x):
    return field(t, x)


def velocity_gauss_ot(field: GaussOtField, t, x):
    return field(t, x)


def denoise(field: VelocityField, t, x) -> np.ndarray:
    """Flow denoiser ``D_t(x) = x + (1 - t) v_t(x)``."""
    x = np.asarray(x, dtype=np.float64)
    t_arr = _check_t(t)
    v = field(t, x)
    if t_arr.ndim:
        t_arr = t_arr.reshape((-1,) + (1,) * (x.ndim - 1))
    return x + (1 - t_arr) * v


def euler_sample(field: VelocityField, x0, n_steps: int) -> np.ndarray:
    """Integrate the flow ODE from t=0 to t=1 with ``n_steps`` uniform Euler steps."""
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * field(k * dt, x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at Euler step {k}", step=k)
    return x


# --------------------------------------------------------------------------
# Monte-Carlo instruments
# --------------------------------------------------------------------------


def coupled_pairs(latent: LatentSpec, target: TargetSpec, coupling: str, n: int,
                  rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` pairs ``(x0, x1)`` from the requested coupling."""
    if coupling == INDEPENDENT:
        x0 = sample_latent(latent, n, rng.fork(0))
        x1 = sample_target(target, n, rng.fork(1))
        if x0.shape[1] != x1.shape[1]:
            raise ShapeError("latent and target dimensions differ")
        return x0, x1
    if coupling == GAUSSIAN_OT:
        if not (isinstance(latent, IsotropicGaussianLatent)
                and isinstance(target, IsotropicGaussianTarget)):
            raise ValueError("Gaussian OT coupling needs isotropic Gaussian latent and target")
        if latent.dim != target.dim:
            raise ShapeError("latent and target dimensions differ")
        x0 = sample_latent(latent, n, rng.fork(0))
        return x0, target.mean + target.scale * x0
    raise ValueError(f"unknown coupling {coupling!r}")


def denoising_loss_mc(field: VelocityField, latent: LatentSpec, target: TargetSpec,
                      coupling: str, t: float, n_samples: int, rng: RngState) -> float:
    """Monte-Carlo estimate of ``E ||D_t(X_t) - X_1||^2``."""
    x0, x1 = coupled_pairs(latent, target, coupling, n_samples, rng)
    xt = interp_et(x0, x1, t)
    resid = denoise(field, t, xt) - x1
    return float(np.mean(np.sum(resid**2, axis=1)))


def fm_gap(field_a: VelocityField, field_b: VelocityField, latent: LatentSpec,
           target: TargetSpec, coupling: str, t: float, n_samples: int,
           rng: RngState) -> float:
    """Monte-Carlo estimate of ``E_{x ~ P_t} ||a_t(x) - b_t(x)||^2``."""
    if field_a.dim != field_b.dim:
        raise ShapeError(f"field dimensions differ: {field_a.dim} vs {field_b.dim}")
    x0, x1 = coupled_pairs(latent, target, coupling, n_samples, rng)
    xt = interp_et(x0, x1, t)
    diff = field_a(t, xt) - field_b(t, xt)
    return float(np.mean(np.sum(diff**2, axis=1)))


# --------------------------------------------------------------------------
# Quadrature oracle (1-D, standard normal latent, independent coupling)
# --------------------------------------------------------------------------


def conditional_mean_quadrature(weights, means, scales, t: float, x: float,
                                n_nodes: int = 256) -> float:
    """``E[X1 | Xt = x]`` for X0 ~ N(0, 1) independent of a 1-D mixture X1.

    Gauss-Hermite integration against whichever prior is wider relative to
    the other factor: over x0 (weight N(0, 1)) when late in time, over each
    mixture component's x1 otherwise. No sampling noise.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    mu = np.asarray(means, dtype=np.float64).reshape(-1)
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    if t == 0:
        return float(np.sum(w * mu))
    if t == 1:
        return float(x)
    nodes, gh_w = np.polynomial.hermite_e.hermegauss(n_nodes)
    log_gh = np.log(gh_w)
    if t * s.min() >= (1 - t):
        # integrate over x0 ~ N(0,1); x1 is pinned by the line constraint
        x1 = (x - (1 - t) * nodes) / t
        comp = (np.log(w)[:, None] - np.log(s)[:, None]
                - 0.5 * ((x1[None] - mu[:, None]) / s[:, None]) ** 2)
        logf = logsumexp(comp, axis=0) + log_gh
        p = np.exp(logf - logsumexp(logf))
        return float(np.sum(p * x1))
    # integrate over x1 = mu_k + s_k * xi per component; x0 is pinned
    x1 = mu[:, None] + s[:, None] * nodes[None]
    x0 = (x - t * x1) / (1 - t)
    logf = np.log(w)[:, None] + log_gh[None] - 0.5 * x0**2
    p = np.exp(logf - logsumexp(logf))
    return float(np.sum(p * x1))


def gaussian_conditional_variance(scale: float, t: float) -> float:
    """Per-coordinate ``Var(X1 - X0 | Xt)`` for N(0,1) -> N(m, s^2) independent."""
    s2 = scale**2
    a2 = (1 - t) ** 2 + t**2 * s2
    return (1 + s2) - (t * s2 - (1 - t)) ** 2 / a2
