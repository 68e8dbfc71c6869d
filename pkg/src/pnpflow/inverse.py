"""Linear degradation operators, noise models and data-fidelity terms.

Image operators act on the last two axes, so ``(H, W)`` and ``(C, H, W)``
grids are both accepted; masks and kernels are shared across channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .domain import DomainError, RngState, ShapeError, as_grid


class Identity:
    kind = "identity"

    def apply(self, x):
        return np.array(x, dtype=np.float64)

    def adjoint(self, u):
        return np.array(u, dtype=np.float64)

    def output_shape(self, shape):
        return tuple(shape)


class _Mask:
    mask: np.ndarray

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.mask.shape:
            raise ShapeError(f"mask of shape {self.mask.shape} cannot act on {x.shape}")
        return x

    def apply(self, x):
        return self._check(x) * self.mask

    def adjoint(self, u):
        return self.apply(u)

    def output_shape(self, shape):
        return tuple(shape)


class MaskRandom(_Mask):
    """Drops each pixel independently with probability ``rate``."""

    kind = "mask_random"

    def __init__(self, shape, rate: float, seed: int):
        if not 0 <= rate <= 1:
            raise DomainError("mask rate must lie in [0, 1]")
        self.rate = float(rate)
        self.seed = int(seed)
        self.shape = tuple(shape)
        drop = RngState(self.seed).uniform(self.shape) < self.rate
        self.mask = (~drop).astype(np.float64)


class MaskBox(_Mask):
    """Zeros a ``size`` rectangle whose top-left corner is ``origin``."""

    kind = "mask_box"

    def __init__(self, shape, origin, size):
        self.shape = tuple(shape)
        self.origin = tuple(int(o) for o in origin)
        self.size = tuple(int(s) for s in size)
        (r, c), (h, w) = self.origin, self.size
        if r < 0 or c < 0 or r + h > self.shape[0] or c + w > self.shape[1]:
            raise DomainError("box does not fit inside the image")
        self.mask = np.ones(self.shape)
        self.mask[r:r + h, c:c + w] = 0.0

    @classmethod
    def centered(cls, shape, box: int) -> "MaskBox":
        h, w = shape
        return cls(shape, ((h - box) // 2, (w - box) // 2), (box, box))


class ConvBlur:
    """Circular 2-D convolution with a nonnegative kernel summing to one."""

    kind = "conv_blur"

    def __init__(self, kernel):
        k = as_grid(kernel)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise DomainError("blur kernel must be a 2-D grid with odd extents")
        if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-12:
            raise DomainError("blur kernel must be nonnegative and sum to 1")
        self.kernel = k

    def _filter(self, x, fn):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2] < self.kernel.shape[0] or x.shape[-1] < self.kernel.shape[1]:
            raise ShapeError("image smaller than the blur kernel")
        k = self.kernel.reshape((1,) * (x.ndim - 2) + self.kernel.shape)
        return fn(x, k, mode="wrap")

    def apply(self, x):
        return self._filter(x, ndimage.convolve)

    def adjoint(self, u):
        return self._filter(u, ndimage.correlate)

    def output_shape(self, shape):
        return tuple(shape)


class Downsample:
    """Average over non-overlapping ``factor x factor`` blocks."""

    kind = "downsample"

    def __init__(self, factor: int):
        if factor < 1:
            raise DomainError("factor must be >= 1")
        self.factor = int(factor)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        k = self.factor
        h, w = x.shape[-2:]
        if h % k or w % k:
            raise ShapeError(f"factor {k} does not divide image extents {(h, w)}")
        blocks = x.reshape(x.shape[:-2] + (h // k, k, w // k, k))
        return blocks.mean(axis=(-3, -1))

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        k = self.factor
        return np.repeat(np.repeat(u, k, axis=-2), k, axis=-1) / (k * k)

    def output_shape(self, shape):
        return tuple(shape[:-2]) + (shape[-2] // self.factor, shape[-1] // self.factor)


DegradationOp = Union[Identity, MaskRandom, MaskBox, ConvBlur, Downsample]


def op_apply(op: DegradationOp, x) -> np.ndarray:
    return op.apply(x)


def op_adjoint(op: DegradationOp, u) -> np.ndarray:
    return op.adjoint(u)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian sampled at integer offsets, normalised to sum 1."""
    if size < 1 or size % 2 == 0:
        raise DomainError("kernel size must be a positive odd integer")
    if not sigma > 0:
        raise DomainError("kernel sigma must be positive")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


# --------------------------------------------------------------------------
# Noise and degradation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")

    def sample(self, shape, rng: RngState) -> np.ndarray:
        if self.sigma == 0:
            return np.zeros(shape)
        return self.sigma * rng.normal(shape)


@dataclass(frozen=True)
class LaplaceNoise:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError("Laplace scale must be positive")

    def sample(self, shape, rng: RngState) -> np.ndarray:
        return rng.laplace(self.scale, shape)


NoiseModel = Union[GaussianNoise, LaplaceNoise]


def degrade(x, op: DegradationOp, noise: NoiseModel, rng: RngState) -> np.ndarray:
    """Observation ``y = Hx + noise`` with noise on every output coordinate."""
    hx = op.apply(x)
    if isinstance(noise, GaussianNoise) and noise.sigma == 0:
        return hx
    return hx + noise.sample(hx.shape, rng)


# --------------------------------------------------------------------------
# Fidelities
# --------------------------------------------------------------------------


@dataclass
class GaussianL2:
    """``F(x) = ||Hx - y||^2 / 2``, divided by ``sigma^2`` when ``weighted``."""

    op: DegradationOp
    y: np.ndarray = field(repr=False)
    sigma: Optional[float] = None
    weighted: bool = False

    def __post_init__(self):
        self.y = as_grid(self.y)
        if self.weighted and not (self.sigma and self.sigma > 0):
            raise DomainError("sigma-weighted fidelity needs sigma > 0")

    @property
    def _scale(self) -> float:
        return 1.0 / self.sigma**2 if self.weighted else 1.0

    def value(self, x) -> float:
        r = self.op.apply(x) - self.y
        return 0.5 * self._scale * float(np.sum(r**2))

    def grad(self, x) -> np.ndarray:
        g = self.op.adjoint(self.op.apply(x) - self.y)
        return g * self._scale if self.weighted else g

    def gradient_step(self, x, gamma: float) -> np.ndarray:
        """``x - gamma * grad F(x)`` evaluated as ``(x - c H^T H x) + c H^T y``.

        The split form makes the unit step on a projection return ``y`` exactly.
        """
        c = gamma * self._scale
        op = self.op
        return (x - c * op.adjoint(op.apply(x))) + c * op.adjoint(self.y)


@dataclass
class LaplaceL1:
    """``F(x) = ||Hx - y||_1`` with the subgradient convention ``sign(0) = 0``."""

    op: DegradationOp
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.y = as_grid(self.y)

    def value(self, x) -> float:
        return float(np.sum(np.abs(self.op.apply(x) - self.y)))

    def grad(self, x) -> np.ndarray:
        return self.op.adjoint(np.sign(self.op.apply(x) - self.y))

    def gradient_step(self, x, gamma: float) -> np.ndarray:
        return x - gamma * self.grad(x)


Fidelity = Union[GaussianL2, LaplaceL1]


def datafit_grad(fid: Fidelity, x) -> np.ndarray:
    return fid.grad(x)


def map_oracle_gaussian_denoise(y, prior_mean, prior_scale: float, sigma: float) -> np.ndarray:
    """Posterior mean of N(m, s^2 I) observed through identity plus N(0, sigma^2 I)."""
    if not (sigma > 0 and prior_scale > 0):
        raise DomainError("sigma and prior_scale must be positive")
    s2, n2 = prior_scale**2, sigma**2
    return (s2 * np.asarray(y, dtype=np.float64) + n2 * np.asarray(prior_mean)) / (s2 + n2)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a flat vector onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1)
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, flat.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    out = np.maximum(flat - theta, 0.0)
    return (out / out.sum()).reshape(v.shape)
