"""Flow-denoiser splitting iterations, their ablations and convergence diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .domain import DomainError, LatentSpec, RngState, sample_latent
from .flows import NonFiniteError, VelocityField, denoise
from .inverse import ConvBlur, Fidelity, GaussianL2, project_simplex
from .training import AdamState, adam_step

DIVERGENCE_BOUND = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class UniformSchedule:
    """``t_n = n / N`` for ``n = 0..N-1``, optionally followed by ``t = 1``."""

    n_steps: int = 100
    include_endpoint: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")

    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps) / self.n_steps
        return np.append(t, 1.0) if self.include_endpoint else t


@dataclass(frozen=True)
class GeometricSchedule:
    """``t_n = 1 - q^n``; the gaps ``1 - t_n`` are summable."""

    q: float = 0.9
    n_max: int = 200

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise DomainError("q must lie in (0, 1)")
        if self.n_max < 1:
            raise DomainError("n_max must be >= 1")

    def times(self) -> np.ndarray:
        return 1.0 - self.q ** np.arange(self.n_max)


Schedule = Union[UniformSchedule, GeometricSchedule]


@dataclass
class SolveConfig:
    schedule: Schedule = field(default_factory=UniformSchedule)
    alpha: float = 0.5
    n_avg: int = 5
    seed: int = 0
    gamma: Optional[float] = None  # constant step size overriding (1 - t)^alpha
    init: Union[str, np.ndarray] = "adjoint"
    clip_noise: Optional[float] = None

    def validate(self):
        if not 0 < self.alpha <= 1:
            raise DomainError("alpha must lie in (0, 1]")
        if self.n_avg < 1:
            raise DomainError("n_avg must be >= 1")
        if self.gamma is not None and self.gamma < 0:
            raise DomainError("gamma must be >= 0")


def lr_schedule(t: float, alpha: float) -> float:
    """Step size ``(1 - t)^alpha``."""
    if not 0 < alpha <= 1:
        raise DomainError("alpha must lie in (0, 1]")
    return (1.0 - t) ** alpha


def _guard(x: np.ndarray, step: Optional[int]):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite iterate at step {step}", step=step)
    if np.max(np.abs(x), initial=0.0) > DIVERGENCE_BOUND:
        raise DivergenceError(f"iterate left the ball of radius {DIVERGENCE_BOUND:g} "
                              f"at step {step}", step=step)


def pnp_flow_step(x, t: float, gamma: float, fid: Fidelity, field: VelocityField,
                  latent: LatentSpec, n_avg: int, rng: RngState,
                  clip_noise: Optional[float] = None, record: Optional[dict] = None,
                  step: Optional[int] = None) -> np.ndarray:
    """Gradient step, interpolation towards fresh latent noise, flow denoising.

    The denoised probes are averaged over ``n_avg`` draws, draw ``k`` coming
    from ``rng.fork(k)``. When ``record`` is given it receives ``z`` and the
    list of probes.
    """
    if n_avg < 1:
        raise DomainError("n_avg must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    z = fid.gradient_step(x, gamma)
    n_vec = z.size // latent.dim
    if n_vec * latent.dim != z.size:
        raise DomainError("iterate size is not a multiple of the latent dimension")
    probes = []
    first = None
    acc = np.zeros_like(z)
    for k in range(n_avg):
        eps = sample_latent(latent, n_vec, rng.fork(k)).reshape(z.shape)
        if clip_noise is not None:
            eps = np.clip(eps, -clip_noise, clip_noise)
        probe = (1 - t) * eps + t * z
        probes.append(probe)
        d = denoise(field, t, probe)
        if first is None:
            first = d
        else:
            acc += d - first
    # centred accumulation: identical draws average back to themselves exactly
    out = first + acc / n_avg
    if record is not None:
        record["z"] = z
        record["probes"] = probes
    _guard(out, step)
    return out


@dataclass
class SolveTrace:
    t: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.step_norm)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "t", "gamma", "step_norm", "psnr"])
            for n in range(len(self)):
                p = self.psnr[n] if self.psnr else ""
                w.writerow([n, repr(self.t[n]), repr(self.gamma[n]),
                            repr(self.step_norm[n]), "" if p == "" else repr(p)])


def initial_iterate(config: SolveConfig, fid: Fidelity) -> np.ndarray:
    if isinstance(config.init, np.ndarray):
        return np.array(config.init, dtype=np.float64)
    if config.init == "adjoint":
        return fid.op.adjoint(fid.y)
    if config.init == "zeros":
        return np.zeros_like(fid.op.adjoint(fid.y))
    raise DomainError(f"unknown init {config.init!r}")


def pnp_flow_solve(config: SolveConfig, fid: Fidelity, field: VelocityField,
                   latent: LatentSpec, truth: Optional[np.ndarray] = None,
                   ) -> tuple[np.ndarray, SolveTrace]:
    """Run the plug-and-play flow iteration over the configured time grid."""
    from .metrics import psnr

    config.validate()
    rng = RngState(config.seed)
    x = initial_iterate(config, fid)
    trace = SolveTrace()
    for n, t in enumerate(config.schedule.times()):
        t = float(t)
        gamma = config.gamma if config.gamma is not None else lr_schedule(t, config.alpha)
        x_new = pnp_flow_step(x, t, gamma, fid, field, latent, config.n_avg, rng.fork(n),
                              clip_noise=config.clip_noise, step=n)
        trace.t.append(t)
        trace.gamma.append(gamma)
        trace.step_norm.append(float(np.linalg.norm(x_new - x)))
        if truth is not None:
            trace.psnr.append(psnr(x_new, truth))
        x = x_new
    return x, trace


def pnp_fbs_solve(fid: Fidelity, field: VelocityField, fixed_t: float, n_iters: int,
                  gamma: float, x_init: Optional[np.ndarray] = None) -> np.ndarray:
    """Plug-and-play forward-backward splitting with the fixed-time denoiser.

    With a zero field this is plain gradient descent on the fidelity.
    """
    if not 0 <= fixed_t <= 1:
        raise DomainError("fixed_t must lie in [0, 1]")
    x = fid.op.adjoint(fid.y) if x_init is None else np.array(x_init, dtype=np.float64)
    for r in range(n_iters):
        x = denoise(field, fixed_t, fid.gradient_step(x, gamma))
        _guard(x, r)
    return x


# --------------------------------------------------------------------------
# Blind deconvolution
# --------------------------------------------------------------------------


def delta_kernel(size: int) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def kernel_residual_grad(kernel: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Value and kernel gradient of ``||y - k * x||^2`` (circular convolution)."""
    op = ConvBlur(kernel)
    r = op.apply(x) - y
    c0, c1 = kernel.shape[0] // 2, kernel.shape[1] // 2
    grad = np.empty_like(kernel)
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            shifted = np.roll(x, (a - c0, b - c1), axis=(-2, -1))
            grad[a, b] = 2.0 * np.sum(r * shifted)
    return float(np.sum(r**2)), grad


@dataclass
class BlindResult:
    x: np.ndarray
    kernel: np.ndarray
    residuals: list  # ||y - H_k x|| after each kernel update
    initial_residual: float  # first image iterate against the delta kernel
    kernel_sums: list
    kernel_mins: list


def blind_deblur_solve(y, field: VelocityField, latent: LatentSpec, config: SolveConfig,
                       kernel_size: int, kernel_lr: float = 1e-2,
                       kernel_init: Optional[np.ndarray] = None) -> BlindResult:
    """Alternate plug-and-play flow image steps with Adam steps on the blur kernel.

    After each Adam update the kernel is projected back onto the simplex.
    """
    if kernel_size % 2 == 0:
        raise DomainError("kernel_size must be odd")
    y = np.asarray(y, dtype=np.float64)
    if min(y.shape[-2:]) < kernel_size:
        raise DomainError("image smaller than the kernel")
    config.validate()
    rng = RngState(config.seed)
    kernel = delta_kernel(kernel_size) if kernel_init is None else project_simplex(kernel_init)
    adam = AdamState(lr=kernel_lr)
    fid = GaussianL2(ConvBlur(kernel), y)
    x = initial_iterate(config, fid)
    residuals, sums, mins = [], [], []
    initial_residual = None
    for n, t in enumerate(config.schedule.times()):
        t = float(t)
        gamma = config.gamma if config.gamma is not None else lr_schedule(t, config.alpha)
        fid = GaussianL2(ConvBlur(kernel), y)
        x = pnp_flow_step(x, t, gamma, fid, field, latent, config.n_avg, rng.fork(n),
                          clip_noise=config.clip_noise, step=n)
        if initial_residual is None:
            initial_residual = math.sqrt(kernel_residual_grad(kernel, x, y)[0])
        _, grad = kernel_residual_grad(kernel, x, y)
        (kernel,), adam = adam_step(adam, [kernel], [grad])
        kernel = project_simplex(kernel)
        sums.append(float(kernel.sum()))
        mins.append(float(kernel.min()))
        residuals.append(math.sqrt(kernel_residual_grad(kernel, x, y)[0]))
    return BlindResult(x, kernel, residuals, initial_residual, sums, mins)


# --------------------------------------------------------------------------
# Convergence diagnostics
# --------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    total_variation: float  # sum_n ||x_{n+1} - x_n||
    ratios: np.ndarray  # ||x_{n+1} - x_n|| / (1 - t_n)
    bound: float  # M = max ratio
    bounded: bool
    gap_sum: float  # sum_n (1 - t_n)
    partial_sums: np.ndarray = field(repr=False)

    def tail(self, start: int) -> float:
        return float(self.total_variation - (self.partial_sums[start - 1] if start else 0.0))


def convergence_report(trace: SolveTrace, schedule: Optional[Schedule] = None) -> ConvergenceReport:
    """Summarise ``||dx_n||`` against the gaps ``1 - t_n`` of the time grid."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    steps = np.asarray(trace.step_norm, dtype=np.float64)
    t = np.asarray(trace.t if schedule is None else schedule.times()[:len(trace)])
    gaps = 1.0 - t
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(gaps > 0, steps / np.where(gaps > 0, gaps, 1.0),
                          np.where(steps > 0, np.inf, 0.0))
    bound = float(ratios.max())
    partial = np.cumsum(steps)
    return ConvergenceReport(float(partial[-1]), ratios, bound, bool(np.isfinite(bound)),
                             float(gaps.sum()), partial)
