"""Quick property suites behind ``pnpflow check``."""

from __future__ import annotations

import numpy as np

from .domain import IsotropicGaussianLatent, IsotropicGaussianTarget, RngState
from .flows import (
    GAUSSIAN_OT,
    GaussIndepField,
    GaussOtField,
    GmmIndepField,
    conditional_mean_quadrature,
    denoise,
    denoising_loss_mc,
)
from .inverse import (
    ConvBlur,
    Downsample,
    GaussianL2,
    Identity,
    MaskBox,
    MaskRandom,
    gaussian_kernel,
)
from .solver import GeometricSchedule, SolveConfig, convergence_report, pnp_flow_solve
from .training import MlpParams, MlpSpec, init_params, mlp_forward, mlp_param_grads


def check_straight_flow_loss() -> tuple[bool, str]:
    field = GaussOtField([7.0, 7.0], 0.5)
    latent = IsotropicGaussianLatent(2)
    target = IsotropicGaussianTarget([7.0, 7.0], 0.5)
    worst = max(denoising_loss_mc(field, latent, target, GAUSSIAN_OT, t, 10_000, RngState(i))
                for i, t in enumerate((0.0, 0.25, 0.5, 0.75, 1.0)))
    return worst < 1e-10, f"max denoising loss {worst:.3e}"


def check_conditional_mean() -> tuple[bool, str]:
    w, mu, s = [0.5, 0.5], [-2.0, 2.0], [0.3, 0.3]
    field = GmmIndepField(w, mu, s)
    worst = 0.0
    for t in np.arange(1, 10) / 10:
        for x in np.linspace(-4, 4, 21):
            d = denoise(field, t, np.array([[x]]))[0, 0]
            worst = max(worst, abs(d - conditional_mean_quadrature(w, mu, s, t, x)))
    return worst < 1e-6, f"max |denoiser - quadrature| {worst:.3e}"


def check_adjoints() -> tuple[bool, str]:
    rng = RngState(7)
    ops = [Identity(), MaskRandom((16, 16), 0.7, 1), MaskBox.centered((16, 16), 6),
           ConvBlur(gaussian_kernel(5, 1.0)), Downsample(2), Downsample(4)]
    worst = 0.0
    for j, op in enumerate(ops):
        for i in range(20):
            r = rng.fork(100 * j + i)
            x = r.normal((3, 16, 16))
            u = r.normal(op.output_shape(x.shape))
            lhs, rhs = np.vdot(op.apply(x), u), np.vdot(x, op.adjoint(u))
            worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(u)))
    return worst < 1e-10, f"max relative adjoint mismatch {worst:.3e}"


def check_gradients() -> tuple[bool, str]:
    spec = MlpSpec(2, (8,))
    rng = RngState(3)
    params = init_params(spec, rng.fork(0))
    params.biases = [rng.fork(9 + i).normal(b.shape) * 0.1 for i, b in enumerate(params.biases)]
    t = rng.fork(1).uniform(5)
    x = rng.fork(2).normal((5, 2))
    target = rng.fork(3).normal((5, 2))
    grads, _ = mlp_param_grads(params, spec, t, x, target)

    def loss(p: MlpParams) -> float:
        out, _ = mlp_forward(p, spec, t, x)
        return float(np.sum((out - target) ** 2) / x.shape[0])

    worst = 0.0
    h = 1e-5
    for which in ("weights", "biases"):
        for li, arr in enumerate(getattr(params, which)):
            g = getattr(grads, which)[li]
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss(params)
                arr[idx] = orig - h
                down = loss(params)
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(g[idx] - fd) / (abs(g[idx]) + 1e-8))
    return worst < 1e-4, f"max relative gradient error {worst:.3e}"


def check_convergence() -> tuple[bool, str]:
    field = GaussIndepField([7.0, 7.0], 0.5)
    y = np.array([8.2, 5.9])
    cfg = SolveConfig(schedule=GeometricSchedule(0.9, 200), alpha=1.0, n_avg=1, seed=0)
    _, trace = pnp_flow_solve(cfg, GaussianL2(Identity(), y), field, IsotropicGaussianLatent(2))
    rep = convergence_report(trace)
    tail = rep.tail(150)
    return tail < 1e-4 and rep.bounded, f"tail sum {tail:.3e}, M = {rep.bound:.3f}"


SUITES = {
    "straight-flow-loss": check_straight_flow_loss,
    "conditional-mean": check_conditional_mean,
    "adjoint": check_adjoints,
    "gradient": check_gradients,
    "convergence": check_convergence,
}


def run_checks() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in SUITES.items():
        ok, detail = fn()
        results.append((name, ok, detail))
    return results
