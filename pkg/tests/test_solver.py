import numpy as np
import pytest
from scipy import ndimage

from pnpflow.domain import DomainError, IsotropicGaussianLatent, RngState
from pnpflow.flows import GaussIndepField, GaussOtField, GmmIndepField, ZeroField, denoise
from pnpflow.inverse import ConvBlur, GaussianL2, Identity, MaskBox, gaussian_kernel
from pnpflow.solver import (
    GeometricSchedule,
    SolveConfig,
    SolveTrace,
    UniformSchedule,
    blind_deblur_solve,
    convergence_report,
    delta_kernel,
    kernel_residual_grad,
    lr_schedule,
    pnp_fbs_solve,
    pnp_flow_solve,
    pnp_flow_step,
)

M = np.array([7.0, 7.0])
LAT2 = IsotropicGaussianLatent(2)


def test_lr_schedule():
    assert lr_schedule(0.0, 0.5) == 1.0
    assert lr_schedule(1.0, 0.3) == 0.0
    assert lr_schedule(0.75, 0.5) == pytest.approx(0.5)
    assert lr_schedule(0.75, 1.0) == pytest.approx(0.25)
    with pytest.raises(DomainError):
        lr_schedule(0.5, 0.0)
    with pytest.raises(DomainError):
        lr_schedule(0.5, 1.5)


def test_schedules():
    np.testing.assert_allclose(UniformSchedule(4).times(), [0, 0.25, 0.5, 0.75])
    np.testing.assert_allclose(UniformSchedule(4, include_endpoint=True).times(),
                               [0, 0.25, 0.5, 0.75, 1.0])
    g = GeometricSchedule(0.5, 4).times()
    np.testing.assert_allclose(g, [0, 0.5, 0.75, 0.875])
    assert np.all(np.diff(GeometricSchedule(0.9, 200).times()) > 0)


def test_step_zero_field_returns_z():
    y = np.array([[1.0, 2.0]])
    fid = GaussianL2(Identity(), y)
    x = np.array([[3.0, -1.0]])
    # zero velocity: D_t is the identity on the probe
    for t in (0.0, 0.4):
        out = pnp_flow_step(x, t, 0.5, fid, ZeroField(2), LAT2, 3, RngState(0))
        rec = {}
        pnp_flow_step(x, t, 0.5, fid, ZeroField(2), LAT2, 3, RngState(0), record=rec)
        np.testing.assert_allclose(rec["z"], [[2.0, 0.5]])
        np.testing.assert_allclose(out, np.mean(rec["probes"], axis=0), atol=1e-14)


def test_step_at_time_zero_returns_mean_for_gaussian_field():
    fid = GaussianL2(Identity(), np.zeros((5, 2)))
    x = RngState(1).normal((5, 2))
    out = pnp_flow_step(x, 0.0, 1.0, fid, GaussIndepField(M, 0.5), LAT2, 1, RngState(2))
    np.testing.assert_allclose(out, np.tile(M, (5, 1)), atol=1e-12)


def test_probe_follows_interpolation_law_bitwise():
    fid = GaussianL2(Identity(), RngState(3).normal((4, 2)))
    x = RngState(4).normal((4, 2))
    rng = RngState(5)
    t = 0.37
    rec = {}
    pnp_flow_step(x, t, 0.6, fid, GaussOtField(M, 0.5), LAT2, 3, rng, record=rec)
    for k, probe in enumerate(rec["probes"]):
        eps = rng.fork(k).normal((4, 2))
        assert np.array_equal(probe, (1 - t) * eps + t * rec["z"])


def test_step_average_and_draw_order():
    fid = GaussianL2(Identity(), np.ones((3, 2)))
    x = np.zeros((3, 2))
    field = GmmIndepField([0.5, 0.5], [[0.0, 0.0], [4.0, 4.0]], [0.5, 0.5])
    rng = RngState(6)
    avg = pnp_flow_step(x, 0.5, 0.5, fid, field, LAT2, 4, rng)
    rec = {}
    pnp_flow_step(x, 0.5, 0.5, fid, field, LAT2, 4, rng, record=rec)
    singles = [denoise(field, 0.5, p) for p in rec["probes"]]
    np.testing.assert_allclose(avg, np.mean(singles, axis=0), atol=1e-13)


def test_step_rejects_bad_inputs():
    fid = GaussianL2(Identity(), np.zeros(3))
    with pytest.raises(DomainError):
        pnp_flow_step(np.zeros(3), 0.5, 1.0, fid, ZeroField(2), LAT2, 1, RngState(0))
    with pytest.raises(DomainError):
        pnp_flow_step(np.zeros(4), 0.5, 1.0, GaussianL2(Identity(), np.zeros(4)), ZeroField(2),
                      LAT2, 0, RngState(0))


def test_solve_is_deterministic():
    y = RngState(7).normal((20, 2)) + 7
    fid = GaussianL2(Identity(), y)
    cfg = SolveConfig(UniformSchedule(20), alpha=0.5, n_avg=3, seed=4)
    a, ta = pnp_flow_solve(cfg, fid, GaussIndepField(M, 0.5), LAT2)
    b, tb = pnp_flow_solve(cfg, fid, GaussIndepField(M, 0.5), LAT2)
    assert a.tobytes() == b.tobytes()
    assert ta.step_norm == tb.step_norm
    c, _ = pnp_flow_solve(SolveConfig(UniformSchedule(20), n_avg=3, seed=5), fid,
                          GaussIndepField(M, 0.5), LAT2)
    assert a.tobytes() != c.tobytes()


def test_unit_gamma_on_identity_returns_observation():
    y = RngState(8).normal((30, 2)) + 7
    cfg = SolveConfig(UniformSchedule(10, include_endpoint=True), gamma=1.0, n_avg=5)
    x, _ = pnp_flow_solve(cfg, GaussianL2(Identity(), y), GaussOtField(M, 0.5), LAT2)
    assert np.array_equal(x, y)


def test_final_step_at_t1_is_gradient_step_only():
    y = RngState(9).normal((6, 2))
    fid = GaussianL2(Identity(), y)
    x = RngState(10).normal((6, 2))
    rec = {}
    out = pnp_flow_step(x, 1.0, 0.3, fid, GaussIndepField(M, 0.5), LAT2, 5, RngState(11),
                        record=rec)
    assert np.array_equal(out, rec["z"])
    assert np.array_equal(rec["z"], fid.gradient_step(x, 0.3))


def test_fbs_with_zero_field_is_least_squares():
    rng = RngState(12)
    a = rng.fork(0).normal((4, 4)) + 3 * np.eye(4)

    class Dense:
        def apply(self, x):
            return a @ x

        def adjoint(self, u):
            return a.T @ u

        def output_shape(self, shape):
            return shape

    y = rng.fork(1).normal(4)
    fid = GaussianL2(Dense(), y)
    step = 1.0 / np.linalg.norm(a, 2) ** 2
    x = pnp_fbs_solve(fid, ZeroField(4), 0.5, 5000, step)
    np.testing.assert_allclose(x, np.linalg.solve(a, y), atol=1e-8)


def test_fbs_fixed_time_cases():
    y = np.array([[9.0, 5.0]])
    fid = GaussianL2(Identity(), y)
    f = GaussIndepField(M, 0.5)
    # t=1: denoiser is the identity, one unit step lands on y
    np.testing.assert_allclose(pnp_fbs_solve(fid, f, 1.0, 1, 1.0), y)
    # t=0: denoiser returns the target mean whatever the input
    np.testing.assert_allclose(pnp_fbs_solve(fid, f, 0.0, 3, 0.5), [[7.0, 7.0]], atol=1e-12)
    with pytest.raises(DomainError):
        pnp_fbs_solve(fid, f, 1.5, 1, 1.0)


def test_variance_reduction_with_more_draws():
    y = np.array([[8.0, 6.0]])
    fid = GaussianL2(Identity(), y)
    f = GaussIndepField(M, 0.5)

    def spread(k):
        finals = [pnp_flow_solve(SolveConfig(UniformSchedule(30), n_avg=k, seed=s), fid, f,
                                 LAT2)[0].ravel() for s in range(50)]
        return np.var(finals, axis=0).sum()

    assert spread(25) < spread(1)


def test_kernel_gradient_finite_differences():
    rng = RngState(13)
    x = rng.fork(0).normal((8, 8))
    y = rng.fork(1).normal((8, 8))
    k = rng.fork(2).uniform((3, 3))
    k /= k.sum()
    _, g = kernel_residual_grad(k, x, y)
    h = 1e-6
    for idx in np.ndindex(k.shape):
        e = np.zeros_like(k)
        e[idx] = h
        lp = np.sum((ndimage.convolve(x, k + e, mode="wrap") - y) ** 2)
        lm = np.sum((ndimage.convolve(x, k - e, mode="wrap") - y) ** 2)
        assert (lp - lm) / (2 * h) == pytest.approx(g[idx], rel=1e-6, abs=1e-8)


def test_blind_deblur_kernel_on_simplex():
    templates = RngState(14).uniform((2, 1, 12, 12), -1, 1)
    field = GmmIndepField([0.5, 0.5], templates.reshape(2, -1), [0.05, 0.05])
    truth = templates[0, 0]
    y = ConvBlur(gaussian_kernel(3, 1.0)).apply(truth)
    lat = IsotropicGaussianLatent(144)
    cfg = SolveConfig(UniformSchedule(30), alpha=0.5, n_avg=1)
    res = blind_deblur_solve(y, field, lat, cfg, 3)
    assert all(abs(s - 1) < 1e-12 for s in res.kernel_sums)
    assert res.kernel.min() >= 0
    assert res.residuals[-1] < res.initial_residual
    with pytest.raises(DomainError):
        blind_deblur_solve(y, field, lat, cfg, 4)


def test_convergence_report_examples():
    tr = SolveTrace(t=[0.0, 0.5, 0.75], gamma=[1, 1, 1], step_norm=[1.0, 0.25, 0.0])
    rep = convergence_report(tr)
    np.testing.assert_allclose(rep.ratios, [1.0, 0.5, 0.0])
    assert rep.bound == 1.0 and rep.bounded
    assert rep.total_variation == 1.25
    assert rep.tail(1) == 0.25
    assert rep.gap_sum == 1.75
    tr1 = SolveTrace(t=[1.0], gamma=[0], step_norm=[0.5])
    assert not convergence_report(tr1).bounded
    with pytest.raises(ValueError):
        convergence_report(SolveTrace())


def test_geometric_schedule_converges_on_observation():
    y = np.array([[8.2, 5.9]])
    cfg = SolveConfig(GeometricSchedule(0.9, 200), alpha=1.0, n_avg=5)
    _, trace = pnp_flow_solve(cfg, GaussianL2(Identity(), y), GaussOtField(M, 0.5), LAT2)
    rep = convergence_report(trace)
    assert rep.bounded
    assert rep.tail(150) < 1e-4


def test_delta_kernel():
    k = delta_kernel(3)
    assert k.sum() == 1.0 and k[1, 1] == 1.0
    x = RngState(15).normal((5, 5))
    np.testing.assert_array_equal(ConvBlur(k).apply(x), x)


def test_masked_problem_solves():
    x = RngState(16).normal((1, 8, 8)) * 0.1
    op = MaskBox.centered((8, 8), 3)
    y = op.apply(x)
    f = GaussIndepField(np.zeros(64), 0.1)
    out, _ = pnp_flow_solve(SolveConfig(UniformSchedule(20)), GaussianL2(op, y), f,
                            IsotropicGaussianLatent(64))
    assert out.shape == x.shape and np.all(np.isfinite(out))
