import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import FixedNoise, kalman, matched_ensemble
from vfpda.densities import Gaussian, GaussianError, ObservationModel, fit
from vfpda.flow import (DiffusionSpec, DriftContext, FlowConfig, StepRejected, coulomb_force,
                        coulomb_forces, diffusion_apply, diffusion_factor,
                        flow_to_steady_state, optimal_drift, posterior_grad_log, rem_step)


def scalar_problem(P=1.0, R=1.0, y=2.0, m=0.0):
    prior = Gaussian(np.array([m]), np.array([[P]]), jitter_scale=0.0)
    obs = ObservationModel.identity(1, GaussianError([[R]]), np.array([y]))
    return prior, obs


def test_posterior_gradient_cases(rng):
    prior, obs = scalar_problem()
    ctx = DriftContext(prior, obs, np.zeros((1, 2)))
    assert posterior_grad_log(ctx, np.array([1.0]))[0] == pytest.approx(0.0, abs=1e-14)
    prior, weak = scalar_problem(R=1e12)
    ctx = DriftContext(prior, weak, np.zeros((1, 2)))
    x = rng.standard_normal((1, 10))
    assert np.allclose(posterior_grad_log(ctx, x), prior.grad_log(x), atol=1e-9)
    # affine in x for the Gaussian pair
    prior, obs = scalar_problem(P=2.0, R=0.5)
    ctx = DriftContext(prior, obs, np.zeros((1, 2)))
    a, b = np.array([0.3]), np.array([-1.7])
    g0 = posterior_grad_log(ctx, np.zeros(1))
    lhs = posterior_grad_log(ctx, a + b) - g0
    rhs = (posterior_grad_log(ctx, a) - g0) + (posterior_grad_log(ctx, b) - g0)
    assert np.allclose(lhs, rhs, atol=1e-14)


def _conjugate_3d(rng):
    A = rng.standard_normal((3, 3))
    Pb = A @ A.T + np.eye(3)
    mb = rng.standard_normal(3)
    H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    R = np.diag([0.5, 2.0])
    y = rng.standard_normal(2)
    return mb, Pb, H, R, y


def test_drift_vanishes_at_exact_posterior(rng):
    mb, Pb, H, R, y = _conjugate_3d(rng)
    ma, Pa = kalman(mb, Pb, H, R, y)
    prior = Gaussian(mb, Pb, jitter_scale=0.0)
    obs = ObservationModel.linear(H, GaussianError(R), y)
    ctx = DriftContext(prior, obs, np.zeros((3, 4)))
    ctx.current = Gaussian(ma, Pa, jitter_scale=0.0)
    X = ma[:, None] + 3 * rng.standard_normal((3, 200))
    F = optimal_drift(ctx, X, FlowConfig())
    assert np.abs(F).max() < 1e-8


def test_drift_unit_diffusion_keeps_posterior_only(rng):
    prior, obs = scalar_problem()
    ctx = DriftContext(prior, obs, np.zeros((1, 2)))
    ctx.current = Gaussian(np.array([5.0]), np.array([[0.1]]))
    # alpha * factor = sqrt(2) gives D = 1
    cfg = FlowConfig(diffusion=DiffusionSpec("climatological", 1.0, np.array([[np.sqrt(2.0)]])))
    x = rng.standard_normal((1, 7))
    assert np.allclose(optimal_drift(ctx, x, cfg), ctx.posterior_grad(x), atol=1e-14)


def test_langevin_drift_value_and_independence_of_q():
    prior = Gaussian(np.zeros(1), np.eye(1), jitter_scale=0.0)
    ctx = DriftContext(prior, None, np.zeros((1, 2)))
    cfg = FlowConfig(metric="langevin", diffusion=DiffusionSpec("climatological", 2.0, np.eye(1)))
    assert optimal_drift(ctx, np.array([3.0]), cfg)[0] == pytest.approx(-6.0)
    X = np.array([[3.0, -1.0, 0.5]])
    ctx.current = Gaussian(np.array([9.0]), np.array([[0.01]]))
    a = optimal_drift(ctx, X, cfg)
    ctx.current = Gaussian(np.array([-4.0]), np.array([[50.0]]))
    assert np.array_equal(a, optimal_drift(ctx, X, cfg))
    assert np.array_equal(a, ctx.drift(X, cfg))


def test_coulomb_cases():
    X = np.array([[0.0, 1.0]])
    assert np.allclose(coulomb_forces(X, 0.0), 0.0)
    assert coulomb_force(0, X, 2.0)[0] == pytest.approx(-1.0)
    assert coulomb_force(1, X, 2.0)[0] == pytest.approx(1.0)
    # coincident particles stay finite
    F = coulomb_forces(np.zeros((2, 3)), 1.0)
    assert np.all(np.isfinite(F))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
              elements=st.floats(-10, 10)).filter(
                  lambda X: np.unique(np.round(X, 3), axis=1).shape[1] == X.shape[1]),
       st.floats(0.0, 5.0))
def test_coulomb_forces_cancel(X, beta):
    F = coulomb_forces(X, beta)
    scale = np.abs(F).max() + 1.0
    assert np.allclose(F.sum(axis=1), 0.0, atol=1e-10 * scale)


def test_coulomb_loop_oracle(rng):
    X = rng.standard_normal((3, 6))
    beta = 0.7
    ref = np.zeros_like(X)
    for e in range(6):
        for i in range(6):
            if i != e:
                d = X[:, e] - X[:, i]
                ref[:, e] += beta / 6 * d / np.linalg.norm(d) ** 3
    assert np.allclose(coulomb_forces(X, beta), ref, atol=1e-12)


def test_diffusion_moments(rng):
    Ab_ens = rng.standard_normal((3, 6))
    spec = DiffusionSpec("background", 0.3)
    sigma = diffusion_factor(spec, Ab_ens)
    assert sigma.shape == (3, 6)
    xi = rng.standard_normal((6, 100000))
    samples = diffusion_apply(sigma, xi)
    A = (Ab_ens - Ab_ens.mean(axis=1, keepdims=True)) / np.sqrt(5)
    target = 0.09 * A @ A.T
    assert np.linalg.norm(np.cov(samples) - target) / np.linalg.norm(target) < 0.05
    assert diffusion_factor(DiffusionSpec("background", 0.0), Ab_ens) is None
    assert np.all(diffusion_apply(None, xi[:, :3]) == 0.0)


class LinearContext:
    """Drift ``F = c x`` with exact Jacobian ``c``; no diffusion."""

    def __init__(self, c):
        self.c = c

    def drift(self, X, cfg):
        return self.c * X

    def implicit_solve(self, X, F, dt, cfg):
        return F / (1.0 - dt * self.c)

    def noise_shape(self, X, cfg):
        return None


def test_rem_step_closed_forms():
    X = np.array([[1.5, -2.0]])
    assert np.array_equal(rem_step(X, LinearContext(0.0), FlowConfig(), 0.3), X)
    dt = 0.25
    out = rem_step(X, LinearContext(-1.0), FlowConfig(), dt)
    assert np.allclose(out, X * (1 - dt / (1 + dt)))
    # with J = 0 and no noise the step is explicit Euler
    class NoJacobian(LinearContext):
        def implicit_solve(self, X, F, dt, cfg):
            return F
    out = rem_step(X, NoJacobian(-1.0), FlowConfig(), dt)
    assert np.allclose(out, X * (1 - dt))


def test_rem_step_gaussian_block_closed_form():
    prior, obs = scalar_problem(P=1.0, R=1.0, y=0.0)
    X = np.array([[2.0]])
    ctx = DriftContext(prior, obs, X)
    cfg = FlowConfig(metric="langevin", diffusion=DiffusionSpec("climatological", 1.0, np.array([[np.sqrt(2)]])))
    # drift -2x, noise sqrt(dt)*sqrt(2)*xi, J = -2
    out = rem_step(X, ctx, cfg, 0.5, FixedNoise([0.3]))
    assert out[0, 0] == pytest.approx(2.0 + 0.5 * (-4.0) / 2.0 + np.sqrt(0.5) * np.sqrt(2) * 0.3)


def test_rejected_step_is_reported():
    class Bad(LinearContext):
        def drift(self, X, cfg):
            return np.full_like(X, np.nan)
    with pytest.raises(StepRejected):
        rem_step(np.ones((1, 2)), Bad(0.0), FlowConfig(), 0.1)
    res = flow_to_steady_state(np.ones((1, 2)), Bad(0.0), FlowConfig(max_rejections=3))
    assert not res.converged and res.rejections == 4


def _strong_error_slope(paths, seed=0):
    rng = np.random.default_rng(seed)
    T, fine = 1.0, 2 ** 12
    levels = np.array([4, 5, 6, 7, 8])
    errs = np.zeros(len(levels))

    def run(ctx, cfg, X0, dW, dt):
        X = X0.copy()
        for k in range(dW.shape[0]):
            X = rem_step(X, ctx, cfg, dt, FixedNoise(dW[k] / np.sqrt(dt)))
        return X

    for _ in range(paths):
        N = 8
        X0 = 3 + 2 * rng.standard_normal((1, N))
        ctx = DriftContext(Gaussian(np.zeros(1), np.eye(1)), None, X0)
        cfg = FlowConfig(diffusion=DiffusionSpec("current", 1.0))
        dWf = rng.standard_normal((fine, N, N)) * np.sqrt(T / fine)
        ref = run(ctx, cfg, X0, dWf, T / fine)
        for i, lev in enumerate(levels):
            n = 2 ** int(lev)
            dW = dWf.reshape(n, fine // n, N, N).sum(axis=1)
            errs[i] += np.sqrt(np.mean((run(ctx, cfg, X0, dW, T / n) - ref) ** 2))
    return np.polyfit(np.log(2.0 ** -levels), np.log(errs / paths), 1)[0]


def test_rem_strong_order_ensemble_ou():
    # Ornstein-Uhlenbeck flow toward N(0, 1) whose diffusion follows the
    # current anomalies, so the noise is state dependent
    slope = _strong_error_slope(paths=20, seed=7)
    assert 0.35 <= slope <= 0.75


def test_fixed_point_terminates_immediately(rng):
    mb, Pb, H, R, y = _conjugate_3d(rng)
    Xb = matched_ensemble(rng, mb, Pb, 200)
    prior = fit("gaussian", Xb)
    ma, Pa = kalman(prior.center, prior.covariance, H, R, y)
    X0 = matched_ensemble(rng, ma, Pa, 200)
    obs = ObservationModel.linear(H, GaussianError(R), y)
    res = flow_to_steady_state(X0, DriftContext(prior, obs, Xb), FlowConfig())
    assert res.converged and res.steps <= 2
    assert np.abs(res.ensemble - X0).max() < 1e-6


@pytest.mark.parametrize("solver", ["block", "gmres"])
def test_scalar_conjugate_flow(solver, rng):
    P, R, y = 2.0, 1.0, 1.5
    Xb = 0.5 + np.sqrt(P) * rng.standard_normal((1, 1000))
    if solver == "gmres":
        Xb = Xb[:, :200]
    N = Xb.shape[1]
    prior, obs = fit("gaussian", Xb), ObservationModel.identity(1, GaussianError([[R]]), [y])
    ma, Pa = kalman(0.5, P, 1.0, R, y)
    res = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), FlowConfig(solver=solver))
    assert res.converged
    assert abs(res.ensemble.mean() - ma[0]) < 3 * np.sqrt(Pa[0, 0] / N)
    assert abs(res.ensemble.var(ddof=1) / Pa[0, 0] - 1) < 0.15


def test_full_jacobian_option_reaches_same_analysis(rng):
    Xb = rng.standard_normal((2, 300))
    prior = fit("gaussian", Xb)
    obs = ObservationModel.identity(2, GaussianError(np.eye(2)), np.array([1.0, -1.0]))
    a = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), FlowConfig(eps=1e-4))
    b = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb),
                             FlowConfig(eps=1e-4, jacobian="full", dt_max=0.5))
    assert np.allclose(a.ensemble.mean(axis=1), b.ensemble.mean(axis=1), atol=1e-2)


def test_huge_tolerance_stops_after_one_step(rng):
    Xb = rng.standard_normal((1, 50))
    prior, obs = fit("gaussian", Xb), ObservationModel.identity(1, GaussianError([[1.0]]), [3.0])
    res = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), FlowConfig(eps=1e9))
    assert res.steps == 1 and res.converged


def test_flow_is_deterministic(rng):
    Xb = rng.standard_normal((3, 20))
    prior = fit("gaussian", Xb)
    obs = ObservationModel.identity(3, GaussianError(np.eye(3)), np.ones(3))
    cfg = FlowConfig(diffusion=DiffusionSpec("background", 0.1), beta=0.01, seed=5, max_steps=30)
    a = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), cfg, cycle=3)
    b = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), cfg, cycle=3)
    assert np.array_equal(a.ensemble, b.ensemble)
    c = flow_to_steady_state(Xb, DriftContext(prior, obs, Xb), cfg, cycle=4)
    assert not np.array_equal(a.ensemble, c.ensemble)


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(metric="stein")
    with pytest.raises(ValueError):
        FlowConfig(beta=-1.0)
    with pytest.raises(ValueError):
        DiffusionSpec("background", -0.1)
    with pytest.raises(ValueError):
        FlowConfig(metric="langevin")
