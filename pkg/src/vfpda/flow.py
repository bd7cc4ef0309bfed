"""Particle flow in pseudo-time toward the analysis density.

Particles follow ``dx = F(x) dtau + sigma dW`` where ``F`` is the optimal
drift for the chosen metric plus a Coulomb repulsion between particles.
The SDE is advanced with the Rosenbrock-Euler-Maruyama scheme, either with
per-particle Jacobian blocks or with matrix-free GMRES on the stacked system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .densities import (DensityModel, ObservationModel, fit, obs_grad_log_likelihood,
                        obs_hessian_log_likelihood)
from .ensemble import Ensemble, anomalies

log = logging.getLogger(__name__)

METRICS = ("identity", "langevin")
DIFFUSIONS = ("none", "background", "current", "climatological")
SOLVERS = ("block", "gmres")


class StepRejected(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSpec:
    """``sigma = alpha * S`` with ``S`` the background anomalies, the current
    anomalies, or a climatological square-root factor."""

    kind: str = "none"
    alpha: float = 0.0
    factor: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in DIFFUSIONS:
            raise ValueError(f"unknown diffusion {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.kind == "climatological" and self.factor is None:
            raise ValueError("climatological diffusion needs a factor matrix")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.alpha > 0


@dataclass(frozen=True)
class FlowConfig:
    metric: str = "identity"
    diffusion: DiffusionSpec = DiffusionSpec()
    beta: float = 0.0
    dt0: float = 0.1
    dt_max: float = 1.0
    grow: float = 1.2
    shrink: float = 0.5
    max_steps: int = 100
    max_rejections: int = 30
    eps: float = 1e-2
    solver: str = "block"
    # "posterior": blocks from the posterior Hessian only; "full" adds the
    # current-density Hessian term as well
    jacobian: str = "posterior"
    gmres_tol: float = 1e-8
    gmres_maxiter: int = 40
    fd_eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.jacobian not in ("posterior", "full"):
            raise ValueError(f"unknown jacobian policy {self.jacobian!r}")
        if self.beta < 0 or self.dt0 <= 0 or self.eps <= 0 or self.max_steps < 1:
            raise ValueError("invalid flow configuration")
        if self.metric == "langevin" and not self.diffusion.active:
            raise ValueError("the Langevin metric needs a nonzero diffusion")

    def with_(self, **kw) -> "FlowConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def diffusion_factor(spec: DiffusionSpec, background=None, current=None):
    """The ``(n, M)`` matrix ``sigma``, or ``None`` for no diffusion."""
    if not spec.active:
        return None
    if spec.kind == "background":
        return spec.alpha * anomalies(background)
    if spec.kind == "current":
        return spec.alpha * anomalies(current)
    return spec.alpha * np.asarray(spec.factor, dtype=float)


def diffusion_apply(sigma, noise):
    """``sigma @ noise``; zero when there is no diffusion."""
    if sigma is None:
        return np.zeros_like(noise) if np.ndim(noise) else 0.0
    return sigma @ noise


def diffusion_tensor(sigma, n: int) -> np.ndarray:
    if sigma is None:
        return np.zeros((n, n))
    return 0.5 * sigma @ sigma.T


def coulomb_forces(X, beta: float, metric=None, floor: float = 1e-8):
    """Repulsive Coulomb forces on every particle, as columns.

    Distances are floored at ``floor * (1 + |x_e|)`` so coincident particles
    give bounded forces. Self-interaction is excluded.
    """
    X = X.states if isinstance(X, Ensemble) else np.asarray(X, dtype=float)
    n, m = X.shape
    if beta == 0.0 or m < 2:
        return np.zeros_like(X)
    diff = X[:, :, None] - X[:, None, :]                  # x_e - x_i, (n, m, m)
    dist = np.sqrt(np.sum(diff ** 2, axis=0))             # (m, m)
    lo = floor * (1.0 + np.linalg.norm(X, axis=0))[:, None]
    dist = np.maximum(dist, lo)
    inv3 = dist ** -3
    np.fill_diagonal(inv3, 0.0)
    # grad kappa = -(x_e - x_i)/d^3, force = -(beta/N) A sum grad kappa
    f = (beta / m) * np.einsum("iek,ek->ie", diff, inv3)
    return f if metric is None else metric @ f


def coulomb_force(e: int, ens, beta: float, metric=None) -> np.ndarray:
    return coulomb_forces(ens, beta, metric)[:, e]


# ---------------------------------------------------------------------------
# drift context
# ---------------------------------------------------------------------------

class DriftContext:
    """Prior fit, observation and current-density policy for one analysis.

    The prior is fixed for the whole flow; the current density is refit from
    whatever ensemble the drift is evaluated on.
    """

    def __init__(self, prior: DensityModel, obs: ObservationModel | None, background,
                 current_family: str = "gaussian", fit_current=None):
        self.prior = prior
        self.obs = obs
        self.background = background.states if isinstance(background, Ensemble) \
            else np.asarray(background, dtype=float)
        self.current_family = current_family
        self._fit_current = fit_current or (lambda X: fit(current_family, X))
        self.current: DensityModel | None = None

    @property
    def n_state(self) -> int:
        return self.background.shape[0]

    # -- posterior ------------------------------------------------------------
    def posterior_grad(self, X):
        g = self.prior.grad_log(X)
        if self.obs is not None:
            g = g + obs_grad_log_likelihood(self.obs, X)
        return g

    def posterior_hessian(self, X):
        H = self.prior.hessian_log(X)
        if self.obs is not None:
            H = H + obs_hessian_log_likelihood(self.obs, X)
        return H

    # -- current density -----------------------------------------------------
    def refit(self, X) -> DensityModel:
        self.current = self._fit_current(X)
        return self.current

    def sigma(self, X, cfg: FlowConfig):
        return diffusion_factor(cfg.diffusion, self.background, X)

    # -- pieces used by the stepper ------------------------------------------
    def drift(self, X, cfg: FlowConfig):
        sigma = self.sigma(X, cfg)
        D = diffusion_tensor(sigma, X.shape[0])
        if cfg.metric == "identity":
            self.refit(X)
        F = optimal_drift(self, X, cfg, D=D)
        if cfg.beta > 0:
            A = None if cfg.metric == "identity" else D
            F = F + coulomb_forces(X, cfg.beta, A)
        return F

    def jacobian_blocks(self, X, cfg: FlowConfig):
        sigma = self.sigma(X, cfg)
        D = diffusion_tensor(sigma, X.shape[0])
        Ha = self.posterior_hessian(X)
        if cfg.metric == "langevin":
            return D @ Ha if Ha.ndim == 2 else np.einsum("ij,mjk->mik", D, Ha)
        if cfg.jacobian == "full":
            if self.current is None:
                self.refit(X)
            Hq = self.current.hessian_log(X)
            K = D - np.eye(X.shape[0])
            Hq = K @ Hq if Hq.ndim == 2 else np.einsum("ij,mjk->mik", K, Hq)
            if Ha.ndim == 3 or Hq.ndim == 3:
                return Ha + Hq
            return Ha + Hq
        return Ha

    def implicit_solve(self, X, F, dt, cfg: FlowConfig):
        J = self.jacobian_blocks(X, cfg)
        n = X.shape[0]
        try:
            if J.ndim == 2:
                s = np.linalg.solve(np.eye(n) - dt * J, F)
            else:
                M = np.eye(n)[None] - dt * J
                s = np.linalg.solve(M, F.T[:, :, None])[:, :, 0].T
        except np.linalg.LinAlgError as exc:
            raise StepRejected(f"singular implicit matrix: {exc}") from exc
        return s

    def noise_term(self, X, xi, cfg: FlowConfig):
        return diffusion_apply(self.sigma(X, cfg), xi)

    def noise_shape(self, X, cfg: FlowConfig):
        sigma = self.sigma(X, cfg)
        return None if sigma is None else (sigma.shape[1], X.shape[1])


def posterior_grad_log(ctx: DriftContext, x):
    return ctx.posterior_grad(x)


def optimal_drift(ctx: DriftContext, x, cfg: FlowConfig, D=None):
    """Optimal drift at one state or at every column of ``x``.

    Identity metric: ``grad log p_a + (D - I) grad log q``.
    Langevin metric: ``D grad log p_a``; the current density drops out.
    The diffusion is state independent, so ``div D`` vanishes.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if D is None:
        X = x if x.ndim == 2 else x[:, None]
        D = diffusion_tensor(ctx.sigma(X, cfg), n)
    ga = ctx.posterior_grad(x)
    if cfg.metric == "langevin":
        return D @ ga
    if ctx.current is None:
        raise ValueError("current density has not been fit")
    gq = ctx.current.grad_log(x)
    return ga + (D @ gq - gq)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def _gmres_solve(ctx, X, F, dt, cfg: FlowConfig):
    n, m = X.shape
    size = n * m
    scale = cfg.fd_eps * (1.0 + np.abs(X).max())

    def matvec(v):
        V = v.reshape(n, m)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return v.copy()
        h = scale / nv
        JV = (ctx.drift(X + h * V, cfg) - F) / h
        return v - dt * JV.ravel()

    op = LinearOperator((size, size), matvec=matvec, dtype=float)
    b = F.ravel()
    s, info = gmres(op, b, x0=b.copy(), rtol=cfg.gmres_tol, atol=0.0,
                    restart=cfg.gmres_maxiter, maxiter=1)
    if info != 0:
        # accept if the residual is still acceptable
        res = np.linalg.norm(matvec(s) - b)
        if not np.isfinite(res) or res > 1e-3 * max(np.linalg.norm(b), 1e-300):
            raise StepRejected(f"GMRES did not converge (info={info})")
    ctx.drift(X, cfg)  # restore the current fit for the unperturbed ensemble
    return s.reshape(n, m)


def rem_step(ens, ctx, cfg: FlowConfig, dt: float, rng=None, *, drift=None):
    """One Rosenbrock-Euler-Maruyama step.

    ``x+ = x + dt (I - dt J)^{-1} F(x) + sqrt(dt) sigma xi``. Raises
    :class:`StepRejected` on a failed linear solve or a non-finite update.
    """
    X = ens.states if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    F = ctx.drift(X, cfg) if drift is None else drift
    if not np.all(np.isfinite(F)):
        raise StepRejected("non-finite drift")
    if cfg.solver == "gmres":
        s = _gmres_solve(ctx, X, F, dt, cfg)
    else:
        s = ctx.implicit_solve(X, F, dt, cfg)
    Xn = X + dt * s
    shape = ctx.noise_shape(X, cfg)
    if shape is not None:
        if rng is None:
            raise ValueError("a random generator is needed when diffusion is active")
        xi = rng.standard_normal(shape)
        Xn = Xn + np.sqrt(dt) * ctx.noise_term(X, xi, cfg)
    if not np.all(np.isfinite(Xn)):
        raise StepRejected("non-finite update")
    return Xn


@dataclass
class FlowResult:
    ensemble: np.ndarray
    steps: int
    converged: bool
    rejections: int = 0
    dt: float = 0.0


def step_rng(seed: int, cycle: int, step: int, attempt: int = 0):
    """Counter-based stream keyed by (seed, cycle, step, attempt)."""
    return np.random.default_rng([seed, cycle, step, attempt])


def flow_to_steady_state(ens0, ctx, cfg: FlowConfig, cycle: int = 0) -> FlowResult:
    """Iterate REM steps until the ensemble mean stops moving.

    Stops when ``|mean_new - mean_old| < eps * dt`` or after ``max_steps``
    accepted steps; a non-converged flow is reported, not raised.
    """
    X = ens0.states.copy() if isinstance(ens0, Ensemble) else np.array(ens0, dtype=float)
    dt = cfg.dt0
    rejections = 0
    converged = False
    steps = 0
    while steps < cfg.max_steps:
        attempt = 0
        while True:
            rng = step_rng(cfg.seed, cycle, steps, attempt)
            try:
                Xn = rem_step(X, ctx, cfg, dt, rng)
                break
            except StepRejected as exc:
                rejections += 1
                attempt += 1
                dt *= cfg.shrink
                log.debug("step %d rejected (%s); dt -> %.3g", steps, exc, dt)
                if attempt > cfg.max_rejections:
                    log.warning("flow abandoned after %d rejections", attempt)
                    return FlowResult(X, steps, False, rejections, dt)
        moved = np.linalg.norm(Xn.mean(axis=1) - X.mean(axis=1))
        X = Xn
        steps += 1
        if moved < cfg.eps * dt:
            converged = True
            break
        dt = min(dt * cfg.grow, cfg.dt_max)
    return FlowResult(X, steps, converged, rejections, dt)
