"""Sequential VFP filters and the strong-constraint VFP smoother.

Covariance policies: plain sample covariance, RBLW shrinkage (inverse through
the Woodbury identity), or localization (local updates with Gaspari-Cohn
tapered local covariances; the smoother uses the global Schur product only).
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import densities as dens
from .baselines import etkf_analysis
from .densities import GaussianError, ObservationModel, fit, obs_grad_log_likelihood
from .dynamics import IntegrationError, ModelSystem, WindowTape, propagate
from .ensemble import Ensemble, anomalies, jitter
from .flow import (DriftContext, FlowConfig, StepRejected, coulomb_forces,
                   flow_to_steady_state)
from .metrics import MetricSeries, truth_rank

log = logging.getLogger(__name__)

_NAME = re.compile(r"^(?P<loc>L)?(?P<shr>Shr)?VFP(?P<lang>Ln)?(?P<smo>S)?"
                   r"\((?P<p>[GLHCK])(?P<q>[GLHCK])?\)$")


# ---------------------------------------------------------------------------
# method description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """Which densities, metric and covariance treatment a VFP method uses.

    Names follow ``[L|Shr]VFP[Ln][S](PQ)``: ``P`` is the prior family and
    ``Q`` the current-density family (letters G, L, H, C, K); ``Ln`` selects
    the Langevin metric, ``S`` the smoother, ``L`` localization and ``Shr``
    shrinkage.
    """

    prior_family: str = "gaussian"
    current_family: str = "gaussian"
    metric: str = "identity"
    covariance_policy: str = "plain"
    radius: float | None = None
    window: int = 0
    delta1: float = 1.0
    delta2: float = 1.0
    geometry: object = field(default=None, compare=False)

    def __post_init__(self):
        for fam in (self.prior_family, self.current_family):
            if fam not in dens.FAMILIES:
                raise ValueError(f"unknown density family {fam!r}")
        if self.covariance_policy not in ("plain", "shrinkage", "localized"):
            raise ValueError(f"unknown covariance policy {self.covariance_policy!r}")
        if self.covariance_policy == "localized" and not self.radius:
            raise ValueError("localization needs a positive radius")
        if self.window < 0:
            raise ValueError("window must be nonnegative")

    @classmethod
    def from_name(cls, name: str, *, radius=None, window: int = 5, **kw) -> "MethodSpec":
        m = _NAME.match(name.strip())
        if m is None:
            raise ValueError(f"cannot parse method name {name!r}")
        p = dens.FAMILY_CODES[m["p"]]
        q = dens.FAMILY_CODES[m["q"]] if m["q"] else p
        if m["loc"] and m["shr"]:
            raise ValueError("localization and shrinkage are exclusive")
        policy = "localized" if m["loc"] else "shrinkage" if m["shr"] else "plain"
        return cls(prior_family=p, current_family=q,
                   metric="langevin" if m["lang"] else "identity",
                   covariance_policy=policy,
                   radius=radius if policy == "localized" else None,
                   window=window if m["smo"] else 0, **kw)

    @property
    def name(self) -> str:
        code = {v: k for k, v in dens.FAMILY_CODES.items()}
        pre = {"plain": "", "shrinkage": "Shr", "localized": "L"}[self.covariance_policy]
        mid = "Ln" if self.metric == "langevin" else ""
        suf = "S" if self.window else ""
        fams = code[self.prior_family]
        if self.metric == "identity":
            fams += code[self.current_family]
        return f"{pre}VFP{mid}{suf}({fams})"

    @property
    def is_smoother(self) -> bool:
        return self.window > 0

    def fit_options(self) -> dict:
        return {"delta1": self.delta1, "delta2": self.delta2}


@dataclass
class CycleResult:
    analysis: np.ndarray
    flow_steps: int
    converged: bool


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def gaspari_cohn(d, r: float):
    """Fifth-order piecewise-rational taper with half-width ``r``; zero beyond ``2r``."""
    c = np.abs(np.asarray(d, dtype=float)) / float(r)
    out = np.zeros_like(c)
    a = c <= 1.0
    b = (c > 1.0) & (c < 2.0)
    ca = c[a]
    out[a] = (((-0.25 * ca + 0.5) * ca + 0.625) * ca - 5.0 / 3.0) * ca ** 2 + 1.0
    cb = c[b]
    out[b] = ((((cb / 12.0 - 0.5) * cb + 0.625) * cb + 5.0 / 3.0) * cb - 5.0) * cb \
        + 4.0 - 2.0 / (3.0 * cb)
    return out if out.ndim else float(out)


class RingGeometry:
    """Periodic 1-D grid; distances are ring distances times ``spacing``.

    The default spacing ``sqrt(3/10)`` measures index distance in units of
    the taper's Gaussian-equivalent length, so a radius ``r`` keeps about
    ``3.65 r`` neighbors on each side.
    """

    def __init__(self, n: int, spacing: float = np.sqrt(0.3)):
        self.n = int(n)
        self.spacing = float(spacing)

    def distance(self, i, j):
        k = np.abs(np.asarray(i) - np.asarray(j)) % self.n
        return np.minimum(k, self.n - k) * self.spacing

    def matrix(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self.distance(idx[:, None], idx[None, :])


def local_influence_set(i: int, r: float, geometry) -> np.ndarray:
    """Indices ``j`` with a nonzero taper weight relative to ``i`` (sorted, contains ``i``)."""
    j = np.arange(geometry.n)
    w = gaspari_cohn(geometry.distance(i, j), r) if r > 0 else (j == i).astype(float)
    keep = (w > 0) | (j == i)
    return j[keep]


def schur_taper(r: float, geometry) -> np.ndarray:
    return gaspari_cohn(geometry.matrix(), r)


class LocalStructure:
    """Influence sets, taper blocks and the position of each index in its set."""

    def __init__(self, r: float, geometry):
        sets = [local_influence_set(i, r, geometry) for i in range(geometry.n)]
        sizes = {len(s) for s in sets}
        if len(sizes) != 1:
            # pad to a common size by repeating the center index with zero taper
            # is fragile; unequal sets are rare on regular grids, so refuse them
            raise ValueError("influence sets of unequal size are not supported")
        self.sets = np.stack(sets)                                   # (n, L)
        self.pos = np.array([int(np.flatnonzero(s == i)[0]) for i, s in enumerate(sets)])
        d = geometry.distance(self.sets[:, :, None], self.sets[:, None, :])
        self.taper = gaspari_cohn(d, r)                              # (n, L, L)
        self.n, self.size = self.sets.shape


def _local_cov(A, local: LocalStructure, jitter_scale: float = 1e-8):
    """Tapered local covariances ``(A_l A_l^T) o C_l`` plus the jitter policy."""
    Al = A[local.sets]                                               # (n, L, N)
    P = (Al @ Al.transpose(0, 2, 1)) * local.taper
    lam = jitter_scale * np.trace(P, axis1=1, axis2=2) / local.size
    lam = np.where(lam > 0, lam, jitter_scale)
    return P + lam[:, None, None] * np.eye(local.size)


def localized_grad_log_q(ens, i: int, x, r: float, geometry) -> float:
    """Component ``i`` of the Gaussian score built from the tapered local covariance."""
    X = ens.states if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    x = np.asarray(x, dtype=float)
    idx = local_influence_set(i, r, geometry)
    pos = int(np.flatnonzero(idx == i)[0])
    A = anomalies(X[idx])
    C = gaspari_cohn(geometry.distance(idx[:, None], idx[None, :]), r)
    P = jitter((A @ A.T) * C)
    u = x[idx] - X[idx].mean(axis=1)
    return float(-np.linalg.solve(P, u)[pos])


def _pointwise_rows(obs: ObservationModel, n: int):
    """State index observed by each row of a pointwise operator."""
    H = obs.matrix
    if H is None or H.shape[1] != n:
        raise ValueError("local analysis needs a linear observation operator")
    nz = H != 0
    if np.any(nz.sum(axis=1) != 1):
        raise ValueError("local analysis needs pointwise observations")
    if isinstance(obs.error, GaussianError) and not obs.error.diagonal:
        raise ValueError("local analysis needs a diagonal observation-error covariance")
    return np.argmax(nz, axis=1)


class LocalDriftContext:
    """Drift for local updates: index ``i`` moves under the flow of its own
    influence set, using tapered local prior and current covariances."""

    def __init__(self, background, obs: ObservationModel, local: LocalStructure,
                 cfg: FlowConfig, climatology=None):
        Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
        self.background = Xb
        self.obs = obs
        self.local = local
        n = Xb.shape[0]
        _pointwise_rows(obs, n)
        self.prior_center = Xb.mean(axis=1)[local.sets]              # (n, L)
        self.prior_prec = np.linalg.inv(_local_cov(anomalies(Xb), local))
        H = obs.matrix
        self._obs_diag = isinstance(obs.error, GaussianError)
        if self._obs_diag:
            G = H.T @ obs.error.solve(H)
            self.obs_hess = -G[local.sets[:, :, None], local.sets[:, None, :]]
        spec = cfg.diffusion
        self.diff_kind = spec.kind if spec.active else "none"
        self.alpha = spec.alpha
        if self.diff_kind == "climatological":
            B = np.asarray(climatology if climatology is not None else spec.factor @ spec.factor.T)
            Bl = B[local.sets[:, :, None], local.sets[:, None, :]] * local.taper
            lam, V = np.linalg.eigh(Bl)
            S = np.einsum("ikl,il,iml->ikm", V, np.sqrt(np.maximum(lam, 0.0)), V)
            self.noise_rows = self.alpha * S[np.arange(n), local.pos]  # (n, L)
            self.D_local = 0.5 * self.alpha ** 2 * Bl
        self._cache = (None, None)
        self._rows = {}

    def _diffusion_local(self, X):
        if self.diff_kind == "none":
            return None
        if self.diff_kind == "climatological":
            return self.D_local
        A = anomalies(self.background if self.diff_kind == "background" else X)
        Al = A[self.local.sets]
        return 0.5 * self.alpha ** 2 * (Al @ Al.transpose(0, 2, 1))

    def local_drift(self, X, cfg: FlowConfig):
        """Drift of every influence set, shape ``(n, L, m)``."""
        if self._cache[0] is X:
            return self._cache[1]
        L = self.local
        Xl = X[L.sets]                                               # (n, L, m)
        ga = -(self.prior_prec @ (Xl - self.prior_center[:, :, None]))
        ga = ga + obs_grad_log_likelihood(self.obs, X)[L.sets]
        D = self._diffusion_local(X)
        if cfg.metric == "langevin":
            F = D @ ga
        else:
            Pq = _local_cov(anomalies(X), L)
            U = Xl - X.mean(axis=1)[L.sets][:, :, None]
            gq = -np.linalg.solve(Pq, U)
            F = ga - gq
            if D is not None:
                F = F + D @ gq
        if cfg.beta > 0:
            F = F + self._coulomb(Xl, cfg.beta, D if cfg.metric == "langevin" else None)
        self._cache = (X, F)
        return F

    @staticmethod
    def _coulomb(Xl, beta, D=None, floor=1e-8):
        n, L, m = Xl.shape
        diff = Xl[:, :, :, None] - Xl[:, :, None, :]                  # (n, L, m, m)
        dist = np.sqrt(np.sum(diff ** 2, axis=1))                    # (n, m, m)
        lo = floor * (1.0 + np.linalg.norm(Xl, axis=1))[:, :, None]
        inv3 = np.maximum(dist, lo) ** -3
        inv3[:, np.arange(m), np.arange(m)] = 0.0
        f = (beta / m) * np.einsum("ilek,iek->ile", diff, inv3)
        return f if D is None else D @ f

    def drift(self, X, cfg: FlowConfig):
        F = self.local_drift(X, cfg)
        return F[np.arange(self.local.n), self.local.pos]

    def implicit_solve(self, X, F, dt, cfg: FlowConfig):
        L = self.local
        Fl = self.local_drift(X, cfg)
        J = -self.prior_prec
        if self._obs_diag:
            # the step matrix depends on dt only (unless D follows the current
            # ensemble), so keep the rows of its inverse that each index needs
            fixed = not (cfg.metric == "langevin" and self.diff_kind == "current")
            rows = self._rows.get(dt) if fixed else None
            if rows is None:
                J = J + self.obs_hess
                if cfg.metric == "langevin":
                    J = self._diffusion_local(X) @ J
                M = np.eye(L.size)[None] - dt * J
                E = np.zeros((L.n, L.size, 1))
                E[np.arange(L.n), L.pos, 0] = 1.0
                try:
                    rows = np.linalg.solve(M.transpose(0, 2, 1), E)[:, :, 0]
                except np.linalg.LinAlgError as exc:
                    raise StepRejected(str(exc)) from exc
                if fixed:
                    self._rows[dt] = rows
            return np.einsum("il,ilm->im", rows, Fl)
        else:
            r = self.obs.residual(X)
            w, _ = self.obs.error.hess_weight(r)
            rows = _pointwise_rows(self.obs, L.n)
            dg = np.zeros_like(X)
            np.add.at(dg, rows, w)
            Jm = J[:, None] - np.einsum("ilm,lk->imlk", dg[L.sets], np.eye(L.size))
            if cfg.metric == "langevin":
                Jm = np.einsum("ilk,imkj->imlj", self._diffusion_local(X), Jm)
            M = np.eye(L.size)[None, None] - dt * Jm
            try:
                s = np.linalg.solve(M, np.moveaxis(Fl, 2, 1)[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise StepRejected(str(exc)) from exc
            s = np.moveaxis(s, 1, 2)
        return s[np.arange(L.n), L.pos]

    def noise_shape(self, X, cfg: FlowConfig):
        if self.diff_kind == "none":
            return None
        if self.diff_kind == "climatological":
            return X.shape
        N = (self.background if self.diff_kind == "background" else X).shape[1]
        return (N, X.shape[1])

    def noise_term(self, X, xi, cfg: FlowConfig):
        if self.diff_kind == "climatological":
            return np.einsum("il,ilm->im", self.noise_rows, xi[self.local.sets])
        A = anomalies(self.background if self.diff_kind == "background" else X)
        return self.alpha * (A @ xi)


# ---------------------------------------------------------------------------
# shrinkage
# ---------------------------------------------------------------------------

@dataclass
class Shrinkage:
    """``(1 - gamma) A A^T + gamma mu I`` represented through the anomalies ``A``."""

    gamma: float
    mu: float
    anomalies: np.ndarray

    def apply_inverse(self, v):
        A = self.anomalies
        g = self.gamma * self.mu
        if self.gamma >= 1.0:
            return np.asarray(v, dtype=float) / g
        c = (1.0 - self.gamma) / g
        inner = np.eye(A.shape[1]) + c * (A.T @ A)
        return v / g - (c / g) * (A @ np.linalg.solve(inner, A.T @ v))

    def matrix(self) -> np.ndarray:
        A = self.anomalies
        return (1.0 - self.gamma) * (A @ A.T) + self.gamma * self.mu * np.eye(A.shape[0])


def rblw_shrinkage(ens) -> Shrinkage:
    """Rao-Blackwellised Ledoit-Wolf shrinkage toward ``trace(P)/n * I``."""
    X = ens.states if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    n, N = X.shape
    if N < 3:
        raise ValueError("shrinkage needs at least three particles")
    A = anomalies(X)
    tr = float(np.sum(A * A))
    G = A.T @ A
    tr2 = float(np.sum(G * G))
    mu = tr / n
    denom = (N + 2.0) * (tr2 - tr ** 2 / n)
    if denom <= 0.0 or mu <= 0.0:
        gamma = 1.0
    else:
        gamma = min(((N - 2.0) / N * tr2 + tr ** 2) / denom, 1.0)
    if mu <= 0.0:
        mu = 1e-12
    return Shrinkage(float(gamma), float(mu), A)


def _fit_shrunk(family, X, opts):
    s = rblw_shrinkage(X)
    return fit(family, X, covariance_override=s.matrix(), apply_precision=s.apply_inverse, **opts)


# ---------------------------------------------------------------------------
# filter analysis
# ---------------------------------------------------------------------------

def make_context(background, obs, spec: MethodSpec, cfg: FlowConfig, *, taper=None):
    """Global drift context for a plain, shrunk or Schur-localized method."""
    Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
    opts = spec.fit_options()
    if spec.covariance_policy == "shrinkage":
        prior = _fit_shrunk(spec.prior_family, Xb, opts)
        fit_current = lambda X: _fit_shrunk(spec.current_family, X, opts)  # noqa: E731
    elif taper is not None:
        prior = fit(spec.prior_family, Xb, covariance_override=anomalies(Xb) @ anomalies(Xb).T * taper,
                    **opts)

        def fit_current(X):
            A = anomalies(X)
            return fit(spec.current_family, X, covariance_override=(A @ A.T) * taper, **opts)
    else:
        prior = fit(spec.prior_family, Xb, **opts)
        fit_current = lambda X: fit(spec.current_family, X, **opts)  # noqa: E731
    return DriftContext(prior, obs, Xb, spec.current_family, fit_current)


def vfp_analysis(background, obs: ObservationModel, spec: MethodSpec, cfg: FlowConfig,
                 *, cycle: int = 0, climatology=None) -> CycleResult:
    """Move the background particles to the analysis by a VFP flow."""
    Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
    if spec.covariance_policy == "localized":
        return local_vfp_analysis(Xb, obs, spec, cfg, cycle=cycle, climatology=climatology)
    ctx = make_context(Xb, obs, spec, cfg)
    res = flow_to_steady_state(Xb, ctx, cfg, cycle=cycle)
    return CycleResult(res.ensemble, res.steps, res.converged)


def local_vfp_analysis(background, obs: ObservationModel, spec: MethodSpec, cfg: FlowConfig,
                       *, cycle: int = 0, climatology=None, local=None) -> CycleResult:
    """Local-update VFP analysis with Gaspari-Cohn tapered local covariances."""
    Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
    if spec.prior_family != "gaussian" or spec.current_family != "gaussian":
        raise ValueError("local analysis supports the Gaussian families only")
    if local is None:
        geom = spec.geometry or RingGeometry(Xb.shape[0])
        local = LocalStructure(spec.radius, geom)
    ctx = LocalDriftContext(Xb, obs, local, cfg, climatology=climatology)
    res = flow_to_steady_state(Xb, ctx, cfg, cycle=cycle)
    return CycleResult(res.ensemble, res.steps, res.converged)


# ---------------------------------------------------------------------------
# strong-constraint smoother
# ---------------------------------------------------------------------------

class SmootherContext(DriftContext):
    """Posterior of the window's initial condition under a perfect model.

    ``window`` is a list of ``(time offset, ObservationModel)`` pairs with
    increasing offsets; an observation at offset 0 is allowed.
    """

    def __init__(self, prior, window, model: ModelSystem, background,
                 current_family="gaussian", fit_current=None, max_step: float = 0.01):
        super().__init__(prior, None, background, current_family, fit_current)
        self.window = list(window)
        self.model = model
        self.max_step = max_step
        offsets = [t for t, _ in self.window]
        self.times = np.array(sorted(set([0.0] + offsets)))
        self._slot = [int(np.searchsorted(self.times, t)) for t in offsets]

    def misfit_grad(self, X):
        """``sum_i M*_{0,i} H^T dlog p(y_i|.)`` for each column of ``X``."""
        X = np.asarray(X, dtype=float)
        tape = WindowTape(self.model, X, self.times, max_step=self.max_step)
        forcings = [np.zeros_like(X) for _ in self.times]
        for slot, (_, ob) in zip(self._slot, self.window):
            forcings[slot] = forcings[slot] + obs_grad_log_likelihood(ob, tape.states[slot])
        return tape.adjoint(forcings)

    def posterior_grad(self, X):
        vec = np.ndim(X) == 1
        Xc = np.asarray(X, dtype=float)[:, None] if vec else np.asarray(X, dtype=float)
        g = self.prior.grad_log(Xc) + self.misfit_grad(Xc)
        return g[:, 0] if vec else g

    def posterior_hessian(self, X):
        """Gauss-Newton Hessian at the ensemble mean, shared by all particles."""
        xm = np.asarray(X, dtype=float)
        xm = xm.mean(axis=1) if xm.ndim == 2 else xm
        n = xm.size
        tape = WindowTape(self.model, xm, self.times, max_step=self.max_step)
        Ms = tape.tangent(np.eye(n))
        H = self.prior.hessian_log(xm)
        for slot, (_, ob) in zip(self._slot, self.window):
            Hk = dens.obs_hessian_log_likelihood(ob, tape.states[slot])
            H = H + Ms[slot].T @ Hk @ Ms[slot]
        return H


def vfps_drift(x0, window, ctx: SmootherContext, cfg: FlowConfig):
    """Smoother drift on initial conditions (columns of ``x0``)."""
    from .flow import optimal_drift
    X = np.asarray(x0, dtype=float)
    if cfg.metric == "identity" and ctx.current is None:
        ctx.refit(X if X.ndim == 2 else ctx.background)
    return optimal_drift(ctx, X, cfg)


def smoother_analysis(background, window, model: ModelSystem, spec: MethodSpec,
                      cfg: FlowConfig, *, cycle: int = 0, taper=None,
                      max_step: float = 0.01) -> CycleResult:
    Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
    base = make_context(Xb, None, spec, cfg, taper=taper)
    ctx = SmootherContext(base.prior, window, model, Xb, spec.current_family,
                          base._fit_current, max_step=max_step)
    res = flow_to_steady_state(Xb, ctx, cfg, cycle=cycle)
    return CycleResult(res.ensemble, res.steps, res.converged)


# ---------------------------------------------------------------------------
# cycling drivers
# ---------------------------------------------------------------------------

def _series(truth, means, steps, conv, ranks, spinup, n_ens, info=None):
    return MetricSeries(np.asarray(truth), np.asarray(means), spinup, np.asarray(steps),
                        np.asarray(conv, dtype=bool), np.asarray(ranks), n_ens, info or {})


def run_filter(model: ModelSystem, truth, observations, X0, analysis, *, dt: float,
               spinup: int = 0, max_step: float = 0.01, rank_component: int = 0,
               rank_seed: int = 0, keep_ensembles: bool = False) -> MetricSeries:
    """Forecast-analysis cycling with an arbitrary analysis callback.

    ``truth[k]`` and ``observations[k]`` refer to cycle ``k`` (after the
    forecast from cycle ``k-1``); ``X0`` is the ensemble one interval before
    the first cycle. ``analysis(Xb, obs, k)`` returns ``(Xa, steps, converged)``.
    A forecast or analysis failure stops the run; the remaining cycles are
    filled with NaN and ``info["aborted"]`` is set.
    """
    truth = np.asarray(truth, dtype=float)
    K, n = truth.shape
    X = np.array(X0, dtype=float)
    N = X.shape[1]
    means = np.full((K, n), np.nan)
    steps = np.zeros(K, dtype=int)
    conv = np.zeros(K, dtype=bool)
    ranks = np.full(K, -1, dtype=int)
    rng = np.random.default_rng(rank_seed)
    ensembles = [] if keep_ensembles else None
    info = {"aborted": False}
    for k in range(K):
        try:
            Xb = propagate(model, X, dt, max_step=max_step)
            X, steps[k], conv[k] = analysis(Xb, observations[k], k)
            if not np.all(np.isfinite(X)):
                raise IntegrationError("non-finite analysis")
        except (IntegrationError, StepRejected, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.error("run aborted at cycle %d: %s", k, exc)
            info.update(aborted=True, abort_cycle=k, reason=str(exc))
            break
        means[k] = X.mean(axis=1)
        ranks[k] = truth_rank(X[rank_component], truth[k, rank_component], rng)
        if keep_ensembles:
            ensembles.append(X.copy())
    if keep_ensembles:
        info["ensembles"] = ensembles
    return _series(truth, means, steps, conv, ranks, spinup, N, info)


def vfp_filter_run(model: ModelSystem, truth, observations, X0, spec: MethodSpec,
                   cfg: FlowConfig, *, dt: float, spinup: int = 0, max_step: float = 0.01,
                   climatology=None, rank_component: int = 0, rank_seed: int = 0) -> MetricSeries:
    """Cycle a VFP filter over a truth/observation sequence."""
    if spec.is_smoother:
        return vfps_run(model, truth, observations, X0, spec, cfg, dt=dt, spinup=spinup,
                        max_step=max_step, rank_component=rank_component, rank_seed=rank_seed)
    local = None
    if spec.covariance_policy == "localized":
        geom = spec.geometry or RingGeometry(model.dimension)
        local = LocalStructure(spec.radius, geom)

    def analysis(Xb, obs, k):
        if local is not None:
            r = local_vfp_analysis(Xb, obs, spec, cfg, cycle=k, climatology=climatology,
                                   local=local)
        else:
            r = vfp_analysis(Xb, obs, spec, cfg, cycle=k)
        return r.analysis, r.flow_steps, r.converged

    return run_filter(model, truth, observations, X0, analysis, dt=dt, spinup=spinup,
                      max_step=max_step, rank_component=rank_component, rank_seed=rank_seed)


def etkf_filter_run(model, truth, observations, X0, inflation: float, *, dt: float,
                    spinup: int = 0, max_step: float = 0.01, surrogate_error=None,
                    rank_component: int = 0, rank_seed: int = 0) -> MetricSeries:
    """Cycle the ETKF; ``surrogate_error`` replaces a non-Gaussian error law."""
    def analysis(Xb, obs, k):
        if surrogate_error is not None:
            obs = ObservationModel(obs.operator, obs.adjoint, surrogate_error, obs.y,
                                   obs.jacobian, obs.matrix)
        return etkf_analysis(Xb, obs, inflation), 0, True

    return run_filter(model, truth, observations, X0, analysis, dt=dt, spinup=spinup,
                      max_step=max_step, rank_component=rank_component, rank_seed=rank_seed)


def vfps_run(model: ModelSystem, truth, observations, X0, spec: MethodSpec, cfg: FlowConfig,
             *, dt: float, spinup: int = 0, max_step: float = 0.01,
             rank_component: int = 0, rank_seed: int = 0) -> MetricSeries:
    """Strong-constraint smoother over consecutive windows of ``spec.window`` cycles.

    Each window's initial-condition ensemble (the forecast to its first
    cycle) flows to the smoothing posterior; the analysis is then propagated
    through the window, giving smoothed means for its cycles, and on to the
    start of the next window.
    """
    truth = np.asarray(truth, dtype=float)
    Kc, n = truth.shape
    Kw = spec.window
    X = np.array(X0, dtype=float)
    N = X.shape[1]
    taper = None
    if spec.covariance_policy == "localized":
        geom = spec.geometry or RingGeometry(n)
        taper = schur_taper(spec.radius, geom)
    means = np.full((Kc, n), np.nan)
    steps = np.zeros(Kc, dtype=int)
    conv = np.zeros(Kc, dtype=bool)
    ranks = np.full(Kc, -1, dtype=int)
    rng = np.random.default_rng(rank_seed)
    info = {"aborted": False}
    try:
        Xb = propagate(model, X, dt, max_step=max_step)
        for k0 in range(0, Kc, Kw):
            idx = list(range(k0, min(k0 + Kw, Kc)))
            window = [((k - k0) * dt, observations[k]) for k in idx]
            res = smoother_analysis(Xb, window, model, spec, cfg, cycle=k0, taper=taper,
                                    max_step=max_step)
            Xa = res.analysis
            for j, k in enumerate(idx):
                if j > 0:
                    Xa = propagate(model, Xa, dt, max_step=max_step)
                means[k] = Xa.mean(axis=1)
                ranks[k] = truth_rank(Xa[rank_component], truth[k, rank_component], rng)
                steps[k] = res.flow_steps
                conv[k] = res.converged
            Xb = propagate(model, Xa, dt, max_step=max_step)
    except (IntegrationError, StepRejected, np.linalg.LinAlgError) as exc:
        log.error("smoother run aborted: %s", exc)
        info.update(aborted=True, reason=str(exc))
    return _series(truth, means, steps, conv, ranks, spinup, N, info)
