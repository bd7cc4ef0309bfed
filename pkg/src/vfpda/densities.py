"""Parametrized density families and observation likelihoods.

Only gradient- and Hessian-log-densities are provided; normalizing constants
are never needed by the flow. Every ``grad_log`` accepts a single state of
shape ``(n,)`` or a matrix of column states ``(n, m)`` and returns the same
shape.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg, special

from .ensemble import Ensemble, covariance, jitter

FAMILIES = ("gaussian", "laplace", "huber", "cauchy", "kernel")
FAMILY_CODES = {"G": "gaussian", "L": "laplace", "H": "huber", "C": "cauchy", "K": "kernel"}

# Laplace/Huber evaluations closer than this (in theta) return a zero gradient
THETA_SINGULAR = 1e-6
BESSEL_THETA_MIN = 1e-12


class RankDeficientCovariance(ValueError):
    pass


def _cols(x):
    x = np.asarray(x, dtype=float)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def _out(g, was_vector):
    return g[:, 0] if was_vector else g


# ---------------------------------------------------------------------------
# Bessel ratio
# ---------------------------------------------------------------------------

def _ratio_up(mu, theta):
    """``K_{mu+1}(theta) / K_mu(theta)`` for ``mu >= 0`` by upward recurrence.

    Works with ratios only, so nothing over- or underflows even for large
    orders. The fractional seed order is evaluated with scaled Bessel
    functions, except for half-integers where the ratio is ``1 + 1/theta``.
    """
    m = int(np.floor(mu + 1e-12))
    mu0 = mu - m
    if abs(mu0 - 0.5) < 1e-12:
        r = 1.0 + 1.0 / theta
    else:
        r = special.kve(mu0 + 1.0, theta) / special.kve(mu0, theta)
    for j in range(1, m + 1):
        # K_{a+1} = K_{a-1} + (2a/theta) K_a
        r = 1.0 / r + 2.0 * (mu0 + j) / theta
    return r


def bessel_k_ratio(nu: float, theta):
    """``K_{nu-1}(theta) / K_nu(theta)``, using ``K_{-a} = K_a``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < BESSEL_THETA_MIN):
        raise ValueError("theta below 1e-12: singular regime of the Bessel ratio")
    nu = float(nu)
    if nu <= 0.0:
        return _ratio_up(-nu, theta)
    if nu >= 1.0:
        return 1.0 / _ratio_up(nu - 1.0, theta)
    return special.kve(1.0 - nu, theta) / special.kve(nu, theta)


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

class DensityModel:
    family = "base"

    def grad_log(self, x):
        raise NotImplementedError

    def hessian_log(self, x, h=None):
        """Central-difference Hessian of :meth:`grad_log`, symmetrized.

        For a matrix of states the perturbation is applied to all columns at
        once, so the cost is ``2 n`` gradient evaluations regardless of how
        many particles are passed. Returns ``(n, n)`` or ``(m, n, n)``.
        """
        X, vec = _cols(x)
        n, m = X.shape
        if h is None:
            h = 1e-5 * (1.0 + np.abs(X).max())
        H = np.empty((m, n, n))
        for j in range(n):
            Xp = X.copy()
            Xm = X.copy()
            Xp[j] += h
            Xm[j] -= h
            H[:, :, j] = ((self.grad_log(Xp) - self.grad_log(Xm)) / (2 * h)).T
        H = 0.5 * (H + H.transpose(0, 2, 1))
        return H[0] if vec else H


class _Elliptical(DensityModel):
    """Shared machinery for families parametrized by a center and a spread matrix."""

    def __init__(self, center, covariance=None, *, apply_precision=None, jitter_scale=1e-8):
        self.center = np.asarray(center, dtype=float)
        n = self.center.size
        if apply_precision is not None:
            self._apply = apply_precision
            self.covariance = covariance
            self._factor = None
        else:
            P = np.asarray(covariance, dtype=float)
            if jitter_scale:
                P = jitter(P, jitter_scale)
            self.covariance = np.asarray(covariance, dtype=float)
            self._factor = linalg.cho_factor(P, lower=True)
            self._apply = lambda v: linalg.cho_solve(self._factor, v)
        self.n = n

    def apply_precision(self, v):
        return self._apply(v)

    def precision(self) -> np.ndarray:
        return self._apply(np.eye(self.n))

    def _whitened(self, X):
        U = X - self.center[:, None]
        PU = self._apply(U)
        theta = np.sqrt(np.maximum(2.0 * np.einsum("ij,ij->j", U, PU), 0.0))
        return U, PU, theta


class Gaussian(_Elliptical):
    family = "gaussian"

    def grad_log(self, x):
        X, vec = _cols(x)
        return _out(-self._apply(X - self.center[:, None]), vec)

    def hessian_log(self, x=None, h=None):
        H = -self.precision()
        return 0.5 * (H + H.T)


class Laplace(_Elliptical):
    family = "laplace"

    @property
    def nu(self) -> float:
        return 1.0 - self.n / 2.0

    def _scale(self, theta):
        """Radial factor ``(2/theta) K_{nu-1}/K_nu``; NaN where singular."""
        out = np.full(theta.shape, np.nan)
        ok = theta >= THETA_SINGULAR
        if np.any(ok):
            out[ok] = 2.0 / theta[ok] * bessel_k_ratio(self.nu, theta[ok])
        return out

    def grad_log_flagged(self, x):
        X, vec = _cols(x)
        U, PU, theta = self._whitened(X)
        s = self._scale(theta)
        singular = np.isnan(s)
        g = -np.where(singular, 0.0, s) * PU
        return _out(g, vec), (bool(singular[0]) if vec else singular)

    def grad_log(self, x):
        return self.grad_log_flagged(x)[0]


class Huber(Laplace):
    family = "huber"

    def __init__(self, center, covariance=None, delta1=1.0, delta2=1.0, **kw):
        super().__init__(center, covariance, **kw)
        if delta1 <= 0 or delta2 <= 0:
            raise ValueError("Huber thresholds must be positive")
        self.delta1 = float(delta1)
        self.delta2 = float(delta2)

    def grad_log_flagged(self, x):
        X, vec = _cols(x)
        U, PU, theta = self._whitened(X)
        lap = self.delta1 * self._scale(theta)
        # near the center the Laplace factor blows up, so the quadratic branch wins;
        # equality goes to the Laplace branch
        use_lap = np.isfinite(lap) & (lap <= self.delta2)
        s = np.where(use_lap, lap, self.delta2)
        g = -s * PU
        singular = np.zeros(theta.shape, dtype=bool)
        return _out(g, vec), (False if vec else singular)


class Cauchy(DensityModel):
    family = "cauchy"

    def __init__(self, center, scales):
        self.center = np.asarray(center, dtype=float)
        self.scales = np.broadcast_to(np.asarray(scales, dtype=float), self.center.shape).copy()
        if np.any(self.scales <= 0):
            raise ValueError("Cauchy scales must be positive")

    def grad_log(self, x):
        X, vec = _cols(x)
        U = X - self.center[:, None]
        g2 = (self.scales ** 2)[:, None]
        return _out(-2.0 * U / (g2 + U ** 2), vec)

    def hessian_log(self, x, h=None):
        X, vec = _cols(x)
        U = X - self.center[:, None]
        g2 = (self.scales ** 2)[:, None]
        d = -2.0 * (g2 - U ** 2) / (g2 + U ** 2) ** 2
        H = np.einsum("ij,ik->jik", d, np.eye(d.shape[0]))
        return H[0] if vec else H


class Kernel(DensityModel):
    """Gaussian radial kernel density with per-component bandwidths."""

    family = "kernel"

    def __init__(self, anchors, bandwidth):
        self.anchors = np.asarray(anchors, dtype=float)
        self.bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float),
                                         (self.anchors.shape[0],)).copy()
        if np.any(self.bandwidth <= 0):
            raise ValueError("kernel bandwidth must be positive")

    def grad_log(self, x):
        X, vec = _cols(x)
        h2 = (self.bandwidth ** 2)[:, None, None]
        D = X[:, :, None] - self.anchors[:, None, :]      # (n, m, N)
        logk = -0.5 * np.sum(D ** 2 / h2, axis=0)         # (m, N)
        logk -= logk.max(axis=1, keepdims=True)
        w = np.exp(logk)
        w /= w.sum(axis=1, keepdims=True)
        g = -np.einsum("imk,mk->im", D / h2, w)
        return _out(g, vec)


def silverman_bandwidth(X: np.ndarray) -> np.ndarray:
    n, N = X.shape
    sd = X.std(axis=1, ddof=1)
    sd = np.where(sd > 0, sd, 1e-8 * (1.0 + np.abs(X).max()))
    return sd * (4.0 / ((n + 2.0) * N)) ** (1.0 / (n + 4.0))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit(family: str, ens, *, covariance_override=None, apply_precision=None,
        regularization: str = "jitter", delta1: float = 1.0, delta2: float = 1.0,
        bandwidth=None) -> DensityModel:
    """Fit a family to an ensemble.

    ``covariance_override`` / ``apply_precision`` let callers plug in a
    localized or shrunk spread estimate. ``regularization="none"`` refuses a
    rank-deficient sample covariance (``N_ens <= N_state``).
    """
    family = FAMILY_CODES.get(family, family).lower()
    X = ens.states if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    n, N = X.shape
    if family == "kernel":
        bw = silverman_bandwidth(X) if bandwidth is None else bandwidth
        return Kernel(X.copy(), bw)
    if family == "cauchy":
        q25, med, q75 = np.percentile(X, [25, 50, 75], axis=1)
        iqr = q75 - q25
        scales = np.where(iqr > 0, iqr / 2.0, 1e-8 * (1.0 + np.abs(med)))
        return Cauchy(med, scales)
    if family not in ("gaussian", "laplace", "huber"):
        raise ValueError(f"unknown density family {family!r}")
    if N < 2:
        raise ValueError("covariance families need at least two particles")
    center = X.mean(axis=1)
    kw = {}
    if apply_precision is not None:
        P = covariance_override
        kw["apply_precision"] = apply_precision
    else:
        P = covariance(X) if covariance_override is None else np.asarray(covariance_override)
        if regularization == "none":
            if covariance_override is None and N <= n:
                raise RankDeficientCovariance(
                    f"sample covariance from {N} particles in {n} dimensions is singular")
            kw["jitter_scale"] = 0.0
    if family == "gaussian":
        return Gaussian(center, P, **kw)
    if family == "laplace":
        return Laplace(center, P, **kw)
    return Huber(center, P, delta1=delta1, delta2=delta2, **kw)


def grad_log_density(model: DensityModel, x):
    return model.grad_log(x)


def hessian_log_density(model: DensityModel, x):
    return model.hessian_log(x)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

class GaussianError:
    kind = "gaussian"

    def __init__(self, R):
        R = np.atleast_2d(np.asarray(R, dtype=float))
        self.R = R
        self.diagonal = bool(np.allclose(R, np.diag(np.diag(R))))
        self._factor = linalg.cho_factor(R, lower=True)
        self._chol = np.tril(self._factor[0])

    @property
    def size(self) -> int:
        return self.R.shape[0]

    def solve(self, r):
        return linalg.cho_solve(self._factor, r)

    def grad_residual(self, r):
        """Derivative of the log-likelihood with respect to the predicted observation."""
        return -self.solve(r)

    def hess_weight(self, r):
        return self.solve(np.eye(self.size)), True

    def log_likelihood(self, r):
        r2 = r if r.ndim == 2 else r[:, None]
        z = linalg.solve_triangular(self._chol, r2, lower=True)
        out = -0.5 * np.sum(z ** 2, axis=0)
        return out if r.ndim == 2 else out[0]

    def sample(self, rng, size=None):
        shape = (self.size,) if size is None else (self.size, size)
        z = rng.standard_normal(shape)
        return self._chol @ z

    def subset(self, idx):
        return GaussianError(self.R[np.ix_(idx, idx)])


class CauchyError:
    kind = "cauchy"

    def __init__(self, gamma, size=None):
        gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
        if size is not None:
            gamma = np.broadcast_to(gamma, (size,)).copy()
        if np.any(gamma <= 0):
            raise ValueError("Cauchy scales must be positive")
        self.gamma = gamma

    @property
    def size(self) -> int:
        return self.gamma.size

    def _g2(self, r):
        return (self.gamma ** 2)[:, None] if r.ndim == 2 else self.gamma ** 2

    def grad_residual(self, r):
        g2 = self._g2(r)
        return -2.0 * r / (g2 + r ** 2)

    def hess_weight(self, r):
        # curvature of -log-likelihood; the non-convex tail part is dropped so
        # the implicit step matrix stays well conditioned
        g2 = self._g2(r)
        w = 2.0 * (g2 - r ** 2) / (g2 + r ** 2) ** 2
        return np.maximum(w, 0.0), False

    def log_likelihood(self, r):
        g2 = self._g2(r)
        return -np.sum(np.log1p(r ** 2 / g2), axis=0)

    def sample(self, rng, size=None):
        shape = (self.size,) if size is None else (self.size, size)
        z = rng.standard_cauchy(shape)
        return (self.gamma[:, None] if size is not None else self.gamma) * z

    def subset(self, idx):
        return CauchyError(self.gamma[idx])


class ObservationModel:
    """Observation operator, its adjoint action, error law and observed value."""

    def __init__(self, operator, adjoint, error, y, jacobian=None, matrix=None):
        self.operator = operator
        self.adjoint = adjoint
        self.error = error
        self.y = np.asarray(y, dtype=float)
        self.jacobian = jacobian
        self.matrix = matrix

    @classmethod
    def linear(cls, H, error, y):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(lambda x: H @ x, lambda x, w: H.T @ w, error, y,
                   jacobian=lambda x: H, matrix=H)

    @classmethod
    def identity(cls, n, error, y):
        return cls.linear(np.eye(n), error, y)

    @classmethod
    def select(cls, n, indices, error, y):
        """Pointwise observations of ``indices``."""
        H = np.zeros((len(indices), n))
        H[np.arange(len(indices)), indices] = 1.0
        return cls.linear(H, error, y)

    def residual(self, x):
        X, vec = _cols(x)
        r = self.operator(X) - self.y[:, None]
        return r[:, 0] if vec else r

    def with_value(self, y):
        return ObservationModel(self.operator, self.adjoint, self.error, y,
                                self.jacobian, self.matrix)


def obs_grad_log_likelihood(obs: ObservationModel, x):
    X, vec = _cols(x)
    r = obs.operator(X) - obs.y[:, None]
    return _out(obs.adjoint(X, obs.error.grad_residual(r)), vec)


def obs_hessian_log_likelihood(obs: ObservationModel, x):
    """Gauss-Newton Hessian ``-H^T W H``; ``(n, n)`` when shared by all particles."""
    X, vec = _cols(x)
    r = obs.operator(X) - obs.y[:, None]
    W, constant = obs.error.hess_weight(r)
    if obs.matrix is not None:
        H = obs.matrix
        if constant:
            return -H.T @ W @ H
        return -np.einsum("pi,pm,pj->mij", H, W, H)
    Hs = [obs.jacobian(X[:, e]) for e in range(X.shape[1])]
    if constant:
        out = np.stack([-Hk.T @ W @ Hk for Hk in Hs])
    else:
        out = np.stack([-Hk.T @ (W[:, e][:, None] * Hk) for e, Hk in enumerate(Hs)])
    return out[0] if vec else out
