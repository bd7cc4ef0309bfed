"""Reference filters: the ensemble transform Kalman filter and SIR."""
from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from .densities import GaussianError, ObservationModel
from .ensemble import Ensemble

log = logging.getLogger(__name__)

INFLATION_GRID = tuple(np.round(np.arange(1.0, 1.1001, 0.02), 2))


def etkf_analysis(background, obs: ObservationModel, inflation: float = 1.0) -> np.ndarray:
    """Symmetric square-root ensemble transform Kalman analysis.

    Background anomalies are multiplied by ``inflation`` before the update.
    The observation error must be Gaussian.
    """
    if not isinstance(obs.error, GaussianError):
        raise TypeError("the ETKF needs a Gaussian observation error")
    Xb = background.states if isinstance(background, Ensemble) else np.asarray(background, float)
    n, N = Xb.shape
    xb = Xb.mean(axis=1)
    Ab = inflation * (Xb - xb[:, None]) / np.sqrt(N - 1)
    HX = obs.operator(xb[:, None] + np.sqrt(N - 1) * Ab)
    hx = HX.mean(axis=1)
    Yb = (HX - hx[:, None]) / np.sqrt(N - 1)
    RinvY = obs.error.solve(Yb)
    C = Yb.T @ RinvY
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    lam = np.maximum(lam, 0.0)
    w = V @ ((V.T @ (RinvY.T @ (obs.y - hx))) / (1.0 + lam))
    T = (V / np.sqrt(1.0 + lam)) @ V.T
    xa = xb + Ab @ w
    return xa[:, None] + np.sqrt(N - 1) * (Ab @ T)


def systematic_resample(weights, rng) -> np.ndarray:
    """Indices drawn by systematic resampling with one uniform offset."""
    w = np.asarray(weights, dtype=float)
    N = w.size
    positions = (rng.random() + np.arange(N)) / N
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def sir_reweight(particles, weights, obs: ObservationModel):
    """Posterior weights and a degeneracy flag (all likelihoods vanish)."""
    X = np.asarray(particles, dtype=float)
    r = obs.residual(X)
    logw = np.log(np.asarray(weights, dtype=float)) + obs.error.log_likelihood(r)
    if not np.any(np.isfinite(logw)):
        return np.full(X.shape[1], 1.0 / X.shape[1]), True
    return np.exp(logw - logsumexp(logw)), False


def sir_step(particles, weights, obs: ObservationModel, rng):
    """Reweight by the likelihood, then resample systematically.

    Returns the resampled particles, uniform weights and the degeneracy flag.
    """
    X = np.asarray(particles, dtype=float)
    w, degenerate = sir_reweight(X, weights, obs)
    if degenerate:
        log.warning("SIR: every particle has zero likelihood; resampling uniformly")
    idx = systematic_resample(w, rng)
    N = X.shape[1]
    return X[:, idx], np.full(N, 1.0 / N), degenerate
