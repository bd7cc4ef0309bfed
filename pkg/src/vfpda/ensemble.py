"""Particle ensembles: columns of an ``(n_state, n_ens)`` matrix."""
from __future__ import annotations

import numpy as np


class Ensemble:
    """Particle container with the usual empirical statistics.

    The matrix is stored as given (columns are particles); statistics are
    recomputed on every call so the object can be shared read-only.
    """

    __slots__ = ("states",)

    def __init__(self, states):
        X = np.array(states, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2:
            raise ValueError("ensemble must be a 2-D (n_state, n_ens) array")
        if not np.all(np.isfinite(X)):
            raise ValueError("ensemble contains non-finite entries")
        self.states = X

    @property
    def n_state(self) -> int:
        return self.states.shape[0]

    @property
    def n_ens(self) -> int:
        return self.states.shape[1]

    def mean(self) -> np.ndarray:
        return mean(self.states)

    def anomalies(self) -> np.ndarray:
        return anomalies(self.states)

    def covariance(self) -> np.ndarray:
        return covariance(self.states)

    def __repr__(self):
        return f"Ensemble(n_state={self.n_state}, n_ens={self.n_ens})"


def _matrix(ens) -> np.ndarray:
    return ens.states if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)


def mean(ens) -> np.ndarray:
    return _matrix(ens).mean(axis=1)


def anomalies(ens) -> np.ndarray:
    """``(X - mean 1^T) / sqrt(N_ens - 1)``."""
    X = _matrix(ens)
    n_ens = X.shape[1]
    if n_ens < 2:
        raise ValueError("anomalies need at least two particles")
    return (X - X.mean(axis=1, keepdims=True)) / np.sqrt(n_ens - 1)


def covariance(ens) -> np.ndarray:
    A = anomalies(ens)
    return A @ A.T


def jitter(P: np.ndarray, scale: float = 1e-8) -> np.ndarray:
    """``P + lam I`` with ``lam = scale * trace(P) / n``; for inversion sites only."""
    n = P.shape[0]
    lam = scale * np.trace(P) / n
    if lam <= 0.0:
        lam = scale
    return P + lam * np.eye(n)
