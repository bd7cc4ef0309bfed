"""Independent reference computations shared by the tests."""
import numpy as np


def kalman(mb, Pb, H, R, y):
    """Exact linear-Gaussian posterior in information form."""
    mb, Pb, H, R, y = (np.atleast_1d(np.asarray(a, float)) for a in (mb, Pb, H, R, y))
    Pb, H, R = np.atleast_2d(Pb), np.atleast_2d(H), np.atleast_2d(R)
    prec = np.linalg.inv(Pb) + H.T @ np.linalg.inv(R) @ H
    Pa = np.linalg.inv(prec)
    ma = Pa @ (np.linalg.solve(Pb, mb) + H.T @ np.linalg.solve(R, y))
    return ma, Pa


def matched_ensemble(rng, mean, cov, n_ens):
    """Particles whose sample mean and covariance equal ``mean`` and ``cov`` exactly."""
    n = len(mean)
    Z = rng.standard_normal((n, n_ens))
    Z -= Z.mean(axis=1, keepdims=True)
    S = Z @ Z.T / (n_ens - 1)
    Z = np.linalg.solve(np.linalg.cholesky(S), Z)
    return mean[:, None] + np.linalg.cholesky(cov) @ Z


class FixedNoise:
    """Stand-in generator that hands out prescribed standard-normal draws."""

    def __init__(self, xi):
        self.xi = np.asarray(xi)

    def standard_normal(self, shape):
        return self.xi.reshape(shape)
