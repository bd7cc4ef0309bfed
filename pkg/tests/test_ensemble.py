import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vfpda.ensemble import Ensemble, anomalies, covariance, jitter, mean


def test_mean_cases(rng):
    c = np.array([1.0, -2.0, 3.0])
    assert np.allclose(mean(np.tile(c[:, None], 4)), c)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    assert np.allclose(mean(np.column_stack([a, b])), (a + b) / 2)
    X = rng.standard_normal((5, 7))
    ref = np.zeros(5)
    for i in range(5):
        for j in range(7):
            ref[i] += X[i, j]
    assert np.allclose(mean(X), ref / 7)


def test_anomalies_and_covariance_hand_case():
    X = np.array([[0.0, 2.0]])
    assert np.allclose(anomalies(X), [[-1.0, 1.0]])
    assert np.allclose(covariance(X), [[2.0]])
    assert np.allclose(anomalies(np.ones((3, 4))), 0.0)
    assert np.allclose(covariance(np.ones((3, 4))), 0.0)


def test_small_ensembles_rejected():
    with pytest.raises(ValueError):
        anomalies(np.ones((3, 1)))
    with pytest.raises(ValueError):
        Ensemble(np.array([[np.nan, 1.0]]))


def test_container_views(rng):
    X = rng.standard_normal((4, 6))
    e = Ensemble(X)
    assert (e.n_state, e.n_ens) == (4, 6)
    assert np.array_equal(e.covariance(), covariance(X))
    assert np.array_equal(mean(e), e.mean())


def test_jitter_only_shifts_diagonal():
    P = np.diag([1.0, 3.0])
    Q = jitter(P)
    assert np.allclose(Q - P, 2e-8 * np.eye(2))


matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
                  elements=st.floats(-1e3, 1e3))


@settings(max_examples=60, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_statistics_properties(X, rnd):
    A = anomalies(X)
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-9 * (1 + np.abs(X).max()))
    P = covariance(X)
    assert np.array_equal(P, A @ A.T)
    assert np.linalg.eigvalsh(P).min() >= -1e-12 * (1 + np.abs(P).max())
    perm = list(range(X.shape[1]))
    rnd.shuffle(perm)
    Xp = X[:, perm]
    assert np.allclose(mean(Xp), mean(X), atol=1e-9 * (1 + np.abs(X).max()))
    assert np.allclose(covariance(Xp), P, atol=1e-8 * (1 + np.abs(P).max()))
