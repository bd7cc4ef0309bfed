"""Verification scores: spatio-temporal RMSE and rank histograms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rmse(truth, means, spinup: int = 0) -> float:
    """Root mean squared error over all post-spinup cycles and components.

    Parameters
    ----------
    truth, means : array_like, shape (n_cycles, n_state)
    spinup : int
        Number of leading cycles left out.
    """
    truth = np.asarray(getattr(truth, "states", truth), dtype=float)
    means = np.asarray(means, dtype=float)
    if truth.shape != means.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {means.shape}")
    if not 0 <= spinup < truth.shape[0]:
        raise ValueError("spinup must be smaller than the number of cycles")
    err = truth[spinup:] - means[spinup:]
    return float(np.sqrt(np.mean(err ** 2)))


def instantaneous_rmse(truth, means) -> np.ndarray:
    err = np.asarray(truth, dtype=float) - np.asarray(means, dtype=float)
    return np.sqrt(np.mean(err ** 2, axis=-1))


def truth_rank(values, truth_value, rng) -> int:
    """Rank of the truth among ``values``; ties are split uniformly at random."""
    values = np.asarray(values)
    below = int(np.sum(values < truth_value))
    ties = int(np.sum(values == truth_value))
    return below + (int(rng.integers(0, ties + 1)) if ties else 0)


def rank_histogram(ensembles, truth, component: int = 0, spinup: int = 0,
                   rng=None, seed: int = 0) -> np.ndarray:
    """Counts of truth ranks for one state component.

    ``ensembles`` has shape ``(n_cycles, n_state, n_ens)`` and ``truth``
    ``(n_cycles, n_state)``. Returns ``n_ens + 1`` counts.
    """
    ens = np.asarray(ensembles, dtype=float)
    truth = np.asarray(truth, dtype=float)
    rng = np.random.default_rng(seed) if rng is None else rng
    counts = np.zeros(ens.shape[2] + 1, dtype=np.int64)
    for k in range(spinup, ens.shape[0]):
        counts[truth_rank(ens[k, component], truth[k, component], rng)] += 1
    return counts


def chi_square_uniform(counts) -> float:
    """Pearson chi-square distance of a histogram from the flat histogram."""
    counts = np.asarray(counts, dtype=float)
    expected = counts.sum() / counts.size
    return float(np.sum((counts - expected) ** 2) / expected)


@dataclass
class MetricSeries:
    """Per-cycle record of a filtering or smoothing run."""

    truth: np.ndarray
    means: np.ndarray
    spinup: int
    flow_steps: np.ndarray
    converged: np.ndarray
    ranks: np.ndarray
    n_ens: int
    info: dict = field(default_factory=dict)

    @property
    def n_cycles(self) -> int:
        return self.means.shape[0]

    @property
    def rmse_instant(self) -> np.ndarray:
        return instantaneous_rmse(self.truth, self.means)

    def rmse(self) -> float:
        return rmse(self.truth, self.means, self.spinup)

    def rank_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_ens + 1, dtype=np.int64)
        valid = self.ranks[self.spinup:]
        np.add.at(counts, valid[valid >= 0], 1)
        return counts

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.means)))
