"""Univariate Gaussian mixtures and their closed-form summary statistics.

A :class:`GaussianMixture` holds either a single mixture (arrays of shape
``(K,)``) or a batch of mixtures (shape ``(N, K)``); every statistic below
broadcasts over the leading axes, so the output of an MDN head for a whole
test set can be summarised in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture weights, component means and component standard deviations."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        s = np.asarray(self.stds, dtype=float)
        if not (w.shape == mu.shape == s.shape):
            raise ValueError(
                f"weights/means/stds shapes differ: {w.shape}, {mu.shape}, {s.shape}"
            )
        if w.ndim == 0 or w.shape[-1] < 1:
            raise ValueError("a mixture needs at least one component")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("weights must be non-negative and sum to 1")
        if not np.all(s > 0):
            raise ValueError("standard deviations must be strictly positive")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(s))):
            raise ValueError("means and stds must be finite")
        for name, arr in (("weights", w), ("means", mu), ("stds", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.weights.shape[:-1]

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("single mixture has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "GaussianMixture":
        if not self.batch_shape:
            raise TypeError("single mixture is not indexable")
        return GaussianMixture(self.weights[idx], self.means[idx], self.stds[idx])

    def shifted(self, c: float) -> "GaussianMixture":
        return GaussianMixture(self.weights, self.means + c, self.stds)

    def scaled(self, s: float) -> "GaussianMixture":
        return GaussianMixture(self.weights, self.means * s, self.stds * s)


def _component_log_pdf(y, means, stds):
    z = (y - means) / stds
    return -0.5 * z * z - np.log(stds) - 0.5 * LOG_2PI


def log_density(gmm: GaussianMixture, y) -> np.ndarray:
    """log p(y) of the mixture, stable for far-out ``y`` via log-sum-exp.

    ``y`` broadcasts against the batch shape; a scalar ``y`` with a single
    mixture returns a 0-d value.
    """
    y = np.asarray(y, dtype=float)[..., None]
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return logsumexp(log_w + _component_log_pdf(y, gmm.means, gmm.stds), axis=-1)


def conditional_mean(gmm: GaussianMixture) -> np.ndarray:
    return np.sum(gmm.weights * gmm.means, axis=-1)


def _pick(gmm, k):
    return np.take_along_axis(gmm.means, k[..., None], axis=-1)[..., 0]


def conditional_mode_density(gmm: GaussianMixture):
    """Approximate mode: mean of the component maximising weight / std.

    Returns ``(index, value)``. ``np.argmax`` keeps the lowest index on ties.
    """
    k = np.argmax(gmm.weights / gmm.stds, axis=-1)
    return k, _pick(gmm, np.asarray(k))


def conditional_mode_weight(gmm: GaussianMixture):
    """Mean of the heaviest component; ties resolve to the lowest index."""
    k = np.argmax(gmm.weights, axis=-1)
    return k, _pick(gmm, np.asarray(k))


def conditional_variance(gmm: GaussianMixture) -> np.ndarray:
    """Within-component plus between-component variance."""
    mean = conditional_mean(gmm)[..., None]
    within = np.sum(gmm.weights * gmm.stds**2, axis=-1)
    between = np.sum(gmm.weights * (gmm.means - mean) ** 2, axis=-1)
    return within + between


def conditional_std(gmm: GaussianMixture) -> np.ndarray:
    return np.sqrt(conditional_variance(gmm))


def conditional_entropy(gmm: GaussianMixture) -> np.ndarray:
    """Entropy estimate ``-sum_i w_i log p(mu_i)``.

    Cheap closed form: the mixture log density is read off only at the
    component means. Tends to sit below the true entropy.
    """
    mu_i = gmm.means[..., :, None]
    mu_j = gmm.means[..., None, :]
    s_j = gmm.stds[..., None, :]
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)[..., None, :]
    log_p_at_means = logsumexp(log_w + _component_log_pdf(mu_i, mu_j, s_j), axis=-1)
    return -np.sum(gmm.weights * log_p_at_means, axis=-1)


def sample(gmm: GaussianMixture, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` values from a single mixture; deterministic per seed."""
    if gmm.batch_shape:
        raise ValueError("sample expects a single mixture, not a batch")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=count, p=gmm.weights)
    return gmm.means[comp] + gmm.stds[comp] * rng.standard_normal(count)


def random_mixture(rng: np.random.Generator, k: int = 5) -> GaussianMixture:
    """Random mixture used by oracle and property tests."""
    w = rng.dirichlet(np.ones(k))
    return GaussianMixture(w, rng.uniform(-5, 5, size=k), rng.uniform(0.2, 2.0, size=k))
