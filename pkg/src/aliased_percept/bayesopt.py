"""Bayesian optimisation over mixed search spaces.

A GP surrogate (squared-exponential kernel on unit-cube encoded
coordinates, categorical dimensions one-hot) models the logmod-compressed
loss; new trials maximise expected improvement over a seeded random
candidate pool. Trials run strictly in sequence.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from . import gp

KINDS = ("continuous", "log-continuous", "integer", "categorical")
N_CANDIDATES = 2048


def logmod(x):
    """``sign(x) * log(1 + |x|)``, elementwise."""
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.log1p(np.abs(x))
    return float(out) if out.ndim == 0 else out


def expected_improvement(mu, s, best: float, xi: float = 0.0):
    """EI for minimisation: ``E[max(best - xi - Y, 0)]`` with ``Y ~ N(mu, s^2)``."""
    mu = np.asarray(mu, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or xi < 0:
        raise ValueError("s and xi must be non-negative")
    gain = best - mu - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, gain / np.where(s > 0, s, 1.0), 0.0)
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        ei = np.where(s > 0, gain * ndtr(z) + s * pdf, np.maximum(gain, 0.0))
    out = np.maximum(ei, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    categories: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories:
                raise ValueError(f"{self.name}: categorical dimension needs categories")
            return
        if self.low is None or self.high is None or not (
                math.isfinite(self.low) and math.isfinite(self.high) and self.low < self.high):
            raise ValueError(f"{self.name}: bounds must be finite and ordered")
        if self.kind == "log-continuous" and self.low <= 0:
            raise ValueError(f"{self.name}: log dimension needs positive bounds")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1

    def sample(self, rng):
        if self.kind == "continuous":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "log-continuous":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        if self.kind == "integer":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        return self.categories[int(rng.integers(len(self.categories)))]

    def encode(self, value) -> list:
        if self.kind == "categorical":
            return [1.0 if c == value else 0.0 for c in self.categories]
        if self.kind == "log-continuous":
            return [(math.log(value) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))]
        return [(float(value) - self.low) / (self.high - self.low)]


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if not names or len(set(names)) != len(names):
            raise ValueError("search space needs distinct, non-empty dimension names")

    @property
    def names(self) -> list:
        return [d.name for d in self.dimensions]

    def sample(self, rng) -> dict:
        return {d.name: d.sample(rng) for d in self.dimensions}

    def encode(self, config: dict) -> np.ndarray:
        return np.array([v for d in self.dimensions for v in d.encode(config[d.name])])


@dataclass
class TrialRecord:
    index: int
    config: dict
    raw: float
    transformed: float
    seconds: float
    seed: int
    random_phase: bool = False


@dataclass
class OptimizationResult:
    best: dict
    best_loss: float
    trials: list = field(default_factory=list)

    def to_csv(self, space: SearchSpace) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial"] + space.names + ["raw_loss", "logmod_loss", "seconds"])
        for t in self.trials:
            w.writerow([t.index] + [t.config[n] for n in space.names]
                       + [repr(t.raw), repr(t.transformed), f"{t.seconds:.3f}"])
        return buf.getvalue()


def _surrogate(Z, v, noise_frac=1e-3):
    """SE GP on encoded points; returns a predictor ``Zc -> (mean, std)``."""
    centre = float(np.mean(v))
    spread = float(np.ptp(v))
    noise = noise_frac * spread if spread > 0 else 1e-6
    fit = gp.optimize_hypers(Z, v - centre, "squared_exponential", noise=noise,
                             seed=0, restarts=3, max_iter=100)
    model = gp.fit_exact(Z, v - centre, fit.kernel, noise)

    def predict(Zc):
        m, var = gp.predict(model, Zc)
        return m + centre, np.sqrt(var)

    return predict


def optimize(objective: Callable[[dict, int], float], space: SearchSpace,
             budget: int = 40, seed: int = 0, log=None) -> OptimizationResult:
    """Minimise ``objective(config, trial_seed)`` within ``budget`` trials.

    The first ``ceil(budget / 4)`` trials are random. After that, the candidate
    with the largest expected improvement (exploration margin ``0.01 * |best|``)
    is tried, unless the surrogate is less sure about the incumbent than it is
    on average over the candidate pool; then the next trial is random again.
    Non-finite losses are kept in the trace and fed to the surrogate as the
    worst value seen so far.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    n_random = math.ceil(budget / 4)
    trials: list[TrialRecord] = []
    for i in range(budget):
        trial_seed = int(rng.integers(2**31))
        random_phase = i < n_random
        if not random_phase:
            config, random_phase = _propose(space, trials, rng)
        else:
            config = space.sample(rng)
        t0 = time.perf_counter()
        raw = float(objective(config, trial_seed))
        seconds = time.perf_counter() - t0
        if math.isfinite(raw):
            transformed = logmod(raw)
        else:
            finite = [t.transformed for t in trials if math.isfinite(t.raw)]
            transformed = max(finite) if finite else 0.0
        trials.append(TrialRecord(i, config, raw, transformed, seconds, trial_seed, random_phase))
        if log is not None:
            log(f"trial {i}: loss {raw:.6g} ({'random' if random_phase else 'EI'})")
    finite = [t for t in trials if math.isfinite(t.raw)]
    if finite:
        best = min(finite, key=lambda t: t.raw)
        return OptimizationResult(best.config, best.raw, trials)
    return OptimizationResult(trials[0].config, trials[0].raw, trials)


def _propose(space, trials, rng):
    candidates = [space.sample(rng) for _ in range(N_CANDIDATES)]
    if len(trials) < 2:  # nothing to fit a surrogate to yet
        return candidates[0], True
    Z = np.array([space.encode(t.config) for t in trials])
    v = np.array([t.transformed for t in trials])
    try:
        predict = _surrogate(Z, v)
    except gp.GpNumericalError:
        return candidates[0], True
    Zc = np.array([space.encode(c) for c in candidates])
    mu, sd = predict(Zc)
    k_best = int(np.argmin(v))
    _, sd_best = predict(Z[k_best:k_best + 1])
    if sd_best[0] > np.mean(sd):
        return candidates[0], True
    best = float(v[k_best])
    ei = expected_improvement(mu, sd, best, 0.01 * abs(best))
    return candidates[int(np.argmax(ei))], False


# -- default search spaces --------------------------------------------------


def network_space() -> SearchSpace:
    return SearchSpace((
        Dimension("layers", "integer", 1, 5),
        Dimension("width", "log-continuous", 32, 512),
        Dimension("dropout", "continuous", 0.0, 0.5),
        Dimension("l2", "log-continuous", 0.1, 10.0),
    ))


def gp_space() -> SearchSpace:
    return SearchSpace((
        Dimension("kernel", "categorical", categories=gp.KERNELS),
        Dimension("length", "log-continuous", 0.1, 100.0),
    ))
