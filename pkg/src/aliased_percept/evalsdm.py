"""Evaluation: multi-run RMS tables, uncertainty extraction, aliasing
detection (ROC AUC) and the accept/reject threshold sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import models as md
from .mixture import conditional_entropy, conditional_std
from .tactile_sim import TactileDataset, filter_no_aliasing

log = logging.getLogger(__name__)

UNCERTAINTY_RULES = ("entropy", "std")
# no-aliasing filter that goes with each target
TARGET_FILTER = {"position": "position_orientation", "orientation": "position_orientation",
                 "curvature": "curvature"}
N_THRESHOLDS = 64


def rms_error(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"need equal non-zero lengths, got {p.size} and {t.size}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class Predictions:
    prediction: np.ndarray
    uncertainty: np.ndarray | None
    target: np.ndarray
    aliased: np.ndarray

    def __len__(self):
        return self.prediction.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prediction", "uncertainty", "target", "aliased"])
        unc = self.uncertainty if self.uncertainty is not None else [None] * len(self)
        for p, u, t, a in zip(self.prediction, unc, self.target, self.aliased):
            w.writerow([f"{p:.9g}", "" if u is None else f"{u:.9g}", f"{t:.9g}", int(a)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Predictions":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["prediction", "uncertainty", "target", "aliased"]:
            raise ValueError("not a predictions table (unexpected header)")
        body = rows[1:]
        if not body:
            raise ValueError("predictions table has no rows")
        try:
            pred = np.array([float(r[0]) for r in body])
            tgt = np.array([float(r[2]) for r in body])
            ali = np.array([r[3] not in ("0", "") for r in body])
            has_u = [r[1] != "" for r in body]
            unc = np.array([float(r[1]) for r in body]) if all(has_u) else None
        except (ValueError, IndexError) as exc:
            raise ValueError(f"malformed predictions row ({exc})") from None
        return cls(pred, unc, tgt, ali)


def predict_with_uncertainty(model: md.TrainedModel, data: TactileDataset,
                             prediction: str | None = None,
                             uncertainty: str | None = "entropy") -> Predictions:
    """Point predictions plus an uncertainty per row.

    Only the MDN gives uncertainties; asking a GP or NN for one raises
    :class:`~aliased_percept.models.CapabilityError`. Pass ``uncertainty=None``
    for prediction only.
    """
    if uncertainty is not None and uncertainty not in UNCERTAINTY_RULES:
        raise ValueError(f"unknown uncertainty rule {uncertainty!r}")
    if uncertainty is not None and model.kind != "mdn5":
        raise md.CapabilityError(f"{model.kind} models do not estimate prediction uncertainty")
    pred = model.predict(data.X, prediction)
    unc = None
    if uncertainty is not None:
        g = model.mixture(data.X)
        unc = conditional_entropy(g) if uncertainty == "entropy" else conditional_std(g)
    return Predictions(pred, unc, data.target(model.target).astype(float),
                       data.aliased(model.target))


# -- multi-run protocol -------------------------------------------------------


@dataclass
class RunReport:
    model: str
    target: str
    train_tag: str
    test_tag: str
    rms: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    @property
    def runs(self) -> int:
        return len(self.rms)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rms)) if self.rms else math.nan

    @property
    def std(self) -> float:
        """Sample standard deviation over completed runs (0 for a single run)."""
        return float(np.std(self.rms, ddof=1)) if len(self.rms) > 1 else 0.0

    def to_dict(self) -> dict:
        return dict(model=self.model, target=self.target, train=self.train_tag,
                    test=self.test_tag, rms=list(self.rms), failed=list(self.failed),
                    mean=self.mean, std=self.std, runs=self.runs)


@dataclass
class Protocol:
    model: str
    target: str
    train: TactileDataset
    tests: dict
    train_tag: str = "aliasing"
    runs: int = 10
    seeds: tuple | None = None
    config: md.ModelConfig = field(default_factory=md.ModelConfig)

    def run_seeds(self) -> list:
        seeds = list(self.seeds) if self.seeds is not None else list(range(self.runs))
        if len(seeds) != self.runs or len(set(seeds)) != len(seeds):
            raise ValueError("need one distinct seed per run")
        return seeds


def worker_count() -> int:
    env = os.environ.get("ALIASED_PERCEPT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"ALIASED_PERCEPT_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError("ALIASED_PERCEPT_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1


def _one_run(protocol: Protocol, seed: int):
    try:
        model = md.fit(protocol.model, protocol.train, protocol.target, protocol.config, seed)
    except ArithmeticError as exc:  # diverged training, failed factorisation
        return seed, None, f"{type(exc).__name__}: {exc}"
    scores = {tag: rms_error(model.predict(ds.X), ds.target(protocol.target))
              for tag, ds in protocol.tests.items()}
    return seed, model, scores


def run_experiment(protocol: Protocol, workers: int | None = None, keep_models: bool = False):
    """Train ``protocol.runs`` models with distinct seeds and score each on every test set.

    Returns ``(reports, models)``: one :class:`RunReport` per test tag, and the
    trained models in seed order when ``keep_models`` (otherwise empty). A
    failed run is logged, listed in ``failed`` and left out of the statistics.
    """
    seeds = protocol.run_seeds()
    if protocol.model == "gp" and protocol.config.hypers is None and len(seeds) > 1:
        # one marginal-likelihood fit per regime; runs differ in their inducing subsets
        hyp = md.fit_gp_hypers(protocol.train, protocol.target, protocol.config, seeds[0])
        hypers = (hyp.kernel.signal, hyp.kernel.length, hyp.noise)
        protocol = replace(protocol, config=replace(protocol.config, hypers=hypers))
    workers = min(workers or worker_count(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_run, [protocol] * len(seeds), seeds))
    else:
        results = [_one_run(protocol, s) for s in seeds]
    reports = {tag: RunReport(protocol.model, protocol.target, protocol.train_tag, tag)
               for tag in protocol.tests}
    kept = []
    for seed, model, scores in results:
        if model is None:
            log.warning("%s/%s run with seed %d failed: %s",
                        protocol.model, protocol.target, seed, scores)
            for r in reports.values():
                r.failed.append(seed)
            continue
        for tag, value in scores.items():
            reports[tag].rms.append(value)
        if keep_models:
            kept.append(model)
    return list(reports.values()), kept


def desk_experiment(train: TactileDataset, test: TactileDataset, runs: int = 10,
                    config: md.ModelConfig | None = None, kinds=md.MODEL_KINDS,
                    targets=md.TARGETS, workers: int | None = None,
                    keep=lambda kind, target, tag: False):
    """Every ``kind x target x {aliasing, no-aliasing}`` training regime, each
    scored on the aliasing and the matching no-aliasing test set.

    ``keep(kind, target, train_tag)`` selects regimes whose trained models are
    returned, keyed by that triple.
    """
    config = config or md.ModelConfig()
    reports, models = [], {}
    for target in targets:
        mode = TARGET_FILTER[target]
        tr_na, te_na = filter_no_aliasing(train, mode), filter_no_aliasing(test, mode)
        tests = {"aliasing": test, "no-aliasing": te_na}
        for kind in kinds:
            for tag, data in (("aliasing", train), ("no-aliasing", tr_na)):
                p = Protocol(kind, target, data, tests, tag, runs, config=config)
                want = keep(kind, target, tag)
                rep, kept = run_experiment(p, workers, keep_models=want)
                reports.extend(rep)
                if want:
                    models[(kind, target, tag)] = kept
                log.info("%s %s train=%s: %s", kind, target, tag,
                         ", ".join(f"{r.test_tag} {r.mean:.4g}" for r in rep))
    return reports, models


def find_report(reports, model, target, train_tag, test_tag) -> RunReport:
    for r in reports:
        if (r.model, r.target, r.train_tag, r.test_tag) == (model, target, train_tag, test_tag):
            return r
    raise KeyError((model, target, train_tag, test_tag))


def table_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "target", "train", "test", "runs", "mean_rms", "std_rms"])
    for r in reports:
        w.writerow([r.model, r.target, r.train_tag, r.test_tag, r.runs,
                    f"{r.mean:.9g}", f"{r.std:.9g}"])
    return buf.getvalue()


def reports_json(reports) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list:
    try:
        doc = json.loads(text)
        out = []
        for d in doc["reports"]:
            r = RunReport(d["model"], d["target"], d["train"], d["test"],
                          [float(v) for v in d["rms"]], list(d["failed"]))
            out.append(r)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"not a report file ({exc})") from None
    return out


# -- threshold sweep and aliasing detection ---------------------------------


@dataclass
class SdmCurve:
    thresholds: np.ndarray
    rejection: np.ndarray
    rms: list  # float, or None where nothing was accepted

    def best_within(self, max_rejection: float):
        """Smallest accepted RMS among thresholds with rejection <= ``max_rejection``."""
        best = None
        for rej, r in zip(self.rejection, self.rms):
            if r is not None and rej <= max_rejection and (best is None or r < best[1]):
                best = (float(rej), r)
        return best

    def to_dict(self) -> dict:
        return dict(thresholds=[float(t) for t in self.thresholds],
                    rejection=[float(r) for r in self.rejection], rms=list(self.rms))

    @classmethod
    def from_dict(cls, d: dict) -> "SdmCurve":
        try:
            th = np.array(d["thresholds"], dtype=float)
            rej = np.array(d["rejection"], dtype=float)
            rms = [None if v is None else float(v) for v in d["rms"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"not an SDM curve ({exc})") from None
        if not (th.size == rej.size == len(rms)) or th.size == 0:
            raise ValueError("SDM curve arrays differ in length or are empty")
        return cls(th, rej, rms)


def default_thresholds(uncertainty, count: int = N_THRESHOLDS) -> np.ndarray:
    u = np.asarray(uncertainty, dtype=float)
    return np.linspace(u.min(), u.max(), count)


def sdm_sweep(prediction, uncertainty, target, thresholds=None) -> SdmCurve:
    """Accept rows with ``uncertainty < tau``; rejection rate and accepted RMS per ``tau``."""
    p = np.asarray(prediction, dtype=float)
    u = np.asarray(uncertainty, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.size == 0 or not (p.size == u.size == t.size):
        raise ValueError("need non-empty rows of equal length")
    th = default_thresholds(u) if thresholds is None else np.asarray(thresholds, dtype=float)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted ascending")
    order = np.argsort(u, kind="stable")
    u_sorted = u[order]
    cum_sq = np.concatenate([[0.0], np.cumsum(((p - t) ** 2)[order])])
    accepted = np.searchsorted(u_sorted, th, side="left")  # count of u < tau
    rejection = 1.0 - accepted / p.size
    rms = [float(np.sqrt(cum_sq[a] / a)) if a > 0 else None for a in accepted]
    return SdmCurve(th, rejection, rms)


def aliasing_separation(uncertainty, aliased) -> float:
    """ROC AUC of ``uncertainty`` as a score for the ``aliased`` class (ties count half)."""
    u = np.asarray(uncertainty, dtype=float).reshape(-1)
    a = np.asarray(aliased, dtype=bool).reshape(-1)
    if u.size != a.size:
        raise ValueError("uncertainty and flags differ in length")
    n_pos, n_neg = int(a.sum()), int((~a).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both aliased and non-aliased rows are required")
    ranks = rankdata(u)
    return float((ranks[a].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
