"""Bayesian model averaging, predictive metrics and greedy weight soups."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .models import ModelSpec, ParamVector, predict_proba

__all__ = [
    "EvalReport",
    "SoupResult",
    "bma_predict",
    "metric_nll",
    "metric_acc",
    "metric_ece",
    "evaluate",
    "greedy_soup",
    "append_reports",
    "write_trajectory",
]

PROB_FLOOR = 1e-12


def _check_members(spec: ModelSpec, members: Sequence[ParamVector]):
    if not members:
        raise ValueError("ensemble is empty")
    for i, p in enumerate(members):
        if len(p) != spec.n_params:
            raise ValueError(f"member {i} has {len(p)} parameters, spec expects {spec.n_params}")


def bma_predict(ensemble, X) -> np.ndarray:
    """Mean of member predictive probability rows (not logits).

    ``ensemble`` is anything with ``.spec`` and ``.members``. The reduction
    sorts each entry's member contributions before summing, so the result
    does not depend on member order.
    """
    spec, members = ensemble.spec, list(ensemble.members)
    _check_members(spec, members)
    probs = np.stack([predict_proba(spec, p, X) for p in members])
    return np.sort(probs, axis=0).sum(axis=0) / len(members)


def _labels(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("expected (n, k) probabilities and n labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label out of range [0, {probs.shape[1]})")
    return probs, labels.astype(np.int64)


def metric_nll(probs, labels) -> float:
    """Mean ``-log p(true class)`` with probabilities floored at 1e-12.

    Each term is ``log(1/p)``: for ``p = 1/k`` rounded, the reciprocal rounds
    back to ``k`` for small ``k``, so a uniform predictor scores ``ln k``
    exactly. The mean is taken about the first term, which keeps equal terms
    exact.
    """
    probs, labels = _labels(probs, labels)
    if labels.size == 0:
        raise ValueError("no rows to score")
    p = probs[np.arange(labels.size), labels]
    terms = np.log(1.0 / np.maximum(p, PROB_FLOOR))
    return float(terms[0] + np.mean(terms - terms[0]))


def metric_acc(probs, labels) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    probs, labels = _labels(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def metric_ece(probs, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width max-probability bins.

    Bin ``b`` covers ``((b-1)/B, b/B]``; a confidence of exactly 0 goes into the
    first bin.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n = labels.size
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    return float(np.abs(acc_sum - conf_sum).sum() / n)


@dataclass
class EvalReport:
    method: str
    acc: float
    nll: float
    ece: float
    members: int
    dataset: str
    seed: int
    split: str = "test"

    def __post_init__(self):
        if not (0 <= self.acc <= 1 and self.nll >= 0 and 0 <= self.ece <= 1):
            raise ValueError(f"metrics out of range: {self}")


def evaluate(probs, labels, method: str, members: int, dataset: str, seed: int,
             split: str = "test", bins: int = 15) -> EvalReport:
    return EvalReport(method, metric_acc(probs, labels), metric_nll(probs, labels),
                      metric_ece(probs, labels, bins), members, dataset, seed, split)


REPORT_COLUMNS = [f.name for f in fields(EvalReport)]


def append_reports(path, reports: Sequence[EvalReport]) -> Path:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            wr.writeheader()
        for r in reports:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return path


@dataclass
class SoupResult:
    params: ParamVector
    accepted: list  # member indices in acceptance order
    trajectory: list  # soup metric after each candidate was considered
    member_scores: list = field(default_factory=list)
    sizes: list = field(default_factory=list)  # soup size after each candidate
    metric: str = "nll"


def _score(spec, params, X, y, metric):
    p = predict_proba(spec, params, X)
    return metric_nll(p, y) if metric == "nll" else metric_acc(p, y)


def greedy_soup(ensemble, val_X, val_y, metric: str = "nll") -> SoupResult:
    """Greedy uniform weight averaging.

    Members are ranked by their own validation score (stable on ties); the
    soup starts from the best one and each further member is kept iff the
    averaged parameters score no worse on validation.
    """
    if metric not in ("nll", "acc"):
        raise ValueError(f"metric must be 'nll' or 'acc', got {metric!r}")
    spec, members = ensemble.spec, list(ensemble.members)
    _check_members(spec, members)
    if len(val_y) == 0:
        raise ValueError("validation set is empty")
    sign = 1.0 if metric == "nll" else -1.0  # lower is better after the sign
    scores = [_score(spec, p, val_X, val_y, metric) for p in members]
    order = sorted(range(len(members)), key=lambda i: sign * scores[i])
    accepted = [order[0]]
    mean = members[order[0]].values.copy()
    best = scores[order[0]]
    trajectory, sizes = [best], [1]
    for i in order[1:]:
        # running mean: averaging identical members reproduces them exactly
        cand_mean = mean + (members[i].values - mean) / (len(accepted) + 1)
        s = _score(spec, members[i].replace(cand_mean), val_X, val_y, metric)
        if sign * s <= sign * best:
            accepted.append(i)
            mean, best = cand_mean, s
        trajectory.append(best)
        sizes.append(len(accepted))
    soup = members[order[0]].replace(mean)
    return SoupResult(soup, accepted, trajectory, scores, sizes, metric)


def write_trajectory(path, soup: SoupResult) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", f"val_{soup.metric}", "soup_size"])
        for step, (v, k) in enumerate(zip(soup.trajectory, soup.sizes)):
            wr.writerow([step, repr(float(v)), k])
    return path
