"""Parallel posterior-bootstrap sampling and the fine-tuning baselines.

Each posterior sample draws fresh Dirichlet weights over the ``n`` training
atoms and the ``n`` pseudo atoms of the base measure and minimises the
weighted loss from the probed initialisation. Samples share no state: member
``m`` is a pure function of ``(master_seed, m)``, so the ensemble does not
depend on worker count or completion order.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from . import paramio
from .datasets import LabeledDataset
from .dirichlet import (
    DirichletSpec,
    WeightDraw,
    WeightUnderflowWarning,
    draw_weights_blocked,
    draw_weights_nonblocked,
    make_block_mapping,
)
from .models import ModelSpec, ParamVector, as_soft_targets, l2sp_penalty, loss_and_grad
from .optim import OptimizerConfig, TrainingDiverged, sgd_minimize

__all__ = [
    "SamplerConfig",
    "PosteriorEnsemble",
    "MemberRecord",
    "AllMembersDiverged",
    "derive_seed",
    "nptl_objective",
    "nptl_sample",
    "ensemble_baseline",
    "l2sp_finetune",
    "finetune",
    "solve_weighted_least_squares",
]

# spawn-key namespaces for derived seeds
STAGE_NPTL = 0
STAGE_ENSEMBLE = 1
STAGE_ALPHA_SWEEP = 2

ENSEMBLE_FORMAT = "nptl-ensemble/1"


class AllMembersDiverged(RuntimeError):
    pass


def derive_seed(master_seed: int, *key: int) -> int:
    """64-bit seed for ``key`` under ``master_seed`` via ``numpy.random.SeedSequence``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class SamplerConfig:
    M: int = 10
    alpha: float = 1.0
    L: int = 10
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    master_seed: int = 0
    blocked: bool = True
    solver: str = "sgd"  # or "exact" (weighted least squares, regression only)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.solver not in ("sgd", "exact"):
            raise ValueError(f"unknown solver {self.solver!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["opt"] = self.opt.to_dict()
        return d


@dataclass
class MemberRecord:
    index: int
    seed: int
    objective: Optional[float] = None
    initial_objective: Optional[float] = None
    wall_time: float = 0.0
    error: Optional[str] = None
    warnings: list = field(default_factory=list)


@dataclass
class PosteriorEnsemble:
    spec: ModelSpec
    members: list
    records: list
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def save(self, directory, **meta) -> Path:
        """One binary ParamVector per member plus ``manifest.json``.

        Keyword arguments are stored verbatim in the manifest.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        ok = [r for r in self.records if r.error is None]
        for rec, params in zip(ok, self.members):
            name = f"member_{rec.index:04d}.npv"
            paramio.save(directory / name, self.spec, params)
            files.append(name)
        manifest = {
            "format": ENSEMBLE_FORMAT,
            "spec": self.spec.to_dict(),
            "spec_sha256": self.spec.digest().hex(),
            "config": self.config,
            "members": files,
            "records": [asdict(r) for r in self.records],
            **meta,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "PosteriorEnsemble":
        directory = Path(directory)
        mpath = directory / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"missing ensemble manifest {mpath}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != ENSEMBLE_FORMAT:
            raise ValueError(f"{mpath}: unsupported format {manifest.get('format')!r}")
        spec = ModelSpec.from_dict(manifest["spec"])
        members = []
        for name in manifest["members"]:
            path = directory / name
            if not path.exists():
                raise FileNotFoundError(f"missing ensemble member file {path}")
            members.append(paramio.load(path, spec))
        records = [MemberRecord(**r) for r in manifest["records"]]
        return cls(spec, members, records, manifest.get("config", {}))


@dataclass(frozen=True, eq=False)
class _Problem:
    """The stacked 2n-point weighted dataset shared by every member."""

    spec: ModelSpec
    init: ParamVector
    X: np.ndarray
    T: np.ndarray
    n: int

    @classmethod
    def build(cls, spec, init, train: LabeledDataset, pseudo) -> "_Problem":
        n = len(train)
        if pseudo.inputs.shape[0] != n:
            raise ValueError(f"pseudo dataset has {pseudo.inputs.shape[0]} atoms, train has {n}")
        if spec.is_regression:
            yt = np.asarray(train.targets, dtype=np.float64).reshape(n, -1)
            yp = np.asarray(pseudo.soft_labels, dtype=np.float64).reshape(n, -1)
        else:
            yt = as_soft_targets(train.targets, spec.output_dim)
            yp = as_soft_targets(pseudo.soft_labels, spec.output_dim)
        X = np.vstack([train.features, pseudo.inputs])
        return cls(spec, init, X, np.vstack([yt, yp]), n)


def nptl_objective(spec: ModelSpec, params: ParamVector, train: LabeledDataset, pseudo, draw: WeightDraw) -> float:
    """``sum_j w_j loss(x_j, y_j) + sum_k w~_k loss(x_k, f_probed(x_k))``."""
    n = len(train)
    if draw.w.shape != (n,) or draw.w_tilde.shape != (n,):
        raise ValueError(f"weight draw must have length {n} on both sides")
    prob = _Problem.build(spec, params, train, pseudo)
    return loss_and_grad(spec, params, prob.X, prob.T, draw.concatenated(), need_grad=False)[0]


def solve_weighted_least_squares(spec: ModelSpec, X, Y, weights) -> ParamVector:
    """Exact minimiser of ``sum_i w_i 0.5 ||y_i - x_i W - b||^2`` (min-norm if singular)."""
    if spec.architecture != "linear-regression":
        raise ValueError("exact solver requires the linear-regression architecture")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    sw = np.sqrt(np.asarray(weights, dtype=np.float64))[:, None]
    A = np.hstack([X, np.ones((X.shape[0], 1))]) * sw
    coef = np.linalg.lstsq(A, Y * sw, rcond=None)[0]
    values = np.concatenate([coef[:-1].ravel(), coef[-1]])
    return ParamVector.for_spec(spec, values)


def _draw(config: SamplerConfig, n: int, rng) -> WeightDraw:
    if config.blocked:
        L = min(config.L, n)
        mapping = make_block_mapping(n, L, rng)
        return draw_weights_blocked(DirichletSpec(n, L, config.alpha), mapping, rng, warn_underflow=True)
    return draw_weights_nonblocked(n, config.alpha, rng, warn_underflow=True)


def _run_nptl_member(prob: _Problem, config: SamplerConfig, m: int):
    seed = derive_seed(config.master_seed, STAGE_NPTL, m)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    # recorded rather than emitted here so they survive worker processes
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        draw = _draw(config, prob.n, rng)
    w = draw.concatenated()
    spec, init = prob.spec, prob.init
    f_init = loss_and_grad(spec, init, prob.X, prob.T, w, need_grad=False)[0]
    rec = MemberRecord(m, seed, initial_objective=f_init, warnings=[str(c.message) for c in caught])
    try:
        if config.solver == "exact":
            params = solve_weighted_least_squares(spec, prob.X, prob.T, w)
            rec.objective = loss_and_grad(spec, params, prob.X, prob.T, w, need_grad=False)[0]
        else:
            def batch(values, idx):
                return loss_and_grad(spec, init.replace(values), prob.X[idx], prob.T[idx], w[idx])

            fit = sgd_minimize(batch, init.values, 2 * prob.n, config.opt, rng=rng)
            params = init.replace(fit.values)
            rec.objective = fit.objective
    except TrainingDiverged as exc:
        rec.error = str(exc)
        params = None
    rec.wall_time = time.perf_counter() - t0
    return rec, params


def _run_parallel(fn, count: int, workers: int):
    if workers <= 1 or count == 1:
        return [fn(m) for m in range(count)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order regardless of completion order
        return list(pool.map(fn, range(count), chunksize=max(1, count // (4 * workers))))


def _collect(spec, results, config_dict) -> PosteriorEnsemble:
    records = [r for r, _ in results]
    flagged = [r for r in records if r.warnings]
    if flagged:
        warnings.warn(f"{len(flagged)} of {len(records)} members drew underflowed weights, "
                      f"e.g. member {flagged[0].index}: {flagged[0].warnings[0]}",
                      WeightUnderflowWarning, stacklevel=3)
    members = [p for _, p in results if p is not None]
    if not members:
        raise AllMembersDiverged(f"all {len(records)} members diverged: {records[0].error}")
    return PosteriorEnsemble(spec, members, records, config_dict)


def nptl_sample(
    config: SamplerConfig,
    spec: ModelSpec,
    init: ParamVector,
    train: LabeledDataset,
    pseudo,
    workers: int = 1,
) -> PosteriorEnsemble:
    """Draw ``config.M`` posterior samples starting from the probed parameters."""
    prob = _Problem.build(spec, init, train, pseudo)
    results = _run_parallel(partial(_run_nptl_member, prob, config), config.M, workers)
    cfg = {"method": "nptl", **config.to_dict()}
    return _collect(spec, results, cfg)


@dataclass
class Trained:
    params: ParamVector
    final_loss: float  # mean per-example objective at the returned parameters
    history: list = field(default_factory=list)
    penalty_history: list = field(default_factory=list)


def finetune(spec, init, train, opt, rng=None, anchor=None, beta=None) -> Trained:
    """Unweighted fine-tune of all parameters, optionally with the L2SP penalty."""
    n = len(train)
    X = train.features
    T = (np.asarray(train.targets, dtype=np.float64).reshape(n, -1) if spec.is_regression
         else as_soft_targets(train.targets, spec.output_dim)) if n else None
    ones = np.ones(n)

    def batch(values, idx):
        return loss_and_grad(spec, init.replace(values), X[idx], T[idx], ones[idx])

    reg = None
    penalties = []
    if beta is not None:
        anchor = init if anchor is None else anchor

        def reg(values):
            return l2sp_penalty(init.replace(values), anchor, beta)

        penalties.append(reg(init.values)[0])
    on_epoch = (lambda e, v: penalties.append(reg(v)[0])) if reg is not None else None
    fit = sgd_minimize(batch, init.values, n, opt, rng=rng, regulariser=reg, on_epoch=on_epoch)
    return Trained(init.replace(fit.values), fit.objective / max(n, 1), fit.history, penalties)


def l2sp_finetune(
    spec: ModelSpec,
    init: ParamVector,
    anchor: ParamVector,
    beta: float,
    train: LabeledDataset,
    opt: OptimizerConfig,
    rng: Optional[np.random.Generator] = None,
) -> Trained:
    """Fine-tune all parameters on NLL plus ``||theta - anchor||^2 / (2 beta)``.

    ``penalty_history`` holds the penalty at the start and after each epoch.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return finetune(spec, init, train, opt, rng, anchor=anchor, beta=beta)


def _run_ensemble_member(spec, init, train, opt, master_seed, anchor, beta, m):
    seed = derive_seed(master_seed, STAGE_ENSEMBLE, m)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rec = MemberRecord(m, seed)
    try:
        out = finetune(spec, init, train, opt, rng, anchor=anchor, beta=beta)
        rec.objective = out.final_loss
        params = out.params
    except TrainingDiverged as exc:
        rec.error = str(exc)
        params = None
    rec.wall_time = time.perf_counter() - t0
    return rec, params


def ensemble_baseline(
    count: int,
    spec: ModelSpec,
    init: ParamVector,
    train: LabeledDataset,
    opt: OptimizerConfig,
    master_seed: int,
    beta: Optional[float] = None,
    anchor: Optional[ParamVector] = None,
    workers: int = 1,
) -> PosteriorEnsemble:
    """Independent unweighted fine-tunes from ``init`` that differ only in seed.

    With ``beta`` set every member carries the L2SP penalty toward ``anchor``
    (default: ``init``).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    fn = partial(_run_ensemble_member, spec, init, train, opt, master_seed, anchor, beta)
    results = _run_parallel(fn, count, workers)
    cfg = {"method": "ensemble" if beta is None else "ensemble+l2sp", "count": count,
           "beta": beta, "opt": opt.to_dict(), "master_seed": master_seed}
    return _collect(spec, results, cfg)
