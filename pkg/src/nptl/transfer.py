"""Pre-training, linear probing, base-measure construction and alpha selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datasets import LabeledDataset
from .inference import bma_predict, metric_nll
from .models import ModelSpec, ParamVector, features, forward, init_params, predict_proba
from .optim import OptimizerConfig
from .sampler import (
    STAGE_ALPHA_SWEEP,
    SamplerConfig,
    Trained,
    finetune,
    derive_seed,
    nptl_sample,
)

__all__ = [
    "PseudoDataset",
    "AlphaSweep",
    "pretrain",
    "linear_probe",
    "make_base_measure",
    "select_alpha",
    "default_alpha_grid",
]


@dataclass(frozen=True, eq=False)
class PseudoDataset:
    """Atoms of the base measure: training inputs paired with probed predictions."""

    inputs: np.ndarray
    soft_labels: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.soft_labels.shape[0]:
            raise ValueError("inputs and soft labels differ in length")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def pretrain(spec: ModelSpec, upstream: LabeledDataset, opt: OptimizerConfig,
             init: Optional[ParamVector] = None) -> Trained:
    """Train every parameter on the upstream NLL from a seeded initialisation."""
    if len(upstream) == 0:
        raise ValueError("upstream dataset is empty")
    rng = np.random.default_rng(opt.seed)
    if init is None:
        init = init_params(spec, rng)
    return finetune(spec, init, upstream, opt, rng)


def linear_probe(spec: ModelSpec, theta_up: ParamVector, train: LabeledDataset,
                 opt: OptimizerConfig, n_classes: Optional[int] = None):
    """Freeze the feature extractor and fit a fresh head on downstream data.

    Returns ``(downstream_spec, Trained)``. The head is re-initialised because
    the downstream output dimension generally differs; the feature extractor
    coordinates are copied bit-for-bit and never touched.
    """
    if len(theta_up) != spec.n_params:
        raise ValueError("theta_up does not match spec")
    k = n_classes if n_classes is not None else train.n_classes
    down = spec.with_output_dim(k) if k is not None else spec
    feats = features(spec, theta_up, train.features)
    head_spec = ModelSpec("linear-regression" if down.is_regression else "softmax-linear",
                          feats.shape[1], down.output_dim)
    rng = np.random.default_rng(opt.seed)
    head0 = init_params(head_spec, rng)
    head_data = replace(train, features=feats)
    fit = finetune(head_spec, head0, head_data, opt, rng)
    values = np.concatenate([theta_up.phi, fit.params.values])
    probed = ParamVector.for_spec(down, values)
    return down, Trained(probed, fit.final_loss, fit.history)


def make_base_measure(spec: ModelSpec, probed: ParamVector, inputs) -> PseudoDataset:
    """One atom per training input, labelled by the probed model's prediction."""
    X = np.asarray(inputs, dtype=np.float64)
    if spec.is_regression:
        labels = forward(spec, probed, X)
    else:
        labels = predict_proba(spec, probed, X)
    return PseudoDataset(X, labels)


def default_alpha_grid(n: int) -> list[float]:
    return [c * n / 100.0 for c in (0.01, 0.1, 1.0, 10.0, 100.0)]


@dataclass
class AlphaSweep:
    alpha: float
    table: list  # (alpha, val_nll) rows in grid order
    seeds: list = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["alpha", "val_nll", "seed", "chosen"])
            for (a, v), s in zip(self.table, self.seeds):
                wr.writerow([repr(a), repr(v), s, int(a == self.alpha)])
        return path


def select_alpha(
    grid: Sequence[float],
    base: SamplerConfig,
    spec: ModelSpec,
    init: ParamVector,
    train: LabeledDataset,
    pseudo: PseudoDataset,
    val: LabeledDataset,
    M_search: int = 5,
    workers: int = 1,
) -> AlphaSweep:
    """Empirical-Bayes choice of alpha by validation NLL of the sampled BMA.

    Every candidate runs a full posterior-bootstrap with ``M_search`` members
    under its own derived master seed; ties go to the smaller alpha.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    if any(not a >= 0 for a in grid):
        raise ValueError(f"alpha grid entries must be non-negative, got {grid}")
    table, seeds = [], []
    for i, a in enumerate(grid):
        seed = derive_seed(base.master_seed, STAGE_ALPHA_SWEEP, i)
        cfg = replace(base, M=M_search, alpha=a, master_seed=seed)
        ens = nptl_sample(cfg, spec, init, train, pseudo, workers=workers)
        nll = metric_nll(bma_predict(ens, val.features), val.targets)
        table.append((a, nll))
        seeds.append(seed)
    best = min(range(len(grid)), key=lambda i: (table[i][1], grid[i]))
    return AlphaSweep(grid[best], table, seeds)
