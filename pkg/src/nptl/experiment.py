"""Declarative experiment configuration and the in-memory pipeline stages.

The command-line tool wraps these stages with file I/O; tests and scripts can
call them directly. Every random choice is seeded from the master seed through
:func:`nptl.sampler.derive_seed`.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import LabeledDataset, ShiftSpec, SplitSpec, apply_shift, gen_gaussian_mixture, read_csv, split
from .inference import EvalReport, bma_predict, evaluate, greedy_soup
from .models import ModelSpec, ParamVector, predict_proba
from .optim import OptimizerConfig
from .sampler import PosteriorEnsemble, SamplerConfig, derive_seed, ensemble_baseline, nptl_sample
from .transfer import AlphaSweep, PseudoDataset, default_alpha_grid, linear_probe, make_base_measure, pretrain, select_alpha

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "DEFAULT_CONFIG",
    "DataBundle",
    "make_data",
    "run_pretrain",
    "run_probe",
    "run_sweep",
    "run_nptl",
    "run_baselines",
    "run_soup",
    "run_benchmark",
    "report_table",
    "evaluate_ensemble",
    "evaluate_single",
    "METHOD_NPTL",
    "METHOD_ENSEMBLE",
    "METHOD_FINETUNE",
    "METHOD_SOUP",
]

CONFIG_FORMAT = "nptl-config/1"

# seed namespaces under the master seed
SEED_UPSTREAM, SEED_DOWNSTREAM, SEED_SPLIT = 10, 11, 12
SEED_PRETRAIN, SEED_PROBE, SEED_SAMPLER, SEED_ENSEMBLE, SEED_FINETUNE, SEED_SWEEP = 20, 21, 22, 23, 24, 25

METHOD_NPTL = "NPTL"
METHOD_ENSEMBLE = "Ensemble+L2SP"
METHOD_FINETUNE = "Fine-tune"
METHOD_SOUP = "NPTL-Soup"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


DEFAULT_CONFIG: dict = {
    "format": CONFIG_FORMAT,
    "seed": 0,
    "out": "runs/default",
    "dataset": {
        "name": "shifted-mixture",
        "files": None,
        "generator": {
            "k": 8,
            "d": 4,
            "separation": 1.0,
            "n_upstream": 2000,
            "n_downstream": 400,
        },
        "shift": {
            "rotation_angle": 0.6,
            "rotation_plane": [0, 2],
            "mean_shift": None,
            "class_subset": [0, 2, 4, 6],
            "label_permutation": [2, 0, 3, 1],
        },
        "split": {"test": 0.4, "val": 0.2},
    },
    "model": {
        "architecture": "mlp",
        "input_dim": 4,
        "output_dim": 8,
        "hidden_sizes": [64],
        "activation": "relu",
        "regression": False,
    },
    "pipeline": {
        "pretrain": {"base_lr": 0.1, "schedule": "cosine", "momentum": 0.9, "batch_size": 64, "epochs": 20},
        "probe": {"base_lr": 0.1, "schedule": "cosine", "momentum": 0.9, "batch_size": 32, "epochs": 30},
        "finetune": {"base_lr": 0.1, "schedule": "cosine", "momentum": 0.9, "batch_size": 32, "epochs": 150},
        # weight-decay convention: beta = 1 / (l2sp_decay * n_train)
        "l2sp_decay": 0.01,
    },
    "sampler": {
        "M": 10,
        "alpha": None,  # None: take the alpha chosen by the sweep
        "L": 10,
        "blocked": True,
        "alpha_grid": None,  # None: {0.01, 0.1, 1, 10, 100} * n / 100
        "M_search": 5,
    },
    "eval": {"bins": 15, "soup_metric": "nll"},
}

_FILE_KEYS = ("upstream", "train", "val", "test")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    spec: ModelSpec
    shift: ShiftSpec
    pretrain_opt: OptimizerConfig
    probe_opt: OptimizerConfig
    finetune_opt: OptimizerConfig

    @classmethod
    def from_dict(cls, doc: Optional[dict] = None, base_dir=None) -> "ExperimentConfig":
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected a JSON object")
        raw = _merge(DEFAULT_CONFIG, doc)
        if raw["format"] != CONFIG_FORMAT:
            raise ConfigError("format", f"expected {CONFIG_FORMAT!r}, got {raw['format']!r}")
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        spec = _build("model", ModelSpec.from_dict, raw["model"])
        sh = raw["dataset"]["shift"]
        shift = _build("dataset.shift", ShiftSpec,
                       rotation_angle=float(sh["rotation_angle"]),
                       rotation_plane=tuple(sh["rotation_plane"]),
                       mean_shift=sh["mean_shift"],
                       class_subset=sh["class_subset"],
                       label_permutation=sh["label_permutation"])
        opts = {s: _build(f"pipeline.{s}", OptimizerConfig.from_dict, raw["pipeline"][s])
                for s in ("pretrain", "probe", "finetune")}
        sp = raw["dataset"]["split"]
        _build("dataset.split", SplitSpec.holdout, sp["test"], sp["val"])
        gen = raw["dataset"]["generator"]
        for key in ("k", "d", "n_upstream", "n_downstream"):
            if not isinstance(gen[key], int) or gen[key] < 1:
                raise ConfigError(f"dataset.generator.{key}", "must be a positive integer")
        if gen["d"] != spec.input_dim and raw["dataset"]["files"] is None:
            raise ConfigError("model.input_dim", f"must equal dataset.generator.d = {gen['d']}")
        decay = raw["pipeline"]["l2sp_decay"]
        if not isinstance(decay, (int, float)) or not decay > 0:
            raise ConfigError("pipeline.l2sp_decay", "must be positive")
        s = raw["sampler"]
        for key in ("M", "L", "M_search"):
            if not isinstance(s[key], int) or s[key] < 1:
                raise ConfigError(f"sampler.{key}", "must be a positive integer")
        if s["alpha"] is not None and not (isinstance(s["alpha"], (int, float)) and s["alpha"] >= 0):
            raise ConfigError("sampler.alpha", "must be null or a non-negative number")
        if s["alpha_grid"] is not None:
            if not s["alpha_grid"] or any(not isinstance(a, (int, float)) or a < 0 for a in s["alpha_grid"]):
                raise ConfigError("sampler.alpha_grid", "must be a non-empty list of non-negative numbers")
        if not isinstance(s["blocked"], bool):
            raise ConfigError("sampler.blocked", "must be true or false")
        ev = raw["eval"]
        if not isinstance(ev["bins"], int) or ev["bins"] < 1:
            raise ConfigError("eval.bins", "must be a positive integer")
        if ev["soup_metric"] not in ("nll", "acc"):
            raise ConfigError("eval.soup_metric", "must be 'nll' or 'acc'")
        files = raw["dataset"]["files"]
        if files is not None:
            if not isinstance(files, dict) or set(files) != set(_FILE_KEYS):
                raise ConfigError("dataset.files", f"must map exactly {list(_FILE_KEYS)} to CSV paths")
            root = Path(base_dir) if base_dir is not None else Path(".")
            for key in _FILE_KEYS:
                path = root / files[key]
                if not path.exists():
                    raise ConfigError(f"dataset.files.{key}", f"file not found: {path}")
                files[key] = str(path)
        return cls(raw, spec, shift, opts["pretrain"], opts["probe"], opts["finetune"])

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def with_overrides(self, **values) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"sampler.M": 3}``."""
        doc = copy.deepcopy(self.raw)
        for dotted, value in values.items():
            node = doc
            *parents, last = dotted.split(".")
            for p in parents:
                node = node[p]
            node[last] = value
        return ExperimentConfig.from_dict(doc)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def dataset_name(self) -> str:
        return str(self.raw["dataset"]["name"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def sampler_config(self, alpha: float, master_seed: int, M: Optional[int] = None) -> SamplerConfig:
        s = self.raw["sampler"]
        return SamplerConfig(M=s["M"] if M is None else M, alpha=float(alpha), L=s["L"],
                             opt=self.finetune_opt, master_seed=master_seed, blocked=s["blocked"])


@dataclass(frozen=True)
class DataBundle:
    upstream: LabeledDataset
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    def as_dict(self) -> dict:
        return {"upstream": self.upstream, "train": self.train, "val": self.val, "test": self.test}


def make_data(cfg: ExperimentConfig) -> DataBundle:
    """Upstream mixture and the shifted, split downstream task (or the CSV files)."""
    files = cfg.raw["dataset"]["files"]
    if files is not None:
        return DataBundle(*(read_csv(files[k]) for k in _FILE_KEYS))
    g = cfg.raw["dataset"]["generator"]
    seed = cfg.seed
    up = gen_gaussian_mixture(g["k"], g["d"], g["n_upstream"], g["separation"],
                              derive_seed(seed, SEED_UPSTREAM))
    down = gen_gaussian_mixture(g["k"], g["d"], g["n_downstream"], g["separation"],
                                derive_seed(seed, SEED_DOWNSTREAM))
    down = apply_shift(down, cfg.shift, seed=derive_seed(seed, SEED_DOWNSTREAM))
    sp = cfg.raw["dataset"]["split"]
    train, val, test = split(down, SplitSpec.holdout(sp["test"], sp["val"], derive_seed(seed, SEED_SPLIT)))
    return DataBundle(up, train, val, test)


def _seeded(opt: OptimizerConfig, seed: int) -> OptimizerConfig:
    return replace(opt, seed=seed)


def upstream_spec(cfg: ExperimentConfig, data: DataBundle) -> ModelSpec:
    k = data.upstream.n_classes
    return cfg.spec if k is None else cfg.spec.with_output_dim(k)


def downstream_spec(cfg: ExperimentConfig, data: DataBundle) -> ModelSpec:
    k = data.train.n_classes
    return cfg.spec if k is None else cfg.spec.with_output_dim(k)


def run_pretrain(cfg: ExperimentConfig, data: DataBundle):
    spec = upstream_spec(cfg, data)
    return spec, pretrain(spec, data.upstream, _seeded(cfg.pretrain_opt, derive_seed(cfg.seed, SEED_PRETRAIN)))


def run_probe(cfg: ExperimentConfig, data: DataBundle, up_spec: ModelSpec, theta_up: ParamVector):
    opt = _seeded(cfg.probe_opt, derive_seed(cfg.seed, SEED_PROBE))
    return linear_probe(up_spec, theta_up, data.train, opt, n_classes=data.train.n_classes)


def run_sweep(cfg: ExperimentConfig, data: DataBundle, spec: ModelSpec, probed: ParamVector,
              workers: int = 1) -> AlphaSweep:
    grid = cfg.raw["sampler"]["alpha_grid"] or default_alpha_grid(len(data.train))
    pseudo = make_base_measure(spec, probed, data.train.features)
    base = cfg.sampler_config(0.0, derive_seed(cfg.seed, SEED_SWEEP))
    return select_alpha(grid, base, spec, probed, data.train, pseudo, data.val,
                        M_search=cfg.raw["sampler"]["M_search"], workers=workers)


def run_nptl(cfg: ExperimentConfig, data: DataBundle, spec: ModelSpec, probed: ParamVector,
             alpha: float, workers: int = 1, M: Optional[int] = None) -> PosteriorEnsemble:
    pseudo = make_base_measure(spec, probed, data.train.features)
    sc = cfg.sampler_config(alpha, derive_seed(cfg.seed, SEED_SAMPLER), M=M)
    return nptl_sample(sc, spec, probed, data.train, pseudo, workers=workers)


def l2sp_beta(cfg: ExperimentConfig, n_train: int) -> float:
    return 1.0 / (float(cfg.raw["pipeline"]["l2sp_decay"]) * n_train)


def run_baselines(cfg: ExperimentConfig, data: DataBundle, spec: ModelSpec, probed: ParamVector,
                  workers: int = 1, M: Optional[int] = None) -> dict:
    """Ensemble of L2SP fine-tunes and a single L2SP fine-tune, anchored at the probe."""
    beta = l2sp_beta(cfg, len(data.train))
    count = cfg.raw["sampler"]["M"] if M is None else M
    ens = ensemble_baseline(count, spec, probed, data.train, cfg.finetune_opt,
                            derive_seed(cfg.seed, SEED_ENSEMBLE), beta=beta, anchor=probed, workers=workers)
    single = ensemble_baseline(1, spec, probed, data.train, cfg.finetune_opt,
                               derive_seed(cfg.seed, SEED_FINETUNE), beta=beta, anchor=probed)
    return {METHOD_ENSEMBLE: ens, METHOD_FINETUNE: single}


def run_soup(cfg: ExperimentConfig, data: DataBundle, ensemble: PosteriorEnsemble):
    return greedy_soup(ensemble, data.val.features, data.val.targets, metric=cfg.raw["eval"]["soup_metric"])


def _evaluate_probs(cfg, probs, ds, method, members, split_name):
    return evaluate(probs, ds.targets, method, members, cfg.dataset_name, cfg.seed, split_name,
                    bins=cfg.raw["eval"]["bins"])


def evaluate_ensemble(cfg: ExperimentConfig, data: DataBundle, method: str, ens: PosteriorEnsemble) -> list[EvalReport]:
    return [_evaluate_probs(cfg, bma_predict(ens, ds.features), ds, method, len(ens), name)
            for name, ds in (("val", data.val), ("test", data.test))]


def evaluate_single(cfg: ExperimentConfig, data: DataBundle, method: str, spec: ModelSpec,
                    params: ParamVector) -> list[EvalReport]:
    return [_evaluate_probs(cfg, predict_proba(spec, params, ds.features), ds, method, 1, name)
            for name, ds in (("val", data.val), ("test", data.test))]


def run_benchmark(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Whole pipeline in memory: reports for every method plus stage artefacts."""
    data = make_data(cfg)
    up_spec, up = run_pretrain(cfg, data)
    spec, probed = run_probe(cfg, data, up_spec, up.params)
    alpha = cfg.raw["sampler"]["alpha"]
    sweep = None
    if alpha is None:
        sweep = run_sweep(cfg, data, spec, probed.params, workers)
        alpha = sweep.alpha
    nptl = run_nptl(cfg, data, spec, probed.params, alpha, workers)
    baselines = run_baselines(cfg, data, spec, probed.params, workers)
    soup = run_soup(cfg, data, nptl)
    reports = evaluate_ensemble(cfg, data, METHOD_NPTL, nptl)
    for method, ens in baselines.items():
        reports += evaluate_ensemble(cfg, data, method, ens)
    reports += evaluate_single(cfg, data, METHOD_SOUP, spec, soup.params)
    member_test_nll = [evaluate_single(cfg, data, "member", spec, p)[1].nll for p in nptl.members]
    return {"data": data, "spec": spec, "probed": probed.params, "alpha": alpha, "sweep": sweep,
            "nptl": nptl, "baselines": baselines, "soup": soup, "reports": reports,
            "member_test_nll": member_test_nll}


def report_table(reports) -> dict:
    """``{(method, split): EvalReport}`` for quick lookups."""
    return {(r.method, r.split): r for r in reports}
