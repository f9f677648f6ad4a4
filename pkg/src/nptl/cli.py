"""Command-line harness for the transfer pipeline and the diagnostics.

Stages write under ``--out``: ``data/``, ``pretrain/``, ``probe/``, ``sweep/``,
``sample/<method>/``, ``soup/`` and ``diagnostics/``, each with a
``manifest.json`` carrying the config hash. ``results.csv`` collects
evaluation rows, ``runs.csv`` logs every invocation and ``manifest.json`` at
the top indexes all of it. A stage whose inputs are missing runs the stages
it depends on first.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
error, 3 every sampler member diverged.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, paramio
from .datasets import read_csv, write_csv, write_manifest
from .diagnostics import (
    blocked_vs_nonblocked_test,
    energy_permutation_test,
    ks_trend,
    sandwich_check,
    vn_bound_check,
    write_reports,
)
from .dirichlet import draw_weights_decomposed
from .experiment import (
    METHOD_ENSEMBLE,
    METHOD_FINETUNE,
    METHOD_NPTL,
    METHOD_SOUP,
    ConfigError,
    DataBundle,
    ExperimentConfig,
    downstream_spec,
    evaluate_ensemble,
    evaluate_single,
    make_data,
    run_baselines,
    run_nptl,
    run_pretrain,
    run_probe,
    run_soup,
    run_sweep,
    upstream_spec,
)
from .inference import append_reports, write_trajectory
from .models import ModelSpec
from .sampler import AllMembersDiverged, PosteriorEnsemble, derive_seed

__all__ = ["main", "run_command", "emit_report", "EXIT_OK", "EXIT_RUNTIME", "EXIT_CONFIG", "EXIT_DIVERGED"]

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

STAGE_FORMAT = "nptl-stage/1"
INDEX_FORMAT = "nptl-run-index/1"
SAMPLE_METHODS = {"nptl": METHOD_NPTL, "ensemble-l2sp": METHOD_ENSEMBLE, "finetune": METHOD_FINETUNE}
REPORT_FIELDS = ["method", "dataset", "runs", "acc_mean", "acc_std", "nll_mean", "nll_std", "ece_mean", "ece_std"]
RUN_FIELDS = ["command", "argv", "config_sha256", "seed", "exit_code", "wall_time", "message"]


class StageError(ValueError):
    """Inconsistent or missing stage artefacts; exits with the config code."""


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_hash(cfg: ExperimentConfig) -> str:
    doc = {"dataset": cfg.raw["dataset"], "seed": cfg.seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


class Run:
    """One invocation: resolved config, output directory and stage helpers."""

    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        out.mkdir(parents=True, exist_ok=True)

    # -- manifests -----------------------------------------------------------
    def stage_dir(self, name: str) -> Path:
        return self.out / name

    def write_stage(self, name: str, files: list, spec: Optional[ModelSpec] = None, **extra) -> Path:
        d = self.stage_dir(name)
        doc = {
            "format": STAGE_FORMAT,
            "stage": name,
            "version": __version__,
            "config_sha256": self.cfg.digest(),
            "dataset_sha256": _dataset_hash(self.cfg),
            "seed": self.cfg.seed,
            "spec_sha256": None if spec is None else spec.digest().hex(),
            "files": {f: _sha256_file(d / f) for f in files},
            **extra,
        }
        path = d / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        self.update_index()
        return path

    def read_stage(self, name: str) -> Optional[dict]:
        path = self.stage_dir(name) / "manifest.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text())
        if doc.get("format") != STAGE_FORMAT:
            raise StageError(f"{path}: unsupported format {doc.get('format')!r}")
        if doc.get("dataset_sha256") != _dataset_hash(self.cfg):
            raise ConfigError("dataset", f"{path} was produced from a different dataset section or seed "
                                         f"(seed {doc.get('seed')}); use a fresh --out")
        for f in doc.get("files", {}):
            if not (self.stage_dir(name) / f).exists():
                raise StageError(f"missing stage file {self.stage_dir(name) / f}")
        return doc

    def check_spec(self, doc: dict, spec: ModelSpec, stage: str):
        if doc.get("spec_sha256") != spec.digest().hex():
            raise ConfigError("model", f"spec hash mismatch: {stage} output was built for a different "
                                       "model spec than the current config")

    def update_index(self):
        _update_index(self.out)

    # -- stages --------------------------------------------------------------
    def data(self) -> DataBundle:
        doc = self.read_stage("data")
        if doc is None:
            return self.gen_data()
        d = self.stage_dir("data")
        ks = doc["n_classes"]
        return DataBundle(*(read_csv(d / f"{k}.csv", n_classes=ks[k]) for k in ("upstream", "train", "val", "test")))

    def gen_data(self) -> DataBundle:
        data = make_data(self.cfg)
        d = self.stage_dir("data")
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for name, ds in data.as_dict().items():
            write_csv(ds, d / f"{name}.csv")
            files.append(f"{name}.csv")
        write_manifest(d / "datasets.json", self.cfg.seed, data.as_dict(), self.cfg.shift)
        files.append("datasets.json")
        self.write_stage("data", files, n_classes={k: v.n_classes for k, v in data.as_dict().items()})
        return data

    def pretrain(self, data: Optional[DataBundle] = None, force: bool = False):
        data = self.data() if data is None else data
        spec = upstream_spec(self.cfg, data)
        doc = None if force else self.read_stage("pretrain")
        if doc is not None:
            self.check_spec(doc, spec, "pretrain")
            return spec, paramio.load(self.stage_dir("pretrain") / "theta_up.npv", spec)
        spec, fit = run_pretrain(self.cfg, data)
        d = self.stage_dir("pretrain")
        d.mkdir(parents=True, exist_ok=True)
        paramio.save(d / "theta_up.npv", spec, fit.params)
        self.write_stage("pretrain", ["theta_up.npv"], spec, spec_doc=spec.to_dict(),
                         final_loss=fit.final_loss, history=fit.history)
        return spec, fit.params

    def probe(self, data: Optional[DataBundle] = None, force: bool = False):
        data = self.data() if data is None else data
        spec = downstream_spec(self.cfg, data)
        doc = None if force else self.read_stage("probe")
        if doc is not None:
            self.check_spec(doc, spec, "probe")
            return spec, paramio.load(self.stage_dir("probe") / "theta_probe.npv", spec)
        up_spec, theta_up = self.pretrain(data)
        spec, fit = run_probe(self.cfg, data, up_spec, theta_up)
        d = self.stage_dir("probe")
        d.mkdir(parents=True, exist_ok=True)
        paramio.save(d / "theta_probe.npv", spec, fit.params)
        self.write_stage("probe", ["theta_probe.npv"], spec, spec_doc=spec.to_dict(),
                         final_loss=fit.final_loss, history=fit.history)
        return spec, fit.params

    def sweep(self, data: Optional[DataBundle] = None, force: bool = False) -> float:
        data = self.data() if data is None else data
        doc = None if force else self.read_stage("sweep")
        if doc is not None:
            return float(doc["alpha"])
        spec, probed = self.probe(data)
        result = run_sweep(self.cfg, data, spec, probed, self.workers)
        d = self.stage_dir("sweep")
        d.mkdir(parents=True, exist_ok=True)
        result.write_csv(d / "alpha_sweep.csv")
        self.write_stage("sweep", ["alpha_sweep.csv"], spec, alpha=result.alpha,
                         table=[list(r) for r in result.table], seeds=result.seeds)
        return result.alpha

    def alpha(self, data: DataBundle) -> float:
        a = self.cfg.raw["sampler"]["alpha"]
        return float(a) if a is not None else self.sweep(data)

    def sample(self, methods: list, data: Optional[DataBundle] = None) -> dict:
        data = self.data() if data is None else data
        spec, probed = self.probe(data)
        out = {}
        for m in methods:
            if m == "nptl":
                alpha = self.alpha(data)
                out[m] = run_nptl(self.cfg, data, spec, probed, alpha, self.workers)
            else:
                base = run_baselines(self.cfg, data, spec, probed, self.workers)
                out[m] = base[SAMPLE_METHODS[m]]
        root = self.stage_dir("sample")
        for m, ens in out.items():
            ens.save(root / m, config_sha256=self.cfg.digest(), seed=self.cfg.seed)
        files = sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
        self.write_stage("sample", files, spec, methods=sorted(p.name for p in root.iterdir() if p.is_dir()))
        return out

    def ensembles(self, spec: ModelSpec, explicit: Optional[list] = None) -> dict:
        dirs = [Path(p) for p in explicit] if explicit else \
            sorted(p for p in self.stage_dir("sample").glob("*") if p.is_dir())
        if not dirs:
            raise StageError(f"no ensembles under {self.stage_dir('sample')}; run 'sample' first")
        out = {}
        for d in dirs:
            ens = PosteriorEnsemble.load(d)
            if ens.spec.digest() != spec.digest():
                raise ConfigError("model", f"spec hash mismatch: ensemble {d} was built for a different model spec")
            out[SAMPLE_METHODS.get(d.name, d.name)] = ens
        return out


def _update_index(out: Path):
    stages = sorted(str(p.relative_to(out)) for p in out.rglob("manifest.json") if p.parent != out)
    tables = sorted(p.name for p in out.glob("*.csv"))
    doc = {"format": INDEX_FORMAT, "stage_manifests": stages, "tables": tables}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _append_runs(out: Path, row: dict):
    path = out / "runs.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RUN_FIELDS)
        if new:
            wr.writeheader()
        wr.writerow(row)


def emit_report(out_dir) -> Path:
    """Per (method, dataset) mean and sample standard deviation over seeds.

    Uses the test-split rows of ``results.csv``; when a (method, dataset,
    seed) was evaluated more than once the last row wins. A single run gets
    standard deviation 0.
    """
    out = Path(out_dir)
    path = out / "results.csv"
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r.get("split", "test") == "test"]
    if not rows:
        raise StageError(f"no test results in {path}")
    latest = {}
    for r in rows:
        latest[(r["method"], r["dataset"], r["seed"])] = r
    groups: dict = {}
    for (method, dataset, _), r in latest.items():
        groups.setdefault((method, dataset), []).append(r)
    report = out / "report.csv"
    with report.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        wr.writeheader()
        for (method, dataset), rs in sorted(groups.items()):
            row = {"method": method, "dataset": dataset, "runs": len(rs)}
            for metric in ("acc", "nll", "ece"):
                v = np.array([float(r[metric]) for r in rs])
                # centred on the first run so identical runs give exactly std 0
                d = v - v[0]
                row[f"{metric}_mean"] = repr(float(v[0] + d.mean()))
                row[f"{metric}_std"] = repr(float(d.std(ddof=1)) if v.size > 1 else 0.0)
            wr.writerow(row)
    return report


# -- subcommand bodies ---------------------------------------------------------

def _cmd_gen_data(run: Run, args):
    data = run.gen_data()
    print(" ".join(f"{k}={len(v)}" for k, v in data.as_dict().items()))


def _cmd_pretrain(run: Run, args):
    spec, _ = run.pretrain(force=True)
    print(f"pretrained {spec.n_params} parameters -> {run.stage_dir('pretrain')}")


def _cmd_probe(run: Run, args):
    spec, _ = run.probe(force=True)
    print(f"probed head of {spec.head_size} parameters -> {run.stage_dir('probe')}")


def _cmd_sweep(run: Run, args):
    alpha = run.sweep(force=True)
    print(f"chosen alpha {alpha!r}")


def _cmd_sample(run: Run, args):
    methods = list(SAMPLE_METHODS) if args.method == "all" else [args.method]
    out = run.sample(methods)
    for m, ens in out.items():
        failed = sum(r.error is not None for r in ens.records)
        print(f"{m}: {len(ens)} members ({failed} diverged) -> {run.stage_dir('sample') / m}")


def _cmd_evaluate(run: Run, args):
    data = run.data()
    spec = downstream_spec(run.cfg, data)
    if not args.ensemble and not any(p.is_dir() for p in run.stage_dir("sample").glob("*")):
        run.sample(list(SAMPLE_METHODS), data)
    reports = []
    for method, ens in run.ensembles(spec, args.ensemble).items():
        reports += evaluate_ensemble(run.cfg, data, method, ens)
    append_reports(run.out / "results.csv", reports)
    _print_reports(reports)


def _cmd_soup(run: Run, args):
    data = run.data()
    spec = downstream_spec(run.cfg, data)
    explicit = [args.ensemble[0]] if args.ensemble else [str(run.stage_dir("sample") / "nptl")]
    if not Path(explicit[0]).exists():
        run.sample(["nptl"], data)
    ens = next(iter(run.ensembles(spec, explicit).values()))
    soup = run_soup(run.cfg, data, ens)
    d = run.stage_dir("soup")
    d.mkdir(parents=True, exist_ok=True)
    paramio.save(d / "soup.npv", spec, soup.params)
    write_trajectory(d / "trajectory.csv", soup)
    run.write_stage("soup", ["soup.npv", "trajectory.csv"], spec, accepted=soup.accepted,
                    member_scores=soup.member_scores, metric=soup.metric)
    reports = evaluate_single(run.cfg, data, METHOD_SOUP, spec, soup.params)
    append_reports(run.out / "results.csv", reports)
    _print_reports(reports)


def _cmd_report(run: Run, args):
    path = emit_report(run.out)
    print(path.read_text(), end="")


def _decomposition_report(draws: int, seed: int, permutations: int) -> dict:
    n, T, alpha = 50, 50, 2.0
    r1 = np.random.default_rng(derive_seed(seed, 30, 0))
    r2 = np.random.default_rng(derive_seed(seed, 30, 1))
    r3 = np.random.default_rng(derive_seed(seed, 30, 2))
    X = np.stack([draw_weights_decomposed(n, T, alpha, r1).composed() for _ in range(draws)])
    conc = np.concatenate([np.ones(n), np.full(T, alpha / T)])
    Y = r2.dirichlet(conc, size=draws)
    stat, p = energy_permutation_test(X, Y, permutations, r3)
    return {"statistic": "energy", "value": stat, "p_value": p, "sizes": [draws, draws],
            "permutations": permutations,
            "config": {"n": n, "T": T, "alpha": alpha, "draws": draws, "seed": seed, "reference": "numpy-dirichlet"}}


def _cmd_diagnose(run: Run, args):
    seed = run.cfg.seed
    checks = ["weights", "decomposition", "vn", "sandwich", "trend"] if args.check == "all" else [args.check]
    L = run.cfg.raw["sampler"]["L"]
    alpha = run.cfg.raw["sampler"]["alpha"]
    alpha = 1.0 if alpha is None else float(alpha)
    draws = args.draws
    out = run.stage_dir("diagnostics")
    files = []
    for check in checks:
        if check == "weights":
            reports = []
            for regime in ("implemented", "fixed-T"):
                # the fixed-T law needs alpha > 0
                a = alpha if regime == "implemented" or alpha > 0 else 1.0
                reports += blocked_vs_nonblocked_test(200, L, a, draws, seed=seed, regime=regime,
                                                      permutations=args.permutations)
        elif check == "decomposition":
            reports = [_decomposition_report(draws, seed, args.permutations)]
        elif check == "vn":
            reports = [vn_bound_check(n, None, 50, a, max(draws, 10_000), seed) for n, a in ((100, 1.0), (200, 1.0), (200, 5.0))]
        elif check == "sandwich":
            reports = [sandwich_check(2000, 2000, seed, h) for h in (True, False)]
        else:
            reports = [ks_trend([50, 200, 800], L, alpha, draws, args.repetitions, seed, regime=r, workers=run.workers)
                       for r in ("implemented", "fixed-T")]
        j, c = write_reports(reports, out, check)
        files += [j.name, c.name]
        print(f"{check}: {j}")
    run.write_stage("diagnostics", files)


def _print_reports(reports):
    for r in reports:
        print(f"{r.method:<14} {r.split:<5} acc={r.acc:.4f} nll={r.nll:.4f} ece={r.ece:.4f} members={r.members}")


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "soup": _cmd_soup,
    "sweep-alpha": _cmd_sweep,
    "diagnose": _cmd_diagnose,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults apply to omitted keys)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for sampling")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--alpha", type=float, help="DP concentration; skips the alpha sweep")
    common.add_argument("--blocks", type=int, help="block count L; 0 draws non-blocked weights")
    common.add_argument("--samples", type=int, help="posterior samples M (also the ensemble size)")

    parser = argparse.ArgumentParser(prog="nptl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "generate the upstream and shifted downstream datasets",
        "pretrain": "train all parameters on the upstream task",
        "probe": "fit a fresh head on frozen features",
        "sample": "draw posterior samples and the fine-tune baselines",
        "evaluate": "BMA metrics for every ensemble, appended to results.csv",
        "soup": "greedy soup of the NPTL members",
        "sweep-alpha": "choose alpha by validation NLL",
        "diagnose": "Monte Carlo checks of the weight laws",
        "report": "aggregate results.csv into report.csv",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=h, description=h) for name, h in helps.items()}
    subs["sample"].add_argument("--method", choices=[*SAMPLE_METHODS, "all"], default="all")
    for name in ("evaluate", "soup"):
        subs[name].add_argument("--ensemble", action="append", metavar="DIR",
                                help="ensemble directory (repeatable); default: everything under sample/")
    d = subs["diagnose"]
    d.add_argument("--check", choices=["weights", "decomposition", "vn", "sandwich", "trend", "all"], default="all")
    d.add_argument("--draws", type=int, default=2000)
    d.add_argument("--permutations", type=int, default=1000)
    d.add_argument("--repetitions", type=int, default=3)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict()
    over = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.alpha is not None:
        over["sampler.alpha"] = args.alpha
    if args.samples is not None:
        over["sampler.M"] = args.samples
    if args.blocks is not None:
        if args.blocks < 0:
            raise ConfigError("--blocks", "must be >= 0")
        if args.blocks == 0:
            over["sampler.blocked"] = False
        else:
            over["sampler.L"] = args.blocks
    if args.workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    return cfg.with_overrides(**over) if over else cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    argv_text = " ".join(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    cfg = None
    try:
        cfg = _resolve_config(args)
        run = Run(cfg, Path(cfg.raw["out"]), args.workers)
        COMMANDS[args.command](run, args)
        code, message = EXIT_OK, ""
    except (ConfigError, StageError, FileNotFoundError, paramio.ParamFormatError) as exc:
        code, message = EXIT_CONFIG, str(exc)
    except AllMembersDiverged as exc:
        code, message = EXIT_DIVERGED, str(exc)
    except ValueError as exc:
        code, message = EXIT_CONFIG, str(exc)
    except Exception as exc:  # runtime failure
        traceback.print_exc(file=sys.stderr)
        code, message = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    if code:
        print(f"nptl {args.command}: error: {message}", file=sys.stderr)
    if cfg is not None:
        out = Path(cfg.raw["out"])
        if out.exists():
            _append_runs(out, {"command": args.command, "argv": argv_text, "config_sha256": cfg.digest(),
                               "seed": cfg.seed, "exit_code": code,
                               "wall_time": f"{time.perf_counter() - t0:.3f}", "message": message})
            _update_index(out)
    return code


run_command = main


if __name__ == "__main__":
    sys.exit(main())
