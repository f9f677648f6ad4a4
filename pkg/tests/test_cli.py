import csv
import json
import subprocess
import sys
import time

import pytest

from nptl.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, emit_report, main
from nptl.experiment import ConfigError, ExperimentConfig

TINY = {
    "dataset": {"generator": {"n_upstream": 300, "n_downstream": 120}},
    "pipeline": {"pretrain": {"epochs": 3}, "probe": {"epochs": 3}, "finetune": {"epochs": 3}},
    "sampler": {"M": 2, "M_search": 2, "alpha_grid": [0.1, 1.0]},
}


def _config(tmp_path, doc=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_sample_deterministic(tmp_path):
    cfg = _config(tmp_path)
    for d in ("a", "b"):
        assert main(["sample", "--config", cfg, "--samples", "1", "--seed", "7", "--method", "nptl",
                     "--out", str(tmp_path / d)]) == EXIT_OK
    a = (tmp_path / "a/sample/nptl/member_0000.npv").read_bytes()
    b = (tmp_path / "b/sample/nptl/member_0000.npv").read_bytes()
    assert a == b


def test_rerun_after_delete_reproduces(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    args = ["probe", "--config", cfg, "--out", str(out)]
    assert main(args) == EXIT_OK
    first = (out / "probe/theta_probe.npv").read_bytes()
    import shutil
    shutil.rmtree(out)
    assert main(args) == EXIT_OK
    assert (out / "probe/theta_probe.npv").read_bytes() == first


def test_manifests_index_every_stage(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    assert main(["sample", "--config", cfg, "--method", "finetune", "--out", str(out)]) == EXIT_OK
    index = json.loads((out / "manifest.json").read_text())
    assert {"data/manifest.json", "pretrain/manifest.json", "probe/manifest.json",
            "sample/manifest.json"} <= set(index["stage_manifests"])
    digest = ExperimentConfig.load(cfg).with_overrides(out=str(out)).digest()
    for m in index["stage_manifests"]:
        doc = json.loads((out / m).read_text())
        assert doc["config_sha256"] == digest
        for f in doc.get("files") or doc["members"]:
            assert (out / m).parent.joinpath(f).exists()
    runs = _rows(out / "runs.csv")
    assert len(runs) == 1 and runs[0]["command"] == "sample" and runs[0]["exit_code"] == "0"


def test_evaluate_missing_member(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    assert main(["sample", "--config", cfg, "--method", "nptl", "--alpha", "1", "--out", str(out)]) == EXIT_OK
    (out / "sample/nptl/member_0001.npv").unlink()
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert "member_0001.npv" in capsys.readouterr().err
    assert _rows(out / "runs.csv")[-1]["exit_code"] == "2"


def test_spec_mismatch_rejected(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["probe", "--config", _config(tmp_path), "--out", str(out)]) == EXIT_OK
    other = json.loads(json.dumps(TINY))
    other["model"] = {"hidden_sizes": [32]}
    capsys.readouterr()
    code = main(["sample", "--config", _config(tmp_path, other, "other.json"), "--method", "nptl",
                 "--alpha", "1", "--out", str(out)])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "spec hash mismatch" in err and "'model'" in err
    assert not (out / "sample").exists()


def test_seed_mismatch_rejected(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = str(tmp_path / "run")
    assert main(["gen-data", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["probe", "--config", cfg, "--seed", "3", "--out", out]) == EXIT_CONFIG
    assert "'dataset'" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    doc = {"sampler": {"M": 2, "blokcs": 3}}
    assert main(["gen-data", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "sampler.blokcs" in capsys.readouterr().err


@pytest.mark.parametrize("doc,key", [
    ({"sampler": {"M": 0}}, "sampler"),
    ({"model": {"architecture": "cnn"}}, "model"),
    ({"dataset": {"files": {"upstream": "nope.csv"}}}, "dataset.files"),
    ({"pipeline": {"probe": {"base_lr": -1}}}, "pipeline.probe"),
])
def test_invalid_values_name_key(tmp_path, capsys, doc, key):
    assert main(["gen-data", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert key in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    assert "--config" in capsys.readouterr().err


def test_bad_flag_values(tmp_path):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", cfg, "--workers", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen-data", "--config", cfg, "--blocks", "-1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_all_members_diverged(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["pipeline"]["finetune"]["base_lr"] = 1e200
    with pytest.warns(RuntimeWarning):
        code = main(["sample", "--config", _config(tmp_path, doc), "--method", "nptl", "--alpha", "1",
                     "--out", str(tmp_path / "run")])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_nonblocked_flag(tmp_path):
    out = tmp_path / "run"
    assert main(["sample", "--config", _config(tmp_path), "--method", "nptl", "--alpha", "1", "--blocks", "0",
                 "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "sample/nptl/manifest.json").read_text())
    assert manifest["config"]["blocked"] is False


# ---------------------------------------------------------------- report

def _write_results(path, rows):
    fields = ["method", "acc", "nll", "ece", "members", "dataset", "seed", "split"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({"acc": 0.5, "ece": 0.1, "members": 1, "dataset": "d", "split": "test", **r})


def test_report_sample_std(tmp_path):
    _write_results(tmp_path / "results.csv", [
        {"method": "NPTL", "nll": v, "seed": s} for s, v in enumerate((0.1, 0.2, 0.3))
    ] + [{"method": "NPTL", "nll": 9.0, "seed": 0, "split": "val"}])
    rows = _rows(emit_report(tmp_path))
    assert list(rows[0]) == ["method", "dataset", "runs", "acc_mean", "acc_std", "nll_mean", "nll_std",
                             "ece_mean", "ece_std"]
    assert float(rows[0]["nll_mean"]) == pytest.approx(0.2)
    assert float(rows[0]["nll_std"]) == pytest.approx(0.1)
    assert float(rows[0]["acc_std"]) == 0.0


def test_report_single_and_identical(tmp_path):
    _write_results(tmp_path / "results.csv", [
        {"method": "A", "nll": 0.4, "seed": 0},
        {"method": "B", "nll": 0.7, "seed": 0}, {"method": "B", "nll": 0.7, "seed": 1},
        {"method": "B", "nll": 0.7, "seed": 2},
    ])
    rows = {r["method"]: r for r in _rows(emit_report(tmp_path))}
    assert float(rows["A"]["nll_std"]) == 0.0 and rows["A"]["runs"] == "1"
    assert float(rows["B"]["nll_std"]) == 0.0 and float(rows["B"]["nll_mean"]) == 0.7


def test_report_last_row_wins(tmp_path):
    _write_results(tmp_path / "results.csv", [{"method": "A", "nll": 0.4, "seed": 0},
                                              {"method": "A", "nll": 0.6, "seed": 0}])
    rows = _rows(emit_report(tmp_path))
    assert rows[0]["runs"] == "1" and float(rows[0]["nll_mean"]) == 0.6


def test_report_empty(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "none")]) == EXIT_CONFIG
    assert "no test results" in capsys.readouterr().err


# ---------------------------------------------------------------- diagnose

def test_diagnose_quick(tmp_path):
    out = tmp_path / "diag"
    for check in ("weights", "vn", "decomposition"):
        assert main(["diagnose", "--check", check, "--draws", "1000", "--permutations", "20",
                     "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "diagnostics/vn.json").read_text())
    assert doc["format"] == "nptl-diagnostics/1" and len(doc["reports"]) == 3
    assert (out / "diagnostics/weights.csv").exists()


# ---------------------------------------------------------------- end to end

def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "nptl", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("nptl")


def test_end_to_end_default_config(tmp_path):
    out = str(tmp_path / "e2e")
    t0 = time.perf_counter()
    for cmd in (["gen-data"], ["pretrain"], ["probe"], ["sample"], ["evaluate"], ["soup"], ["report"]):
        assert main(cmd + ["--out", out]) == EXIT_OK, cmd
    elapsed = time.perf_counter() - t0
    print(f"end-to-end pipeline took {elapsed:.1f}s")
    assert elapsed < 300
    rows = [r for r in _rows(tmp_path / "e2e/results.csv") if r["split"] == "test"]
    assert {r["method"] for r in rows} == {"NPTL", "Ensemble+L2SP", "Fine-tune", "NPTL-Soup"}
    assert len(_rows(tmp_path / "e2e/runs.csv")) == 7
    members = sorted((tmp_path / "e2e/sample/nptl").glob("member_*.npv"))
    assert len(members) == 10


def test_evaluate_runs_missing_stages(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "auto"
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    methods = {r["method"] for r in _rows(out / "results.csv")}
    assert methods == {"NPTL", "Ensemble+L2SP", "Fine-tune"}
    for stage in ("data", "pretrain", "probe", "sample"):
        assert (out / stage / "manifest.json").exists()
