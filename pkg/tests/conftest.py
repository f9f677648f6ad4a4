import os

import numpy as np
import pytest

from nptl._kernels import BACKEND

_ACCEPTANCE = {}


def pytest_report_header(config):
    return f"nptl kernel backend: {BACKEND}"


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        name = report.nodeid.split("::")[-1]
        if hasattr(report, "wasxfail"):
            outcome = "FAIL (expected, see notes)"
        else:
            outcome = "PASS" if report.passed else "FAIL"
        lines = [l for l in report.capstdout.splitlines() if l.startswith("[criterion")]
        _ACCEPTANCE[name] = outcome + (f"  {lines[-1]}" if lines else "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{name}: {_ACCEPTANCE[name]}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"


def pure_python_env():
    env = dict(os.environ)
    env["NPTL_PURE_PYTHON"] = "1"
    return env
