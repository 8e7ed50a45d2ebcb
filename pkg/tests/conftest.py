import time

import numpy as np
import pytest

from lapnet import cli

ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail=""):
    line = f"AC{number:02d} {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One full toy-preset training run through the CLI, shared by every test that needs a trained net."""
    out = tmp_path_factory.mktemp("toy_run")
    t0 = time.perf_counter()
    code = cli.main(["train", "--out", str(out), "--seed", "0"])
    return {"out": out, "code": code, "seconds": time.perf_counter() - t0}
