from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def lenet_fixture(tmp_path_factory):
    from urefi.fixtures import write_fixture
    from urefi.runtime import load_inputs, load_model

    d = tmp_path_factory.mktemp("lenet")
    fx = write_fixture(d, width=8, n_inputs=20, seed=0)
    model = load_model(fx["manifest"])
    inputs = load_inputs(fx["inputs"], model)
    return {"dir": d, "manifest": fx["manifest"], "inputs_path": fx["inputs"], "model": model, "inputs": inputs}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
