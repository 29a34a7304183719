import re
import warnings

import numpy as np
import pytest
import torch

from knotcast.data import SynthConfig, synth_fleet

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fleet():
    """Default 169-cell synthetic fleet."""
    return synth_fleet(SynthConfig(), seed=0)


@pytest.fixture(scope="session")
def small_fleet():
    return synth_fleet(SynthConfig(n_cells=24), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_strata():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="stratum .* folds; spread unstratified")
        yield


# one pass/fail line per acceptance criterion, assembled from the test_cNN_* reports
_criteria: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    entry = _criteria.setdefault(int(m.group(1)), {"outcomes": [], "details": []})
    entry["outcomes"].append(report.outcome)
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_criteria):
        outs = _criteria[n]["outcomes"]
        status = "FAIL" if "failed" in outs else "SKIP" if all(o == "skipped" for o in outs) else "PASS"
        detail = "; ".join(_criteria[n]["details"])
        tr.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
