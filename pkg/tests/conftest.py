from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from privplf.gmm import load_gmm
from privplf.network import assemble_dlpf, load_case, parse_case, partition_system

DATA = Path(resources.files("privplf") / "data")


def case_text(buses, branches, regions=None, base_mva=100.0):
    import json

    obj = {"base_mva": base_mva, "buses": buses, "branches": branches}
    if regions is not None:
        obj["regions"] = {str(k): v for k, v in regions.items()}
    return json.dumps(obj)


def three_bus_w():
    """Slack, PQ and one uncertain bus on a triangle, split into two regions."""
    buses = [
        {"id": 1, "class": "slack", "v": 1.01, "theta": 0.02},
        {"id": 2, "class": "pq", "p": -0.6, "q": -0.2, "bs": 0.02},
        {"id": 3, "class": "uncertain", "p": 0.3, "q": 0.1},
    ]
    branches = [
        {"from": 1, "to": 2, "r": 0.02, "x": 0.1, "b": 0.03},
        {"from": 2, "to": 3, "r": 0.01, "x": 0.08},
        {"from": 1, "to": 3, "r": 0.03, "x": 0.12, "b": 0.01},
    ]
    return parse_case(case_text(buses, branches, {1: 1, 2: 1, 3: 1}))


def contains_rows(arrays, rows, tol=1e-12):
    """True if any row of ``rows`` appears as a row or column of an array in ``arrays``."""
    for arr in arrays.values():
        arr = np.atleast_2d(arr)
        if arr.ndim > 2:
            arr = arr.reshape(-1, arr.shape[-1])
        for mat in (arr, arr.T):
            if mat.shape[1] != rows.shape[1]:
                continue
            for r in rows:
                if np.any(np.all(np.abs(mat - r) <= tol * max(1.0, np.abs(r).max()), axis=1)):
                    return True
    return False


def contains_value(arrays, value):
    return any(np.any(np.abs(np.asarray(a) - value) <= 1e-12 * max(1.0, abs(value))) for a in arrays.values())


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def case6():
    net = load_case(DATA / "case6_2region.json")
    sys_ = assemble_dlpf(net)
    return net, sys_, partition_system(sys_, net)


@pytest.fixture(scope="session")
def injection6():
    return load_gmm(DATA / "case6_injection.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects ``criterion -> [(check, ok, detail)]`` for the end-of-run summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(log):
        checks = log[crit]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} | {detail}")
