from __future__ import annotations

import numpy as np
import pytest

from razn.autodiff import Tensor
from razn.synthwsi import SynthSpec, generate


def numeric_grad(f, arrays, i, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(op, arrays, rng, h=1e-6):
    """Max relative error between analytic and numeric gradients of ``sum(op(*x) * w)``.

    ``op`` maps Tensors to a Tensor; the random weights make the scalar
    objective sensitive to every output element.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    w = rng.standard_normal(out.shape)
    out.backward(w)

    def scalar(*xs):
        return float((op(*[Tensor(x) for x in xs]).data * w).sum())

    errs = []
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, h)
        errs.append(rel_err(t.grad, num))
    return max(errs)


TINY_SPEC = dict(size=(1024, 1024), roi_radius=(25, 75), seed=3)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """1024x1024 three-level pyramid: 16 aligned 64x64 patches at level 0."""
    root = tmp_path_factory.mktemp("tiny_ds")
    return generate(SynthSpec(**TINY_SPEC), root)


@pytest.fixture(scope="session")
def default_ds(tmp_path_factory):
    """The default desk pyramid (4096x4096 finest level, seed 7)."""
    root = tmp_path_factory.mktemp("default_ds")
    return generate(SynthSpec(), root)


# ------------------------------------------------------- criterion summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "tests": [], "details": []})
    entry["ok"] &= rep.passed
    entry["tests"].append(item.name)
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        tr.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'} ({', '.join(e['tests'])})")
        for d in e["details"]:
            tr.write_line(f"    {d}")
