import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gabornet import tensor as T

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def projected_grad_check(op, inputs: list[np.ndarray], seed: int = 0):
    """Compare tape gradients of ``sum(proj * op(*inputs))`` with finite differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with T.Tape() as tape:
        out = op(*tensors)
        proj = T.Tensor(rng.normal(size=out.shape))
        loss = T.sum_all(T.mul(out, proj))
        tape.backward(loss)

    def value():
        with T.no_grad():
            return float((op(*tensors).data * proj.data).sum())

    worst = 0.0
    for t in tensors:
        fd = central_diff(value, t.data)
        worst = max(worst, rel_err(t.grad, fd, floor=1e-6))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance report

_VERDICTS: list[tuple[int, str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (report.when == "call" or (report.when == "setup" and not report.passed)):
        return
    number, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if report.failed:
        reason = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else ""
        detail = "; ".join(s for s in (detail, reason.splitlines()[0] if reason else "") if s)
    _VERDICTS.append((number, title, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {number} ({title}): {verdict}  {detail}".rstrip())
