import pytest
import torch

from pegsolve.game import GameSpec
from pegsolve.graph import Graph

torch.set_num_threads(1)


def fd_rel_error(fn, params, h=1e-5):
    """Norm-wise relative error between autograd and central differences of scalar ``fn()``."""
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


@pytest.fixture
def oracle_spec():
    """3x3 grid, evader in a corner, exits at the two adjacent corners, pursuer opposite, T=4."""
    return GameSpec(Graph.grid(3, 3), (2, 6), (8,), 0, 4)


@pytest.fixture
def line5():
    return Graph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


# ---- acceptance reporting ---------------------------------------------------

ACCEPTANCE: dict[int, str] = {}
ACCEPTANCE_COUNT = 9


@pytest.fixture
def report():
    """``report(k, passed, detail)`` records a one-line verdict for acceptance criterion ``k``."""
    def _report(k: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[k] = f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return _report


def pytest_runtest_logreport(report):
    # a criterion that raised before reporting still gets a verdict line
    name = report.nodeid.rpartition("::")[2]
    if "test_acceptance" in report.nodeid and name.startswith("test_criterion_") and report.failed:
        k = int(name.split("_")[2])
        ACCEPTANCE.setdefault(k, f"criterion {k}: FAIL  (raised before reporting)")


def pytest_terminal_summary(terminalreporter):
    ran = [r for key in ("passed", "failed", "skipped") for r in terminalreporter.stats.get(key, [])
           if "test_acceptance" in getattr(r, "nodeid", "")]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, ACCEPTANCE_COUNT + 1):
        terminalreporter.write_line(ACCEPTANCE.get(k, f"criterion {k}: NOT RUN"))
