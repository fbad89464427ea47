import numpy as np
import pytest

from hrgat.graph import build_hier_graph
from hrgat.pipeline import CityData
from hrgat.tiles import TileId, children


def tiny_city(name="tiny", x0=2373, y0=2933, seed=0, n_feat=4):
    """2x2 zoom-13 block with all descendants; targets follow feature 0 plus noise."""
    z13 = [TileId(x0 + dx, y0 + dy, 13) for dy in range(2) for dx in range(2)]
    z14 = [c for t in z13 for c in children(t)]
    z15 = [c for t in z14 for c in children(t)]
    g = build_hier_graph({13: z13, 14: z14, 15: z15}, k=4, city=name)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(g.n_nodes, n_feat))
    y = 3.0 * x[:, 0] + 0.1 * rng.normal(size=g.n_nodes) + 10.0
    return CityData(name, g, x, y, [f"f{i}" for i in range(n_feat)])


@pytest.fixture
def city():
    return tiny_city()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
