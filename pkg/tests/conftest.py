import numpy as np
import pytest

from drdid.panel import PanelDataset

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def random_panel(rng: np.random.Generator, n: int, p: int = 2, family: str = "count",
                 treat_prob: float = 0.3) -> PanelDataset:
    """Small random panel with both groups present."""
    while True:
        g = (rng.random(n) < treat_prob).astype(int)
        if 0 < g.sum() < n:
            break
    x = rng.normal(size=(n, p))
    if family == "count":
        lam = np.exp(0.3 + 0.2 * x[:, 0])
        y0 = rng.poisson(lam).astype(float)
        y1 = rng.poisson(lam * (1.2 - 0.3 * g)).astype(float)
    else:
        y0 = rng.normal(size=n)
        y1 = y0 + rng.normal(size=n)
    return PanelDataset(ids=np.array([f"u{i}" for i in range(n)], dtype=object), y_before=y0,
                        y_after=y1, treated=g, covariates=x,
                        covariate_names=tuple(f"c{j}" for j in range(p)), outcome_family=family)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
