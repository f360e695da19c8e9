import numpy as np
import pytest

from tissue_manifold import inr


def random_model(seed, d=5, m=32, widths=(16, 16), freq_std=0.5, head_scale=0.5, omega0=1.0):
    """Small untrained model with a non-negligible head so derivatives are O(1)."""
    return inr.init_model(d=d, m=m, widths=widths, omega0=omega0, freq_std=freq_std,
                          head_scale=head_scale, seed=seed)


def with_zero_head(model, bias=0.0):
    p = model.params
    params = inr.Params(p.B, p.Ws, p.bs, np.zeros_like(p.head_W), np.array([bias]))
    return model.with_params(params)


@pytest.fixture
def small_model():
    return random_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -------------------------------------------------- acceptance result lines

ACCEPTANCE_LINES = []


def record(criterion: str, check: str, value, bound: str, ok: bool) -> bool:
    """Log one acceptance check; printed again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion} {check}: {value} ({bound})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
