import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES: dict[int, str] = {}


class _Criterion:
    """Collects named checks for one acceptance criterion and records one summary line."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []

    def check(self, label: str, ok) -> None:
        self.checks.append((label, bool(ok)))

    def finish(self) -> None:
        ok = all(c for _, c in self.checks)
        detail = "; ".join(f"{lbl} {'ok' if c else 'FAILED'}" for lbl, c in self.checks)
        ACCEPTANCE_LINES[self.number] = f"criterion {self.number:2d}: {'PASS' if ok else 'FAIL'}  {self.title}  [{detail}]"
        print(ACCEPTANCE_LINES[self.number])
        failed = [lbl for lbl, c in self.checks if not c]
        assert not failed, f"criterion {self.number} failed: {failed}"


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

