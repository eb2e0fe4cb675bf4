import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def rng():
    from dlglab.rng import Rng
    return Rng(1234)


def assert_close(a, b, tol=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape
    assert np.max(np.abs(a - b), initial=0.0) <= tol


_ACCEPTANCE: dict[int, str] = {}


class _Criterion:
    """Collects the checks of one acceptance criterion and records a verdict line."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.checks = number, title, []

    def __enter__(self):
        return self

    def check(self, ok, detail: str) -> None:
        self.checks.append((bool(ok), detail))

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None and bool(self.checks) and all(c for c, _ in self.checks)
        details = [d for _, d in self.checks]
        if exc_type is not None:
            details.append(f"raised {exc_type.__name__}: {exc}")
        _ACCEPTANCE[self.number] = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} [{'; '.join(details)}]"
        if exc_type is None and not ok:
            failed = [d for c, d in self.checks if not c]
            raise AssertionError(f"criterion {self.number} failed: {'; '.join(failed)}")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
