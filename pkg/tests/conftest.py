import numpy as np
import pytest

from cfrr.core import ExposureLog, PairSpace

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line: ``record(criterion, passed, detail)``."""

    def _record(criterion: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((criterion, bool(passed), detail))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda x: int(x[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def make_log(pairs, outcomes=None, n_users=None, timestamps=None):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = n_users or int(pairs.max()) + 1
    out = np.ones(pairs.shape[0]) if outcomes is None else np.asarray(outcomes, dtype=np.float64)
    return ExposureLog.from_exposed(pairs[:, 0], pairs[:, 1], out, PairSpace.square(n), timestamps)
