import numpy as np
import pytest

from rerand.randset import DesignSpace

TABLE_H = np.arange(1, 9, dtype=float)


@pytest.fixture
def h8():
    """Eight units with covariate h = 1..8."""
    return TABLE_H[:, None].copy()


@pytest.fixture
def space84():
    return DesignSpace.complete(8, 4)


@pytest.fixture(scope="session")
def selector_study():
    """The 2x2 selector study, run once and shared."""
    from rerand._rng import DEFAULT_SEED
    from rerand.simharness import StudyConfig, run_selector_study

    config = StudyConfig(n_grid=(6, 12), tau_grid=(0.1, 1.0), replications=200, seed=DEFAULT_SEED)
    return run_selector_study(config)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    log = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        log.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_VERDICTS, [])
    if log:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(log):
            terminalreporter.write_line(line)
