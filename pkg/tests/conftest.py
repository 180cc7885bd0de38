import numpy as np
import pytest

from harmonylab.diffusion import NoiseSchedule


def schedule_from_alpha_bar(alpha_bar):
    """Hand-built schedule with prescribed cumulative products."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    beta = 1.0 - ab[1:] / ab[:-1]
    return NoiseSchedule(len(ab) - 1, beta, ab, np.sqrt(1.0 - ab))


@pytest.fixture
def sched064():
    # alpha_bar_1 = 0.64, so sqrt = 0.8 and sqrt(1 - a) = 0.6
    return schedule_from_alpha_bar([1.0, 0.64, 0.3])


@pytest.fixture(scope="session")
def dataset_factory(tmp_path_factory):
    """Render-and-load datasets once per session, keyed by (count, seed)."""
    from harmonylab.scenes import load_dataset, make_dataset

    cache = {}

    def get(count, seed):
        if (count, seed) not in cache:
            path = tmp_path_factory.mktemp(f"ds{count}_{seed}")
            make_dataset(count, seed, path)
            cache[(count, seed)] = load_dataset(path)
        return cache[(count, seed)]

    return get


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
