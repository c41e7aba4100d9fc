import numpy as np
import pytest

from drma.data import Arm, Dataset, StudyRecord

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def small_dataset(ns=6, seed=0, arms=3, cluster=False):
    """A small arm-level dataset with a zero reference dose in every study."""
    rng = np.random.default_rng(seed)
    studies = []
    for i in range(ns):
        doses = np.concatenate([[0.0], np.sort(rng.choice(np.arange(1, 11), arms - 1, replace=False))])
        n = rng.integers(50, 120, size=arms)
        r = rng.binomial(n, 0.2 + 0.03 * doses / 10)
        studies.append(StudyRecord(f"s{i}", tuple(Arm(float(d), int(a), int(m)) for d, a, m in zip(doses, r, n)),
                                   cluster=f"c{i % 2}" if cluster else None))
    return Dataset(tuple(studies))


@pytest.fixture
def dataset():
    return small_dataset()
