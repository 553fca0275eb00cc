import numpy as np
import pytest
from hypothesis import settings

from ramer.dataset import SyntheticConfig, generate_synthetic, split_corpus

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

SMALL_DIMS = {"audio": 24, "video": 16, "text": 32}


def small_config(**kw) -> SyntheticConfig:
    base = dict(n_labeled=300, n_unlabeled=200, dims=dict(SMALL_DIMS), seed=7)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return split_corpus(generate_synthetic(small_config()), 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record():
    def _record(num: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((num, name, bool(passed), detail))
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {num:2d} {name}: {detail}")
