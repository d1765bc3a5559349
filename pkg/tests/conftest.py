import numpy as np
import pytest
import torch

from stroketriage.data import generate_toy_corpus, stratified_split

TOY_COUNTS = {0: 200, 1: 100, 2: 100}

# (number, title, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE_ROWS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_ROWS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:>2}. {title}: {detail}")


@pytest.fixture
def record_criterion():
    def record(num, title, passed, detail=""):
        ACCEPTANCE_ROWS.append((num, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")
        return passed

    return record


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return generate_toy_corpus(root, TOY_COUNTS, 64, seed=0)


@pytest.fixture(scope="session")
def toy_split(toy_corpus):
    return stratified_split(toy_corpus, 0.8, 0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return generate_toy_corpus(root, {0: 12, 1: 8, 2: 8}, 32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
