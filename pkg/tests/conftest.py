import numpy as np
import pytest

from graphann.dataset import brute_force_ground_truth, generate_synthetic
from graphann.graph import IndexParams, build

DESK_N, DESK_DIM, DESK_QUERIES = 20_000, 32, 200
DESK_SEED, QUERY_SEED = 0, 12345

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def desk_base():
    return generate_synthetic(DESK_N, DESK_DIM, DESK_SEED)


@pytest.fixture(scope="session")
def desk_queries():
    return generate_synthetic(DESK_QUERIES, DESK_DIM, QUERY_SEED)


@pytest.fixture(scope="session")
def desk_gt(desk_base, desk_queries):
    return brute_force_ground_truth(desk_base, desk_queries, 10)


@pytest.fixture(scope="session")
def desk_index(desk_base):
    return build(desk_base, IndexParams(M=16, ef_construction=200, seed=DESK_SEED))


@pytest.fixture(scope="session")
def small_base():
    return generate_synthetic(2000, 16, 3)


@pytest.fixture(scope="session")
def small_queries():
    return generate_synthetic(100, 16, 4)


@pytest.fixture(scope="session")
def small_index(small_base):
    return build(small_base, IndexParams(M=8, ef_construction=64, seed=5))


@pytest.fixture(scope="session")
def small_angular():
    base = generate_synthetic(1500, 12, 6, "angular")
    return base, build(base, IndexParams(M=8, ef_construction=64, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
