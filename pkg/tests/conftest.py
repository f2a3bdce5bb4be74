import numpy as np
import pytest

from nesthash.data import gen_synthetic, make_split

# (criterion id, title, passed, detail) filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"C{cid:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_ds():
    return gen_synthetic(4, 12, 8, 0.5, 3)


@pytest.fixture(scope="session")
def tiny_split(tiny_ds):
    return make_split(tiny_ds, 3, 6, 3)
