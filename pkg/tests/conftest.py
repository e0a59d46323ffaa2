import numpy as np
import pytest

from mvtsg import mms

LEVELS = [0.6, 1.2, 1.8, 2.4, 3.0, 3.6]
ACTIONS = [-1.2, -0.6, 0.0, 0.6, 1.2]


def storage(nu=0.95, levels=LEVELS, actions=ACTIONS):
    return mms.StorageModel(np.array(levels), np.array(actions), nu=nu)


def wind(P=None):
    levels = np.linspace(0.0, 3.0, 6)
    return mms.WindModel(levels, np.eye(6) if P is None else P)


def demand(P=None, levels=LEVELS):
    return mms.DemandModel(np.array(levels), np.eye(len(levels)) if P is None else P)


def random_stochastic(rng, n):
    P = rng.random((n, n)) + 0.05
    return P / P.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def mms2():
    return mms.load_scenario("mms-2mg")


@pytest.fixture(scope="session")
def mms3():
    return mms.load_scenario("mms-3mg")


@pytest.fixture(scope="session")
def tables2(mms2):
    from mvtsg import tabular

    return tabular.build_tables(mms2)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((number, f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
