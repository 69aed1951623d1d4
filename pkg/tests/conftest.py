from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mfckq.env import CongestionEnv, CongestionParams
from mfckq.geometry import build_epsilon_net

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def params():
    return CongestionParams()


@pytest.fixture(scope="session")
def cenv(params):
    return CongestionEnv(params)


@pytest.fixture(scope="session")
def coarse_net(params):
    return build_epsilon_net(3, 3, 0.5, params.support_mask, certify_samples=2000)


@pytest.fixture(scope="session")
def small_net():
    # |X|=2, |U|=2, unmasked; 3 state points x 9 actions
    return build_epsilon_net(2, 2, 1.0, certify_samples=2000)


def random_pair(rng, mask):
    nx, nu = mask.shape
    mu = rng.dirichlet(np.ones(nx))
    h = np.zeros((nx, nu))
    for x in range(nx):
        allowed = np.flatnonzero(mask[x])
        h[x, allowed] = rng.dirichlet(np.ones(len(allowed)))
    return mu, h


# acceptance report: one line per criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
