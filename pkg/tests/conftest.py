import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from htmpc.mpc_core import LtiSystem, MpcProblem  # noqa: E402

ACCEPTANCE_LINES = []


def random_mpc(rng, n_x=None, n_u=None, N=None, identity_R=False):
    n_x = n_x or int(rng.integers(1, 5))
    n_u = n_u or int(rng.integers(1, 4))
    N = N or int(rng.integers(1, 6))
    A = rng.standard_normal((n_x, n_x))
    A *= rng.uniform(0.5, 1.2) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    B = rng.standard_normal((n_x, n_u))
    G = rng.standard_normal((n_x, n_x))
    Q = G @ G.T / n_x
    R = np.eye(n_u) if identity_R else (lambda M: M @ M.T / n_u + 0.1 * np.eye(n_u))(
        rng.standard_normal((n_u, n_u)))
    Gp = rng.standard_normal((n_x, n_x))
    P = Gp @ Gp.T / n_x
    lo = -rng.uniform(0.2, 2.0, n_u)
    hi = rng.uniform(0.2, 2.0, n_u)
    return LtiSystem(A, B), MpcProblem(Q=Q, R=R, P=P, N=N, u_lo=lo, u_hi=hi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
