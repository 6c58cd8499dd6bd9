"""Linear systems, MPC problems and their condensation into dense box QPs.

The decision vector is the stacked input sequence ``u = [u_0; ...; u_{N-1}]``.
States are eliminated with the prediction matrices

    x_{t+1} = A^{t+1} x_0 + sum_{s<=t} A^{t-s} B u_s

so that the MPC cost becomes ``1/2 u^T H u + (Q2 x0)^T u + const(x0)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

PSD_TOL = 1e-10


def _matrix(name, value, shape=None):
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim={arr.ndim}")
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _vector(name, value, size=None):
    arr = np.array(value, dtype=float).reshape(-1)
    if size is not None and arr.size != size:
        raise ValueError(f"{name} has length {arr.size}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_symmetric(name, M, tol=1e-9):
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} is not symmetric")


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time system ``x+ = A x + B u``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _matrix("A", self.A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        B = _matrix("B", self.B)
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class MpcProblem:
    """Quadratic costs, horizon and input box of a linear MPC problem.

    ``Q`` and ``P`` must be symmetric PSD, ``R`` symmetric PD, and
    ``u_lo < u_hi`` componentwise.
    """

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N: int
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        Q = _matrix("Q", self.Q)
        R = _matrix("R", self.R)
        P = _matrix("P", self.P, Q.shape)
        for name, M in (("Q", Q), ("R", R), ("P", P)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square, got {M.shape}")
            _check_symmetric(name, M)
        if np.linalg.eigvalsh(Q).min() < -PSD_TOL:
            raise ValueError("Q is not positive semidefinite")
        if np.linalg.eigvalsh(P).min() < -PSD_TOL:
            raise ValueError("P is not positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= PSD_TOL:
            raise ValueError("R is not positive definite")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"horizon N must be a positive integer, got {self.N}")
        n_u = R.shape[0]
        u_lo = _vector("u_lo", self.u_lo, n_u)
        u_hi = _vector("u_hi", self.u_hi, n_u)
        if np.any(u_lo >= u_hi):
            raise ValueError("input bounds require u_lo < u_hi componentwise")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "u_lo", u_lo)
        object.__setattr__(self, "u_hi", u_hi)

    @property
    def n_x(self) -> int:
        return self.Q.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True)
class CondensedQp:
    """Dense QP ``min 1/2 u^T H u + (Q2 x0)^T u`` over ``lo <= u <= hi``."""

    H: np.ndarray
    Q2: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        H = _matrix("H", self.H)
        nu = H.shape[0]
        if H.shape != (nu, nu):
            raise ValueError(f"H must be square, got {H.shape}")
        if np.abs(H - H.T).max() > 1e-12 * max(1.0, np.abs(H).max()):
            raise ValueError("H is not symmetric")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ValueError("H is not positive definite") from None
        Q2 = _matrix("Q2", self.Q2)
        if Q2.shape[0] != nu:
            raise ValueError(f"Q2 has {Q2.shape[0]} rows, expected {nu}")
        lo = _vector("lo", self.lo, nu)
        hi = _vector("hi", self.hi, nu)
        if np.any(lo >= hi):
            raise ValueError("box bounds require lo < hi componentwise")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Q2", Q2)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def nu(self) -> int:
        return self.H.shape[0]

    @property
    def n_x(self) -> int:
        return self.Q2.shape[1]

    def to_dict(self):
        return {
            "H": self.H.tolist(),
            "Q2": self.Q2.tolist(),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(H=d["H"], Q2=d["Q2"], lo=d["lo"], hi=d["hi"])


def prediction_matrices(sys: LtiSystem, N: int):
    """Return ``(A_blk, A_N)`` so that ``X = A_blk u + A_N x0``.

    ``X`` stacks ``x_1 .. x_N``; block ``(t, s)`` of ``A_blk`` is
    ``A^{t-s} B`` for ``s <= t`` and zero otherwise.
    """
    n_x, n_u = sys.n_x, sys.n_u
    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(powers[-1] @ sys.A)
    A_blk = np.zeros((N * n_x, N * n_u))
    A_N = np.zeros((N * n_x, n_x))
    for t in range(N):
        A_N[t * n_x:(t + 1) * n_x] = powers[t + 1]
        for s in range(t + 1):
            A_blk[t * n_x:(t + 1) * n_x, s * n_u:(s + 1) * n_u] = powers[t - s] @ sys.B
    return A_blk, A_N


def cost_blocks(mpc: MpcProblem):
    """Return ``(Q_blk, R_blk) = (diag(Q,..,Q,P), diag(R,..,R))``."""
    Q_blk = sla.block_diag(*([mpc.Q] * (mpc.N - 1) + [mpc.P]))
    R_blk = sla.block_diag(*([mpc.R] * mpc.N))
    return Q_blk, R_blk


def _check_dims(sys: LtiSystem, mpc: MpcProblem):
    if sys.n_x != mpc.n_x or sys.n_u != mpc.n_u:
        raise ValueError(
            f"system has (n_x, n_u) = ({sys.n_x}, {sys.n_u}) but costs are "
            f"sized for ({mpc.n_x}, {mpc.n_u})"
        )


def condense(sys: LtiSystem, mpc: MpcProblem) -> CondensedQp:
    """Eliminate the states of ``mpc`` and return the dense box QP."""
    _check_dims(sys, mpc)
    A_blk, A_N = prediction_matrices(sys, mpc.N)
    Q_blk, R_blk = cost_blocks(mpc)
    AtQ = A_blk.T @ Q_blk
    H = R_blk + AtQ @ A_blk
    H = 0.5 * (H + H.T)
    Q2 = AtQ @ A_N
    try:
        return CondensedQp(
            H=H, Q2=Q2, lo=np.tile(mpc.u_lo, mpc.N), hi=np.tile(mpc.u_hi, mpc.N)
        )
    except ValueError as exc:
        raise ValueError(f"ill-posed MPC weights: {exc}") from None


def q_of(qp: CondensedQp, x0) -> np.ndarray:
    """Linear term ``Q2 @ x0`` of the condensed objective."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != qp.n_x:
        raise ValueError(f"x0 has length {x0.shape[-1]}, expected {qp.n_x}")
    return x0 @ qp.Q2.T if x0.ndim > 1 else qp.Q2 @ x0


def rollout_cost(sys: LtiSystem, mpc: MpcProblem, x0, u_seq) -> float:
    """Simulate the dynamics and sum stage and terminal costs directly."""
    _check_dims(sys, mpc)
    x = np.asarray(x0, dtype=float).reshape(-1)
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1)
    if x.size != sys.n_x:
        raise ValueError(f"x0 has length {x.size}, expected {sys.n_x}")
    if u_seq.size != mpc.N * sys.n_u:
        raise ValueError(f"u_seq has length {u_seq.size}, expected {mpc.N * sys.n_u}")
    cost = 0.0
    for t in range(mpc.N):
        u = u_seq[t * sys.n_u:(t + 1) * sys.n_u]
        cost += 0.5 * (x @ mpc.Q @ x + u @ mpc.R @ u)
        x = sys.step(x, u)
    return float(cost + 0.5 * x @ mpc.P @ x)


def zoh_discretize(Ac, Bc, dt: float) -> LtiSystem:
    """Zero-order-hold discretization through the augmented matrix exponential."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Ac = np.array(Ac, dtype=float, ndmin=2)
    Bc = np.array(Bc, dtype=float, ndmin=2)
    if Bc.shape[0] != Ac.shape[0] and Bc.shape[1] == Ac.shape[0]:
        Bc = Bc.T
    n_x, n_u = Bc.shape
    M = np.zeros((n_x + n_u, n_x + n_u))
    M[:n_x, :n_x] = Ac
    M[:n_x, n_x:] = Bc
    E = sla.expm(M * dt)
    return LtiSystem(A=E[:n_x, :n_x], B=E[:n_x, n_x:])


# -- JSON problem files ------------------------------------------------------

def problem_to_dict(sys: LtiSystem, mpc: MpcProblem) -> dict:
    return {
        "A": sys.A.tolist(),
        "B": sys.B.tolist(),
        "Q": mpc.Q.tolist(),
        "R": mpc.R.tolist(),
        "P": mpc.P.tolist(),
        "N": mpc.N,
        "u_lo": mpc.u_lo.tolist(),
        "u_hi": mpc.u_hi.tolist(),
    }


def problem_from_dict(d: dict):
    missing = {"A", "B", "Q", "R", "P", "N", "u_lo", "u_hi"} - set(d)
    if missing:
        raise ValueError(f"problem is missing keys: {sorted(missing)}")
    sys = LtiSystem(A=d["A"], B=d["B"])
    mpc = MpcProblem(Q=d["Q"], R=d["R"], P=d["P"], N=d["N"], u_lo=d["u_lo"], u_hi=d["u_hi"])
    _check_dims(sys, mpc)
    return sys, mpc


def load_problem(path):
    """Read a problem JSON file; raises ``ValueError`` on invalid contents."""
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def save_problem(path, sys: LtiSystem, mpc: MpcProblem):
    Path(path).write_text(json.dumps(problem_to_dict(sys, mpc), indent=1))
