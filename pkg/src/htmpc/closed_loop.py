"""Oscillating-masses benchmark and receding-horizon closed-loop simulation."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .box_qp import BoxQp, apgd, default_momentum, default_stepsize
from .htnn import HtnnSpec
from .minmax import MinMaxVector, eval_vector
from .mpc_core import LtiSystem, MpcProblem, condense, q_of, zoh_discretize
from .nn_runtime import forward
from .unfolded import UnfoldedParams, forward_unfolded


class ControllerFailure(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"controller failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class OscillatingMassesSpec:
    n_masses: int = 2
    mass: float = 1.0
    spring: float = 1.0
    damping: float = 0.5
    dt: float = 0.1
    u_bound: float = 1.0

    def __post_init__(self):
        if self.n_masses < 1:
            raise ValueError("need at least one mass")
        for name in ("mass", "spring", "damping", "dt", "u_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def build_masses_system(spec: OscillatingMassesSpec) -> LtiSystem:
    """Chain of masses between two walls, spring-damper pairs on every link.

    State order is ``[p1, v1, p2, v2, ...]``; one force input per mass.
    """
    n = spec.n_masses
    k, c, m = spec.spring, spec.damping, spec.mass
    # tridiagonal coupling: each mass has two neighbours (walls at the ends)
    L = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    Ac = np.zeros((2 * n, 2 * n))
    Bc = np.zeros((2 * n, n))
    p, v = np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2)
    Ac[p, v] = 1.0
    Ac[np.ix_(v, p)] = -k * L / m
    Ac[np.ix_(v, v)] = -c * L / m
    Bc[v, np.arange(n)] = 1.0 / m
    return zoh_discretize(Ac, Bc, spec.dt)


def masses_mpc(spec: OscillatingMassesSpec, N=5) -> MpcProblem:
    n = spec.n_masses
    I = np.eye(2 * n)
    return MpcProblem(Q=I, R=np.eye(n), P=I, N=N,
                      u_lo=np.full(n, -spec.u_bound), u_hi=np.full(n, spec.u_bound))


# -- controllers -------------------------------------------------------------

class ApgdController:
    """Solve the condensed QP with APGD at every step."""

    def __init__(self, sys, mpc, tol=1e-10, max_iter=100_000, warm_start=False):
        self.qp = condense(sys, mpc)
        box = BoxQp(H=self.qp.H, q=np.zeros(self.qp.nu), lo=self.qp.lo, hi=self.qp.hi)
        self.alpha = default_stepsize(box)
        self.beta = default_momentum(box)
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start
        self._u = None

    def __call__(self, x):
        box = BoxQp(H=self.qp.H, q=q_of(self.qp, x), lo=self.qp.lo, hi=self.qp.hi)
        u0 = self._u if self.warm_start else None
        rep = apgd(box, u0=u0, max_iter=self.max_iter, tol=self.tol,
                   alpha=self.alpha, beta=self.beta)
        if not rep.converged:
            raise ArithmeticError(f"APGD not converged after {rep.iterations} iterations")
        self._u = rep.x
        return rep.x


def as_controller(obj, sys=None, mpc=None):
    """Wrap a network, parameter set, min-max law or callable as ``x -> u``."""
    if isinstance(obj, HtnnSpec):
        return lambda x: forward(obj, x)
    if isinstance(obj, UnfoldedParams):
        return lambda x: forward_unfolded(obj, x)
    if isinstance(obj, MinMaxVector):
        return lambda x: eval_vector(obj, x)
    if isinstance(obj, str) and obj == "apgd":
        return ApgdController(sys, mpc)
    if callable(obj):
        return obj
    raise TypeError(f"not a controller: {type(obj).__name__}")


# -- simulation --------------------------------------------------------------

@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    raw_outputs: np.ndarray
    eval_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def T(self):
        return self.inputs.shape[0]

    def to_csv(self, path):
        n_x, n_u = self.states.shape[1], self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n_x)] + [f"u_{j + 1}" for j in range(n_u)])
            for t in range(self.states.shape[0]):
                u = self.inputs[t] if t < self.T else np.full(n_u, np.nan)
                w.writerow([t] + [repr(float(v)) for v in self.states[t]] +
                           [repr(float(v)) if np.isfinite(v) else "" for v in u])

    @classmethod
    def from_csv(cls, path, n_x):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        X = np.array([[float(v) for v in r[1:1 + n_x]] for r in rows])
        U = np.array([[float(v) for v in r[1 + n_x:]] for r in rows[:-1]])
        return cls(X, U, U.copy())


def simulate(sys: LtiSystem, mpc: MpcProblem, controller, x0, T) -> Trajectory:
    """Receding-horizon loop: query, clamp, apply the first ``n_u`` entries."""
    ctrl = as_controller(controller, sys, mpc)
    n_u = sys.n_u
    lo = np.tile(mpc.u_lo, mpc.N)
    hi = np.tile(mpc.u_hi, mpc.N)
    X = np.empty((T + 1, sys.n_x))
    U = np.empty((T, n_u))
    raw = np.empty((T, mpc.N * n_u))
    times = np.empty(T)
    X[0] = np.asarray(x0, dtype=float)
    for t in range(T):
        t0 = time.perf_counter()
        try:
            out = np.asarray(ctrl(X[t]), dtype=float).reshape(-1)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise ControllerFailure(t, exc) from exc
        times[t] = time.perf_counter() - t0
        if out.shape != (mpc.N * n_u,):
            raise ControllerFailure(t, f"output has shape {out.shape}, expected ({mpc.N * n_u},)")
        if not np.all(np.isfinite(out)):
            raise ControllerFailure(t, "non-finite controller output")
        raw[t] = out
        u = np.minimum(hi, np.maximum(out, lo))[:n_u]
        U[t] = u
        X[t + 1] = sys.A @ X[t] + sys.B @ u
    return Trajectory(X, U, raw, times)


def dynamics_residual(sys: LtiSystem, traj: Trajectory) -> float:
    pred = traj.states[:-1] @ sys.A.T + traj.inputs @ sys.B.T
    return float(np.max(np.abs(pred - traj.states[1:]), initial=0.0))


def trajectory_metrics(traj: Trajectory, mpc: MpcProblem, reference: Trajectory | None = None,
                       timing=True) -> dict:
    """Violation count, terminal norm ratio and, with a reference, input deviation."""
    tol = 1e-12
    viol = int(np.sum((traj.inputs < mpc.u_lo - tol) | (traj.inputs > mpc.u_hi + tol)))
    n0 = float(np.linalg.norm(traj.states[0]))
    nT = float(np.linalg.norm(traj.states[-1]))
    m = {"violations": viol, "terminal_norm": nT,
         "terminal_ratio": 0.0 if n0 == 0.0 else nT / n0}
    if reference is not None:
        if reference.inputs.shape != traj.inputs.shape:
            raise ValueError("reference trajectory has a different shape")
        m["max_input_deviation"] = float(np.max(np.abs(traj.inputs - reference.inputs), initial=0.0))
    if timing and traj.eval_times.size:
        m["mean_eval_time"] = float(traj.eval_times.mean())
    return m
