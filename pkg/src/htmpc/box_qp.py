"""Projected gradient solvers for strongly convex box-constrained QPs.

Also provides an exhaustive active-set oracle for small problems and a
fitted linear-rate check for the solver error sequences.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mpc_core import CondensedQp, q_of


class SolverDivergence(ArithmeticError):
    """Raised when an iterate becomes non-finite."""


class OracleFailure(RuntimeError):
    """Raised when no active-set pattern satisfies the KKT conditions."""


@dataclass(frozen=True)
class BoxQp:
    H: np.ndarray
    q: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=float, ndmin=2)
        nu = H.shape[0]
        if H.shape != (nu, nu):
            raise ValueError(f"H must be square, got {H.shape}")
        if not np.allclose(H, H.T, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("H is not symmetric")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ValueError("H is not positive definite") from None
        q = np.array(self.q, dtype=float).reshape(-1)
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        for name, v in (("q", q), ("lo", lo), ("hi", hi)):
            if v.size != nu:
                raise ValueError(f"{name} has length {v.size}, expected {nu}")
        if np.any(lo >= hi):
            raise ValueError("box bounds require lo < hi componentwise")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_condensed(cls, qp: CondensedQp, x0) -> "BoxQp":
        return cls(H=qp.H, q=q_of(qp, x0), lo=qp.lo, hi=qp.hi)

    @property
    def nu(self) -> int:
        return self.H.shape[0]

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.q @ u)

    def eig_extremes(self):
        """Smallest and largest eigenvalue of H."""
        if self.nu <= 500:
            ev = np.linalg.eigvalsh(self.H)
            return float(ev[0]), float(ev[-1])
        lmax = power_iteration_sym(self.H)
        lmin = lmax - power_iteration_sym(lmax * np.eye(self.nu) - self.H)
        return float(lmin), float(lmax)


def power_iteration_sym(M, tol=1e-12, max_iter=100_000):
    """Dominant eigenvalue of a symmetric PSD matrix."""
    v = np.ones(M.shape[0]) / math.sqrt(M.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        w = M @ v
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return 0.0
        v = w / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        lam = lam_new
    return lam


@dataclass
class SolveReport:
    """Outcome of a PGD/APGD run.

    ``residuals[k]`` is the fixed-point residual ``||u_{k+1} - u_k||``.
    ``iterates`` holds ``u_0 .. u_K`` when the solver ran with
    ``record=True``.
    """

    x: np.ndarray
    iterations: int
    converged: bool
    alpha: float
    beta: float
    residuals: list = field(default_factory=list)
    iterates: np.ndarray | None = None

    def errors(self, u_star) -> np.ndarray:
        if self.iterates is None:
            raise ValueError("report has no recorded iterates")
        return np.linalg.norm(self.iterates - np.asarray(u_star)[None, :], axis=1)

    def to_dict(self):
        d = {
            "x": self.x.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "alpha": self.alpha,
            "beta": self.beta,
            "residuals": [float(r) for r in self.residuals],
        }
        if self.iterates is not None:
            d["iterates"] = self.iterates.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        it = d.get("iterates")
        return cls(
            x=np.asarray(d["x"], dtype=float),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
            residuals=list(d["residuals"]),
            iterates=None if it is None else np.asarray(it, dtype=float),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def residuals_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "residual"])
            for k, r in enumerate(self.residuals):
                w.writerow([k, repr(float(r))])


def project_box(v, lo, hi):
    """Componentwise ``min(hi, max(v, lo))``."""
    return np.minimum(hi, np.maximum(v, lo))


def default_stepsize(qp: BoxQp) -> float:
    return 1.0 / qp.eig_extremes()[1]


def default_momentum(qp: BoxQp) -> float:
    lmin, lmax = qp.eig_extremes()
    sk = math.sqrt(lmax / lmin)
    return (sk - 1.0) / (sk + 1.0)


def _gradmap_residual(M, aq, lo, hi, u):
    d = np.minimum(hi, np.maximum(M @ u - aq, lo)) - u
    return math.sqrt(d @ d)


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected below
def _run(qp: BoxQp, u0, alpha, beta, max_iter, tol, record):
    M = np.eye(qp.nu) - alpha * qp.H
    aq = alpha * qp.q
    lo, hi = qp.lo, qp.hi
    u = np.array(u0, dtype=float).reshape(-1)
    if u.size != qp.nu:
        raise ValueError(f"u0 has length {u.size}, expected {qp.nu}")
    u_prev = u
    y = u
    residuals = []
    history = [u] if record else None
    converged = False
    k = 0
    while k < max_iter:
        u_new = np.minimum(hi, np.maximum(M @ y - aq, lo))
        d = u_new - u
        res = math.sqrt(d @ d)
        if not math.isfinite(res):
            raise SolverDivergence(f"non-finite iterate at step {k + 1}; check alpha")
        residuals.append(res)
        k += 1
        u_prev, u = u, u_new
        if record:
            history.append(u)
        if res <= tol:
            # With momentum a projection can return u_{k+1} = u_k away from
            # the solution; confirm with the gradient-map residual at u.
            if not beta or _gradmap_residual(M, aq, lo, hi, u) <= tol:
                converged = True
                break
        if beta:
            y = (1.0 + beta) * u - beta * u_prev
        else:
            y = u
    return SolveReport(
        x=u,
        iterations=k,
        converged=converged,
        alpha=float(alpha),
        beta=float(beta),
        residuals=residuals,
        iterates=np.array(history) if record else None,
    )


def pgd(qp: BoxQp, u0=None, max_iter=100_000, tol=1e-10, alpha=None, record=False):
    """Projected gradient descent ``u+ = P((I - alpha H) u - alpha q)``.

    ``alpha`` defaults to ``1 / lambda_max(H)``. Stops once the step length
    drops to ``tol`` or after ``max_iter`` iterations.
    """
    if u0 is None:
        u0 = np.zeros(qp.nu)
    if alpha is None:
        alpha = default_stepsize(qp)
    return _run(qp, u0, alpha, 0.0, max_iter, tol, record)


def apgd(qp: BoxQp, u0=None, max_iter=100_000, tol=1e-10, alpha=None, beta=None,
         record=False):
    """Accelerated projected gradient with constant momentum.

    Iterates ``u_{k+1} = P((I - alpha H) y_k - alpha q)`` and
    ``y_{k+1} = (1 + beta) u_{k+1} - beta u_k`` from ``y_0 = u_0``. The
    default momentum is ``(sqrt(kappa) - 1) / (sqrt(kappa) + 1)``; with
    ``beta=0`` the iterates coincide with :func:`pgd`. A step length below
    ``tol`` only ends the run when the plain projected-gradient step from
    the current iterate is below ``tol`` as well.
    """
    if u0 is None:
        u0 = np.zeros(qp.nu)
    if alpha is None:
        alpha = default_stepsize(qp)
    if beta is None:
        beta = default_momentum(qp)
    return _run(qp, u0, alpha, beta, max_iter, tol, record)


def apgd_batch(H, Qs, lo, hi, alpha, beta, tol=1e-10, max_iter=100_000):
    """Run APGD from zero on many linear terms at once (one QP per row of ``Qs``).

    Each row stops as soon as its own step (and gradient-map residual)
    drops to ``tol``, so a row's result does not depend on which other
    rows share the batch.
    Returns ``(U, iterations, converged)`` with per-row counts and flags.
    """
    Qs = np.atleast_2d(np.asarray(Qs, dtype=float))
    n = Qs.shape[0]
    M_T = (np.eye(H.shape[0]) - alpha * H).T
    aq = alpha * Qs
    U = np.zeros_like(Qs)
    Y = U.copy()
    iters = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for k in range(1, max_iter + 1):
        Ua = U[active]
        Un = np.minimum(hi, np.maximum(Y[active] @ M_T - aq[active], lo))
        D = Un - Ua
        step = np.sqrt(np.einsum("ij,ij->i", D, D))
        if not np.all(np.isfinite(step)):
            raise SolverDivergence(f"non-finite iterate at step {k}")
        Y[active] = (1.0 + beta) * Un - beta * Ua if beta else Un
        U[active] = Un
        iters[active] = k
        fin = step <= tol
        if beta and fin.any():
            cand = active[fin]
            G = np.minimum(hi, np.maximum(U[cand] @ M_T - aq[cand], lo)) - U[cand]
            fin[fin] = np.sqrt(np.einsum("ij,ij->i", G, G)) <= tol
        done[active[fin]] = True
        active = active[~fin]
        if active.size == 0:
            break
    return U, iters, done


def _kkt_scale(qp: BoxQp):
    return max(1.0, np.abs(qp.H).max(), np.abs(qp.q).max(),
               np.abs(qp.lo).max(), np.abs(qp.hi).max())


def active_set_oracle(qp: BoxQp, tol=1e-9):
    """Exact minimizer by enumerating all ``3^nu`` active-set patterns.

    Each coordinate is either fixed at ``lo``, fixed at ``hi`` or free. The
    free block is solved exactly and the pattern accepted when free values
    sit inside the box and the multipliers have the right sign. Patterns
    are ordered lexicographically over (lo, hi, free); among passing
    patterns the first is returned.
    """
    nu = qp.nu
    if nu > 12:
        raise ValueError(f"oracle enumeration limited to nu <= 12, got {nu}")
    H, q, lo, hi = qp.H, qp.q, qp.lo, qp.hi
    eps = tol * _kkt_scale(qp)
    best_key, best_u = None, None
    closest = (math.inf, None)
    # Group patterns by free set: one factorization per free set, all
    # lo/hi assignments of the fixed coordinates solved together.
    for free_mask in itertools.product((False, True), repeat=nu):
        F = np.flatnonzero(free_mask)
        Bi = np.flatnonzero(~np.array(free_mask))
        nb = Bi.size
        combos = list(itertools.product((0, 1), repeat=nb))
        assign = np.array(combos, dtype=int).reshape(len(combos), nb)
        UB = np.where(assign == 0, lo[Bi], hi[Bi])  # (n_assign, nb)
        U = np.empty((assign.shape[0], nu))
        U[:, Bi] = UB
        if F.size:
            rhs = -(q[F][None, :] + UB @ H[np.ix_(F, Bi)].T)
            U[:, F] = np.linalg.solve(H[np.ix_(F, F)], rhs.T).T
        G = U @ H + q  # gradient rows
        viol = np.zeros(assign.shape[0])
        if F.size:
            viol = np.maximum(viol, np.max(lo[F] - U[:, F], axis=1))
            viol = np.maximum(viol, np.max(U[:, F] - hi[F], axis=1))
        if nb:
            g_b = G[:, Bi]
            viol = np.maximum(viol, np.max(np.where(assign == 0, -g_b, g_b), axis=1))
        ok = np.flatnonzero(viol <= eps)
        i_min = int(np.argmin(viol))
        if viol[i_min] < closest[0]:
            closest = (float(viol[i_min]), U[i_min])
        for i in ok:
            pattern = np.full(nu, 2)
            pattern[Bi] = assign[i]
            key = tuple(pattern.tolist())
            if best_key is None or key < best_key:
                best_key, best_u = key, U[i].copy()
    if best_u is None:
        raise OracleFailure(
            f"no active-set pattern passed KKT (tol={eps:.3g}); "
            f"smallest violation {closest[0]:.3g}"
        )
    return best_u


@dataclass(frozen=True)
class ConvergenceCert:
    """Linear fit of ``log ||u_k - u*||`` against ``k``.

    ``rate`` is ``exp(slope)``; ``theory_rate`` is ``1 - 1/kappa`` for PGD
    and ``1 - 1/sqrt(kappa)`` for APGD, reported for reference.
    """

    rate: float
    slope: float
    r_squared: float
    n_points: int
    theory_rate: float
    accelerated: bool
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def fit_log_rate(errors, floor=1e-12, min_points=10):
    """Least-squares slope of ``log(errors)`` over the entries above ``floor``."""
    e = np.asarray(errors, dtype=float)
    idx = np.flatnonzero(e > floor)
    if idx.size < min_points:
        raise ValueError(f"need at least {min_points} errors above {floor:g}, got {idx.size}")
    # Keep the leading run above the floor; later dips are rounding noise.
    stop = idx.size
    for j in range(1, idx.size):
        if idx[j] != idx[j - 1] + 1:
            stop = j
            break
    k = idx[:stop].astype(float)
    if k.size < min_points:
        raise ValueError(f"need at least {min_points} consecutive errors above {floor:g}")
    y = np.log(e[idx[:stop]])
    slope, intercept = np.polyfit(k, y, 1)
    resid = y - (slope * k + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), r2, int(k.size)


def convergence_cert(report: SolveReport, u_star, kappa: float, accelerated: bool,
                     min_r2=0.95, min_points=10) -> ConvergenceCert:
    """Check that the error of ``report`` decays linearly.

    Passes when the fit has ``R^2 >= min_r2`` and a rate below one. Whether
    APGD beats PGD on the same problem is a comparison of two certificates.
    """
    slope, r2, n = fit_log_rate(report.errors(u_star), min_points=min_points)
    rate = math.exp(slope)
    theory = 1.0 - (1.0 / math.sqrt(kappa) if accelerated else 1.0 / kappa)
    return ConvergenceCert(
        rate=rate,
        slope=slope,
        r_squared=r2,
        n_points=n,
        theory_rate=theory,
        accelerated=accelerated,
        passed=bool(r2 >= min_r2 and rate < 1.0),
    )


def random_box_qp(nu, kappa, rng, box=1.0, spread=2.0) -> BoxQp:
    """Random QP whose Hessian has condition number ``kappa`` exactly.

    Eigenvalues are log-spaced on ``[1, kappa]``; ``q`` places the
    unconstrained minimizer uniformly in ``spread * box`` so that some
    bounds are typically active.
    """
    Qm, _ = np.linalg.qr(rng.standard_normal((nu, nu)))
    ev = np.logspace(0.0, math.log10(kappa), nu) if nu > 1 else np.array([1.0])
    H = (Qm * ev) @ Qm.T
    H = 0.5 * (H + H.T)
    u_free = rng.uniform(-spread * box, spread * box, nu)
    return BoxQp(H=H, q=-H @ u_free, lo=-box * np.ones(nu), hi=box * np.ones(nu))
