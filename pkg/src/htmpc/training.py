"""Supervised datasets from APGD-solved MPC and ADAM training of networks.

Gradients are exact reverse-mode derivatives of the MSE loss. HardTanh
derivatives are 1 strictly inside ``(lo, hi)`` and 0 elsewhere, including
at the kinks.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .box_qp import BoxQp, apgd_batch, default_momentum, default_stepsize
from .htnn import HtnnSpec, Layer
from .mpc_core import LtiSystem, MpcProblem, condense
from .nn_runtime import forward
from .unfolded import UnfoldedParams, effective_HG, forward_unfolded, power_stack

log = logging.getLogger(__name__)

SPLIT = (0.7, 0.1, 0.2)
CHUNK = 64  # initial states per APGD batch; fixed so results do not depend on --jobs


class DatasetError(ArithmeticError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    """Pairs ``(X[s], U[s])`` of states and optimal input sequences."""

    X: np.ndarray
    U: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        D = self.X.shape[0]
        if self.U.shape[0] != D:
            raise ValueError("X and U have different sample counts")
        idx = np.concatenate([self.train, self.val, self.test])
        if idx.size != D or not np.array_equal(np.sort(idx), np.arange(D)):
            raise ValueError("split must be a disjoint, exhaustive partition of the samples")

    def __len__(self):
        return self.X.shape[0]

    def part(self, name):
        idx = getattr(self, name)
        return self.X[idx], self.U[idx]

    def save(self, path):
        np.savez(path, X=self.X, U=self.U, train=self.train, val=self.val, test=self.test,
                 meta=np.array(json.dumps(self.meta, sort_keys=True)))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            return cls(z["X"], z["U"], z["train"], z["val"], z["test"], json.loads(str(z["meta"])))


def split_indices(D, seed, fractions=SPLIT):
    """Shuffled 70/10/20 split (train/val/test) of ``range(D)``."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(D)
    n_train = int(round(fractions[0] * D))
    n_val = int(round(fractions[1] * D))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def _closed_loop_chunk(args):
    A, B, H, Q2, lo, hi, alpha, beta, X0, T, tol, max_iter = args
    n_u = B.shape[1]
    X = X0.copy()
    xs = np.empty((X0.shape[0], T, X0.shape[1]))
    us = np.empty((X0.shape[0], T, H.shape[0]))
    for t in range(T):
        U, iters, ok = apgd_batch(H, X @ Q2.T, lo, hi, alpha, beta, tol=tol, max_iter=max_iter)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise DatasetError(
                f"APGD did not reach tol={tol:g} in {max_iter} iterations at step {t} "
                f"for initial state {X0[bad].tolist()}"
            )
        xs[:, t] = X
        us[:, t] = U
        X = X @ A.T + U[:, :n_u] @ B.T
    return xs, us


def generate_dataset(sys: LtiSystem, mpc: MpcProblem, n_init, sim_horizon, state_ranges,
                     seed, jobs=1, tol=1e-10, max_iter=100_000) -> Dataset:
    """Closed-loop APGD-MPC trajectories from uniformly drawn initial states.

    ``state_ranges`` is an ``(n_x, 2)`` array of ``[lo, hi]`` per state.
    Every visited state ``x_t`` is stored with the full optimal sequence
    ``u*(x_t)``, giving ``n_init * sim_horizon`` samples ordered by initial
    state, then time.
    """
    qp = condense(sys, mpc)
    box = BoxQp(H=qp.H, q=np.zeros(qp.nu), lo=qp.lo, hi=qp.hi)
    alpha, beta = default_stepsize(box), default_momentum(box)
    ranges = np.asarray(state_ranges, dtype=float)
    if ranges.shape != (sys.n_x, 2):
        raise ValueError(f"state_ranges must have shape ({sys.n_x}, 2)")
    rng = np.random.default_rng(seed)
    X0 = rng.uniform(ranges[:, 0], ranges[:, 1], size=(n_init, sys.n_x))
    tasks = [(sys.A, sys.B, qp.H, qp.Q2, qp.lo, qp.hi, alpha, beta, X0[i:i + CHUNK],
              sim_horizon, tol, max_iter) for i in range(0, n_init, CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_closed_loop_chunk, tasks))
    else:
        parts = [_closed_loop_chunk(t) for t in tasks]
    xs = np.concatenate([p[0] for p in parts]).reshape(-1, sys.n_x)
    us = np.concatenate([p[1] for p in parts]).reshape(-1, qp.nu)
    train, val, test = split_indices(xs.shape[0], seed + 1)
    meta = {"n_init": int(n_init), "sim_horizon": int(sim_horizon), "seed": int(seed),
            "alpha": alpha, "beta": beta, "tol": tol, "state_ranges": ranges.tolist()}
    return Dataset(xs, us, train, val, test, meta)


# -- loss and gradients --------------------------------------------------------

def predict(model, X):
    if isinstance(model, HtnnSpec):
        return forward(model, X)
    if isinstance(model, UnfoldedParams):
        return forward_unfolded(model, X)
    return np.asarray(model(X))


def mse_loss(model, X, U) -> float:
    """Mean over samples of the squared Euclidean error."""
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    E = np.atleast_2d(predict(model, X)) - U
    return float(np.einsum("ij,ij->", E, E) / X.shape[0])


def htnn_params(net: HtnnSpec):
    """Views of the trainable arrays of ``net`` keyed ``W0, b0, W1, ...``."""
    d = {}
    for k, L in enumerate(net.layers):
        d[f"W{k}"] = L.W
        d[f"b{k}"] = L.b
    return d


def _inside(z, lo, hi):
    return ((z > lo) & (z < hi)).astype(float)


def _backprop_htnn(net: HtnnSpec, X, U):
    h = X
    hs, zs = [h], []
    for L in net.layers:
        z = h @ L.W.T + L.b
        zs.append(z)
        h = np.minimum(L.hi, np.maximum(z, L.lo))
        hs.append(h)
    D = X.shape[0]
    E = h - U
    loss = float(np.einsum("ij,ij->", E, E) / D)
    g = 2.0 * E / D
    grads = {}
    for k in range(len(net.layers) - 1, -1, -1):
        L = net.layers[k]
        dz = g * _inside(zs[k], L.lo, L.hi)
        grads[f"W{k}"] = dz.T @ hs[k]
        grads[f"b{k}"] = dz.sum(axis=0)
        g = dz @ L.W
    return loss, grads


def _power_stack_grad(A_hat, dQ21, N):
    """Gradient w.r.t. ``A_hat`` of ``<dQ21, [A; A^2; ...; A^N]>``."""
    n = A_hat.shape[0]
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(powers[-1] @ A_hat)
    g = np.zeros_like(A_hat)
    for t in range(1, N + 1):
        Dt = dQ21[(t - 1) * n:t * n]
        for j in range(t):
            g += powers[j].T @ Dt @ powers[t - 1 - j].T
    return g


def _backprop_unfolded(p: UnfoldedParams, X, U):
    out, trace = forward_unfolded(p, X, return_trace=True)
    D = X.shape[0]
    E = out - U
    loss = float(np.einsum("ij,ij->", E, E) / D)
    grads = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    g_first = np.zeros_like(out)   # dL/d(first block of layer output state)
    g_second = 2.0 * E / D         # dL/d(second block) = dL/du_new
    a = p.arrays
    for k in range(p.n_layers - 1, -1, -1):
        u_prev, u, y, z = trace[k]
        H, G = effective_HG(p, k)
        alpha = a["alpha"][k]
        M = np.eye(p.nu) - alpha * H
        dz = g_second * _inside(z, p.lo, p.hi)
        dM = dz.T @ y
        dG_lin = dz.T @ X                      # d/dG of <dz, X G^T> before -alpha
        grads["alpha"][k] = -np.sum(dM * H) - np.sum(dG_lin * G)
        dH = -alpha * dM
        dG = -alpha * dG_lin
        if p.variant == "dense":
            grads["Q1"][k] = dH
            grads["Q2"][k] = dG
        else:
            Q11, Q12 = a["Q11"][k], a["Q12"][k]
            Q21 = a["Q21"][k] if p.variant == "structured" else power_stack(a["A_hat"][k], p.N)
            grads["Q11"][k] = dH @ Q12.T + dG @ Q21.T
            grads["Q12"][k] = Q11.T @ dH
            dQ21 = Q11.T @ dG
            if p.variant == "structured":
                grads["Q21"][k] = dQ21
            else:
                grads["A_hat"][k] = _power_stack_grad(a["A_hat"][k], dQ21, p.N)
        if k == 0:
            break  # y = u0 is a constant
        beta = a["beta"][k - 1]
        dy = dz @ M
        grads["beta"][k - 1] = np.sum(dy * (u - u_prev))
        # state entering layer k is (u_prev, u) = output state of layer k-1
        g_second = g_first + (1.0 + beta) * dy
        g_first = -beta * dy
    for key, mask in p.masks().items():
        grads[key] *= mask
    return loss, grads


def backprop(model, X, U):
    """Loss and gradient dict for an :class:`HtnnSpec` or :class:`UnfoldedParams`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if isinstance(model, HtnnSpec):
        return _backprop_htnn(model, X, U)
    if isinstance(model, UnfoldedParams):
        return _backprop_unfolded(model, X, U)
    raise TypeError(f"cannot differentiate {type(model).__name__}")


def trainable(model):
    """Dict of the model's trainable arrays (views, updated in place)."""
    if isinstance(model, HtnnSpec):
        return htnn_params(model)
    return model.arrays


# -- ADAM --------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: AdamConfig, masks=None):
    """One bias-corrected ADAM update of ``params`` in place.

    ``masks`` (name -> 0/1 array) zeroes the masked entries after the step.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    if masks:
        for k, mask in masks.items():
            params[k] *= mask
    return params, state


# -- training loop -----------------------------------------------------------

@dataclass
class TrainReport:
    train_mse: list
    val_mse: list
    test_mse: float
    best_epoch: int
    wall_time: float

    def to_dict(self, timing=True):
        d = {"train_mse": self.train_mse, "val_mse": self.val_mse, "test_mse": self.test_mse,
             "best_epoch": self.best_epoch}
        if timing:
            d["wall_time"] = self.wall_time
        return d

    def smoothed_train_nonincreasing(self, window=5) -> bool:
        """Whether the moving average of train MSE never increases (diagnostic only)."""
        tr = np.asarray(self.train_mse)
        if tr.size < window + 1:
            return True
        ma = np.convolve(tr, np.ones(window) / window, mode="valid")
        return bool(np.all(np.diff(ma) <= 1e-12 * ma[:-1].max()))


def _copy_model(model):
    return model.copy()


def train(model, dataset: Dataset, config: AdamConfig):
    """Minibatch ADAM on the train split; returns ``(best_model, report)``.

    Validation MSE is tracked after every epoch (index 0 is the initial
    model) and the parameters with the lowest value are returned. The test
    MSE is evaluated once, on those parameters.
    """
    t0 = time.perf_counter()
    Xtr, Utr = dataset.part("train")
    Xva, Uva = dataset.part("val")
    Xte, Ute = dataset.part("test")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    masks = model.masks() if isinstance(model, UnfoldedParams) else None
    train_hist = [mse_loss(model, Xtr, Utr)]
    val_hist = [mse_loss(model, Xva, Uva)]
    best, best_val, best_epoch = _copy_model(model), val_hist[0], 0
    params = trainable(model)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(Xtr.shape[0])
        for i in range(0, perm.size, config.batch_size):
            idx = perm[i:i + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # checked just below
                loss, grads = backprop(model, Xtr[idx], Utr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            adam_step(params, grads, state, config, masks)
            if isinstance(model, UnfoldedParams):
                model.project()
        tr = mse_loss(model, Xtr, Utr)
        va = mse_loss(model, Xva, Uva)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        train_hist.append(tr)
        val_hist.append(va)
        if va < best_val:
            best, best_val, best_epoch = _copy_model(model), va, epoch
    test = mse_loss(best, Xte, Ute) if Xte.shape[0] else float("nan")
    report = TrainReport(train_hist, val_hist, test, best_epoch, time.perf_counter() - t0)
    log.info("trained %d epochs: val %.3g -> %.3g", config.epochs, val_hist[0], best_val)
    return best, report


# -- initializations -----------------------------------------------------------

def init_htnn(n_in, n_out, depth, width, seed, input_scale=None, bound=1.0,
              output_lo=None, output_hi=None) -> HtnnSpec:
    """Generic HTNN with ``depth - 1`` HardTanh(-bound, bound) hidden layers.

    Weights are uniform on ``+-1/sqrt(fan_in)``; first-layer columns are
    divided by ``input_scale`` so that inputs of that magnitude do not
    saturate at initialization. The output layer is identity unless
    output bounds are given.
    """
    rng = np.random.default_rng(seed)
    scale = np.ones(n_in) if input_scale is None else np.asarray(input_scale, dtype=float)
    sizes = [n_in] + [width] * (depth - 1) + [n_out]
    layers = []
    for k in range(depth):
        fan_in = sizes[k]
        lim = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-lim, lim, size=(sizes[k + 1], fan_in))
        if k == 0:
            W = W / scale[None, :]
        b = np.zeros(sizes[k + 1])
        if k < depth - 1:
            layers.append(Layer(W, b, np.full(width, -bound), np.full(width, bound)))
        elif output_lo is not None:
            layers.append(Layer(W, b, output_lo, output_hi))
        else:
            layers.append(Layer.identity_acts(W, b))
    return HtnnSpec(layers)


def perturb(p: UnfoldedParams, noise, rng) -> UnfoldedParams:
    """Multiplicative Gaussian perturbation of every trainable entry.

    Zero entries (including masked ones) stay zero.
    """
    q = p.copy()
    for k, v in q.arrays.items():
        v *= 1.0 + noise * rng.standard_normal(v.shape)
    q.project()
    return q
