"""Unfolded (A)PGD networks: U-HTNN, S-U-HTNN and SS-U-HTNN.

Each of the ``depth - 1`` optimizer layers maps the state
``(u_prev, u)`` to ``(u, u_new)`` with

    y     = (1 + beta) u - beta u_prev
    u_new = clip((I - alpha H_k) y - alpha G_k x0, lo, hi)

and a final selector layer returns ``u``. The first layer starts from
``u_prev = u = u0``. The variants differ in how ``H_k`` and ``G_k`` are
parameterized:

* ``dense``:            ``H_k = Q1``, ``G_k = Q2``
* ``structured``:       ``H_k = I + Q11 Q12``, ``G_k = Q11 Q21``  (R = I)
* ``super_structured``: as structured with block-triangular masks on
  ``Q11`` / ``Q12`` and ``Q21 = [A_hat; A_hat^2; ...; A_hat^N]``.

``x0`` is a genuine network input; every layer applies its own
injection map ``-alpha G_k`` to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .box_qp import default_momentum, default_stepsize, BoxQp
from .htnn import HtnnSpec, Layer
from .mpc_core import CondensedQp, LtiSystem, MpcProblem, cost_blocks, prediction_matrices

VARIANTS = ("dense", "structured", "super_structured")

_ARRAY_KEYS = {
    "dense": ("alpha", "beta", "Q1", "Q2"),
    "structured": ("alpha", "beta", "Q11", "Q12", "Q21"),
    "super_structured": ("alpha", "beta", "Q11", "Q12", "A_hat"),
}


def triangular_masks(N, n_x, n_u):
    """Block masks ``(mask11, mask12)`` for ``A^T Q`` and ``A`` shapes.

    ``mask12`` (``N n_x x N n_u``) keeps block ``(t, s)`` for ``s <= t``;
    ``mask11`` is its transpose pattern.
    """
    t = np.repeat(np.arange(N), n_x)
    s = np.repeat(np.arange(N), n_u)
    mask12 = (s[None, :] <= t[:, None]).astype(float)
    return mask12.T.copy(), mask12


def power_stack(A_hat, N):
    """``[A_hat; A_hat^2; ...; A_hat^N]``."""
    blocks = [A_hat]
    for _ in range(N - 1):
        blocks.append(blocks[-1] @ A_hat)
    return np.vstack(blocks)


@dataclass
class UnfoldedParams:
    """Trainable parameters of an unfolded network.

    ``arrays`` holds per-layer stacks: ``alpha`` ``(K,)``, ``beta``
    ``(K - 1,)`` and the variant's matrices with a leading axis of length
    ``K = depth - 1``. ``lo``, ``hi`` and ``u0`` are fixed.
    """

    variant: str
    depth: int
    n_x: int
    nu: int
    N: int
    lo: np.ndarray
    hi: np.ndarray
    u0: np.ndarray
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.depth < 2:
            raise ValueError("unfolded networks need depth >= 2")
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        self.arrays = {k: np.array(v, dtype=float) for k, v in self.arrays.items()}
        K = self.depth - 1
        nu, n_x, Nx = self.nu, self.n_x, self.N * self.n_x
        expected = {
            "alpha": (K,), "beta": (K - 1,),
            "Q1": (K, nu, nu), "Q2": (K, nu, n_x),
            "Q11": (K, nu, Nx), "Q12": (K, Nx, nu), "Q21": (K, Nx, n_x),
            "A_hat": (K, n_x, n_x),
        }
        keys = _ARRAY_KEYS[self.variant]
        if set(self.arrays) != set(keys):
            raise ValueError(f"{self.variant} expects arrays {keys}, got {sorted(self.arrays)}")
        for k in keys:
            if self.arrays[k].shape != expected[k]:
                raise ValueError(f"{k} has shape {self.arrays[k].shape}, expected {expected[k]}")
        for name, v in (("lo", self.lo), ("hi", self.hi), ("u0", self.u0)):
            if v.shape != (nu,):
                raise ValueError(f"{name} must have length {nu}")
        if self.variant == "super_structured":
            self.apply_masks()

    @property
    def n_layers(self) -> int:
        return self.depth - 1

    def masks(self):
        if self.variant != "super_structured":
            return {}
        m11, m12 = triangular_masks(self.N, self.n_x, self.nu // self.N)
        return {"Q11": m11, "Q12": m12}

    def apply_masks(self):
        for k, mask in self.masks().items():
            self.arrays[k] *= mask

    def project(self, min_alpha=1e-6):
        """Restore the invariants after an update: masks, alpha > 0, beta >= 0."""
        self.apply_masks()
        np.maximum(self.arrays["alpha"], min_alpha, out=self.arrays["alpha"])
        np.maximum(self.arrays["beta"], 0.0, out=self.arrays["beta"])

    def copy(self):
        return UnfoldedParams(self.variant, self.depth, self.n_x, self.nu, self.N,
                              self.lo.copy(), self.hi.copy(), self.u0.copy(),
                              {k: v.copy() for k, v in self.arrays.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def __call__(self, x0):
        return forward_unfolded(self, x0)

    def to_dict(self):
        return {"type": "unfolded", "variant": self.variant, "depth": self.depth,
                "n_x": self.n_x, "nu": self.nu, "N": self.N,
                "lo": self.lo.tolist(), "hi": self.hi.tolist(), "u0": self.u0.tolist(),
                "arrays": {k: v.tolist() for k, v in self.arrays.items()}}

    @classmethod
    def from_dict(cls, d):
        K = d["depth"] - 1
        arrays = {}
        for k, v in d["arrays"].items():
            a = np.array(v, dtype=float)
            if k == "beta" and a.size == 0:
                a = a.reshape(K - 1)
            arrays[k] = a
        return cls(d["variant"], d["depth"], d["n_x"], d["nu"], d["N"],
                   d["lo"], d["hi"], d["u0"], arrays)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LayerMatrices:
    """Materialized maps of one optimizer layer.

    ``u_new = clip(W1 u_prev + W2 u + bias_map x0)``; for the first layer
    ``W1 = 0`` and ``W2 = M`` act on ``u0``.
    """

    M: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    bias_map: np.ndarray
    H: np.ndarray
    G: np.ndarray


def effective_HG(p: UnfoldedParams, k: int):
    """Hessian-like and linear-term maps ``(H_k, G_k)`` of layer ``k`` (0-based)."""
    a = p.arrays
    if p.variant == "dense":
        return a["Q1"][k], a["Q2"][k]
    Q11, Q12 = a["Q11"][k], a["Q12"][k]
    Q21 = a["Q21"][k] if p.variant == "structured" else power_stack(a["A_hat"][k], p.N)
    return np.eye(p.nu) + Q11 @ Q12, Q11 @ Q21


def assemble_structured(p: UnfoldedParams):
    """Per-layer :class:`LayerMatrices` built from the variant's factors."""
    if p.variant not in ("structured", "super_structured"):
        raise ValueError("assemble_structured needs a structured variant")
    for key, mask in p.masks().items():
        if np.any(p.arrays[key][:, mask == 0] != 0):
            raise AssertionError(f"{key} has entries outside its triangular mask")
    return _assemble(p)


def _assemble(p: UnfoldedParams):
    out = []
    for k in range(p.n_layers):
        H, G = effective_HG(p, k)
        alpha = p.arrays["alpha"][k]
        M = np.eye(p.nu) - alpha * H
        if k == 0:
            W1, W2 = np.zeros_like(M), M
        else:
            beta = p.arrays["beta"][k - 1]
            W1, W2 = -beta * M, (1.0 + beta) * M
        out.append(LayerMatrices(M, W1, W2, -alpha * G, H, G))
    return out


def forward_unfolded(p: UnfoldedParams, x0, return_trace=False):
    """Network output ``u_{depth-1}`` for one ``x0`` or a batch ``(B, n_x)``.

    With ``return_trace=True`` also returns the per-layer
    ``(u_prev, u, y, z)`` used by backpropagation.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != p.n_x:
        raise ValueError(f"x0 has length {x0.shape[-1]}, expected {p.n_x}")
    single = x0.ndim == 1
    lo, hi = p.lo, p.hi
    u = p.u0 if single else np.broadcast_to(p.u0, (x0.shape[0], p.nu))
    u_prev = u
    trace = []
    for k in range(p.n_layers):
        H, G = effective_HG(p, k)
        alpha = p.arrays["alpha"][k]
        M = np.eye(p.nu) - alpha * H
        if k == 0:
            y = u
        else:
            beta = p.arrays["beta"][k - 1]
            y = (1.0 + beta) * u - beta * u_prev
        if single:
            z = M @ y - alpha * (G @ x0)
        else:
            z = y @ M.T - alpha * (x0 @ G.T)
        u_new = np.minimum(hi, np.maximum(z, lo))
        if return_trace:
            trace.append((u_prev, u, y, z))
        u_prev, u = u, u_new
    return (u, trace) if return_trace else u


def init_from_mpc(qp: CondensedQp, depth: int, alpha=None, beta=None, u0=None,
                  N=1) -> UnfoldedParams:
    """Dense network whose forward pass reproduces APGD on ``qp``.

    Every layer gets ``Q1 = H``, ``Q2`` the condensed linear map, and the
    given (default: APGD) stepsize and momentum. ``N`` is only recorded;
    the dense variant does not depend on the horizon.
    """
    box = BoxQp(H=qp.H, q=np.zeros(qp.nu), lo=qp.lo, hi=qp.hi)
    alpha = default_stepsize(box) if alpha is None else float(alpha)
    beta = default_momentum(box) if beta is None else float(beta)
    K = depth - 1
    return UnfoldedParams(
        "dense", depth, qp.n_x, qp.nu, N, qp.lo, qp.hi,
        np.zeros(qp.nu) if u0 is None else u0,
        {"alpha": np.full(K, alpha), "beta": np.full(K - 1, beta),
         "Q1": np.repeat(qp.H[None], K, axis=0), "Q2": np.repeat(qp.Q2[None], K, axis=0)},
    )


def init_structured(sys: LtiSystem, mpc: MpcProblem, depth: int, alpha=None, beta=None,
                    super_structured=False, u0=None) -> UnfoldedParams:
    """Structured network with factors taken from the true prediction matrices.

    Requires ``R = I`` so that ``H = I + (A^T Q) A``.
    """
    if not np.array_equal(mpc.R, np.eye(mpc.n_u)):
        raise ValueError("structured unfolding assumes R = I")
    from .mpc_core import condense

    qp = condense(sys, mpc)
    box = BoxQp(H=qp.H, q=np.zeros(qp.nu), lo=qp.lo, hi=qp.hi)
    alpha = default_stepsize(box) if alpha is None else float(alpha)
    beta = default_momentum(box) if beta is None else float(beta)
    A_blk, A_N = prediction_matrices(sys, mpc.N)
    Q_blk, _ = cost_blocks(mpc)
    K = depth - 1
    arrays = {"alpha": np.full(K, alpha), "beta": np.full(K - 1, beta),
              "Q11": np.repeat((A_blk.T @ Q_blk)[None], K, axis=0),
              "Q12": np.repeat(A_blk[None], K, axis=0)}
    if super_structured:
        arrays["A_hat"] = np.repeat(sys.A[None], K, axis=0)
    else:
        arrays["Q21"] = np.repeat(A_N[None], K, axis=0)
    variant = "super_structured" if super_structured else "structured"
    return UnfoldedParams(variant, depth, sys.n_x, qp.nu, mpc.N, qp.lo, qp.hi,
                          np.zeros(qp.nu) if u0 is None else u0, arrays)


def to_htnn(p: UnfoldedParams) -> HtnnSpec:
    """Flatten into a plain feed-forward :class:`HtnnSpec` on input ``x0``.

    Hidden states are ``[u_prev; u; x0]``; the ``x0`` block is carried with
    identity neurons so no layer needs a separate injection path.
    """
    nu, n_x = p.nu, p.n_x
    mats = _assemble(p)
    inf = np.full(nu, np.inf)
    id_x = (np.full(n_x, -np.inf), np.full(n_x, np.inf))
    m0 = mats[0]
    W = np.vstack([np.zeros((nu, n_x)), m0.bias_map, np.eye(n_x)])
    b = np.concatenate([p.u0, m0.M @ p.u0, np.zeros(n_x)])
    layers = [Layer(W, b, np.concatenate([-inf, p.lo, id_x[0]]),
                    np.concatenate([inf, p.hi, id_x[1]]))]
    for m in mats[1:]:
        W = np.zeros((2 * nu + n_x, 2 * nu + n_x))
        W[:nu, nu:2 * nu] = np.eye(nu)
        W[nu:2 * nu, :nu] = m.W1
        W[nu:2 * nu, nu:2 * nu] = m.W2
        W[nu:2 * nu, 2 * nu:] = m.bias_map
        W[2 * nu:, 2 * nu:] = np.eye(n_x)
        layers.append(Layer(W, np.zeros(2 * nu + n_x), layers[0].lo, layers[0].hi))
    sel = np.zeros((nu, 2 * nu + n_x))
    sel[:, nu:2 * nu] = np.eye(nu)
    layers.append(Layer.identity_acts(sel, np.zeros(nu)))
    return HtnnSpec(layers)


def load_params(path):
    with open(path) as fh:
        return UnfoldedParams.from_dict(json.load(fh))
