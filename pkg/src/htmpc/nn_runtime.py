"""Evaluation and Lipschitz certification of HardTanh networks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .htnn import HtnnSpec


class NonFiniteActivation(ArithmeticError):
    pass


def forward(net: HtnnSpec, x, return_hidden=False):
    """Evaluate ``net`` at one input ``(n,)`` or a batch ``(B, n)``.

    With ``return_hidden=True`` also returns the list of pre-activation
    values of every layer.
    """
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"input has length {h.shape[-1]}, network expects {net.input_dim}")
    pre = []
    for k, L in enumerate(net.layers):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below
            z = h @ L.W.T + L.b
        if not np.all(np.isfinite(z)):
            raise NonFiniteActivation(f"non-finite pre-activation in layer {k + 1}")
        if return_hidden:
            pre.append(z)
        h = np.minimum(L.hi, np.maximum(z, L.lo))
    return (h, pre) if return_hidden else h


@dataclass(frozen=True)
class LipschitzCert:
    per_layer: tuple
    L: float

    def to_dict(self):
        return {"per_layer": list(self.per_layer), "L": self.L}


def spectral_norm(W, tol=1e-10, max_iter=10_000, svd_limit=2048):
    """Operator 2-norm by power iteration on ``W^T W``.

    Falls back to a full SVD when the iteration has not settled after
    ``max_iter`` steps and the matrix is small enough.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.size == 0 or not np.any(W):
        return 0.0
    rng = np.random.default_rng(0)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart deterministically
            v = np.ones(W.shape[1]) / math.sqrt(W.shape[1])
            continue
        v = w / nw
        s_new = math.sqrt(nw)
        if abs(s_new - sigma) <= tol * s_new:
            return s_new
        sigma = s_new
    if max(W.shape) <= svd_limit:
        return float(np.linalg.svd(W, compute_uv=False)[0])
    return sigma


def lipschitz_cert(net: HtnnSpec) -> LipschitzCert:
    """Product of layer spectral norms; valid since HardTanh is 1-Lipschitz."""
    norms = tuple(spectral_norm(L.W) for L in net.layers)
    return LipschitzCert(per_layer=norms, L=float(np.prod(norms)))


def difference_quotients(f, xs, eps):
    """``||f(x + e) - f(x)|| / ||e||`` for paired rows of ``xs`` and ``eps``."""
    num = np.linalg.norm(np.atleast_2d(f(xs + eps) - f(xs)), axis=-1)
    den = np.linalg.norm(eps, axis=-1)
    return num / den


def perturbation_check(net, x0, eps, L, rtol=1e-12) -> bool:
    """Whether ``||f(x0 + e) - f(x0)|| <= L ||e||`` for every row ``e`` of ``eps``.

    ``net`` is any callable accepting a batch of inputs.

    ``rtol`` absorbs floating-point rounding in the two evaluations.
    """
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    f = net
    base = f(x0)
    lhs = np.linalg.norm(np.atleast_2d(f(x0[None, :] + eps) - base), axis=-1)
    rhs = L * np.linalg.norm(eps, axis=-1)
    scale = max(1.0, float(np.abs(base).max()) if np.size(base) else 1.0)
    return bool(np.all(lhs <= rhs * (1 + rtol) + 1e-15 * scale))
