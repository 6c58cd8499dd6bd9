"""HardTanh networks and exact compilation of min-max affine functions.

A network is a list of layers ``h_k = eta_k(W_k h_{k-1} + b_k)`` where each
neuron's activation is either the identity or ``min(hi, max(v, lo))``.

Max of ``p`` values is built from the pairing identity

    max(u1, u2) = eta(u2 - u1, 0, hi2 - lo1) + eta(u1, lo1, hi1)

applied level by level (odd leftovers pass through ``eta(u_p, lo_p, hi_p)``),
with the affine pieces absorbed into the first layer. Min stages use
``min(v) = -max(-v)``. Compositions merge the identity output layer of
the inner network into the first affine map of the outer one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .minmax import AffineTerm, BoxDomain, MinMaxScalar, MinMaxVector, affine_bounds


@dataclass(frozen=True)
class ActivationTag:
    kind: str
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.kind == "identity":
            object.__setattr__(self, "lo", -math.inf)
            object.__setattr__(self, "hi", math.inf)
        elif self.kind == "hardtanh":
            if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
                raise ValueError(f"hardtanh needs finite lo < hi, got ({self.lo}, {self.hi})")
        else:
            raise ValueError(f"unknown activation kind {self.kind!r}")

    def to_dict(self):
        if self.kind == "identity":
            return {"kind": "identity"}
        return {"kind": "hardtanh", "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("lo", -math.inf), d.get("hi", math.inf))


@dataclass
class Layer:
    """Affine map plus per-neuron clipping bounds.

    Identity neurons carry ``lo = -inf`` and ``hi = +inf`` so a single
    ``minimum(hi, maximum(z, lo))`` evaluates every neuron.
    """

    W: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float, ndmin=2)
        n = self.W.shape[0]
        self.b = np.array(self.b, dtype=float).reshape(-1)
        self.lo = np.array(self.lo, dtype=float).reshape(-1)
        self.hi = np.array(self.hi, dtype=float).reshape(-1)
        if not (self.b.size == self.lo.size == self.hi.size == n):
            raise ValueError("layer bias/activation lengths must match rows of W")
        ht = self.is_hardtanh
        bad = ~ht & ~(np.isneginf(self.lo) & np.isposinf(self.hi))
        if np.any(bad) or np.any(ht & ~(self.lo < self.hi)):
            raise ValueError("activation bounds must be (-inf, inf) or finite lo < hi")

    @classmethod
    def identity_acts(cls, W, b):
        n = np.array(W, ndmin=2).shape[0]
        return cls(W, b, np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def is_hardtanh(self) -> np.ndarray:
        return np.isfinite(self.lo) & np.isfinite(self.hi)

    @property
    def width(self) -> int:
        return self.W.shape[0]

    @property
    def acts(self):
        return [ActivationTag("hardtanh", lo, hi) if np.isfinite(lo) else ActivationTag("identity")
                for lo, hi in zip(self.lo, self.hi)]

    def copy(self):
        return Layer(self.W.copy(), self.b.copy(), self.lo.copy(), self.hi.copy())

    def to_dict(self):
        return {"W": self.W.tolist(), "b": self.b.tolist(),
                "acts": [a.to_dict() for a in self.acts]}

    @classmethod
    def from_dict(cls, d):
        acts = [ActivationTag.from_dict(a) for a in d["acts"]]
        W = np.array(d["W"], dtype=float, ndmin=2)
        if W.size == 0:
            W = W.reshape(len(acts), -1)
        return cls(W, d["b"], [a.lo for a in acts], [a.hi for a in acts])


@dataclass
class SizeReport:
    """Actual network size next to the bounds it must respect."""

    zeta: int
    width: int
    r: int
    bound_zeta: int
    bound_width: int
    bound_r: int
    notes: list = field(default_factory=list)
    children: list = field(default_factory=list)

    def ok(self) -> bool:
        own = (self.zeta <= self.bound_zeta and self.width <= self.bound_width
               and self.r <= self.bound_r)
        return own and all(c.ok() for c in self.children)

    def to_dict(self):
        return {
            "zeta": self.zeta, "width": self.width, "r": self.r,
            "bound_zeta": self.bound_zeta, "bound_width": self.bound_width,
            "bound_r": self.bound_r, "notes": list(self.notes),
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["zeta"], d["width"], d["r"], d["bound_zeta"], d["bound_width"], d["bound_r"],
            list(d.get("notes", [])), [cls.from_dict(c) for c in d.get("children", [])],
        )


class HtnnSpec:
    """Feed-forward HardTanh network.

    ``output_lo`` / ``output_hi`` optionally store a sound enclosure of the
    output values over the compilation domain; :func:`parallel` needs it
    to size pass-through neurons.
    """

    def __init__(self, layers, output_lo=None, output_hi=None, size_report=None):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].W.shape[1] != layers[k - 1].width:
                raise ValueError(
                    f"layer {k + 1} expects {layers[k].W.shape[1]} inputs, "
                    f"layer {k} produces {layers[k - 1].width}"
                )
        self.layers = layers
        self.output_lo = None if output_lo is None else np.asarray(output_lo, dtype=float)
        self.output_hi = None if output_hi is None else np.asarray(output_hi, dtype=float)
        self.size_report = size_report

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    @property
    def zeta(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        """Largest hidden-layer width (zero for a single-layer network)."""
        return max((L.width for L in self.layers[:-1]), default=0)

    @property
    def r(self) -> int:
        return int(sum(L.is_hardtanh.sum() for L in self.layers))

    @property
    def n_params(self) -> int:
        return sum(L.W.size + L.b.size for L in self.layers)

    def __call__(self, x):
        from .nn_runtime import forward

        return forward(self, x)

    def copy(self):
        return HtnnSpec([L.copy() for L in self.layers],
                        None if self.output_lo is None else self.output_lo.copy(),
                        None if self.output_hi is None else self.output_hi.copy(),
                        self.size_report)

    def to_dict(self):
        d = {"type": "htnn", "input_dim": self.input_dim, "output_dim": self.output_dim,
             "layers": [L.to_dict() for L in self.layers]}
        if self.output_lo is not None:
            d["output_lo"] = self.output_lo.tolist()
            d["output_hi"] = self.output_hi.tolist()
        if self.size_report is not None:
            d["size_report"] = self.size_report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        net = cls([Layer.from_dict(L) for L in d["layers"]], d.get("output_lo"),
                  d.get("output_hi"),
                  SizeReport.from_dict(d["size_report"]) if "size_report" in d else None)
        if net.input_dim != d.get("input_dim", net.input_dim):
            raise ValueError("input_dim does not match first layer")
        if net.output_dim != d.get("output_dim", net.output_dim):
            raise ValueError("output_dim does not match last layer")
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- size accounting ---------------------------------------------------------

def r_of(p: int) -> int:
    """HardTanh neurons needed for the max of ``p`` numbers.

    ``r(1) = 0`` and ``r(p) = p + r(ceil(p / 2))``.
    """
    if p < 1 or int(p) != p:
        raise ValueError(f"p must be a positive integer, got {p}")
    total = 0
    while p > 1:
        total += p
        p = (p + 1) // 2
    return total


def r_bound_check(p: int) -> bool:
    """Whether ``r(p) < 2 (2p - 1)``; defined for ``p >= 2``."""
    if p < 2:
        raise ValueError("bound is stated for p >= 2")
    return r_of(p) < 2 * (2 * p - 1)


def clog2(n: int) -> int:
    return (int(n) - 1).bit_length()


def zeta_of(p: int) -> int:
    return clog2(p) + 1


def scalar_bounds(m: int, l: int):  # noqa: E741
    """Layer, width and neuron bounds for a scalar min-max with m terms, l groups."""
    return (clog2(l) + clog2(m) + 1,
            l * max(m, 2),
            2 * l * (1 + 2 * m + clog2(m)) - 2)


# -- interval propagation ----------------------------------------------------

def propagate_intervals(net: HtnnSpec, lo, hi):
    """Interval enclosures of every layer's pre- and post-activation values.

    Returns a list of ``(pre_lo, pre_hi, post_lo, post_hi)`` per layer for
    inputs in the box ``[lo, hi]``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = []
    for L in net.layers:
        c = 0.5 * (lo + hi)
        rad = 0.5 * (hi - lo)
        zc = L.W @ c + L.b
        zr = np.abs(L.W) @ rad
        pre_lo, pre_hi = zc - zr, zc + zr
        lo = np.minimum(L.hi, np.maximum(pre_lo, L.lo))
        hi = np.minimum(L.hi, np.maximum(pre_hi, L.lo))
        out.append((pre_lo, pre_hi, lo, hi))
    return out


# -- builders ------------------------------------------------------------------

def _ht_bounds(lo, hi):
    """HardTanh bounds enclosing ``[lo, hi]``; a degenerate range is widened."""
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def _max_tree(A, a, lo, hi):
    """Layers computing ``max_j (A h + a)_j`` for an input ``h``.

    ``lo``/``hi`` enclose each value ``(A h + a)_j``. Returns the layers and
    the enclosure of the maximum.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    a = np.asarray(a, dtype=float)
    lo = list(map(float, lo))
    hi = list(map(float, hi))
    layers = []
    while len(lo) > 1:
        p = len(lo)
        P = np.zeros((p, p))
        n_lo = np.empty(p)
        n_hi = np.empty(p)
        S = np.zeros(((p + 1) // 2, p))
        new_lo, new_hi = [], []
        for j in range(p // 2):
            i1, i2 = 2 * j, 2 * j + 1
            P[i1, i2], P[i1, i1] = 1.0, -1.0
            n_lo[i1], n_hi[i1] = _ht_bounds(0.0, hi[i2] - lo[i1])
            P[i2, i1] = 1.0
            n_lo[i2], n_hi[i2] = _ht_bounds(lo[i1], hi[i1])
            S[j, i1] = S[j, i2] = 1.0
            new_lo.append(max(lo[i1], lo[i2]))
            new_hi.append(max(hi[i1], hi[i2]))
        if p % 2:
            P[p - 1, p - 1] = 1.0
            n_lo[p - 1], n_hi[p - 1] = _ht_bounds(lo[p - 1], hi[p - 1])
            S[-1, p - 1] = 1.0
            new_lo.append(lo[p - 1])
            new_hi.append(hi[p - 1])
        layers.append(Layer(P @ A, P @ a, n_lo, n_hi))
        A, a = S, np.zeros(S.shape[0])
        lo, hi = new_lo, new_hi
    layers.append(Layer.identity_acts(A, a))
    return layers, lo[0], hi[0]


def _as_terms(terms):
    if isinstance(terms, tuple) and len(terms) == 2 and not isinstance(terms[0], AffineTerm):
        C, d = terms
        return [AffineTerm(C[j], d[j]) for j in range(len(d))]
    return [t if isinstance(t, AffineTerm) else AffineTerm(*t) for t in terms]


def build_max_affine(terms, X: BoxDomain):
    """Exact network for ``max_j c_j^T x + d_j`` on the box ``X``.

    ``terms`` is a list of :class:`AffineTerm` or a ``(C, d)`` pair.
    Returns ``(net, report)`` with ``zeta = ceil(log2 m) + 1``,
    ``r = r_of(m)`` and width ``m`` for ``m > 1``.
    """
    terms = _as_terms(terms)
    if not terms:
        raise ValueError("max-affine function needs at least one term")
    m = len(terms)
    bounds = [affine_bounds(t, X) for t in terms]
    C = np.array([t.c for t in terms])
    d = np.array([t.d for t in terms])
    layers, out_lo, out_hi = _max_tree(C, d, [b[0] for b in bounds], [b[1] for b in bounds])
    net = HtnnSpec(layers, [out_lo], [out_hi])
    net.size_report = SizeReport(net.zeta, net.width, net.r, zeta_of(m), m if m > 1 else 0, r_of(m))
    return net, net.size_report


def _min_net(lo, hi):
    """Network for ``min`` of its ``l`` inputs, given input enclosures."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    l = lo.size  # noqa: E741
    layers, _, _ = _max_tree(-np.eye(l), np.zeros(l), -hi, -lo)
    last = layers[-1]
    layers[-1] = Layer.identity_acts(-last.W, -last.b)
    return HtnnSpec(layers, [lo.min()], [hi.min()])


def compose(outer: HtnnSpec, inner: HtnnSpec) -> HtnnSpec:
    """Network for ``outer(inner(x))`` with ``zeta = zeta_o + zeta_i - 1``.

    The identity output layer of ``inner`` is merged into the first
    affine map of ``outer``. If ``inner`` ends in HardTanh neurons an
    identity stage is appended first, costing one extra layer (recorded in
    the size report notes).
    """
    if inner.output_dim != outer.input_dim:
        raise ValueError(f"inner produces {inner.output_dim} values, outer expects {outer.input_dim}")
    notes = []
    inner_layers = [L.copy() for L in inner.layers]
    if inner_layers[-1].is_hardtanh.any():
        n = inner.output_dim
        inner_layers.append(Layer.identity_acts(np.eye(n), np.zeros(n)))
        notes.append("identity junction stage inserted; zeta = zeta_outer + zeta_inner")
    last = inner_layers[-1]
    first = outer.layers[0]
    merged = Layer(first.W @ last.W, first.W @ last.b + first.b, first.lo.copy(), first.hi.copy())
    layers = inner_layers[:-1] + [merged] + [L.copy() for L in outer.layers[1:]]
    net = HtnnSpec(layers, outer.output_lo, outer.output_hi)
    if notes:
        net.size_report = SizeReport(net.zeta, net.width, net.r, net.zeta, net.width, net.r, notes)
    return net


def pad_to_depth(net: HtnnSpec, depth: int, out_lo=None, out_hi=None) -> HtnnSpec:
    """Deepen ``net`` to ``depth`` layers without changing its function.

    The identity output neurons become HardTanh neurons whose bounds
    enclose the output range, followed by HardTanh pass-through layers and
    a final identity layer: one extra HardTanh neuron per output per added
    layer.
    """
    if depth < net.zeta:
        raise ValueError(f"cannot pad a depth-{net.zeta} network to depth {depth}")
    if depth == net.zeta:
        return net.copy()
    out_lo = net.output_lo if out_lo is None else np.asarray(out_lo, dtype=float)
    out_hi = net.output_hi if out_hi is None else np.asarray(out_hi, dtype=float)
    if out_lo is None or out_hi is None:
        raise ValueError("padding needs output intervals")
    n = net.output_dim
    ht_lo, ht_hi = zip(*(_ht_bounds(a, b) for a, b in zip(out_lo, out_hi)))
    layers = [L.copy() for L in net.layers]
    last = layers[-1]
    if last.is_hardtanh.any():
        layers.append(Layer(np.eye(n), np.zeros(n), ht_lo, ht_hi))
    else:
        layers[-1] = Layer(last.W, last.b, ht_lo, ht_hi)
    while len(layers) < depth:
        layers.append(Layer(np.eye(n), np.zeros(n), ht_lo, ht_hi))
    layers[-1] = Layer.identity_acts(layers[-1].W, layers[-1].b)
    return HtnnSpec(layers, out_lo, out_hi)


def parallel(nets, intervals=None) -> HtnnSpec:
    """Stack networks sharing one input into ``x -> [f_1(x); ...; f_l(x)]``.

    Shallower networks are padded with pass-through neurons, which needs
    each network's output enclosure: taken from ``intervals`` (a list of
    ``(lo, hi)``) or from the networks' stored ``output_lo/output_hi``.
    """
    nets = list(nets)
    if not nets:
        raise ValueError("nothing to connect")
    n_in = nets[0].input_dim
    if any(n.input_dim != n_in for n in nets):
        raise ValueError("parallel networks must share the input dimension")
    if intervals is None:
        intervals = [(n.output_lo, n.output_hi) for n in nets]
    if any(lo is None or hi is None for lo, hi in intervals):
        raise ValueError("parallel connection needs output intervals for every network")
    depth = max(n.zeta for n in nets)
    padded = [pad_to_depth(n, depth, lo, hi) for n, (lo, hi) in zip(nets, intervals)]
    layers = []
    for k in range(depth):
        Ls = [p.layers[k] for p in padded]
        if k == 0:
            W = np.vstack([L.W for L in Ls])
        else:
            W = np.zeros((sum(L.W.shape[0] for L in Ls), sum(L.W.shape[1] for L in Ls)))
            r0 = c0 = 0
            for L in Ls:
                W[r0:r0 + L.W.shape[0], c0:c0 + L.W.shape[1]] = L.W
                r0 += L.W.shape[0]
                c0 += L.W.shape[1]
        layers.append(Layer(W, np.concatenate([L.b for L in Ls]),
                            np.concatenate([L.lo for L in Ls]),
                            np.concatenate([L.hi for L in Ls])))
    lo = np.concatenate([np.atleast_1d(np.asarray(i[0], dtype=float)) for i in intervals])
    hi = np.concatenate([np.atleast_1d(np.asarray(i[1], dtype=float)) for i in intervals])
    return HtnnSpec(layers, lo, hi)


def build_scalar_minmax(f: MinMaxScalar, X: BoxDomain):
    """Exact network for a scalar min-max function on ``X``.

    One max-affine network per group, connected in parallel, feeding a
    min network whose first layer is absorbed into the parallel stage.
    """
    if f.n_x != X.n_x:
        raise ValueError(f"function has n_x={f.n_x}, box has {X.n_x}")
    subnets = [build_max_affine([f.terms[j] for j in g], X)[0] for g in f.groups]
    stack = parallel(subnets)
    net = compose(_min_net(stack.output_lo, stack.output_hi), stack)
    bz, bw, br = scalar_bounds(f.m, f.l)
    net.size_report = SizeReport(net.zeta, net.width, net.r, bz, bw, br)
    if f.l == 1:
        net.size_report.notes.append("single group: min stage is the identity")
    return net, net.size_report


def build_vector_minmax(f: MinMaxVector, X: BoxDomain):
    """Parallel connection of one exact scalar network per output.

    The report's bounds are the vector-case laws evaluated on the
    per-output networks (``zeta = max zeta_i``, ``w = sum max(w_i, 2)``,
    ``r = sum r_i + 2 (zeta - zeta_i)``); each child report carries the
    scalar bounds of its output.
    """
    built = [build_scalar_minmax(g, X) for g in f.outputs]
    if len(built) == 1:
        return built[0]
    nets = [b[0] for b in built]
    net = parallel(nets)
    z = max(n.zeta for n in nets)
    net.size_report = SizeReport(
        net.zeta, net.width, net.r,
        bound_zeta=z,
        bound_width=sum(max(n.width, 2) for n in nets),
        bound_r=sum(n.r + 2 * (z - n.zeta) for n in nets),
        children=[b[1] for b in built],
    )
    return net, net.size_report
