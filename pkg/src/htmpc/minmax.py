"""Min-max affine functions over box domains.

A scalar function is ``min_i max_{j in C_i} c_j^T x + d_j``; a vector
function applies one scalar function per output. Group indices are
zero-based everywhere, including the JSON format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AffineTerm:
    c: np.ndarray
    d: float

    def __post_init__(self):
        c = np.array(self.c, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(c)) and np.isfinite(self.d)):
            raise ValueError("affine term has non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    def __call__(self, x):
        return np.asarray(x) @ self.c + self.d


@dataclass(frozen=True)
class BoxDomain:
    x_lo: np.ndarray
    x_hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.x_lo, dtype=float).reshape(-1)
        hi = np.array(self.x_hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds have different lengths")
        if np.any(lo >= hi):
            raise ValueError("box requires x_lo < x_hi componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "x_lo", lo)
        object.__setattr__(self, "x_hi", hi)

    @property
    def n_x(self) -> int:
        return self.x_lo.size

    def sample(self, n, rng):
        return rng.uniform(self.x_lo, self.x_hi, size=(n, self.n_x))

    def vertices(self):
        n = self.n_x
        bits = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        return np.where(bits == 1, self.x_hi, self.x_lo)

    def to_dict(self):
        return {"x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(x_lo=d["x_lo"], x_hi=d["x_hi"])


class MinMaxScalar:
    """Scalar min-max affine function.

    Parameters
    ----------
    terms : list of AffineTerm
        The ``m`` affine pieces.
    groups : list of sequences of int
        Index sets ``C_1 .. C_l`` into ``terms``; each must be nonempty.
    """

    def __init__(self, terms, groups):
        if not terms:
            raise ValueError("at least one affine term is required")
        terms = [t if isinstance(t, AffineTerm) else AffineTerm(*t) for t in terms]
        n_x = terms[0].c.size
        if any(t.c.size != n_x for t in terms):
            raise ValueError("affine terms have inconsistent input dimension")
        if not groups:
            raise ValueError("at least one group is required")
        m = len(terms)
        norm_groups = []
        for g in groups:
            g = tuple(int(j) for j in g)
            if not g:
                raise ValueError("groups must be nonempty")
            if any(j < 0 or j >= m for j in g):
                raise ValueError(f"group {g} has an index outside 0..{m - 1}")
            norm_groups.append(g)
        self.terms = tuple(terms)
        self.groups = tuple(norm_groups)
        self.C = np.array([t.c for t in terms])
        self.d = np.array([t.d for t in terms])
        self.C.setflags(write=False)
        self.d.setflags(write=False)

    @property
    def n_x(self) -> int:
        return self.C.shape[1]

    @property
    def m(self) -> int:
        return len(self.terms)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.groups)

    def __call__(self, x):
        return eval_scalar(self, x)

    def __eq__(self, other):
        return (isinstance(other, MinMaxScalar) and self.groups == other.groups
                and np.array_equal(self.C, other.C) and np.array_equal(self.d, other.d))

    def to_dict(self):
        return {
            "n_x": self.n_x,
            "terms": [{"c": t.c.tolist(), "d": t.d} for t in self.terms],
            "groups": [list(g) for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d):
        f = cls([AffineTerm(t["c"], t["d"]) for t in d["terms"]], d["groups"])
        if "n_x" in d and d["n_x"] != f.n_x:
            raise ValueError(f"n_x={d['n_x']} does not match terms ({f.n_x})")
        return f


class MinMaxVector:
    """One :class:`MinMaxScalar` per output, all on the same input space."""

    def __init__(self, outputs):
        outputs = list(outputs)
        if not outputs:
            raise ValueError("at least one output is required")
        if any(f.n_x != outputs[0].n_x for f in outputs):
            raise ValueError("outputs have inconsistent input dimension")
        self.outputs = tuple(outputs)

    @property
    def n_x(self) -> int:
        return self.outputs[0].n_x

    @property
    def n_u(self) -> int:
        return len(self.outputs)

    def __call__(self, x):
        return eval_vector(self, x)

    def to_dict(self):
        return {"n_x": self.n_x, "outputs": [f.to_dict() for f in self.outputs]}

    @classmethod
    def from_dict(cls, d):
        if "outputs" not in d:
            return cls([MinMaxScalar.from_dict(d)])
        return cls([MinMaxScalar.from_dict(o) for o in d["outputs"]])


def eval_scalar(f: MinMaxScalar, x):
    """Evaluate ``f`` at one point (returns float) or a batch ``(n, n_x)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != f.n_x:
        raise ValueError(f"x has length {x.shape[-1]}, expected {f.n_x}")
    vals = x @ f.C.T + f.d
    group_max = np.stack([vals[..., list(g)].max(axis=-1) for g in f.groups], axis=-1)
    out = group_max.min(axis=-1)
    return float(out) if out.ndim == 0 else out


def eval_vector(f: MinMaxVector, x):
    """Evaluate every output; shape ``(n_u,)`` or ``(n, n_u)``."""
    return np.stack([np.asarray(eval_scalar(g, x)) for g in f.outputs], axis=-1)


def affine_bounds(term: AffineTerm, X: BoxDomain):
    """Exact range ``[lo, hi]`` of ``c^T x + d`` over the box ``X``."""
    if term.c.size != X.n_x:
        raise ValueError(f"term has n_x={term.c.size}, box has {X.n_x}")
    a = term.c * X.x_lo
    b = term.c * X.x_hi
    return float(term.d + np.minimum(a, b).sum()), float(term.d + np.maximum(a, b).sum())


def random_minmax(n_x, m, l, seed) -> MinMaxScalar:  # noqa: E741
    """Reproducible random min-max function with ``m`` terms and ``l`` groups."""
    if m < 1 or l < 1 or n_x < 1:
        raise ValueError("need n_x, m, l >= 1")
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((m, n_x))
    d = rng.standard_normal(m)
    groups = []
    for _ in range(l):
        size = int(rng.integers(1, m + 1))
        groups.append(sorted(rng.choice(m, size=size, replace=False).tolist()))
    return MinMaxScalar([AffineTerm(C[j], d[j]) for j in range(m)], groups)


def random_minmax_vector(n_x, n_u, m, l, seed) -> MinMaxVector:  # noqa: E741
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_u)]
    return MinMaxVector([random_minmax(n_x, m, l, s) for s in seeds])


def load_law(path):
    """Read a scalar or vector law from JSON; always returns a MinMaxVector."""
    with open(path) as fh:
        return MinMaxVector.from_dict(json.load(fh))
