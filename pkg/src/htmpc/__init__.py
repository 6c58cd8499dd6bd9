"""Condensed linear MPC, projected gradient solvers and HardTanh networks.

The subpackages cover the whole pipeline: condensing an MPC problem into a
box QP, solving it with (accelerated) projected gradient, compiling known
min-max laws into exact HardTanh networks, unfolding the solver into a
trainable network, training on APGD data and closed-loop simulation.
"""

from .box_qp import BoxQp, apgd, pgd
from .htnn import HtnnSpec, build_scalar_minmax, build_vector_minmax
from .mpc_core import CondensedQp, LtiSystem, MpcProblem, condense
from .unfolded import UnfoldedParams, forward_unfolded, init_from_mpc

__version__ = "0.1.0"

__all__ = [
    "BoxQp", "CondensedQp", "HtnnSpec", "LtiSystem", "MpcProblem", "UnfoldedParams",
    "apgd", "build_scalar_minmax", "build_vector_minmax", "condense", "forward_unfolded",
    "init_from_mpc", "pgd",
]
