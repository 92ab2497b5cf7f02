"""Lifted linear MPC for nonlinear discrete-time systems via polyflow approximations."""

from .dynamics import DiscreteSystem, demo_block_system, make_system, pest_model, registered_systems
from .lifting import (
    LiftedModel,
    MonomialBasis,
    PolyflowBasis,
    RbfBasis,
    assemble_polyflow_model,
    fit_edmd,
    fit_polyflow,
    jacobian_model,
    sample_snapshots,
    sample_states,
)
from .lincontrol import ConstraintSpec, InvariantSet, Polytope, max_invariant_set, pest_constraints, solve_dare
from .mpc import (
    ClosedLoopRun,
    FeasibleDomainScan,
    GridSpec,
    MpcSpec,
    build_condensed_qp,
    design_mpc,
    lqr_controller,
    mpc_step,
    run_closed_loop,
    scan_feasible_domain,
)
from .qp import QpProblem, QpSettings, QpStatus, kkt_check, solve_qp

__version__ = "0.1.0"

__all__ = [
    "ClosedLoopRun",
    "ConstraintSpec",
    "DiscreteSystem",
    "FeasibleDomainScan",
    "GridSpec",
    "InvariantSet",
    "LiftedModel",
    "MonomialBasis",
    "MpcSpec",
    "PolyflowBasis",
    "Polytope",
    "QpProblem",
    "QpSettings",
    "QpStatus",
    "RbfBasis",
    "assemble_polyflow_model",
    "build_condensed_qp",
    "demo_block_system",
    "design_mpc",
    "fit_edmd",
    "fit_polyflow",
    "jacobian_model",
    "kkt_check",
    "lqr_controller",
    "make_system",
    "max_invariant_set",
    "mpc_step",
    "pest_constraints",
    "pest_model",
    "registered_systems",
    "run_closed_loop",
    "sample_snapshots",
    "sample_states",
    "scan_feasible_domain",
    "solve_dare",
    "solve_qp",
]
