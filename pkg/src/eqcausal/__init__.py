"""Cyclic smooth structural causal models: accelerated equilibria, implicit
differentiation, and Lie-group soft intervention design."""

__version__ = "0.1.0"

from .fixedpoint import SolveReport, SolverConfig, anderson_solve, forward_iterate, relative_error
from .interventions import (CompartmentPlan, InvariantInterventionSpec, InvariantTwin, LieElement,
                            apply, build_invariant_model, check_compartmentalization,
                            check_invariance_conditions, compose, identity, inverse)
from .optimize import (AdamConfig, GhgEmploymentLoss, MlpSpec, SamplingConfig, TradeoffPoint,
                       adam_step, mlp_forward, optimize_lie_intervention, pareto_sweep,
                       train_invariant_policy)
from .sscm import (EquilibriumSolution, SscmSpec, assemble_map, check_local_diffeomorphism,
                   solve_equilibrium, spec_from_json, spec_to_json, validate)

__all__ = [
    "AdamConfig", "CompartmentPlan", "EquilibriumSolution", "GhgEmploymentLoss",
    "InvariantInterventionSpec", "InvariantTwin", "LieElement", "MlpSpec", "SamplingConfig",
    "SolveReport", "SolverConfig", "SscmSpec", "TradeoffPoint", "adam_step", "anderson_solve",
    "apply", "assemble_map", "build_invariant_model", "check_compartmentalization",
    "check_invariance_conditions", "check_local_diffeomorphism", "compose", "forward_iterate",
    "identity", "inverse", "mlp_forward", "optimize_lie_intervention", "pareto_sweep",
    "relative_error", "solve_equilibrium", "spec_from_json", "spec_to_json",
    "train_invariant_policy", "validate",
]
