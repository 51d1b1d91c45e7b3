"""Smooth structural causal models over Euclidean boxes.

A model is a list of named nodes, each with an ordered parent list and a
scalar-valued assignment expression. Assignments read their parents through
the "parents" slot, a node-owned contiguous slice of the global parameter
vector through "theta", and optionally the shared intervention vector "u",
an external-value vector "extern" (used to reroute arrows when building
invariant twins), and a trainable "policy" weight vector.

Equilibria solve x = f(x, theta) from zero initialization with a configured
fixed-point solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import diffcore, fixedpoint
from .diffcore import ExprGraph
from .errors import SpecValidationError
from .fixedpoint import SolveReport, SolverConfig

Array = np.ndarray

#: slots an assignment graph may declare, besides "parents" and "theta"
SHARED_SLOTS = ("u", "extern", "policy")

#: above this dimension, implicit differentiation falls back to iterative
#: adjoint solves instead of dense Jacobian assembly
DENSE_DIM_LIMIT = 64


def _frozen_array(value, dtype=np.float64) -> Array:
    arr = np.asarray(value, dtype=dtype).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SscmSpec:
    """Node names, parent lists, assignment graphs and the parameter box."""

    names: tuple[str, ...]
    parents: tuple[tuple[int, ...], ...]
    assignments: tuple[ExprGraph, ...]
    theta_ref: Array
    theta_box: Array  # (p, 2) columns [lo, hi]
    theta_slices: tuple[tuple[int, int], ...]  # per-node (start, stop) into theta
    u_dim: int = 0
    u_ref: Array = field(default_factory=lambda: np.zeros(0))
    extern_dim: int = 0
    policy_dim: int = 0
    policy_ref: Array | None = None
    x_ref: Array | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(tuple(int(i) for i in p) for p in self.parents))
        object.__setattr__(self, "theta_slices", tuple((int(a), int(b)) for a, b in self.theta_slices))
        object.__setattr__(self, "theta_ref", _frozen_array(self.theta_ref))
        object.__setattr__(self, "theta_box", _frozen_array(np.asarray(self.theta_box).reshape(-1, 2)))
        object.__setattr__(self, "u_ref", _frozen_array(self.u_ref))
        if self.policy_ref is not None:
            object.__setattr__(self, "policy_ref", _frozen_array(self.policy_ref))
        if self.x_ref is not None:
            object.__setattr__(self, "x_ref", _frozen_array(self.x_ref))

    @property
    def d(self) -> int:
        return len(self.names)

    @property
    def theta_dim(self) -> int:
        return self.theta_ref.shape[0]

    def with_u(self, u_ref) -> "SscmSpec":
        return replace(self, u_ref=_frozen_array(u_ref))

    def with_policy(self, weights) -> "SscmSpec":
        return replace(self, policy_ref=_frozen_array(weights))


@dataclass
class EquilibriumSolution:
    x_star: Array
    report: SolveReport
    theta: Array


def validate(spec: SscmSpec) -> list[str]:
    """Structural diagnostics; an empty list means the spec is well-formed."""
    out: list[str] = []
    d = spec.d
    if len(spec.parents) != d or len(spec.assignments) != d or len(spec.theta_slices) != d:
        out.append(f"field lengths disagree with node count {d}")
        return out
    p = spec.theta_dim
    if spec.theta_box.shape != (p, 2):
        out.append(f"theta_box shape {spec.theta_box.shape} != ({p}, 2)")
    else:
        if np.any(spec.theta_box[:, 0] > spec.theta_box[:, 1]):
            out.append("theta_box has lo > hi components")
        if np.any(spec.theta_ref < spec.theta_box[:, 0]) or np.any(spec.theta_ref > spec.theta_box[:, 1]):
            out.append("theta_ref outside theta_box")
    used = np.zeros(p, dtype=bool)
    for j in range(d):
        for parent in spec.parents[j]:
            if parent < 0 or parent >= d:
                out.append(f"node {j}: parent {parent} out of range")
            if parent == j:
                out.append(f"node {j}: self-loop in parent list")
        start, stop = spec.theta_slices[j]
        if not (0 <= start <= stop <= p):
            out.append(f"node {j}: theta slice [{start}:{stop}] out of range")
        elif np.any(used[start:stop]):
            out.append(f"node {j}: theta slice [{start}:{stop}] overlaps another node's slice")
        else:
            used[start:stop] = True
        g = spec.assignments[j]
        if g.output_dim != 1:
            out.append(f"node {j}: assignment output dim {g.output_dim} != 1")
        for slot, (_, dim) in g.slots.items():
            if slot == "parents":
                if dim != len(spec.parents[j]):
                    out.append(f"node {j}: parents slot dim {dim} != {len(spec.parents[j])} declared parents")
            elif slot == "theta":
                if dim != stop - start:
                    out.append(f"node {j}: theta slot dim {dim} != slice length {stop - start}")
            elif slot == "u":
                if dim != spec.u_dim:
                    out.append(f"node {j}: u slot dim {dim} != u_dim {spec.u_dim}")
            elif slot == "extern":
                if dim != spec.extern_dim:
                    out.append(f"node {j}: extern slot dim {dim} != extern_dim {spec.extern_dim}")
            elif slot == "policy":
                if dim != spec.policy_dim:
                    out.append(f"node {j}: policy slot dim {dim} != policy_dim {spec.policy_dim}")
            else:
                out.append(f"node {j}: unknown slot {slot!r}")
        if "parents" not in g.slots and spec.parents[j]:
            out.append(f"node {j}: declares parents but assignment has no parents slot")
    if spec.u_dim != spec.u_ref.shape[0]:
        out.append(f"u_ref length {spec.u_ref.shape[0]} != u_dim {spec.u_dim}")
    if spec.policy_ref is not None and spec.policy_ref.shape[0] != spec.policy_dim:
        out.append(f"policy_ref length {spec.policy_ref.shape[0]} != policy_dim {spec.policy_dim}")
    return out


def _require_valid(spec: SscmSpec):
    diags = validate(spec)
    if diags:
        raise SpecValidationError(diags)


def _bindings_template(spec: SscmSpec, theta, u, extern, policy) -> list[dict]:
    """Static per-node bindings; the per-evaluation 'parents' entry is added later."""
    theta = np.asarray(theta, dtype=np.float64)
    if u is None:
        u = spec.u_ref
    u = np.asarray(u, dtype=np.float64)
    if policy is None and spec.policy_ref is not None:
        policy = spec.policy_ref
    static: list[dict] = []
    for j in range(spec.d):
        g = spec.assignments[j]
        b: dict = {}
        if "theta" in g.slots:
            start, stop = spec.theta_slices[j]
            b["theta"] = theta[start:stop]
        if "u" in g.slots:
            b["u"] = u
        if "extern" in g.slots:
            if extern is None:
                raise SpecValidationError([f"node {j} requires an extern binding"])
            b["extern"] = np.asarray(extern, dtype=np.float64)
        if "policy" in g.slots:
            if policy is None:
                raise SpecValidationError([f"node {j} requires a policy binding"])
            b["policy"] = np.asarray(policy, dtype=np.float64)
        static.append(b)
    return static


def assemble_map(spec: SscmSpec, theta, u=None, extern=None, policy=None) -> Callable[[Array], Array]:
    """The stacked structural map x -> (f_1(Pa_1, theta_1), ..., f_d(Pa_d, theta_d))."""
    _require_valid(spec)
    static = _bindings_template(spec, theta, u, extern, policy)
    parent_idx = [np.asarray(p, dtype=np.intp) for p in spec.parents]
    assignments = spec.assignments
    d = spec.d

    def f(x: Array) -> Array:
        out = np.empty(d)
        for j in range(d):
            b = dict(static[j])
            b["parents"] = x[parent_idx[j]]
            out[j] = diffcore.forward_eval(assignments[j], b)[0]
        return out

    return f


def solve_equilibrium(spec: SscmSpec, theta, cfg: SolverConfig, u=None, extern=None, policy=None) -> EquilibriumSolution:
    """Solve x = f(x, theta) from zero initialization with the configured solver."""
    f = assemble_map(spec, theta, u=u, extern=extern, policy=policy)
    report = fixedpoint.solve(f, np.zeros(spec.d), cfg)
    return EquilibriumSolution(report.x, report, np.asarray(theta, dtype=np.float64).copy())


def node_gradients(spec: SscmSpec, x, theta, u=None, extern=None, policy=None,
                   cotangent=None) -> list[diffcore.Gradient]:
    """Per-node VJPs of the scalar assignments, weighted by cotangent components.

    With cotangent = a this yields, per node j, a_j * grad f_j for every slot;
    scattering the "parents" parts gives a^T (df/dx) row contributions.
    """
    static = _bindings_template(spec, theta, u, extern, policy)
    x = np.asarray(x, dtype=np.float64)
    if cotangent is None:
        cotangent = np.ones(spec.d)
    grads = []
    for j in range(spec.d):
        b = dict(static[j])
        b["parents"] = x[np.asarray(spec.parents[j], dtype=np.intp)]
        grads.append(diffcore.reverse_vjp(spec.assignments[j], b, [cotangent[j]]))
    return grads


def jacobian_wrt_state(spec: SscmSpec, x, theta, u=None, extern=None, policy=None) -> Array:
    """Dense df/dx at (x, theta); intended for desk-scale dimensions."""
    grads = node_gradients(spec, x, theta, u=u, extern=extern, policy=policy)
    jac = np.zeros((spec.d, spec.d))
    for j, g in enumerate(grads):
        part = g.get("parents")
        if part is not None and len(spec.parents[j]):
            jac[j, list(spec.parents[j])] = part
    return jac


@dataclass
class DiffeoReport:
    is_solution: bool
    jacobian_invertible: bool
    condition_number: float
    residual: float


def check_local_diffeomorphism(spec: SscmSpec, x, theta, cond_max: float = 1e8,
                               tol: float = 1e-4, u=None, extern=None, policy=None) -> DiffeoReport:
    """Check that (x, theta) is a fixed point and that I - df/dx is well conditioned."""
    _require_valid(spec)
    f = assemble_map(spec, theta, u=u, extern=extern, policy=policy)
    x = np.asarray(x, dtype=np.float64)
    res, err = fixedpoint._error(x, f(x))
    jac = np.eye(spec.d) - jacobian_wrt_state(spec, x, theta, u=u, extern=extern, policy=policy)
    cond = float(np.linalg.cond(jac))
    return DiffeoReport(
        is_solution=bool(err <= tol),
        jacobian_invertible=bool(np.isfinite(cond) and cond <= cond_max),
        condition_number=cond,
        residual=res,
    )


# --- JSON serialization ---

def spec_to_obj(spec: SscmSpec) -> dict:
    return {
        "names": list(spec.names),
        "parents": [list(p) for p in spec.parents],
        "assignments": [diffcore.graph_to_obj(g) for g in spec.assignments],
        "theta_ref": spec.theta_ref.tolist(),
        "theta_box": spec.theta_box.tolist(),
        "theta_slices": [list(s) for s in spec.theta_slices],
        "u_dim": spec.u_dim,
        "u_ref": spec.u_ref.tolist(),
        "extern_dim": spec.extern_dim,
        "policy_dim": spec.policy_dim,
        "policy_ref": None if spec.policy_ref is None else spec.policy_ref.tolist(),
        "x_ref": None if spec.x_ref is None else spec.x_ref.tolist(),
    }


def spec_from_obj(obj: dict) -> SscmSpec:
    return SscmSpec(
        names=tuple(obj["names"]),
        parents=tuple(tuple(p) for p in obj["parents"]),
        assignments=tuple(diffcore.graph_from_obj(g) for g in obj["assignments"]),
        theta_ref=np.asarray(obj["theta_ref"], dtype=np.float64),
        theta_box=np.asarray(obj["theta_box"], dtype=np.float64).reshape(-1, 2),
        theta_slices=tuple(tuple(s) for s in obj["theta_slices"]),
        u_dim=int(obj["u_dim"]),
        u_ref=np.asarray(obj["u_ref"], dtype=np.float64),
        extern_dim=int(obj["extern_dim"]),
        policy_dim=int(obj["policy_dim"]),
        policy_ref=None if obj["policy_ref"] is None else np.asarray(obj["policy_ref"], dtype=np.float64),
        x_ref=None if obj["x_ref"] is None else np.asarray(obj["x_ref"], dtype=np.float64),
    )


def spec_to_json(spec: SscmSpec) -> str:
    return json.dumps(spec_to_obj(spec), sort_keys=True)


def spec_from_json(text: str) -> SscmSpec:
    return spec_from_obj(json.loads(text))
