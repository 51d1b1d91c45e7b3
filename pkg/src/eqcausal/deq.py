"""Implicit differentiation of equilibria.

Gradients of losses through x*(theta) are obtained from the fixed-point
identity: the adjoint a solves a = (df/dx)^T a + cotangent, after which
dL/dtheta = (df/dtheta)^T a (and likewise for the intervention vector u and
policy weights). For models up to DENSE_DIM_LIMIT nodes the adjoint system is
solved directly with a dense factorization; beyond that the adjoint fixed
point is iterated with the same solver configuration as the forward pass,
driving df/dx purely through per-node VJPs (the Jacobian is never formed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore, fixedpoint, sscm
from .errors import NotConverged
from .fixedpoint import SolveReport, SolverConfig
from .sscm import DENSE_DIM_LIMIT, SscmSpec

Array = np.ndarray


@dataclass
class ImplicitGradient:
    grad_theta: Array
    grad_u: Array
    grad_policy: Array | None
    adjoint_report: SolveReport


def _check_forward(spec: SscmSpec, theta, x_star, cfg, u, extern, policy):
    f = sscm.assemble_map(spec, theta, u=u, extern=extern, policy=policy)
    x = np.asarray(x_star, dtype=np.float64)
    _, err = fixedpoint._error(x, f(x))
    if err > cfg.tol:
        raise NotConverged(
            f"x_star is not a converged equilibrium (error {err:.3e} > tol {cfg.tol:.3e})"
        )
    return x


class _Prepared:
    """Dense df/d(state, theta, u, policy) at a fixed equilibrium, assembled once."""

    def __init__(self, spec: SscmSpec, theta, x_star, u, extern, policy):
        grads = sscm.node_gradients(spec, x_star, theta, u=u, extern=extern, policy=policy)
        d = spec.d
        self.spec = spec
        self.j_x = np.zeros((d, d))
        self.j_theta = np.zeros((d, spec.theta_dim))
        self.j_u = np.zeros((d, spec.u_dim))
        self.j_policy = np.zeros((d, spec.policy_dim)) if spec.policy_dim else None
        for j, g in enumerate(grads):
            part = g.get("parents")
            if part is not None and len(spec.parents[j]):
                self.j_x[j, list(spec.parents[j])] = part
            part = g.get("theta")
            if part is not None:
                start, stop = spec.theta_slices[j]
                self.j_theta[j, start:stop] = part
            part = g.get("u")
            if part is not None:
                self.j_u[j, :] += part
            part = g.get("policy")
            if part is not None and self.j_policy is not None:
                self.j_policy[j, :] += part
        self.lhs_t = np.eye(d) - self.j_x.T

    def vjp(self, cotangent) -> ImplicitGradient:
        cot = np.asarray(cotangent, dtype=np.float64)
        a = np.linalg.solve(self.lhs_t, cot)
        residual = float(np.linalg.norm(self.lhs_t @ a - cot))
        nrm = float(np.linalg.norm(a))
        report = SolveReport(a, residual, residual / nrm if nrm > 0 else residual, 0, True)
        return ImplicitGradient(
            grad_theta=self.j_theta.T @ a,
            grad_u=self.j_u.T @ a,
            grad_policy=None if self.j_policy is None else self.j_policy.T @ a,
            adjoint_report=report,
        )


def _iterative_vjp(spec: SscmSpec, theta, x_star, cotangent, cfg, u, extern, policy) -> ImplicitGradient:
    cot = np.asarray(cotangent, dtype=np.float64)
    parent_lists = [list(p) for p in spec.parents]

    def adjoint_map(a: Array) -> Array:
        out = cot.copy()
        grads = sscm.node_gradients(spec, x_star, theta, u=u, extern=extern, policy=policy, cotangent=a)
        for j, g in enumerate(grads):
            part = g.get("parents")
            if part is not None and parent_lists[j]:
                np.add.at(out, parent_lists[j], part)
        return out

    report = fixedpoint.solve(adjoint_map, np.zeros(spec.d), cfg)
    a = report.x
    grads = sscm.node_gradients(spec, x_star, theta, u=u, extern=extern, policy=policy, cotangent=a)
    grad_theta = np.zeros(spec.theta_dim)
    grad_u = np.zeros(spec.u_dim)
    grad_policy = np.zeros(spec.policy_dim) if spec.policy_dim else None
    for j, g in enumerate(grads):
        part = g.get("theta")
        if part is not None:
            start, stop = spec.theta_slices[j]
            grad_theta[start:stop] += part
        part = g.get("u")
        if part is not None:
            grad_u += part
        part = g.get("policy")
        if part is not None and grad_policy is not None:
            grad_policy += part
    return ImplicitGradient(grad_theta, grad_u, grad_policy, report)


def implicit_vjp(spec: SscmSpec, theta, x_star, cotangent, cfg: SolverConfig,
                 u=None, extern=None, policy=None) -> ImplicitGradient:
    """Pull a cotangent on x* back to theta, u and policy weights.

    Refuses (raises NotConverged) when x_star does not satisfy the fixed point
    within cfg.tol; a non-converged adjoint solve is reported, not raised.
    """
    x = _check_forward(spec, theta, x_star, cfg, u, extern, policy)
    if spec.d <= DENSE_DIM_LIMIT:
        return _Prepared(spec, theta, x, u, extern, policy).vjp(cotangent)
    return _iterative_vjp(spec, theta, x, cotangent, cfg, u, extern, policy)


def jacobian_wrt_theta(spec: SscmSpec, theta, x_star, cfg: SolverConfig,
                       u=None, extern=None, policy=None) -> Array:
    """Dense dx*/dtheta, assembled row-wise from VJPs with basis cotangents."""
    x = _check_forward(spec, theta, x_star, cfg, u, extern, policy)
    d = spec.d
    out = np.zeros((d, spec.theta_dim))
    prepared = _Prepared(spec, theta, x, u, extern, policy) if d <= DENSE_DIM_LIMIT else None
    basis = np.zeros(d)
    for i in range(d):
        basis[i] = 1.0
        if prepared is not None:
            ig = prepared.vjp(basis)
        else:
            ig = _iterative_vjp(spec, theta, x, basis, cfg, u, extern, policy)
        out[i, :] = ig.grad_theta
        basis[i] = 0.0
    return out


def jacobian_wrt_u(spec: SscmSpec, theta, x_star, cfg: SolverConfig,
                   u=None, extern=None, policy=None) -> Array:
    """Dense dx*/du for the shared intervention vector."""
    x = _check_forward(spec, theta, x_star, cfg, u, extern, policy)
    d = spec.d
    out = np.zeros((d, spec.u_dim))
    prepared = _Prepared(spec, theta, x, u, extern, policy) if d <= DENSE_DIM_LIMIT else None
    basis = np.zeros(d)
    for i in range(d):
        basis[i] = 1.0
        if prepared is not None:
            ig = prepared.vjp(basis)
        else:
            ig = _iterative_vjp(spec, theta, x, basis, cfg, u, extern, policy)
        out[i, :] = ig.grad_u
        basis[i] = 0.0
    return out


@dataclass
class GradCheckReport:
    implicit_grad: Array
    fd_grad: Array
    max_rel_deviation: float
    loss_value: float
    solver_tol: float
    h: float


def grad_check(spec: SscmSpec, theta, loss: diffcore.ExprGraph, cfg: SolverConfig,
               h: float = 1e-4, u=None, extern=None, policy=None) -> GradCheckReport:
    """Compare the implicit gradient of loss(x*(theta)) against central differences.

    The loss is an expression graph with a single "x" slot and scalar output.
    FD quality is coupled to the solver tolerance; pass a tight cfg.tol when
    small deviations are required.
    """
    theta = np.asarray(theta, dtype=np.float64)

    def solve_at(th) -> Array:
        sol = sscm.solve_equilibrium(spec, th, cfg, u=u, extern=extern, policy=policy)
        if not sol.report.converged:
            raise NotConverged(f"equilibrium solve failed during grad check at theta={th}")
        return sol.x_star

    x_star = solve_at(theta)
    loss_value = float(diffcore.forward_eval(loss, {"x": x_star})[0])
    cot = diffcore.reverse_vjp(loss, {"x": x_star}, [1.0])["x"]
    ig = implicit_vjp(spec, theta, x_star, cot, cfg, u=u, extern=extern, policy=policy)

    fd = np.zeros(spec.theta_dim)
    for k in range(spec.theta_dim):
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += h
        tm[k] -= h
        lp = float(diffcore.forward_eval(loss, {"x": solve_at(tp)})[0])
        lm = float(diffcore.forward_eval(loss, {"x": solve_at(tm)})[0])
        fd[k] = (lp - lm) / (2.0 * h)

    dev = np.abs(ig.grad_theta - fd) / (1.0 + np.abs(fd))
    return GradCheckReport(
        implicit_grad=ig.grad_theta,
        fd_grad=fd,
        max_rel_deviation=float(dev.max()) if dev.size else 0.0,
        loss_value=loss_value,
        solver_tol=cfg.tol,
        h=h,
    )
