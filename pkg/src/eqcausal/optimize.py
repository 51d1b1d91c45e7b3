"""Optimization: Adam, MLP policies, losses and the training loops.

Multiplicative intervention values are optimized in log space, which keeps
them strictly positive without projections; box bounds are enforced by
clamping the unconstrained coordinates. Losses expose value(x) and grad(x);
the emission/employment loss reports the true L1 regularizer but
differentiates a smoothed surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import deq, diffcore, interventions
from .diffcore import ExprBuilder, ExprGraph
from .errors import (DomainError, NonFiniteGradient, NonFiniteIterate, NotConverged,
                     PolicyArityMismatch, ShapeMismatch, SolveFailedDuringOptimization)
from .fixedpoint import SolverConfig
from .interventions import InvariantTwin, LieElement
from .sscm import SscmSpec, solve_equilibrium

Array = np.ndarray


# --- Adam ---

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10000
    seed: int = 0
    early_stop: bool = True
    plateau_window: int = 200
    plateau_rtol: float = 1e-9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass
class AdamState:
    params: Array
    m: Array
    v: Array
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        p = np.asarray(params, dtype=np.float64).copy()
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(state: AdamState, grads, cfg: AdamConfig, lr_scale: float = 1.0) -> AdamState:
    """One bias-corrected Adam update; pure in (state, grads)."""
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    if g.shape != state.params.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {state.params.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    params = state.params - cfg.learning_rate * lr_scale * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return AdamState(params, m, v, t)


def _plateaued(losses: list[float], cfg: AdamConfig) -> bool:
    w = cfg.plateau_window
    if not cfg.early_stop or len(losses) < 2 * w:
        return False
    recent = losses[-w:]
    past = losses[-2 * w:-w]
    change = abs(np.mean(past) - np.mean(recent))
    return change <= cfg.plateau_rtol * (abs(np.mean(past)) + 1e-30)


# --- MLP policies ---

@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (20, 10)
    output_dim: int = 1
    seed: int = 0
    # fixed standardization applied before the first layer: z = (x - shift) * scale
    input_shift: tuple | None = None
    input_scale: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be positive")
        for name in ("input_shift", "input_scale"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(float(v) for v in np.asarray(val).reshape(-1))
                if len(val) != self.input_dim:
                    raise ShapeMismatch(f"{name} must have length {self.input_dim}")
                object.__setattr__(self, name, val)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_weights(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes, self.sizes[1:]))


def init_mlp_weights(mlp: MlpSpec) -> Array:
    """Fan-in-scaled uniform weights, biases at 0.1; deterministic given the seed."""
    rng = np.random.default_rng(mlp.seed)
    chunks = []
    for n_in, n_out in zip(mlp.sizes, mlp.sizes[1:]):
        chunks.append(rng.uniform(-1.0, 1.0, size=n_in * n_out) * np.sqrt(1.0 / n_in))
        chunks.append(np.full(n_out, 0.1))
    return np.concatenate(chunks)


def _mlp_stack(b: ExprBuilder, mlp: MlpSpec, x, w):
    """ReLU perceptron stack reading row-major weights and biases from w."""
    offset = 0
    h = x
    for n_in, n_out in zip(mlp.sizes, mlp.sizes[1:]):
        outs = []
        for r in range(n_out):
            row = b.slice(w, offset + r * n_in, offset + (r + 1) * n_in)
            outs.append(b.dot(row, h))
        offset += n_out * n_in
        bias = b.slice(w, offset, offset + n_out)
        offset += n_out
        z = (outs[0] if n_out == 1 else b.concat(*outs)) + bias
        h = b.relu(z)
    return h


def _standardize(b: ExprBuilder, mlp: MlpSpec, x):
    if mlp.input_shift is not None:
        x = x - b.const(mlp.input_shift)
    if mlp.input_scale is not None:
        x = x * b.const(mlp.input_scale)
    return x


def build_mlp_graph(mlp: MlpSpec) -> ExprGraph:
    """MLP as a graph over slots "x" (inputs) and "policy" (weights)."""
    b = ExprBuilder()
    x = _standardize(b, mlp, b.input("x", mlp.input_dim))
    w = b.input("policy", mlp.n_weights)
    return b.build(_mlp_stack(b, mlp, x, w))


def mlp_forward(mlp: MlpSpec, weights, x) -> Array:
    return diffcore.forward_eval(build_mlp_graph(mlp), {"x": x, "policy": weights})


def mlp_weights_to_obj(mlp: MlpSpec, weights) -> dict:
    """Serializable view of trained weights: layer shapes plus row-major arrays."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (mlp.n_weights,):
        raise ShapeMismatch(f"expected {mlp.n_weights} weights, got {weights.shape}")
    layers = []
    offset = 0
    for n_in, n_out in zip(mlp.sizes, mlp.sizes[1:]):
        w = weights[offset:offset + n_in * n_out]
        offset += n_in * n_out
        b = weights[offset:offset + n_out]
        offset += n_out
        layers.append({"shape": [n_out, n_in], "weights": w.tolist(), "bias": b.tolist()})
    return {"input_dim": mlp.input_dim, "hidden": list(mlp.hidden),
            "output_dim": mlp.output_dim,
            "input_shift": None if mlp.input_shift is None else list(mlp.input_shift),
            "input_scale": None if mlp.input_scale is None else list(mlp.input_scale),
            "layers": layers}


def mlp_weights_from_obj(obj: dict) -> tuple[MlpSpec, Array]:
    """Inverse of mlp_weights_to_obj."""
    mlp = MlpSpec(input_dim=int(obj["input_dim"]), hidden=tuple(obj["hidden"]),
                  output_dim=int(obj["output_dim"]),
                  input_shift=obj.get("input_shift"), input_scale=obj.get("input_scale"))
    chunks = []
    for layer in obj["layers"]:
        chunks.append(np.asarray(layer["weights"], dtype=np.float64))
        chunks.append(np.asarray(layer["bias"], dtype=np.float64))
    weights = np.concatenate(chunks)
    if weights.shape != (mlp.n_weights,):
        raise ShapeMismatch("serialized layers do not match the declared sizes")
    return mlp, weights


def build_mlp_policy(mlp: MlpSpec, n_parents: int, u_dim: int) -> tuple[ExprGraph, Array]:
    """Auxiliary-node policy over (parents, u); returns the graph and initial weights."""
    if mlp.input_dim != n_parents + u_dim:
        raise PolicyArityMismatch(
            f"MLP input dim {mlp.input_dim} != parents {n_parents} + intervention dim {u_dim}")
    if mlp.output_dim != 1:
        raise PolicyArityMismatch("policy output must be scalar")
    b = ExprBuilder()
    pieces = []
    if n_parents:
        pieces.append(b.input("parents", n_parents))
    if u_dim:
        pieces.append(b.input("u", u_dim))
    x = _standardize(b, mlp, pieces[0] if len(pieces) == 1 else b.concat(*pieces))
    w = b.input("policy", mlp.n_weights)
    return b.build(_mlp_stack(b, mlp, x, w)), init_mlp_weights(mlp)


# --- losses ---

class GhgEmploymentLoss:
    """L(x) = c.x + lam * || r*x - e_star ||_1.

    value() reports the true L1 regularizer; grad() differentiates the
    smoothed surrogate sum(sqrt(delta^2 + eps) - sqrt(eps)).
    """

    def __init__(self, c, employment_row, e_star, lam: float, eps_smooth: float = 1e-8):
        self.c = np.asarray(c, dtype=np.float64)
        self.r = np.asarray(employment_row, dtype=np.float64)
        self.e_star = np.asarray(e_star, dtype=np.float64)
        self.lam = float(lam)
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        d = self.c.shape[0]
        if self.r.shape[0] != d or self.e_star.shape[0] != d:
            raise ShapeMismatch("loss row dimensions disagree")
        b = ExprBuilder()
        x = b.input("x", d)
        ghg = b.dot(b.const(self.c), x)
        delta = b.mul(b.const(self.r), x) - b.const(self.e_star)
        smooth = b.powc(delta * delta + b.const(np.full(d, eps_smooth)), 0.5) - b.const(
            np.full(d, np.sqrt(eps_smooth)))
        reg = b.dot(b.const(np.ones(d)), smooth)
        self._graph = b.build(ghg + b.const([self.lam]) * reg)

    def components(self, x) -> tuple[float, float]:
        x = np.asarray(x, dtype=np.float64)
        return float(self.c @ x), float(np.abs(self.r * x - self.e_star).sum())

    def value(self, x) -> float:
        ghg, l1 = self.components(x)
        return ghg + self.lam * l1

    def surrogate(self, x) -> float:
        return float(diffcore.forward_eval(self._graph, {"x": x})[0])

    def grad(self, x) -> Array:
        return diffcore.reverse_vjp(self._graph, {"x": x}, [1.0])["x"]


class DistanceLoss:
    """L(x) = ||x - x_ref||^2."""

    def __init__(self, x_ref):
        self.x_ref = np.asarray(x_ref, dtype=np.float64)
        b = ExprBuilder()
        x = b.input("x", self.x_ref.shape[0])
        delta = x - b.const(self.x_ref)
        self._graph = b.build(b.dot(delta, delta))

    def value(self, x) -> float:
        return float(diffcore.forward_eval(self._graph, {"x": x})[0])

    def grad(self, x) -> Array:
        return diffcore.reverse_vjp(self._graph, {"x": x}, [1.0])["x"]


# --- Lie intervention optimization ---

@dataclass
class OptimizationResult:
    trajectory: list  # (LieElement, loss) pairs
    aborted: bool
    failures: list[int]  # steps where the equilibrium solve failed
    early_stopped: bool

    @property
    def optimum(self) -> LieElement:
        return self.trajectory[-1][0]

    @property
    def final_loss(self) -> float:
        return self.trajectory[-1][1]


def optimize_lie_intervention(spec: SscmSpec, g0: LieElement, loss, adam: AdamConfig,
                              solver: SolverConfig, bounds: tuple[float, float] | None = None,
                              theta=None) -> OptimizationResult:
    """Gradient-descend the intervention values against loss(x^(u)).

    Each step applies the intervention, solves the equilibrium, pulls the loss
    gradient back through the implicit function, and Adam-steps in log space
    (multiplicative group) or raw space (additive). Solve failures halve the
    step size up to 5 times before aborting with the partial trajectory.
    """
    wired = interventions.apply(spec, g0)
    base_dim = spec.u_dim
    theta = spec.theta_ref if theta is None else np.asarray(theta, dtype=np.float64)
    mult = g0.group == "multiplicative"

    def to_w(vals):
        return np.log(vals) if mult else np.asarray(vals, dtype=np.float64).copy()

    def to_vals(w):
        return np.exp(w) if mult else w.copy()

    w_lo = w_hi = None
    if bounds is not None:
        lo, hi = bounds
        w_lo, w_hi = (np.log(lo), np.log(hi)) if mult else (lo, hi)

    state = AdamState.init(to_w(g0.values))
    if w_lo is not None:
        state.params = np.clip(state.params, w_lo, w_hi)
    trajectory: list = []
    losses: list[float] = []
    failures: list[int] = []
    lr_scale = 1.0
    prev_state = None
    early = False

    step = 0
    while step < adam.iterations:
        vals = to_vals(state.params)
        u = np.concatenate([wired.u_ref[:base_dim], vals])
        try:
            sol = solve_equilibrium(wired, theta, solver, u=u)
            if not sol.report.converged:
                raise NotConverged("equilibrium solve did not converge")
            value = loss.value(sol.x_star)
            cot = loss.grad(sol.x_star)
            ig = deq.implicit_vjp(wired, theta, sol.x_star, cot, solver, u=u)
        except (NonFiniteIterate, NotConverged, DomainError):
            failures.append(step)
            if prev_state is None or len(failures) > 5:
                if not trajectory:
                    raise SolveFailedDuringOptimization(
                        f"equilibrium solve failed at step {step} with no recoverable state")
                return OptimizationResult(trajectory, True, failures, early)
            state = prev_state
            lr_scale *= 0.5
            step += 1
            continue
        trajectory.append((LieElement(g0.group, g0.targets, vals), value))
        losses.append(value)
        if _plateaued(losses, adam):
            early = True
            break
        g_tail = ig.grad_u[base_dim:]
        grad_w = g_tail * vals if mult else g_tail
        prev_state = state
        state = adam_step(state, grad_w, adam, lr_scale)
        if w_lo is not None:
            state.params = np.clip(state.params, w_lo, w_hi)
        step += 1

    return OptimizationResult(trajectory, False, failures, early)


# --- sampling ---

@dataclass(frozen=True)
class SamplingConfig:
    """Factorized Gaussian over theta (truncated to the box) and log-uniform u."""

    theta_mean: tuple | None = None
    theta_stddev: tuple | None = None
    u_low: float = 0.5
    u_high: float = 2.0
    samples_per_step: int = 16

    def __post_init__(self):
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")
        if self.u_low <= 0 or self.u_high < self.u_low:
            raise ValueError("u range must satisfy 0 < u_low <= u_high")


def sample_theta(spec: SscmSpec, sampling: SamplingConfig, rng: np.random.Generator) -> Array:
    mean = spec.theta_ref if sampling.theta_mean is None else np.asarray(sampling.theta_mean, float)
    std = (0.05 * np.abs(spec.theta_ref) + 0.01 if sampling.theta_stddev is None
           else np.asarray(sampling.theta_stddev, float))
    lo, hi = spec.theta_box[:, 0], spec.theta_box[:, 1]
    for _ in range(1000):  # rejection into the box
        theta = rng.normal(mean, std)
        if np.all(theta >= lo) and np.all(theta <= hi):
            return theta
    return np.clip(rng.normal(mean, std), lo, hi)


def sample_u(dim: int, group: str, sampling: SamplingConfig, rng: np.random.Generator) -> Array:
    if group == "multiplicative":
        return np.exp(rng.uniform(np.log(sampling.u_low), np.log(sampling.u_high), size=dim))
    return rng.uniform(sampling.u_low, sampling.u_high, size=dim)


# --- invariant-policy training ---

@dataclass
class TrainedPolicy:
    weights: Array
    losses: list[float]
    steps: int
    early_stopped: bool
    aborted: bool = False
    failures: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_invariant_policy(twin: InvariantTwin, w0, sampling: SamplingConfig,
                           adam: AdamConfig, solver: SolverConfig) -> TrainedPolicy:
    """Fit the auxiliary policies by least squares on the invariant-node deviation.

    Each step draws (theta, u) samples, solves the unintervened and rerouted
    intervened equilibria, and backpropagates the squared deviation of the
    invariant nodes through the intervened equilibrium into the policy
    weights.
    """
    rng = np.random.default_rng(adam.seed)
    state = AdamState.init(w0)
    inv_nodes = list(twin.invariant_nodes)
    losses: list[float] = []
    lr_scale = 1.0
    prev_state = None
    failures = 0
    early = False
    aborted = False

    for step in range(adam.iterations):
        grad = np.zeros_like(state.params)
        batch_loss = 0.0
        try:
            for _ in range(sampling.samples_per_step):
                theta = sample_theta(twin.base, sampling, rng)
                u_vals = [sample_u(stop - start, plan.group, sampling, rng)
                          for plan, (start, stop) in zip(twin.plans, twin.u_slices)]
                u = twin.assemble_u(u_vals)
                base_sol, int_sol = twin.solve_pair(theta, u, solver, policy=state.params)
                if not (base_sol.report.converged and int_sol.report.converged):
                    raise NotConverged("equilibrium solve failed in training step")
                diff = int_sol.x_star[inv_nodes] - base_sol.x_star[inv_nodes]
                batch_loss += float(diff @ diff)
                cot = np.zeros(twin.rerouted.d)
                cot[inv_nodes] = 2.0 * diff
                extern = base_sol.x_star[inv_nodes]
                ig = deq.implicit_vjp(twin.rerouted, theta, int_sol.x_star, cot, solver,
                                      u=u, extern=extern, policy=state.params)
                grad += ig.grad_policy
        except (NonFiniteIterate, NotConverged, DomainError):
            failures += 1
            if prev_state is None or failures > 5:
                aborted = True
                break
            state = prev_state
            lr_scale *= 0.5
            continue
        n = sampling.samples_per_step
        losses.append(batch_loss / n)
        if _plateaued(losses, adam):
            early = True
            break
        prev_state = state
        state = adam_step(state, grad / n, adam, lr_scale)

    return TrainedPolicy(state.params, losses, len(losses), early, aborted, failures)


# --- Pareto sweep ---

@dataclass
class TradeoffPoint:
    lam: float
    ghg_total: float
    employment_l1_deviation: float
    alpha: Array
    employment_delta: Array
    converged: bool


def pareto_sweep(spec: SscmSpec, c, employment_row, lambdas, adam: AdamConfig,
                 solver: SolverConfig, bounds: tuple[float, float],
                 targets=None) -> list[TradeoffPoint]:
    """Optimize the intervention per lambda, warm-starting from the previous optimum."""
    c = np.asarray(c, dtype=np.float64)
    r = np.asarray(employment_row, dtype=np.float64)
    if not len(lambdas):
        raise ValueError("lambda list must be nonempty")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambda values must be nonnegative")
    targets = tuple(range(spec.d)) if targets is None else tuple(targets)
    base = solve_equilibrium(spec, spec.theta_ref, solver)
    e_star = r * base.x_star

    points: list[TradeoffPoint] = []
    g = interventions.identity("multiplicative", targets)
    for lam in lambdas:
        loss = GhgEmploymentLoss(c, r, e_star, lam)
        try:
            res = optimize_lie_intervention(spec, g, loss, adam, solver, bounds=bounds)
            g = res.optimum
            ok = not res.aborted
        except SolveFailedDuringOptimization:
            ok = False
        sol = solve_equilibrium(interventions.apply(spec, g), spec.theta_ref, solver)
        e_u = r * sol.x_star
        points.append(TradeoffPoint(
            lam=float(lam),
            ghg_total=float(c @ sol.x_star),
            employment_l1_deviation=float(np.abs(e_u - e_star).sum()),
            alpha=g.values.copy(),
            employment_delta=e_u - e_star,
            converged=ok and sol.report.converged,
        ))
    return points
