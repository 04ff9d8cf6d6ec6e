"""Delayed linear-quadratic control with a non-convex control domain.

Dynamics  dx = [A1 x + A2 x_d + B v] dt + [C1 x + C2 x_d + D v] dB with a
constant initial path, quadratic running cost (R1 x^2 + R2 x_d^2 + L v^2) / 2
and terminal cost H x(T)^2 / 2.  The candidate feedback follows the
closed-form threshold law for the unit-gap domain; the coupled
forward-backward system is resolved by damped fixed-point iteration, since the
adjoint pair drives the control while the control drives the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from . import adjoint as adj
from . import forward as fwd
from .errors import ConfigurationError, OracleError
from .grid import NoiseEnsemble, TimeGrid
from .model import (
    UNIT_GAP_DOMAIN,
    CoefficientSet,
    ControlDomain,
    ControlPath,
    ProblemSpec,
    constant_control,
    control_from_feedback,
    project_to_domain,
)

# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LQProblem:
    """Constants of the delayed LQ problem.

    Standing conditions: C2 != 0, R1 >= 0, R2 >= 0, L > 0, H >= 0.
    ``a`` is the constant initial path value.
    """

    A1: float
    A2: float
    B: float
    C1: float
    C2: float
    D: float
    R1: float
    R2: float
    L: float
    H: float
    a: float
    delay: float
    horizon: float
    domain: ControlDomain = UNIT_GAP_DOMAIN

    def __post_init__(self):
        if self.C2 == 0:
            raise ConfigurationError("LQ problem requires C2 != 0")
        if self.R1 < 0 or self.R2 < 0 or self.H < 0:
            raise ConfigurationError("LQ problem requires R1, R2, H >= 0")
        if not self.L > 0:
            raise ConfigurationError("LQ problem requires L > 0")


def lq_coefficients(prob: LQProblem) -> CoefficientSet:
    """Coefficient set (with exact derivatives and bounds) of an LQ problem."""
    A1, A2, B, C1, C2, D = prob.A1, prob.A2, prob.B, prob.C1, prob.C2, prob.D
    R1, R2, L = prob.R1, prob.R2, prob.L
    H = prob.H
    zero = lambda t, x, xd, v, vd: 0.0
    return CoefficientSet(
        drift=lambda t, x, xd, v, vd: A1 * x + A2 * xd + B * v,
        diffusion=lambda t, x, xd, v, vd: C1 * x + C2 * xd + D * v,
        running_cost=lambda t, x, xd, v, vd: 0.5 * (R1 * x**2 + R2 * xd**2 + L * v**2),
        terminal_cost=lambda x: 0.5 * H * x**2,
        drift_x=lambda t, x, xd, v, vd: A1,
        drift_xd=lambda t, x, xd, v, vd: A2,
        drift_xx=zero,
        drift_xxd=zero,
        drift_xdxd=zero,
        diffusion_x=lambda t, x, xd, v, vd: C1,
        diffusion_xd=lambda t, x, xd, v, vd: C2,
        diffusion_xx=zero,
        diffusion_xxd=zero,
        diffusion_xdxd=zero,
        running_cost_x=lambda t, x, xd, v, vd: R1 * x,
        running_cost_xd=lambda t, x, xd, v, vd: R2 * xd,
        running_cost_xx=lambda t, x, xd, v, vd: R1,
        running_cost_xxd=zero,
        running_cost_xdxd=lambda t, x, xd, v, vd: R2,
        terminal_x=lambda x: H * x,
        terminal_xx=lambda x: H,
        bounds={
            "drift_x": abs(A1),
            "drift_xd": abs(A2),
            "drift_xx": 0.0,
            "drift_xxd": 0.0,
            "drift_xdxd": 0.0,
            "diffusion_x": abs(C1),
            "diffusion_xd": abs(C2),
            "diffusion_xx": 0.0,
            "diffusion_xxd": 0.0,
            "diffusion_xdxd": 0.0,
            "running_cost_xx": R1,
            "running_cost_xxd": 0.0,
            "running_cost_xdxd": R2,
            "terminal_xx": H,
        },
        diffusion_xd_floor=abs(C2),
    )


def build_lq_spec(prob: LQProblem, grid: TimeGrid) -> ProblemSpec:
    if grid.delay != prob.delay or grid.horizon != prob.horizon:
        raise ConfigurationError(
            f"grid ({grid.delay}, {grid.horizon}) does not match the problem's "
            f"(delay, horizon) = ({prob.delay}, {prob.horizon})"
        )
    eta = project_to_domain(1.0, prob.domain)
    return ProblemSpec(
        coefficients=lq_coefficients(prob),
        domain=prob.domain,
        initial_state=lambda t: np.full(np.shape(t), prob.a),
        initial_control=lambda t: np.full(np.shape(t), eta),
        grid=grid,
    )


# ---------------------------------------------------------------------------
# candidate control law
# ---------------------------------------------------------------------------


def lq_candidate_control(p, q, prob: LQProblem):
    """Feedback candidate from the adjoint pair.

    The unconstrained minimizer of the Hamiltonian in v is
    u = -(p B + q D) / L; on the unit-gap domain the displayed threshold law
    applies (u kept when |u| >= 1, [0, 1) mapped to 1, (-1, 0) mapped to -1).
    Other domains fall back to Euclidean projection, outside the scope of the
    closed-form law.
    """
    raw = -(np.asarray(p, dtype=float) * prob.B + np.asarray(q, dtype=float) * prob.D) / prob.L
    if prob.domain == UNIT_GAP_DOMAIN:
        out = np.where(np.abs(raw) >= 1.0, raw, np.where(raw >= 0.0, 1.0, -1.0))
    else:
        out = prob.domain.project(raw)
    return float(out) if np.ndim(raw) == 0 else out


# ---------------------------------------------------------------------------
# coupled solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 30
    damping: float = 0.5
    tolerance: float = 1e-3

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ConfigurationError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


@dataclass(frozen=True)
class LQSolution:
    problem: LQProblem
    spec: ProblemSpec
    control: ControlPath
    states: fwd.StatePaths
    first: adj.FirstAdjointPaths
    second: adj.SecondAdjointPaths
    cost: fwd.CostEstimate
    trace: tuple[float, ...]
    converged: bool
    law: str

    def second_adjoint_node_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-node mean and stderr of the solved P on [0, horizon]."""
        g = self.spec.grid
        block = self.second.P[:, g.i_zero : g.i_horizon + 1]
        n = block.shape[0]
        mean = block.mean(axis=0)
        stderr = block.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        return mean, stderr

    def second_adjoint_nonnegative(self, dt_allowance: float = 5.0) -> bool:
        mean, stderr = self.second_adjoint_node_stats()
        return bool(np.all(mean >= -(3.0 * stderr + dt_allowance * self.spec.grid.dt)))


def solve_lq(
    prob: LQProblem,
    grid: TimeGrid,
    noise: NoiseEnsemble,
    basis: adj.RegressionBasis | None = None,
    picard: PicardConfig | None = None,
) -> LQSolution:
    """Damped fixed-point iteration for the coupled forward-backward system.

    Starts from the projection of zero onto the domain and alternates a
    forward state pass with a backward adjoint pass.  The damping acts on a
    latent unconstrained feedback iterate and the candidate law maps it into
    the domain: damping the law's output directly would strand paths at the
    tie point of the gap domain (halfway from +1 toward -1 is 0, which
    projects back to +1), so the converged control could never satisfy its
    own law.  Returns the best iterate with a non-converged flag instead of
    raising when the iteration budget runs out.
    """
    basis = basis or adj.RegressionBasis()
    picard = picard or PicardConfig()
    spec = build_lq_spec(prob, grid)
    law = "unit-gap-threshold" if prob.domain == UNIT_GAP_DOMAIN else "projection"
    g = grid
    control = constant_control(spec, project_to_domain(0.0, prob.domain))
    latent = np.zeros((1, g.n_forward + 1))
    trace: list[float] = []
    converged = False
    states = first = None
    for _ in range(picard.max_iters):
        states = fwd.simulate_state(spec, control, noise)
        first = adj.solve_first_adjoint(spec, control, states, noise, basis)
        raw = -(
            first.p[:, g.i_zero : g.i_horizon + 1] * prob.B
            + first.q[:, g.i_zero : g.i_horizon + 1] * prob.D
        ) / prob.L
        latent = latent + picard.damping * (raw - latent)
        if prob.domain == UNIT_GAP_DOMAIN:
            new_vals = np.where(np.abs(latent) >= 1.0, latent, np.where(latent >= 0.0, 1.0, -1.0))
        else:
            new_vals = prob.domain.project(latent)
        old = control.values[:, g.i_zero :]
        change = float(np.sqrt(np.mean((new_vals - old) ** 2, axis=0)).max())
        control = control_from_feedback(spec, new_vals)
        trace.append(change)
        if change < picard.tolerance:
            converged = True
            break
    # verification pass at the final control
    states = fwd.simulate_state(spec, control, noise)
    first = adj.solve_first_adjoint(spec, control, states, noise, basis)
    second = adj.solve_second_adjoint(spec, control, states, first, noise, basis)
    cost = fwd.evaluate_cost(spec, control, noise, states=states)
    return LQSolution(
        problem=prob,
        spec=spec,
        control=control,
        states=states,
        first=first,
        second=second,
        cost=cost,
        trace=tuple(trace),
        converged=converged,
        law=law,
    )


# ---------------------------------------------------------------------------
# optimality verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChallengerResult:
    kind: str
    cost_diff: float
    stderr: float
    passed: bool


@dataclass(frozen=True)
class OptimalityReport:
    results: tuple[ChallengerResult, ...]
    dt_allowance: float
    dt: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> ChallengerResult:
        return min(self.results, key=lambda r: r.cost_diff)


def verify_optimality(
    prob: LQProblem,
    solution: LQSolution,
    noise: NoiseEnsemble,
    n_challengers: int = 20,
    seed: int = 2024,
    dt_allowance: float = 5.0,
) -> OptimalityReport:
    """Cost comparison against admissible challenger controls under common
    noise: damped perturbations of the solved control, bang controls on the
    domain's inner boundary points, and admissible constants.

    Each challenger must satisfy J(challenger) - J(solved) above
    -(3 * stderr + dt_allowance * dt); a challenger leaving the domain is a
    generation bug and raises.
    """
    spec = solution.spec
    g = spec.grid
    base_costs = fwd._path_costs(
        spec.coefficients, g, solution.states.values, solution.control.values
    )
    n = max(base_costs.shape[0], noise.n_paths)
    base_costs = np.broadcast_to(base_costs, (n,))
    kinds = ["perturb", "bang", "constant"]
    results = []
    for i in range(n_challengers):
        kind = kinds[i % len(kinds)]
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))
        width = g.n_forward + 1
        if kind == "perturb":
            shift = rng.normal(0.0, 0.75, size=width)
            vals = prob.domain.project(solution.control.values[:, g.i_zero :] + shift)
        elif kind == "bang":
            vals = prob.domain.project(rng.choice([-1.0, 1.0], size=width))[None, :]
        else:
            vals = np.full((1, width), project_to_domain(float(rng.uniform(-3.0, 3.0)), prob.domain))
        challenger = control_from_feedback(spec, vals)  # raises DomainError on a bug
        states = fwd.simulate_state(spec, challenger, noise)
        costs = np.broadcast_to(
            fwd._path_costs(spec.coefficients, g, states.values, challenger.values), (n,)
        )
        diff = costs - base_costs
        mean = float(np.mean(diff))
        stderr = float(np.std(diff, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        results.append(
            ChallengerResult(
                kind=kind,
                cost_diff=mean,
                stderr=stderr,
                passed=mean >= -(3.0 * stderr + dt_allowance * g.dt),
            )
        )
    return OptimalityReport(results=tuple(results), dt_allowance=dt_allowance, dt=g.dt)


# ---------------------------------------------------------------------------
# no-delay Riccati oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiccatiReference:
    """Backward Riccati solution k(t) of the scalar no-delay problem, with the
    optimal cost k(0) a^2 / 2 and feedback gain -(B + C1 D) k / (L + D^2 k)."""

    times: np.ndarray
    k: np.ndarray
    A1: float
    B: float
    C1: float
    D: float
    L: float

    def cost(self, a: float) -> float:
        return 0.5 * float(self.k[0]) * a**2

    @property
    def gain(self) -> np.ndarray:
        return -(self.B + self.C1 * self.D) * self.k / (self.L + self.D**2 * self.k)


def riccati_reference(
    A1: float,
    B: float,
    C1: float,
    D: float,
    R1: float,
    L: float,
    H: float,
    horizon: float,
    n_points: int = 401,
) -> RiccatiReference:
    """High-accuracy backward integration of the scalar stochastic-LQ Riccati
    equation k' = -(2 A1 + C1^2) k - R1 + k^2 (B + C1 D)^2 / (L + D^2 k).

    Rejects parameter sets whose solution blows up inside the horizon.
    """
    if not L > 0:
        raise ConfigurationError("Riccati oracle requires L > 0")
    gain_sq = (B + C1 * D) ** 2

    def rhs(s, g):
        denom = L + D**2 * g[0]
        if abs(denom) < 1e-12:
            raise OracleError("Riccati denominator L + D^2 k vanished")
        return [(2 * A1 + C1**2) * g[0] + R1 - g[0] ** 2 * gain_sq / denom]

    s_eval = np.linspace(0.0, horizon, n_points)
    sol = scipy.integrate.solve_ivp(
        rhs, (0.0, horizon), [H], t_eval=s_eval, rtol=1e-10, atol=1e-12, method="RK45"
    )
    if not sol.success or not np.all(np.isfinite(sol.y)) or np.max(np.abs(sol.y)) > 1e9:
        raise OracleError(f"Riccati solve failed on [0, {horizon}]: {sol.message}")
    # k(t) = g(T - t)
    times = horizon - s_eval[::-1]
    k = sol.y[0][::-1].copy()
    return RiccatiReference(times=times, k=k, A1=A1, B=B, C1=C1, D=D, L=L)
