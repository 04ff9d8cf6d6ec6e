"""Built-in problem registry.

* ``lq-benchmark``: the delayed LQ benchmark with the unit-gap domain.
* ``lq-benchmark-smooth``: the benchmark dynamics plus bounded smooth
  nonlinearities.  The expansion and cross-term ladders run on this twin: with
  purely linear dynamics the second variation vanishes identically and the
  expansion residual is floating-point noise, so slope checks would be
  meaningless there.
* ``lq-nodelay``: the no-delay reduction (A2 = R2 = 0, small C2, free domain)
  cross-checked against the Riccati oracle.
* ``first-adjoint-oracle``: constant-coefficient backward equation with
  closed-form solution p(t) = exp(c (T - t)), q = 0; the anticipated bracket
  vanishes by construction (delay equals horizon, no delayed drift or cost).
* ``second-adjoint-ode``: state-independent coefficients and delay equal to
  horizon, so the second adjoint follows a scalar exponential ODE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .grid import TimeGrid, make_grid
from .lq import LQProblem, build_lq_spec
from .model import (
    UNIT_GAP_DOMAIN,
    CoefficientSet,
    ControlDomain,
    ControlPath,
    ProblemSpec,
    constant_control,
)

BENCHMARK = LQProblem(
    A1=0.1,
    A2=0.05,
    B=1.0,
    C1=0.2,
    C2=0.1,
    D=0.3,
    R1=1.0,
    R2=0.5,
    L=1.0,
    H=1.0,
    a=1.0,
    delay=0.25,
    horizon=1.0,
)

NODELAY_REDUCTION = LQProblem(
    A1=0.1,
    A2=0.0,
    B=1.0,
    C1=0.2,
    C2=1e-3,  # keeps the standing condition C2 != 0 while killing the delay
    D=0.3,
    R1=1.0,
    R2=0.0,
    L=1.0,
    H=1.0,
    a=1.0,
    delay=0.25,
    horizon=1.0,
    domain=ControlDomain.real_line(),
)


@dataclass(frozen=True)
class ProblemBundle:
    name: str
    spec: ProblemSpec
    base_control: ControlPath
    lq: LQProblem | None = None
    oracle: dict | None = None


def _smooth_benchmark_coefficients(prob: LQProblem) -> CoefficientSet:
    """Benchmark constants plus bounded smooth terms; the delayed-state
    diffusion derivative stays the constant C2.

    The control gain in the diffusion is raised to 1 so a spike kicks the
    state mainly through the martingale term: the drift kick enters the
    variation's second moment only at order epsilon^2, and a drift-dominant
    spike would visibly bend the epsilon-slopes away from their limits on the
    ladder's coarse rungs.
    """
    A1, A2, B, C1, C2 = prob.A1, prob.A2, prob.B, prob.C1, prob.C2
    D = 1.0
    R1, R2, L, H = prob.R1, prob.R2, prob.L, prob.H
    gb, gs, gv = 0.2, 0.1, 0.1  # nonlinearity gains
    zero = lambda t, x, xd, v, vd: 0.0
    arg = lambda x, xd: x + 0.5 * xd
    return CoefficientSet(
        drift=lambda t, x, xd, v, vd: A1 * x + A2 * xd + B * v + gb * np.sin(arg(x, xd))
        + gv * np.tanh(vd),
        diffusion=lambda t, x, xd, v, vd: C1 * x + C2 * xd + D * v + gs * np.cos(x),
        running_cost=lambda t, x, xd, v, vd: 0.5 * (R1 * x**2 + R2 * xd**2 + L * v**2),
        terminal_cost=lambda x: 0.5 * H * x**2,
        drift_x=lambda t, x, xd, v, vd: A1 + gb * np.cos(arg(x, xd)),
        drift_xd=lambda t, x, xd, v, vd: A2 + 0.5 * gb * np.cos(arg(x, xd)),
        drift_xx=lambda t, x, xd, v, vd: -gb * np.sin(arg(x, xd)),
        drift_xxd=lambda t, x, xd, v, vd: -0.5 * gb * np.sin(arg(x, xd)),
        drift_xdxd=lambda t, x, xd, v, vd: -0.25 * gb * np.sin(arg(x, xd)),
        diffusion_x=lambda t, x, xd, v, vd: C1 - gs * np.sin(x),
        diffusion_xd=lambda t, x, xd, v, vd: C2,
        diffusion_xx=lambda t, x, xd, v, vd: -gs * np.cos(x),
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
            "drift_x": abs(A1) + gb,
            "drift_xd": abs(A2) + 0.5 * gb,
            "drift_xx": gb,
            "drift_xxd": 0.5 * gb,
            "drift_xdxd": 0.25 * gb,
            "diffusion_x": abs(C1) + gs,
            "diffusion_xd": abs(C2),
            "diffusion_xx": gs,
            "diffusion_xxd": 0.0,
            "diffusion_xdxd": 0.0,
        },
        diffusion_xd_floor=abs(C2),
    )


def _constant_coefficient_set(
    *,
    drift_gain: float,
    diffusion_xd_gain: float,
    terminal: str,
) -> CoefficientSet:
    """Linear dynamics b = c x, diffusion = s x_d, zero running cost, with
    terminal cost either ``x`` (flat gradient) or ``x^2/2`` (flat curvature)."""
    zero = lambda t, x, xd, v, vd: 0.0
    if terminal == "linear":
        tc, tx, txx = (lambda x: x), (lambda x: np.ones(np.shape(x))), (lambda x: 0.0)
    elif terminal == "quadratic":
        tc, tx, txx = (lambda x: 0.5 * x**2), (lambda x: x), (lambda x: np.ones(np.shape(x)))
    else:
        raise ConfigurationError(f"unknown terminal kind {terminal!r}")
    return CoefficientSet(
        drift=lambda t, x, xd, v, vd: drift_gain * x,
        diffusion=lambda t, x, xd, v, vd: diffusion_xd_gain * xd,
        running_cost=zero,
        terminal_cost=tc,
        drift_x=lambda t, x, xd, v, vd: drift_gain,
        drift_xd=zero,
        drift_xx=zero,
        drift_xxd=zero,
        drift_xdxd=zero,
        diffusion_x=zero,
        diffusion_xd=lambda t, x, xd, v, vd: diffusion_xd_gain,
        diffusion_xx=zero,
        diffusion_xxd=zero,
        diffusion_xdxd=zero,
        running_cost_x=zero,
        running_cost_xd=zero,
        running_cost_xx=zero,
        running_cost_xxd=zero,
        running_cost_xdxd=zero,
        terminal_x=tx,
        terminal_xx=txx,
        bounds={
            "drift_x": abs(drift_gain),
            "drift_xd": 0.0,
            "diffusion_x": 0.0,
            "diffusion_xd": abs(diffusion_xd_gain),
        },
        diffusion_xd_floor=abs(diffusion_xd_gain),
    )


def build_problem(name: str, steps_per_delay: int, lq_params: dict | None = None) -> ProblemBundle:
    """Instantiate a registry problem on a fresh grid.

    ``lq-custom`` takes its constants (and optionally delay/horizon/domain)
    from ``lq_params``; the named problems ignore it.
    """
    if name in ("lq-benchmark", "lq-benchmark-smooth"):
        prob = BENCHMARK
        grid = make_grid(prob.horizon, prob.delay, steps_per_delay)
        if name == "lq-benchmark":
            spec = build_lq_spec(prob, grid)
        else:
            spec = ProblemSpec(
                coefficients=_smooth_benchmark_coefficients(prob),
                domain=prob.domain,
                initial_state=lambda t: np.full(np.shape(t), prob.a),
                initial_control=lambda t: np.full(np.shape(t), 1.0),
                grid=grid,
            )
        return ProblemBundle(
            name=name,
            spec=spec,
            base_control=constant_control(spec, 1.0),
            lq=prob if name == "lq-benchmark" else None,
        )
    if name == "lq-nodelay":
        prob = NODELAY_REDUCTION
        grid = make_grid(prob.horizon, prob.delay, steps_per_delay)
        spec = build_lq_spec(prob, grid)
        return ProblemBundle(
            name=name, spec=spec, base_control=constant_control(spec, 0.0), lq=prob
        )
    if name == "lq-custom":
        if not lq_params:
            raise ConfigurationError("lq-custom requires problem parameters")
        params = dict(lq_params)
        domain = params.pop("domain", None)
        if domain == "real-line":
            params["domain"] = ControlDomain.real_line()
        elif domain == "unit-gap" or domain is None:
            params["domain"] = UNIT_GAP_DOMAIN
        elif isinstance(domain, (list, tuple)):
            params["domain"] = ControlDomain.from_intervals(
                [(float(lo) if lo is not None else -math.inf, float(hi) if hi is not None else math.inf) for lo, hi in domain]
            )
        else:
            raise ConfigurationError(f"unknown domain spec {domain!r}")
        try:
            prob = LQProblem(**params)
        except TypeError as exc:
            raise ConfigurationError(f"bad lq-custom parameters: {exc}") from exc
        grid = make_grid(prob.horizon, prob.delay, steps_per_delay)
        spec = build_lq_spec(prob, grid)
        start = 1.0 if bool(np.all(prob.domain.contains(1.0))) else float(prob.domain.project(0.0))
        return ProblemBundle(
            name=name, spec=spec, base_control=constant_control(spec, start), lq=prob
        )
    if name == "first-adjoint-oracle":
        c = 0.5
        grid = make_grid(1.0, 1.0, steps_per_delay)
        coeffs = _constant_coefficient_set(drift_gain=c, diffusion_xd_gain=1.0, terminal="linear")
        spec = ProblemSpec(
            coefficients=coeffs,
            domain=ControlDomain.real_line(),
            initial_state=lambda t: np.ones(np.shape(t)),
            initial_control=lambda t: np.zeros(np.shape(t)),
            grid=grid,
        )
        oracle = {
            "p_exact": lambda t: np.exp(c * (grid.horizon - np.asarray(t, dtype=float))),
            "q_exact": lambda t: np.zeros(np.shape(t)),
        }
        return ProblemBundle(
            name=name, spec=spec, base_control=constant_control(spec, 0.0), oracle=oracle
        )
    if name == "second-adjoint-ode":
        c = 0.5
        grid = make_grid(1.0, 1.0, steps_per_delay)
        coeffs = _constant_coefficient_set(drift_gain=c, diffusion_xd_gain=0.1, terminal="quadratic")
        spec = ProblemSpec(
            coefficients=coeffs,
            domain=ControlDomain.real_line(),
            initial_state=lambda t: np.ones(np.shape(t)),
            initial_control=lambda t: np.zeros(np.shape(t)),
            grid=grid,
        )
        oracle = {
            "P_exact": lambda t: 0.5 * np.exp(2 * c * (grid.horizon - np.asarray(t, dtype=float))),
        }
        return ProblemBundle(
            name=name, spec=spec, base_control=constant_control(spec, 0.0), oracle=oracle
        )
    raise ConfigurationError(
        f"unknown problem {name!r}; available: lq-benchmark, lq-benchmark-smooth, "
        f"lq-nodelay, lq-custom, first-adjoint-oracle, second-adjoint-ode"
    )
