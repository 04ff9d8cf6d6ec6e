"""Hamiltonian evaluation and verification of the optimality condition.

At an optimal control, perturbing the control value at a node to any admissible
v cannot decrease the Hamiltonian once the second-order correction
P * (diffusion difference)^2 is added.  ``mp_gap`` estimates that quantity by
Monte Carlo and ``mp_scan`` sweeps it over a (node, value) product grid; a gap
below -(3 * stderr + allowance * dt) flags a non-optimal control.

The delayed control argument of the perturbed Hamiltonian is frozen at the
base control's delayed value: the spike construction perturbs the control on
the window only, so the delayed argument at the window itself is unperturbed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import FirstAdjointPaths, SecondAdjointPaths
from .errors import ConfigurationError, DomainError, StructureError
from .forward import StatePaths, _bc
from .model import ControlPath, ProblemSpec, ThetaValues

# ---------------------------------------------------------------------------


def hamiltonian(theta: ThetaValues, p, q):
    """running cost + p * drift + q * diffusion at one evaluation record."""
    return theta.running_cost + np.asarray(p) * theta.drift + np.asarray(q) * theta.diffusion


@dataclass(frozen=True)
class GapEstimate:
    tau: float
    value: float
    gap: float
    stderr: float


@dataclass(frozen=True)
class MPGapReport:
    """Gap estimates sorted ascending, with the scan's acceptance threshold."""

    entries: tuple[GapEstimate, ...]
    threshold: float
    dt_allowance: float

    @property
    def min_entry(self) -> GapEstimate:
        return self.entries[0]

    @property
    def min_gap(self) -> float:
        return self.entries[0].gap

    @property
    def passed(self) -> bool:
        return all(e.gap >= -(3.0 * e.stderr + self.threshold) for e in self.entries)

    @property
    def violations(self) -> tuple[GapEstimate, ...]:
        return tuple(e for e in self.entries if e.gap < -(3.0 * e.stderr + self.threshold))


def _gap_samples(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    second: SecondAdjointPaths | None,
    i_tau: int,
    value: float,
    drop_delayed_state: bool = False,
) -> np.ndarray:
    g = spec.grid
    coeffs = spec.coefficients
    t = g.time_of(i_tau)
    x = states.values[:, i_tau]
    xd = states.values[:, i_tau - g.i_zero]
    u = control.values[:, i_tau]
    ud = control.values[:, i_tau - g.i_zero]
    if drop_delayed_state:
        xd = x  # coefficients verified independent of the delayed state
    n = max(x.shape[0], u.shape[0])
    v = np.full(x.shape, float(value))

    def ham(ctrl):
        b = _bc(coeffs.drift(t, x, xd, ctrl, ud), (n,))
        s = _bc(coeffs.diffusion(t, x, xd, ctrl, ud), (n,))
        l = _bc(coeffs.running_cost(t, x, xd, ctrl, ud), (n,))
        return l + first.p[:, i_tau] * b + first.q[:, i_tau] * s, s

    h_v, s_v = ham(v)
    h_u, s_u = ham(u)
    samples = h_v - h_u
    if second is not None:
        samples = samples + second.P[:, i_tau] * (s_v - s_u) ** 2
    return samples


def mp_gap(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    second: SecondAdjointPaths,
    tau: float,
    value: float,
) -> GapEstimate:
    """Monte Carlo estimate of the optimality gap at (tau, v).

    Exactly zero, path by path, when v equals the control's value at tau.
    Raises :class:`DomainError` if v is not admissible.
    """
    if not bool(np.all(spec.domain.contains(value))):
        raise DomainError(f"scan value {value} lies outside the control domain")
    g = spec.grid
    i_tau = g.index_of(tau)
    if not g.i_zero <= i_tau < g.i_horizon:
        raise ConfigurationError(f"tau={tau} must be a grid node in [0, horizon)")
    samples = _gap_samples(spec, control, states, first, second, i_tau, value)
    n = samples.shape[0]
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return GapEstimate(tau=tau, value=float(value), gap=float(np.mean(samples)), stderr=stderr)


def mp_scan_cells(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    second: SecondAdjointPaths,
    cells,
    dt_allowance: float = 5.0,
) -> MPGapReport:
    """Gap estimates over explicit (tau, v) cells, sorted ascending by gap.

    The acceptance threshold for each cell is 3 * stderr + dt_allowance * dt,
    separating the statistical and time-discretization error sources.
    """
    cells = list(cells)
    if not cells:
        raise ConfigurationError("mp scan needs a nonempty cell set")
    entries = [mp_gap(spec, control, states, first, second, tau, v) for tau, v in cells]
    entries.sort(key=lambda e: (e.gap, e.tau, e.value))
    return MPGapReport(
        entries=tuple(entries),
        threshold=dt_allowance * spec.grid.dt,
        dt_allowance=dt_allowance,
    )


def mp_scan(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    second: SecondAdjointPaths,
    taus,
    values,
    dt_allowance: float = 5.0,
) -> MPGapReport:
    """Gap estimates over the (tau set) x (value set) product grid."""
    taus = list(taus)
    values = list(values)
    if not taus or not values:
        raise ConfigurationError("mp_scan needs nonempty tau and value sets")
    cells = [(tau, v) for tau in taus for v in values]
    return mp_scan_cells(
        spec, control, states, first, second, cells, dt_allowance=dt_allowance
    )


def check_no_state_delay(spec: ProblemSpec, states: StatePaths, n_samples: int = 256) -> None:
    """Verify the declared absence of delayed-state dependence by sampling the
    delayed-state derivatives along simulated paths."""
    g = spec.grid
    coeffs = spec.coefficients
    rng = np.random.Generator(np.random.Philox(key=np.array([9, 9], dtype=np.uint64)))
    nodes = rng.integers(g.i_zero, g.i_horizon + 1, size=n_samples)
    rows = rng.integers(0, states.values.shape[0], size=n_samples)
    t = g.times[nodes]
    x = states.values[rows, nodes]
    xd = states.values[rows, nodes - g.i_zero]
    v = rng.uniform(-1.0, 1.0, size=n_samples)
    vd = rng.uniform(-1.0, 1.0, size=n_samples)
    for name in ("drift_xd", "diffusion_xd", "running_cost_xd"):
        vals = np.asarray(getattr(coeffs, name)(t, x, xd, v, vd), dtype=float)
        if np.any(np.abs(vals) > 1e-12):
            raise StructureError(
                f"problem declared free of delayed state, but {name} is nonzero at a sampled point"
            )


def mp_gap_case2(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    second: SecondAdjointPaths,
    tau: float,
    value: float,
) -> GapEstimate:
    """Gap for problems whose coefficients ignore the delayed state, using the
    plain (non-anticipated) adjoints; a reduction cross-check of the general
    machinery.  The delayed-state derivative of the running cost, drift and
    diffusion must vanish (checked by sampling)."""
    if not bool(np.all(spec.domain.contains(value))):
        raise DomainError(f"scan value {value} lies outside the control domain")
    check_no_state_delay(spec, states)
    g = spec.grid
    i_tau = g.index_of(tau)
    if not g.i_zero <= i_tau < g.i_horizon:
        raise ConfigurationError(f"tau={tau} must be a grid node in [0, horizon)")
    samples = _gap_samples(
        spec, control, states, first, second, i_tau, value, drop_delayed_state=True
    )
    n = samples.shape[0]
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return GapEstimate(tau=tau, value=float(value), gap=float(np.mean(samples)), stderr=stderr)
