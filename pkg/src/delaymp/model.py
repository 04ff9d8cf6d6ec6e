"""Problem specification: coefficients, control domain, initial paths, controls.

Coefficient evaluators are pure numpy-broadcasting callables of
``(t, x, x_delayed, v, v_delayed)`` (``terminal_cost`` and its derivatives take
``x`` only).  Derivatives are user-declared, not auto-differentiated; the
finite-difference audit in :func:`check_derivatives` replaces trust, because
the backward solvers consume second derivatives explicitly and a silent
derivative error would corrupt every downstream result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError, EvaluationError
from .grid import TimeGrid

Coef = Callable[..., np.ndarray]

#: Names of the state/delayed-state derivative evaluators, in report order.
DERIVATIVE_NAMES = tuple(
    f"{base}_{suffix}"
    for base in ("drift", "diffusion", "running_cost")
    for suffix in ("x", "xd", "xx", "xxd", "xdxd")
) + ("terminal_x", "terminal_xx")


# ---------------------------------------------------------------------------
# control domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlDomain:
    """A control set: the real line, a union of closed intervals, or points.

    Projection resolves equal-distance ties to the larger value.
    """

    kind: str
    intervals: tuple[tuple[float, float], ...] = ()
    points: tuple[float, ...] = ()

    @classmethod
    def real_line(cls) -> "ControlDomain":
        return cls(kind="real-line")

    @classmethod
    def from_intervals(cls, pairs) -> "ControlDomain":
        pairs = tuple((float(lo), float(hi)) for lo, hi in pairs)
        if not pairs:
            raise ConfigurationError("interval domain needs at least one interval")
        for lo, hi in pairs:
            if not lo <= hi:
                raise ConfigurationError(f"empty interval [{lo}, {hi}]")
        return cls(kind="intervals", intervals=tuple(sorted(pairs)))

    @classmethod
    def from_points(cls, values) -> "ControlDomain":
        values = tuple(sorted(float(v) for v in values))
        if not values:
            raise ConfigurationError("point domain needs at least one point")
        return cls(kind="points", points=values)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "real-line":
            return np.isfinite(x)
        if self.kind == "intervals":
            ok = np.zeros(x.shape, dtype=bool)
            for lo, hi in self.intervals:
                ok |= (x >= lo) & (x <= hi)
            return ok
        ok = np.zeros(x.shape, dtype=bool)
        for p in self.points:
            ok |= x == p
        return ok

    def project(self, x) -> np.ndarray:
        """Nearest member of the domain; ties resolve to the larger value."""
        x = np.asarray(x, dtype=float)
        if self.kind == "real-line":
            return x.copy()
        if self.kind == "intervals":
            candidates = np.stack([np.clip(x, lo, hi) for lo, hi in self.intervals])
        else:
            candidates = np.stack([np.full(x.shape, p) for p in self.points])
        dist = np.abs(candidates - x)
        # primary key: distance; secondary: prefer the larger candidate
        order = np.lexsort((-candidates, dist), axis=0)
        return np.take_along_axis(candidates, order[:1], axis=0)[0]


#: Default domain of the delayed LQ application: two half-lines with a unit gap.
UNIT_GAP_DOMAIN = ControlDomain.from_intervals([(-math.inf, -1.0), (1.0, math.inf)])


def project_to_domain(x, domain: ControlDomain):
    """Euclidean projection onto the domain with the tie-to-larger rule."""
    out = domain.project(x)
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSet:
    """Drift, diffusion, running and terminal cost with declared derivatives.

    ``bounds`` maps evaluator names to declared sup bounds (informational,
    audited by sampling); ``diffusion_xd_floor`` is the declared positive
    lower bound for |d(diffusion)/d(x_delayed)|, which backward solvers divide
    by.
    """

    drift: Coef
    diffusion: Coef
    running_cost: Coef
    terminal_cost: Coef
    drift_x: Coef
    drift_xd: Coef
    drift_xx: Coef
    drift_xxd: Coef
    drift_xdxd: Coef
    diffusion_x: Coef
    diffusion_xd: Coef
    diffusion_xx: Coef
    diffusion_xxd: Coef
    diffusion_xdxd: Coef
    running_cost_x: Coef
    running_cost_xd: Coef
    running_cost_xx: Coef
    running_cost_xxd: Coef
    running_cost_xdxd: Coef
    terminal_x: Coef
    terminal_xx: Coef
    bounds: Mapping[str, float] = field(default_factory=dict)
    diffusion_xd_floor: float = 1e-6


def _eval(coeffs: CoefficientSet, name: str, *args, shape=None) -> np.ndarray:
    out = np.asarray(getattr(coeffs, name)(*args), dtype=float)
    if shape is not None and out.shape != shape:
        out = np.broadcast_to(out, shape)
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"coefficient {name!r} produced a non-finite value")
    return out


@dataclass(frozen=True)
class ThetaValues:
    """Every coefficient and derivative value at one evaluation point."""

    t: np.ndarray
    x: np.ndarray
    x_delayed: np.ndarray
    v: np.ndarray
    v_delayed: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray
    running_cost: np.ndarray
    drift_x: np.ndarray
    drift_xd: np.ndarray
    drift_xx: np.ndarray
    drift_xxd: np.ndarray
    drift_xdxd: np.ndarray
    diffusion_x: np.ndarray
    diffusion_xd: np.ndarray
    diffusion_xx: np.ndarray
    diffusion_xxd: np.ndarray
    diffusion_xdxd: np.ndarray
    running_cost_x: np.ndarray
    running_cost_xd: np.ndarray
    running_cost_xx: np.ndarray
    running_cost_xxd: np.ndarray
    running_cost_xdxd: np.ndarray


_THETA_FIELDS = (
    "drift",
    "diffusion",
    "running_cost",
    "drift_x",
    "drift_xd",
    "drift_xx",
    "drift_xxd",
    "drift_xdxd",
    "diffusion_x",
    "diffusion_xd",
    "diffusion_xx",
    "diffusion_xxd",
    "diffusion_xdxd",
    "running_cost_x",
    "running_cost_xd",
    "running_cost_xx",
    "running_cost_xxd",
    "running_cost_xdxd",
)


def theta_eval(coeffs: CoefficientSet, t, x, x_delayed, v, v_delayed) -> ThetaValues:
    """Evaluate every coefficient and derivative at one evaluation point.

    The same record serves base and spiked evaluation points; callers choose
    which controls to pass.  Raises :class:`EvaluationError` naming the
    coefficient if any value is non-finite.
    """
    t, x, xd, v, vd = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (t, x, x_delayed, v, v_delayed))
    )
    shape = x.shape
    values = {name: _eval(coeffs, name, t, x, xd, v, vd, shape=shape) for name in _THETA_FIELDS}
    return ThetaValues(t=t, x=x, x_delayed=xd, v=v, v_delayed=vd, **values)


# ---------------------------------------------------------------------------
# derivative audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivativeCheck:
    name: str
    max_error: float
    max_abs_value: float
    bound: float
    flagged: bool


@dataclass(frozen=True)
class DerivativeReport:
    checks: tuple[DerivativeCheck, ...]

    @property
    def passed(self) -> bool:
        return not any(c.flagged for c in self.checks)

    @property
    def flagged(self) -> tuple[DerivativeCheck, ...]:
        return tuple(c for c in self.checks if c.flagged)


def _scaled_error(fd: np.ndarray, declared: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(declared)))
    return float(np.max(np.abs(fd - declared) / scale))


def check_derivatives(
    coeffs: CoefficientSet,
    n_samples: int,
    seed: int,
    *,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    t_range=(0.0, 1.0),
    x_range=(-2.0, 2.0),
    v_range=(-2.0, 2.0),
    domain: ControlDomain | None = None,
) -> DerivativeReport:
    """Audit declared derivatives against central finite differences.

    Differences are taken in the state and delayed-state arguments at
    ``n_samples`` random points.  Mismatches are flagged in the report, not
    raised, so a caller can inspect all failures at once.
    """
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    t = rng.uniform(*t_range, size=n_samples)
    x = rng.uniform(*x_range, size=n_samples)
    xd = rng.uniform(*x_range, size=n_samples)
    v = rng.uniform(*v_range, size=n_samples)
    vd = rng.uniform(*v_range, size=n_samples)
    if domain is not None:
        v = domain.project(v)
        vd = domain.project(vd)
    h = step
    checks = []

    def record(name, fd, declared):
        err = _scaled_error(fd, declared)
        bound = float(coeffs.bounds.get(name, math.inf))
        max_abs = float(np.max(np.abs(declared)))
        checks.append(
            DerivativeCheck(
                name=name,
                max_error=err,
                max_abs_value=max_abs,
                bound=bound,
                flagged=err > tolerance or max_abs > bound,
            )
        )

    for base in ("drift", "diffusion", "running_cost"):
        f = lambda a, b: _eval(coeffs, base, t, a, b, v, vd)
        record(f"{base}_x", (f(x + h, xd) - f(x - h, xd)) / (2 * h), _eval(coeffs, f"{base}_x", t, x, xd, v, vd))
        record(f"{base}_xd", (f(x, xd + h) - f(x, xd - h)) / (2 * h), _eval(coeffs, f"{base}_xd", t, x, xd, v, vd))
        record(
            f"{base}_xx",
            (f(x + h, xd) - 2 * f(x, xd) + f(x - h, xd)) / h**2,
            _eval(coeffs, f"{base}_xx", t, x, xd, v, vd),
        )
        record(
            f"{base}_xxd",
            (f(x + h, xd + h) - f(x + h, xd - h) - f(x - h, xd + h) + f(x - h, xd - h)) / (4 * h**2),
            _eval(coeffs, f"{base}_xxd", t, x, xd, v, vd),
        )
        record(
            f"{base}_xdxd",
            (f(x, xd + h) - 2 * f(x, xd) + f(x, xd - h)) / h**2,
            _eval(coeffs, f"{base}_xdxd", t, x, xd, v, vd),
        )
    g = lambda a: _eval(coeffs, "terminal_cost", a)
    record("terminal_x", (g(x + h) - g(x - h)) / (2 * h), _eval(coeffs, "terminal_x", x))
    record("terminal_xx", (g(x + h) - 2 * g(x) + g(x - h)) / h**2, _eval(coeffs, "terminal_xx", x))

    # positivity floor of the delayed-state diffusion derivative
    sxd = np.abs(_eval(coeffs, "diffusion_xd", t, x, xd, v, vd))
    checks.append(
        DerivativeCheck(
            name="diffusion_xd_floor",
            max_error=0.0,
            max_abs_value=float(np.min(sxd)),
            bound=coeffs.diffusion_xd_floor,
            flagged=bool(np.min(sxd) < coeffs.diffusion_xd_floor),
        )
    )
    return DerivativeReport(checks=tuple(checks))


# ---------------------------------------------------------------------------
# problem spec and control paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    """A complete controlled-SDDE problem on a fixed grid."""

    coefficients: CoefficientSet
    domain: ControlDomain
    initial_state: Callable[[np.ndarray], np.ndarray]
    initial_control: Callable[[np.ndarray], np.ndarray]
    grid: TimeGrid

    def __post_init__(self):
        t0 = self.grid.times[: self.grid.i_zero + 1]
        xi = np.broadcast_to(np.asarray(self.initial_state(t0), dtype=float), t0.shape)
        eta = np.broadcast_to(np.asarray(self.initial_control(t0), dtype=float), t0.shape)
        if not np.all(np.isfinite(xi)):
            raise ConfigurationError("initial state path is non-finite on [-delay, 0]")
        if not np.all(np.isfinite(eta)):
            raise ConfigurationError("initial control path is non-finite on [-delay, 0]")
        if not np.all(self.domain.contains(eta)):
            raise ConfigurationError("initial control path leaves the control domain")

    def initial_state_nodes(self) -> np.ndarray:
        t0 = self.grid.times[: self.grid.i_zero + 1]
        return np.broadcast_to(np.asarray(self.initial_state(t0), dtype=float), t0.shape).copy()

    def initial_control_nodes(self) -> np.ndarray:
        t0 = self.grid.times[: self.grid.i_zero + 1]
        return np.broadcast_to(np.asarray(self.initial_control(t0), dtype=float), t0.shape).copy()


@dataclass(frozen=True)
class ControlPath:
    """Grid-sampled control values on [-delay, horizon].

    ``values`` has shape (n, i_horizon + 1); a single row represents a
    deterministic control.  Values are piecewise constant on [t_k, t_{k+1}).
    The delayed value at node k is exactly ``values[:, k - steps_per_delay]``.
    """

    grid: TimeGrid
    values: np.ndarray
    adapted: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.grid.i_horizon + 1:
            raise ConfigurationError(
                f"control values must have shape (n, {self.grid.i_horizon + 1}), got {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def validate_membership(self, domain: ControlDomain) -> None:
        if not np.all(domain.contains(self.values)):
            raise DomainError("control path contains values outside the control domain")

    def row_slice(self, start: int, stop: int) -> np.ndarray:
        """Rows for a path block; a deterministic control broadcasts to any block."""
        if self.values.shape[0] == 1:
            return self.values
        return self.values[start:stop]


def constant_control(spec: ProblemSpec, value: float) -> ControlPath:
    """Deterministic control equal to ``value`` on [0, T] and to the initial
    control path on [-delay, 0)."""
    g = spec.grid
    row = np.empty((1, g.i_horizon + 1))
    row[0, : g.i_zero] = spec.initial_control_nodes()[:-1]
    row[0, g.i_zero :] = value
    path = ControlPath(grid=g, values=row)
    path.validate_membership(spec.domain)
    return path


def control_from_feedback(spec: ProblemSpec, values: np.ndarray) -> ControlPath:
    """Wrap per-path control values on [0, T] into a ControlPath.

    ``values`` has shape (n, n_forward + 1); nodes on [-delay, 0) come from
    the initial control path.
    """
    g = spec.grid
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    out = np.empty((n, g.i_horizon + 1))
    out[:, : g.i_zero] = spec.initial_control_nodes()[:-1]
    out[:, g.i_zero :] = values
    path = ControlPath(grid=g, values=out)
    path.validate_membership(spec.domain)
    return path
