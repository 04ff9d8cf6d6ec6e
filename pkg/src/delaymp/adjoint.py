"""Backward solvers for the first- and second-order adjoint processes.

Conditional expectations are implemented by cross-sectional least-squares
regression on polynomial basis functions of (x(t), x(t - delay)); on a grid
aligned to the delay this pair is the Markovian lift of the pointwise-delay
dynamics.  The martingale component is extracted by regressing
p(t_{k+1}) * dB_k / dt on the same basis.  Anticipated terms read the already
computed values at t + delay (zero beyond the horizon) before conditioning.

The drivers are linear in the unknown, so the implicit dependence is resolved
with a single fixed-point substitution per step (contraction factor O(dt)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, SolverError
from .forward import StatePaths, SpikeSpec, _bc, _forcing_columns, _theta_slices, apply_spike, validate_spike
from .grid import PATH_CHUNK, NoiseEnsemble, TimeGrid
from .model import ControlPath, ProblemSpec

# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Bivariate polynomial basis of total degree <= ``degree`` with a ridge.

    ``ridge`` is a per-sample penalty (the normal equations add ridge * n to
    the diagonal), so its effect is independent of the path count.  Before the
    delay has elapsed the delayed state is the deterministic initial path and
    the design is rank-deficient by construction; the ridge keeps those steps
    solvable.  A singular factorization (possible only at ridge = 0) raises
    :class:`SolverError`.

    ``winsor`` clips the regression inputs to the [w, 1-w] sample quantiles.
    Without it the fitted polynomial extrapolates on extreme paths, and a
    feedback loop built on the fit (the coupled solver) turns that
    extrapolation into superlinear per-path growth.
    """

    degree: int = 2
    ridge: float = 1e-8
    winsor: float = 1e-3

    def _clip(self, values: np.ndarray) -> np.ndarray:
        if self.winsor <= 0:
            return values
        lo, hi = np.quantile(values, [self.winsor, 1.0 - self.winsor])
        return np.clip(values, lo, hi)

    def design(self, x: np.ndarray, xd: np.ndarray | None) -> np.ndarray:
        x = self._clip(np.asarray(x, dtype=float))
        cols = []
        if xd is None:
            for i in range(self.degree + 1):
                cols.append(x**i)
        else:
            xd = self._clip(np.broadcast_to(np.asarray(xd, dtype=float), x.shape))
            for total in range(self.degree + 1):
                for i in range(total, -1, -1):
                    cols.append(x**i * xd ** (total - i))
        return np.column_stack(cols)


class _StepRegressor:
    """Shared factorization for the regressions of one backward step."""

    def __init__(self, basis: RegressionBasis, x: np.ndarray, xd: np.ndarray | None, node: int):
        design = basis.design(x, xd)
        # normalize columns to unit RMS so the ridge acts on a well-scaled
        # Gram matrix whatever the state magnitudes are
        scale = np.sqrt(np.mean(design**2, axis=0))
        scale[scale == 0.0] = 1.0
        self.design = design / scale
        gram = self.design.T @ self.design
        gram[np.diag_indices_from(gram)] += basis.ridge * max(1, design.shape[0])
        try:
            self.factor = scipy.linalg.cho_factor(gram)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(
                f"singular regression system at node {node} (rank deficiency after ridge)"
            ) from exc

    def fit(self, *responses: np.ndarray) -> list[np.ndarray]:
        n = self.design.shape[0]
        stacked = np.column_stack([np.broadcast_to(r, (n,)) for r in responses])
        beta = scipy.linalg.cho_solve(self.factor, self.design.T @ stacked)
        fitted = self.design @ beta
        return [fitted[:, i] for i in range(fitted.shape[1])]


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FirstAdjointPaths:
    """(p, q) on the full node range; identically zero outside [0, T + delay],
    with p = 0 on (T, T + delay] and q = 0 on [T, T + delay] exactly."""

    grid: TimeGrid
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class SecondAdjointPaths:
    """(P, Q) with the same layout and extension conventions as (p, q)."""

    grid: TimeGrid
    P: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True)
class CrossTermAux:
    """Stochastic exponential P0 (P0[.,0] = 1 exactly, positive on every path)
    and the auxiliary martingale integral phi (phi[., -1] = 0 exactly), both on
    forward columns [0, n_forward]."""

    grid: TimeGrid
    P0: np.ndarray
    phi: np.ndarray


def _guard_diffusion_xd(values: np.ndarray, floor: float) -> None:
    worst = float(np.min(np.abs(values)))
    if worst < floor:
        raise SolverError(
            f"delayed-state diffusion derivative magnitude {worst:.3g} fell below the "
            f"declared floor {floor:.3g}; backward drivers divide by this derivative"
        )


# ---------------------------------------------------------------------------
# first-order adjoint
# ---------------------------------------------------------------------------


def solve_first_adjoint(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
) -> FirstAdjointPaths:
    """Backward sweep for the first-order adjoint pair (p, q).

    Terminal condition p(T) = (d terminal cost)(x(T)) holds path by path; the
    anticipated bracket at t reads the solved values at t + delay, zero beyond
    the horizon, and is conditioned by regression on (x(t), x(t - delay)).
    """
    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    x, u, dW = states.values, control.values, noise.increments
    ts, xs, xds, vs, vds = _theta_slices(g, x, u, extra=1)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    bx = _bc(coeffs.drift_x(ts, xs, xds, vs, vds), shape)
    sx = _bc(coeffs.diffusion_x(ts, xs, xds, vs, vds), shape)
    lx = _bc(coeffs.running_cost_x(ts, xs, xds, vs, vds), shape)
    bxd = _bc(coeffs.drift_xd(ts, xs, xds, vs, vds), shape)
    sxd = _bc(coeffs.diffusion_xd(ts, xs, xds, vs, vds), shape)
    lxd = _bc(coeffs.running_cost_xd(ts, xs, xds, vs, vds), shape)

    n = max(x.shape[0], dW.shape[0])
    p = np.zeros((n, g.n_nodes))
    q = np.zeros((n, g.n_nodes))
    p[:, g.i_horizon] = _bc(coeffs.terminal_x(x[:, -1]), (x.shape[0],))

    for k in range(g.i_horizon - 1, g.i_zero - 1, -1):
        j = k - m
        reg = _StepRegressor(basis, x[:, k], x[:, k - m], node=k)
        resp_q = p[:, k + 1] * dW[:, j] / dt
        if k + m <= g.i_horizon:
            ant_raw = bxd[:, j + m] * p[:, k + m] + sxd[:, j + m] * q[:, k + m] + lxd[:, j + m]
            q_k, p_bar, ant = reg.fit(resp_q, p[:, k + 1], ant_raw)
        else:
            q_k, p_bar = reg.fit(resp_q, p[:, k + 1])
            ant = 0.0
        q[:, k] = q_k
        rest = sx[:, j] * q_k + lx[:, j] + ant
        p_guess = p_bar + (bx[:, j] * p_bar + rest) * dt
        p[:, k] = p_bar + (bx[:, j] * p_guess + rest) * dt
    return FirstAdjointPaths(grid=g, p=p, q=q)


def solve_first_adjoint_no_state_delay(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
) -> FirstAdjointPaths:
    """Plain-BSDE sweep for problems with no delayed state in the
    coefficients: no anticipated bracket, regression on x(t) alone."""
    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    x, u, dW = states.values, control.values, noise.increments
    ts, xs, xds, vs, vds = _theta_slices(g, x, u, extra=1)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    bx = _bc(coeffs.drift_x(ts, xs, xds, vs, vds), shape)
    sx = _bc(coeffs.diffusion_x(ts, xs, xds, vs, vds), shape)
    lx = _bc(coeffs.running_cost_x(ts, xs, xds, vs, vds), shape)

    n = max(x.shape[0], dW.shape[0])
    p = np.zeros((n, g.n_nodes))
    q = np.zeros((n, g.n_nodes))
    p[:, g.i_horizon] = _bc(coeffs.terminal_x(x[:, -1]), (x.shape[0],))
    for k in range(g.i_horizon - 1, g.i_zero - 1, -1):
        j = k - m
        reg = _StepRegressor(basis, x[:, k], None, node=k)
        q_k, p_bar = reg.fit(p[:, k + 1] * dW[:, j] / dt, p[:, k + 1])
        q[:, k] = q_k
        rest = sx[:, j] * q_k + lx[:, j]
        p_guess = p_bar + (bx[:, j] * p_bar + rest) * dt
        p[:, k] = p_bar + (bx[:, j] * p_guess + rest) * dt
    return FirstAdjointPaths(grid=g, p=p, q=q)


# ---------------------------------------------------------------------------
# second-order adjoint
# ---------------------------------------------------------------------------


def solve_second_adjoint(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
) -> SecondAdjointPaths:
    """Backward sweep for the second-order adjoint pair (P, Q).

    The driver combines the local block -2 b_x P - (diffusion_x)^2 P
    - 2 diffusion_x Q - H_xx / 2, the anticipated block at t + delay, and the
    block prefixed by (drift_xd / diffusion_xd - diffusion_x); the division by
    diffusion_xd is guarded by the declared positivity floor.
    """
    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    x, u, dW = states.values, control.values, noise.increments
    p, q = first.p, first.q
    ts, xs, xds, vs, vds = _theta_slices(g, x, u, extra=1)
    shape = np.broadcast_shapes(xs.shape, vs.shape)

    def at(name):
        return _bc(getattr(coeffs, name)(ts, xs, xds, vs, vds), shape)

    bx, bxd = at("drift_x"), at("drift_xd")
    sx, sxd = at("diffusion_x"), at("diffusion_xd")
    _guard_diffusion_xd(sxd, coeffs.diffusion_xd_floor)
    bxx, bxxd, bxdxd = at("drift_xx"), at("drift_xxd"), at("drift_xdxd")
    sxx, sxxd, sxdxd = at("diffusion_xx"), at("diffusion_xxd"), at("diffusion_xdxd")
    lxx, lxxd, lxdxd = at("running_cost_xx"), at("running_cost_xxd"), at("running_cost_xdxd")
    ratio = bxd / sxd

    n = max(x.shape[0], dW.shape[0])
    P = np.zeros((n, g.n_nodes))
    Q = np.zeros((n, g.n_nodes))
    P[:, g.i_horizon] = 0.5 * _bc(coeffs.terminal_xx(x[:, -1]), (x.shape[0],))

    for k in range(g.i_horizon - 1, g.i_zero - 1, -1):
        j = k - m
        reg = _StepRegressor(basis, x[:, k], x[:, k - m], node=k)
        resp_q = P[:, k + 1] * dW[:, j] / dt
        if k + m <= g.i_horizon:
            jd = j + m
            kd = k + m
            h_xdxd = lxdxd[:, jd] + p[:, kd] * bxdxd[:, jd] + q[:, kd] * sxdxd[:, jd]
            ant_raw = sxd[:, jd] ** 2 * P[:, kd] + 0.5 * h_xdxd
            q_k, p_bar, ant = reg.fit(resp_q, P[:, k + 1], ant_raw)
        else:
            q_k, p_bar = reg.fit(resp_q, P[:, k + 1])
            ant = 0.0
        Q[:, k] = q_k
        h_xx = lxx[:, j] + p[:, k] * bxx[:, j] + q[:, k] * sxx[:, j]
        h_xxd = lxxd[:, j] + p[:, k] * bxxd[:, j] + q[:, k] * sxxd[:, j]
        gain = 2.0 * bx[:, j] + sx[:, j] ** 2 + (ratio[:, j] - sx[:, j]) * (2.0 * ratio[:, j] + 2.0 * sx[:, j])
        rest = (
            2.0 * sx[:, j] * q_k
            + 0.5 * h_xx
            + ant
            + (ratio[:, j] - sx[:, j]) * (2.0 * q_k + h_xxd / sxd[:, j])
        )
        p_guess = p_bar + (gain * p_bar + rest) * dt
        P[:, k] = p_bar + (gain * p_guess + rest) * dt
    return SecondAdjointPaths(grid=g, P=P, Q=Q)


def solve_second_adjoint_no_state_delay(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    first: FirstAdjointPaths,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
) -> SecondAdjointPaths:
    """Second-order sweep for problems with no delayed state: only the local
    block survives, with no anticipated term and no derivative ratio."""
    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    x, u, dW = states.values, control.values, noise.increments
    p, q = first.p, first.q
    ts, xs, xds, vs, vds = _theta_slices(g, x, u, extra=1)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    bx = _bc(coeffs.drift_x(ts, xs, xds, vs, vds), shape)
    sx = _bc(coeffs.diffusion_x(ts, xs, xds, vs, vds), shape)
    bxx = _bc(coeffs.drift_xx(ts, xs, xds, vs, vds), shape)
    sxx = _bc(coeffs.diffusion_xx(ts, xs, xds, vs, vds), shape)
    lxx = _bc(coeffs.running_cost_xx(ts, xs, xds, vs, vds), shape)

    n = max(x.shape[0], dW.shape[0])
    P = np.zeros((n, g.n_nodes))
    Q = np.zeros((n, g.n_nodes))
    P[:, g.i_horizon] = 0.5 * _bc(coeffs.terminal_xx(x[:, -1]), (x.shape[0],))
    for k in range(g.i_horizon - 1, g.i_zero - 1, -1):
        j = k - m
        reg = _StepRegressor(basis, x[:, k], None, node=k)
        q_k, p_bar = reg.fit(P[:, k + 1] * dW[:, j] / dt, P[:, k + 1])
        Q[:, k] = q_k
        h_xx = lxx[:, j] + p[:, k] * bxx[:, j] + q[:, k] * sxx[:, j]
        gain = 2.0 * bx[:, j] + sx[:, j] ** 2
        rest = 2.0 * sx[:, j] * q_k + 0.5 * h_xx
        p_guess = p_bar + (gain * p_bar + rest) * dt
        P[:, k] = p_bar + (gain * p_guess + rest) * dt
    return SecondAdjointPaths(grid=g, P=P, Q=Q)


# ---------------------------------------------------------------------------
# stochastic exponential and cross-term identity
# ---------------------------------------------------------------------------


def _p0_values(coeffs, g: TimeGrid, x: np.ndarray, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
    ts, xs, xds, vs, vds = _theta_slices(g, x, u)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    bx = _bc(coeffs.drift_x(ts, xs, xds, vs, vds), shape)
    sx = _bc(coeffs.diffusion_x(ts, xs, xds, vs, vds), shape)
    bxd = _bc(coeffs.drift_xd(ts, xs, xds, vs, vds), shape)
    sxd = _bc(coeffs.diffusion_xd(ts, xs, xds, vs, vds), shape)
    _guard_diffusion_xd(sxd, coeffs.diffusion_xd_floor)
    beta = bxd / sxd
    alpha = bx - beta * sx
    dlog = -(alpha + 0.5 * beta**2) * g.dt - beta * dW
    n = max(dlog.shape[0], dW.shape[0])
    log_p0 = np.zeros((n, g.n_forward + 1))
    np.cumsum(dlog, axis=1, out=log_p0[:, 1:])
    return np.exp(log_p0)


def simulate_P0(
    spec: ProblemSpec, control: ControlPath, states: StatePaths, noise: NoiseEnsemble
) -> np.ndarray:
    """Stochastic exponential P0 on forward columns [0, n_forward].

    Computed in closed form, exp of the left-endpoint quadratures of the drift
    and martingale integrals, so P0 is positive on every path and P0[., 0] is
    exactly one.  An Euler recursion could go negative and break the
    cross-term machinery, which is why the exponential form is used.
    """
    return _p0_values(spec.coefficients, spec.grid, states.values, control.values, noise.increments)


def _phi_block(phi, ts, xs, xds, start: int, stop: int, time_major: bool = False) -> np.ndarray:
    """Evaluate the weight process for a block of paths.

    ``phi`` is a scalar, a callable of (t, x, x_delayed), or a path-major
    (n_paths, n_forward) array; arrays are sliced to the block.
    """
    if callable(phi):
        return np.asarray(phi(ts, xs, xds), dtype=float)
    arr = np.asarray(phi, dtype=float)
    if arr.ndim == 2:
        block = arr[start:stop] if arr.shape[0] > 1 else arr
        return block.T if time_major else block
    return arr


def build_cross_term_aux(
    spec: ProblemSpec,
    control: ControlPath,
    states: StatePaths,
    x1: np.ndarray,
    noise: NoiseEnsemble,
    phi=1.0,
) -> CrossTermAux:
    """P0 together with phi(t) = -(martingale integral of phi x1 / P0 from t
    to T); phi(T) = 0 exactly and x1(0) = 0 make the pair the bookkeeping
    device behind the cross-term identity."""
    g = spec.grid
    x, u, dW = states.values, control.values, noise.increments
    p0 = _p0_values(spec.coefficients, g, x, u, dW)
    ts, xs, xds, _, _ = _theta_slices(g, x, u)
    w = _phi_block(phi, ts, xs, xds, 0, noise.n_paths)
    incr = (w / p0[:, :-1]) * x1[:, g.i_zero : g.i_zero + g.n_forward] * dW
    n = max(incr.shape[0], dW.shape[0])
    cum = np.zeros((n, g.n_forward + 1))
    np.cumsum(incr, axis=1, out=cum[:, 1:])
    phi_path = cum - cum[:, -1:]
    return CrossTermAux(grid=g, P0=p0, phi=phi_path)


@dataclass(frozen=True)
class CrossTermRung:
    epsilon: float
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    residual: float
    residual_stderr: float


@dataclass(frozen=True)
class CrossTermReport:
    rungs: tuple[CrossTermRung, ...]
    n_paths: int

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([r.epsilon for r in self.rungs])

    @property
    def lhs_slope(self) -> float:
        from .forward import loglog_slope

        return loglog_slope(self.epsilons, np.abs([r.lhs for r in self.rungs]))

    @property
    def residual_slope(self) -> float:
        from .forward import loglog_slope

        return loglog_slope(self.epsilons, np.abs([r.residual for r in self.rungs]))


def cross_term_check(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    phi=1.0,
    n_rungs: int = 4,
    min_steps_per_spike: int = 8,
) -> CrossTermReport:
    """Both sides of the cross-term identity over a dyadic epsilon ladder.

    lhs integrates diffusion_xd * phi * x1 * x1_delayed; rhs integrates
    (drift_xd / diffusion_xd - diffusion_x) * phi * x1^2.  Their gap vanishes
    faster than epsilon while each side is of order epsilon, which is what the
    ladder exhibits.  Common random numbers couple all rungs.
    """
    from .forward import _BaseRows, _euler_state, _first_variation, _ladder, _theta_slices_T, _tm

    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    spikes, windows = _ladder(spec, spike, n_rungs, min_steps_per_spike)

    xi_nodes = spec.initial_state_nodes()
    stats = np.zeros((n_rungs, 6))  # sums of lhs, lhs^2, rhs, rhs^2, diff, diff^2
    count = 0
    for start in range(0, noise.n_paths, PATH_CHUNK):
        stop = min(start + PATH_CHUNK, noise.n_paths)
        dWT = _tm(noise.increments_for(start, stop))
        u = control.row_slice(start, stop)
        uT = _tm(u)
        xT = _euler_state(coeffs, g, xi_nodes, uT, dWT)
        ts, xs, xds, vs, vds = _theta_slices_T(g, xT, uT)
        shape = np.broadcast_shapes(xs.shape, vs.shape)
        sxd = _bc(coeffs.diffusion_xd(ts, xs, xds, vs, vds), shape)
        _guard_diffusion_xd(sxd, coeffs.diffusion_xd_floor)
        sx = _bc(coeffs.diffusion_x(ts, xs, xds, vs, vds), shape)
        bxd = _bc(coeffs.drift_xd(ts, xs, xds, vs, vds), shape)
        weight = _phi_block(phi, ts, xs, xds, start, stop, time_major=True)
        lhs_w = sxd * weight
        rhs_w = (bxd / sxd - sx) * weight
        rows = _BaseRows(coeffs, g, xT, uT, second=False)
        n_rows = stop - start
        for r, ((i_tau, w), s) in enumerate(zip(windows, spikes)):
            uepsT = _tm(apply_spike(ControlPath(grid=g, values=u), s).values)
            jcols = _forcing_columns(g, i_tau, w)
            x1T, _ = _first_variation(coeffs, g, xT, uT, uepsT, dWT, jcols, rows)
            x1s = x1T[m : m + nf]
            x1ds = x1T[:nf]
            lhs_p = np.broadcast_to((lhs_w * x1s * x1ds).sum(axis=0) * dt, (n_rows,))
            rhs_p = np.broadcast_to((rhs_w * x1s**2).sum(axis=0) * dt, (n_rows,))
            diff = lhs_p - rhs_p
            stats[r] += [
                lhs_p.sum(),
                (lhs_p**2).sum(),
                rhs_p.sum(),
                (rhs_p**2).sum(),
                diff.sum(),
                (diff**2).sum(),
            ]
        count += n_rows

    rungs = []
    for r, s in enumerate(spikes):
        sums = stats[r]

        def stat(total, total_sq):
            mean = total / count
            var = max(total_sq / count - mean**2, 0.0)
            return mean, float(np.sqrt(var / count))

        lhs, lhs_se = stat(sums[0], sums[1])
        rhs, rhs_se = stat(sums[2], sums[3])
        res, res_se = stat(sums[4], sums[5])
        rungs.append(
            CrossTermRung(
                epsilon=s.width,
                lhs=lhs,
                lhs_stderr=lhs_se,
                rhs=rhs,
                rhs_stderr=rhs_se,
                residual=res,
                residual_stderr=res_se,
            )
        )
    return CrossTermReport(rungs=tuple(rungs), n_paths=count)


def hamiltonian_cross_weight(
    spec: ProblemSpec, control: ControlPath, states: StatePaths, first: FirstAdjointPaths
) -> np.ndarray:
    """The mixed-derivative weight H_xxd / diffusion_xd along the base paths,
    the weight the optimality proof feeds into the cross-term identity."""
    g = spec.grid
    coeffs = spec.coefficients
    ts, xs, xds, vs, vds = _theta_slices(g, states.values, control.values)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    sxd = _bc(coeffs.diffusion_xd(ts, xs, xds, vs, vds), shape)
    _guard_diffusion_xd(sxd, coeffs.diffusion_xd_floor)
    lxxd = _bc(coeffs.running_cost_xxd(ts, xs, xds, vs, vds), shape)
    bxxd = _bc(coeffs.drift_xxd(ts, xs, xds, vs, vds), shape)
    sxxd = _bc(coeffs.diffusion_xxd(ts, xs, xds, vs, vds), shape)
    p = first.p[:, g.i_zero : g.i_zero + g.n_forward]
    q = first.q[:, g.i_zero : g.i_zero + g.n_forward]
    return (lxxd + p * bxxd + q * sxxd) / sxd


# ---------------------------------------------------------------------------
# duality diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    residual: float
    stderr: float
    n_paths: int


def duality_gap(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    states: StatePaths,
    x1: np.ndarray,
    first: FirstAdjointPaths,
) -> DualityReport:
    """Discrete integration-by-parts check pairing (p, q) with x1.

    lhs is the first-order cost response: terminal sensitivity against x1(T)
    plus the integrated running-cost gradients against (x1, x1_delayed).  rhs
    integrates p and q against the spike forcing.  For an exact adjoint the
    two agree; the report's residual isolates regression and time-step error.
    """
    i_tau, w = validate_spike(spec, spike)
    g = spec.grid
    m, nf, dt = g.i_zero, g.n_forward, g.dt
    coeffs = spec.coefficients
    x, u = states.values, control.values
    u_eps = apply_spike(control, spike).values
    ts, xs, xds, vs, vds = _theta_slices(g, x, u)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    lx = _bc(coeffs.running_cost_x(ts, xs, xds, vs, vds), shape)
    lxd = _bc(coeffs.running_cost_xd(ts, xs, xds, vs, vds), shape)
    x1s, x1ds = x1[:, m : m + nf], x1[:, :nf]
    lhs_p = (lx * x1s + lxd * x1ds).sum(axis=1) * dt
    lhs_p = lhs_p + _bc(coeffs.terminal_x(x[:, -1]), (x.shape[0],)) * x1[:, -1]

    jcols = _forcing_columns(g, i_tau, w)
    tc = ts[jcols]
    xc, xdc = xs[:, jcols], xds[:, jcols]
    vc, vdc = vs[:, jcols], vds[:, jcols]
    vec, vedc = u_eps[:, m + jcols], u_eps[:, jcols]
    cshape = np.broadcast_shapes(xc.shape, vec.shape)
    delta_b = _bc(coeffs.drift(tc, xc, xdc, vec, vedc), cshape) - _bc(
        coeffs.drift(tc, xc, xdc, vc, vdc), cshape
    )
    delta_s = _bc(coeffs.diffusion(tc, xc, xdc, vec, vedc), cshape) - _bc(
        coeffs.diffusion(tc, xc, xdc, vc, vdc), cshape
    )
    p_c = first.p[:, m + jcols]
    q_c = first.q[:, m + jcols]
    rhs_p = (p_c * delta_b + q_c * delta_s).sum(axis=1) * dt

    n = max(lhs_p.shape[0], rhs_p.shape[0])
    diff = np.broadcast_to(lhs_p, (n,)) - np.broadcast_to(rhs_p, (n,))
    mean = float(np.mean(diff))
    stderr = float(np.std(diff, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DualityReport(
        lhs=float(np.mean(np.broadcast_to(lhs_p, (n,)))),
        rhs=float(np.mean(np.broadcast_to(rhs_p, (n,)))),
        residual=mean,
        stderr=stderr,
        n_paths=n,
    )
