"""Forward simulation of the controlled SDDE and its spike-variation expansion.

Everything runs on the shared node indexing of :class:`~delaymp.grid.TimeGrid`:
state and control arrays have one column per node of [-delay, horizon], and the
delayed value at node k is column k - steps_per_delay, with no interpolation.

Integrands are evaluated at left endpoints (explicit Euler), which is the
non-anticipative evaluation Ito integrals require.  Spike perturbations use
the half-open window [tau, tau + width): the node at exactly tau + width keeps
the base control, so every node is owned by exactly one regime.

Internally the time-stepping kernels work on time-major arrays (node, path)
so each step touches contiguous memory; the public containers stay
path-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, SimulationError
from .grid import PATH_CHUNK, NoiseEnsemble, TimeGrid
from .model import CoefficientSet, ControlPath, ProblemSpec

# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatePaths:
    """State values on nodes of [-delay, horizon], one row per path."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


@dataclass(frozen=True)
class VariationPaths:
    """First- and second-order variation paths, zero on [-delay, 0]."""

    grid: TimeGrid
    x1: np.ndarray
    x2: np.ndarray

    @property
    def x3(self) -> np.ndarray:
        return self.x1 + self.x2


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int


@dataclass(frozen=True)
class SpikeSpec:
    """A control perturbation equal to ``value`` on [tau, tau + width).

    ``value`` is a deterministic constant in the control domain; tau and
    tau + width must be grid nodes with the window inside [0, horizon].
    """

    tau: float
    width: float
    value: float


def _mean_stderr(samples: np.ndarray) -> tuple[float, float]:
    n = samples.shape[0]
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, stderr


def cost_estimate(per_path: np.ndarray) -> CostEstimate:
    mean, stderr = _mean_stderr(per_path)
    return CostEstimate(mean=mean, stderr=stderr, n_paths=per_path.shape[0])


# ---------------------------------------------------------------------------
# spike handling
# ---------------------------------------------------------------------------


def spike_window(grid: TimeGrid, spike: SpikeSpec) -> tuple[int, int]:
    """Validate a spike against the grid; return (start node, steps)."""
    i_tau = grid.index_of(spike.tau)
    if not grid.i_zero <= i_tau < grid.i_horizon:
        raise ConfigurationError(f"spike time {spike.tau} must lie in [0, horizon)")
    if spike.width <= 0:
        raise ConfigurationError(f"spike width must be positive, got {spike.width}")
    w = round(spike.width / grid.dt)
    if w < 1 or abs(w * grid.dt - spike.width) > 1e-9 * max(1.0, spike.width):
        raise ConfigurationError(
            f"spike width {spike.width} is not a positive multiple of dt={grid.dt}"
        )
    if i_tau + w > grid.i_horizon:
        raise ConfigurationError(
            f"spike window [{spike.tau}, {spike.tau + spike.width}] leaves [0, horizon]"
        )
    return i_tau, w


def validate_spike(spec: ProblemSpec, spike: SpikeSpec) -> tuple[int, int]:
    i_tau, w = spike_window(spec.grid, spike)
    if not bool(np.all(spec.domain.contains(spike.value))):
        raise DomainError(f"spike value {spike.value} lies outside the control domain")
    return i_tau, w


def apply_spike(control: ControlPath, spike: SpikeSpec) -> ControlPath:
    """Return the control equal to the spike value on [tau, tau + width) and
    to the base control elsewhere."""
    i_tau, w = spike_window(control.grid, spike)
    values = control.values.copy()
    values[:, i_tau : i_tau + w] = spike.value
    return ControlPath(grid=control.grid, values=values, adapted=control.adapted)


def _forcing_columns(grid: TimeGrid, i_tau: int, w: int) -> np.ndarray:
    """Forward-step columns where a spiked control changes the step's inputs:
    the spike window itself and its delay-shifted image."""
    m, nf = grid.i_zero, grid.n_forward
    direct = np.arange(i_tau - m, min(i_tau - m + w, nf))
    delayed = np.arange(i_tau, min(i_tau + w, nf))  # k - m in window  <=>  j in [i_tau, i_tau + w)
    return np.union1d(direct, delayed)


# ---------------------------------------------------------------------------
# shared slicing helpers
# ---------------------------------------------------------------------------


def _bc(value, shape) -> np.ndarray:
    out = np.asarray(value, dtype=float)
    return out if out.shape == shape else np.broadcast_to(out, shape)


def _theta_slices(grid: TimeGrid, x: np.ndarray, u: np.ndarray, extra: int = 0):
    """Path-major base evaluation-point slices over forward columns
    [0, n_forward + extra)."""
    m, nf = grid.i_zero, grid.n_forward
    stop = nf + extra
    ts = grid.times[m : m + stop]
    return ts, x[:, m : m + stop], x[:, :stop], u[:, m : m + stop], u[:, :stop]


def _theta_slices_T(grid: TimeGrid, xT: np.ndarray, uT: np.ndarray, extra: int = 0):
    """Time-major variant; the time column broadcasts against (node, path)."""
    m, nf = grid.i_zero, grid.n_forward
    stop = nf + extra
    ts = grid.times[m : m + stop][:, None]
    return ts, xT[m : m + stop], xT[:stop], uT[m : m + stop], uT[:stop]


def _tm(values: np.ndarray) -> np.ndarray:
    """Contiguous time-major copy of a path-major array."""
    return np.ascontiguousarray(values.T)


# ---------------------------------------------------------------------------
# Euler kernels (time-major raw arrays; public wrappers below)
# ---------------------------------------------------------------------------


def _euler_state(
    coeffs: CoefficientSet, grid: TimeGrid, xi_nodes: np.ndarray, uT: np.ndarray, dWT: np.ndarray
) -> np.ndarray:
    """Time-major Euler-Maruyama recursion; returns (i_horizon + 1, n)."""
    m, nf, dt = grid.i_zero, grid.n_forward, grid.dt
    n = max(dWT.shape[1], uT.shape[1])
    xT = np.empty((grid.i_horizon + 1, n))
    xT[: m + 1] = xi_nodes[:, None]
    times = grid.times
    for j in range(nf):
        k = m + j
        xk = xT[k]
        b = coeffs.drift(times[k], xk, xT[j], uT[k], uT[j])
        s = coeffs.diffusion(times[k], xk, xT[j], uT[k], uT[j])
        nxt = xk + np.asarray(b, dtype=float) * dt + np.asarray(s, dtype=float) * dWT[j]
        if not np.all(np.isfinite(nxt)):
            bad = int(np.flatnonzero(~np.isfinite(nxt))[0])
            raise SimulationError(
                f"state non-finite at path {bad}, step {j} (t={times[k]:.6g})"
            )
        xT[k + 1] = nxt
    return xT


def _spike_forcing(coeffs, name, grid, xT, uT, uepsT, jcols):
    """Coefficient difference at spiked vs base controls on the forcing rows."""
    m = grid.i_zero
    ts = grid.times[m + jcols][:, None]
    xc, xdc = xT[m + jcols], xT[jcols]
    vc, vdc = uT[m + jcols], uT[jcols]
    vec, vedc = uepsT[m + jcols], uepsT[jcols]
    fn = getattr(coeffs, name)
    cshape = np.broadcast_shapes(xc.shape, vec.shape)
    return _bc(fn(ts, xc, xdc, vec, vedc), cshape) - _bc(fn(ts, xc, xdc, vc, vdc), cshape)


class _BaseRows:
    """Derivative values along the base paths, time-major; computed once and
    shared across the rungs of a ladder (they depend on the base point only)."""

    _FIRST = ("drift_x", "drift_xd", "diffusion_x", "diffusion_xd")
    _SECOND = (
        "drift_xx",
        "drift_xxd",
        "drift_xdxd",
        "diffusion_xx",
        "diffusion_xxd",
        "diffusion_xdxd",
    )

    def __init__(self, coeffs: CoefficientSet, grid: TimeGrid, xT, uT, second: bool = True):
        ts, xs, xds, vs, vds = _theta_slices_T(grid, xT, uT)
        shape = np.broadcast_shapes(xs.shape, vs.shape)
        names = self._FIRST + (self._SECOND if second else ())
        for name in names:
            setattr(self, name, _bc(getattr(coeffs, name)(ts, xs, xds, vs, vds), shape))
        self.shape = shape


def _first_variation(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    xT: np.ndarray,
    uT: np.ndarray,
    uepsT: np.ndarray,
    dWT: np.ndarray,
    jcols: np.ndarray,
    rows: _BaseRows | None = None,
):
    """First variation; returns (x1T, rows) with the coefficient rows reused
    by the second variation."""
    m, nf, dt = grid.i_zero, grid.n_forward, grid.dt
    if rows is None:
        rows = _BaseRows(coeffs, grid, xT, uT)
    bx, bxd, sx, sxd = rows.drift_x, rows.drift_xd, rows.diffusion_x, rows.diffusion_xd

    n = max(dWT.shape[1], rows.shape[1], uepsT.shape[1])
    drift_force = np.zeros((nf, n))
    diff_force = np.zeros((nf, n))
    if jcols.size:
        drift_force[jcols] = _spike_forcing(coeffs, "drift", grid, xT, uT, uepsT, jcols)
        diff_force[jcols] = _spike_forcing(coeffs, "diffusion", grid, xT, uT, uepsT, jcols)

    x1T = np.zeros((grid.i_horizon + 1, n))
    for j in range(nf):
        k = m + j
        x1k = x1T[k]
        x1d = x1T[j]
        drift = bx[j] * x1k + bxd[j] * x1d + drift_force[j]
        diff = sx[j] * x1k + sxd[j] * x1d + diff_force[j]
        x1T[k + 1] = x1k + drift * dt + diff * dWT[j]
    if not np.all(np.isfinite(x1T[-1])):
        bad = int(np.flatnonzero(~np.isfinite(x1T[-1]))[0])
        raise SimulationError(f"first variation non-finite on path {bad}")
    return x1T, rows


def _second_variation(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    xT: np.ndarray,
    uT: np.ndarray,
    uepsT: np.ndarray,
    dWT: np.ndarray,
    jcols: np.ndarray,
    x1T: np.ndarray,
    rows: _BaseRows,
) -> np.ndarray:
    m, nf, dt = grid.i_zero, grid.n_forward, grid.dt
    bx, bxd, sx, sxd = rows.drift_x, rows.drift_xd, rows.diffusion_x, rows.diffusion_xd
    x1s = x1T[m : m + nf]
    x1ds = x1T[:nf]

    # source rows: curvature against x1, plus spike differences of the first
    # derivatives on the forcing rows
    drift_src = 0.5 * rows.drift_xx * x1s**2
    drift_src += rows.drift_xxd * x1s * x1ds
    drift_src += 0.5 * rows.drift_xdxd * x1ds**2
    diff_src = 0.5 * rows.diffusion_xx * x1s**2
    diff_src += rows.diffusion_xxd * x1s * x1ds
    diff_src += 0.5 * rows.diffusion_xdxd * x1ds**2
    if jcols.size:
        for name, src in (("drift", drift_src), ("diffusion", diff_src)):
            d_x = _spike_forcing(coeffs, name + "_x", grid, xT, uT, uepsT, jcols)
            d_xd = _spike_forcing(coeffs, name + "_xd", grid, xT, uT, uepsT, jcols)
            src[jcols] += d_x * x1s[jcols] + d_xd * x1ds[jcols]

    n = max(dWT.shape[1], rows.shape[1], drift_src.shape[1])
    x2T = np.zeros((grid.i_horizon + 1, n))
    for j in range(nf):
        k = m + j
        x2k = x2T[k]
        x2d = x2T[j]
        drift = bx[j] * x2k + bxd[j] * x2d + drift_src[j]
        diff = sx[j] * x2k + sxd[j] * x2d + diff_src[j]
        x2T[k + 1] = x2k + drift * dt + diff * dWT[j]
    if not np.all(np.isfinite(x2T[-1])):
        bad = int(np.flatnonzero(~np.isfinite(x2T[-1]))[0])
        raise SimulationError(f"second variation non-finite on path {bad}")
    return x2T


def _path_costs(coeffs: CoefficientSet, grid: TimeGrid, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-path cost from path-major state/control arrays."""
    ts, xs, xds, vs, vds = _theta_slices(grid, x, u)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    running = _bc(coeffs.running_cost(ts, xs, xds, vs, vds), shape)
    terminal = _bc(coeffs.terminal_cost(x[:, -1]), (shape[0],))
    return running.sum(axis=1) * grid.dt + terminal


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def simulate_state(spec: ProblemSpec, control: ControlPath, noise: NoiseEnsemble) -> StatePaths:
    """Euler-Maruyama simulation of the state under the given control.

    The delayed state is read by exact index shift; the initial segment equals
    the initial path exactly.
    """
    xT = _euler_state(
        spec.coefficients,
        spec.grid,
        spec.initial_state_nodes(),
        _tm(control.values),
        _tm(noise.increments),
    )
    return StatePaths(grid=spec.grid, values=_tm(xT))


def evaluate_cost(
    spec: ProblemSpec,
    control: ControlPath,
    noise: NoiseEnsemble,
    states: StatePaths | None = None,
) -> CostEstimate:
    """Monte Carlo cost: left-endpoint quadrature of the running cost plus the
    terminal cost, averaged over paths."""
    if states is None:
        states = simulate_state(spec, control, noise)
    costs = _path_costs(spec.coefficients, spec.grid, states.values, control.values)
    costs = np.broadcast_to(costs, (max(costs.shape[0], noise.n_paths),))
    return cost_estimate(costs)


def _variation_inputs(spec, control, spike, noise, base):
    i_tau, w = validate_spike(spec, spike)
    u_eps = apply_spike(control, spike)
    jcols = _forcing_columns(spec.grid, i_tau, w)
    return _tm(base.values), _tm(control.values), _tm(u_eps.values), _tm(noise.increments), jcols


def simulate_first_variation(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    base: StatePaths,
) -> np.ndarray:
    """First-order variation driven by the spike forcing, zero on [-delay, 0].

    The forcing acts both on the spike window (direct) and on its delay-shifted
    image (through the delayed control argument).
    """
    xT, uT, uepsT, dWT, jcols = _variation_inputs(spec, control, spike, noise, base)
    x1T, *_ = _first_variation(spec.coefficients, spec.grid, xT, uT, uepsT, dWT, jcols)
    return _tm(x1T)


def simulate_second_variation(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    base: StatePaths,
    x1: np.ndarray,
) -> np.ndarray:
    """Second-order variation: curvature sources in the first variation plus
    spike differences of the first derivatives; zero on [-delay, 0]."""
    xT, uT, uepsT, dWT, jcols = _variation_inputs(spec, control, spike, noise, base)
    g = spec.grid
    coeffs = spec.coefficients
    rows = _BaseRows(coeffs, g, xT, uT)
    x2T = _second_variation(coeffs, g, xT, uT, uepsT, dWT, jcols, _tm(x1), rows)
    return _tm(x2T)


def simulate_variations(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    base: StatePaths,
) -> VariationPaths:
    """Both variation orders in one pass (shares the coefficient sweeps)."""
    xT, uT, uepsT, dWT, jcols = _variation_inputs(spec, control, spike, noise, base)
    coeffs = spec.coefficients
    x1T, rows = _first_variation(coeffs, spec.grid, xT, uT, uepsT, dWT, jcols)
    x2T = _second_variation(coeffs, spec.grid, xT, uT, uepsT, dWT, jcols, x1T, rows)
    return VariationPaths(grid=spec.grid, x1=_tm(x1T), x2=_tm(x2T))


# ---------------------------------------------------------------------------
# expansion study (chunked over paths)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionRung:
    epsilon: float
    x1_sq_sup: float
    x1_sq_stderr: float
    x2_sq_sup: float
    x2_sq_stderr: float
    residual_sup: float
    residual_stderr: float

    @property
    def residual_over_eps_sq(self) -> float:
        return self.residual_sup / self.epsilon**2


@dataclass(frozen=True)
class ExpansionStudy:
    rungs: tuple[ExpansionRung, ...]
    n_paths: int

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([r.epsilon for r in self.rungs])

    def slope(self, metric: str) -> float:
        vals = np.array([getattr(r, metric) for r in self.rungs])
        return loglog_slope(self.epsilons, vals)

    @property
    def residual_ratio_decreasing(self) -> bool:
        ratios = [r.residual_over_eps_sq for r in self.rungs]
        return all(b < a for a, b in zip(ratios, ratios[1:]))


def loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


class _NodeMoments:
    """Per-node running sum and sum of squares of a squared process
    (time-major blocks)."""

    def __init__(self, width: int):
        self.total = np.zeros(width)
        self.total_sq = np.zeros(width)
        self.count = 0

    def add(self, values_sq: np.ndarray, n_rows: int):
        block = np.broadcast_to(values_sq, (values_sq.shape[0], n_rows))
        self.total += block.sum(axis=1)
        self.total_sq += (block**2).sum(axis=1)
        self.count += n_rows

    def sup(self, lo: int) -> tuple[float, float]:
        mean = self.total / self.count
        node = int(lo + np.argmax(mean[lo:]))
        var = self.total_sq[node] / self.count - mean[node] ** 2
        stderr = float(np.sqrt(max(var, 0.0) / self.count))
        return float(mean[node]), stderr


def _ladder(spec: ProblemSpec, spike: SpikeSpec, n_rungs: int, min_steps: int):
    spikes = [
        SpikeSpec(tau=spike.tau, width=spike.width / 2**r, value=spike.value)
        for r in range(n_rungs)
    ]
    windows = []
    for s in spikes:
        i_tau, w = validate_spike(spec, s)
        if w < min_steps:
            raise ConfigurationError(
                f"spike width {s.width} covers {w} steps; ladder needs >= "
                f"{min_steps} steps per spike on the smallest rung"
            )
        windows.append((i_tau, w))
    return spikes, windows


def expansion_study(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    n_rungs: int = 4,
    min_steps_per_spike: int = 8,
) -> ExpansionStudy:
    """Dyadic-ladder study of the spike expansion under common random numbers.

    For each epsilon = width / 2^r the study reports sup-over-nodes Monte Carlo
    estimates of E|x1|^2, E|x2|^2 and E|x_eps - x - x1 - x2|^2, with all four
    processes driven by identical noise.  Paths are processed in fixed-size
    chunks so the reduction tree (and hence the output) never depends on how
    work is partitioned.
    """
    g = spec.grid
    spikes, windows = _ladder(spec, spike, n_rungs, min_steps_per_spike)
    width = g.i_horizon + 1
    lo = g.i_zero
    moments = [(_NodeMoments(width), _NodeMoments(width), _NodeMoments(width)) for _ in spikes]
    coeffs = spec.coefficients
    xi_nodes = spec.initial_state_nodes()

    for start in range(0, noise.n_paths, PATH_CHUNK):
        stop = min(start + PATH_CHUNK, noise.n_paths)
        dWT = _tm(noise.increments_for(start, stop))
        u = control.row_slice(start, stop)
        uT = _tm(u)
        xT = _euler_state(coeffs, g, xi_nodes, uT, dWT)
        rows = _BaseRows(coeffs, g, xT, uT)
        n_rows = stop - start
        for (i_tau, w), s, (m1, m2, mres) in zip(windows, spikes, moments):
            uepsT = _tm(apply_spike(ControlPath(grid=g, values=u), s).values)
            jcols = _forcing_columns(g, i_tau, w)
            xepsT = _euler_state(coeffs, g, xi_nodes, uepsT, dWT)
            x1T, _ = _first_variation(coeffs, g, xT, uT, uepsT, dWT, jcols, rows)
            x2T = _second_variation(coeffs, g, xT, uT, uepsT, dWT, jcols, x1T, rows)
            m1.add(x1T**2, n_rows)
            m2.add(x2T**2, n_rows)
            mres.add((xepsT - xT - x1T - x2T) ** 2, n_rows)

    rungs = []
    for s, (m1, m2, mres) in zip(spikes, moments):
        v1, e1 = m1.sup(lo)
        v2, e2 = m2.sup(lo)
        vr, er = mres.sup(lo)
        rungs.append(
            ExpansionRung(
                epsilon=s.width,
                x1_sq_sup=v1,
                x1_sq_stderr=e1,
                x2_sq_sup=v2,
                x2_sq_stderr=e2,
                residual_sup=vr,
                residual_stderr=er,
            )
        )
    return ExpansionStudy(rungs=tuple(rungs), n_paths=noise.n_paths)


def expansion_residual(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    n_rungs: int = 4,
    min_steps_per_spike: int = 8,
) -> list[tuple[float, float, float]]:
    """Residual curve (epsilon, sup-node E|x_eps - x - x1 - x2|^2, stderr)."""
    study = expansion_study(spec, control, spike, noise, n_rungs, min_steps_per_spike)
    return [(r.epsilon, r.residual_sup, r.residual_stderr) for r in study.rungs]


def variational_inequality_lhs(
    spec: ProblemSpec,
    control: ControlPath,
    spike: SpikeSpec,
    noise: NoiseEnsemble,
    states: StatePaths,
    variations: VariationPaths,
) -> CostEstimate:
    """Monte Carlo estimate of the full expansion of the cost difference.

    Combines the first- and second-order cost terms against the variations,
    the spike difference of the running cost and the terminal terms.  At an
    optimal control this quantity is bounded below by a quantity vanishing
    faster than epsilon.
    """
    i_tau, w = validate_spike(spec, spike)
    g = spec.grid
    coeffs = spec.coefficients
    u = control.values
    u_eps = apply_spike(control, spike).values
    x = states.values
    x1, x2 = variations.x1, variations.x2
    ts, xs, xds, vs, vds = _theta_slices(g, x, u)
    shape = np.broadcast_shapes(xs.shape, vs.shape)
    x1s, x1ds = x1[:, g.i_zero : g.i_zero + g.n_forward], x1[:, : g.n_forward]
    x2s, x2ds = x2[:, g.i_zero : g.i_zero + g.n_forward], x2[:, : g.n_forward]

    integrand = _bc(coeffs.running_cost_x(ts, xs, xds, vs, vds), shape) * (x1s + x2s)
    integrand = integrand + _bc(coeffs.running_cost_xd(ts, xs, xds, vs, vds), shape) * (
        x1ds + x2ds
    )
    integrand += 0.5 * _bc(coeffs.running_cost_xx(ts, xs, xds, vs, vds), shape) * x1s**2
    integrand += _bc(coeffs.running_cost_xxd(ts, xs, xds, vs, vds), shape) * x1s * x1ds
    integrand += 0.5 * _bc(coeffs.running_cost_xdxd(ts, xs, xds, vs, vds), shape) * x1ds**2

    jcols = _forcing_columns(g, i_tau, w)
    if jcols.size:
        tc = ts[jcols]
        xc, xdc = xs[:, jcols], xds[:, jcols]
        vc, vdc = vs[:, jcols], vds[:, jcols]
        vec, vedc = u_eps[:, g.i_zero + jcols], u_eps[:, jcols]
        cshape = np.broadcast_shapes(xc.shape, vec.shape)
        delta_l = _bc(coeffs.running_cost(tc, xc, xdc, vec, vedc), cshape) - _bc(
            coeffs.running_cost(tc, xc, xdc, vc, vdc), cshape
        )
        integrand[:, jcols] += delta_l

    x_T = x[:, -1]
    terminal = _bc(coeffs.terminal_x(x_T), (x.shape[0],)) * (x1[:, -1] + x2[:, -1])
    terminal = terminal + 0.5 * _bc(coeffs.terminal_xx(x_T), (x.shape[0],)) * x1[:, -1] ** 2

    per_path = integrand.sum(axis=1) * g.dt + terminal
    per_path = np.broadcast_to(per_path, (max(per_path.shape[0], noise.n_paths),))
    return cost_estimate(per_path)
