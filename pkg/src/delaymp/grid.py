"""Time discretization and reproducible Brownian noise.

The grid step is defined as ``dt = delay / steps_per_delay`` so that shifting
any node by the delay is an exact index shift.  All arrays in the toolkit are
indexed by global node number ``k``, where node ``k`` sits at time
``-delay + k*dt``:

* node ``i_zero = steps_per_delay`` is t = 0,
* node ``i_horizon`` is t = T,
* node ``n_nodes - 1`` is t = T + delay.

States and controls occupy nodes ``[0, i_horizon]``; adjoint processes occupy
``[i_zero, n_nodes - 1]`` with their zero extension beyond t = T.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

_MASK64 = (1 << 64) - 1

#: Fixed path-chunk size used by memory-bounded ensemble sweeps.  A constant
#: (never derived from worker count or free memory) so that chunked
#: accumulation always uses the same reduction tree.
PATH_CHUNK = 32768


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [-delay, horizon + delay].

    Build instances with :func:`make_grid`, which validates divisibility.
    """

    horizon: float
    delay: float
    steps_per_delay: int

    @property
    def dt(self) -> float:
        return self.delay / self.steps_per_delay

    @property
    def n_forward(self) -> int:
        """Number of steps on [0, horizon]."""
        return round(self.horizon * self.steps_per_delay / self.delay)

    @property
    def i_zero(self) -> int:
        return self.steps_per_delay

    @property
    def i_horizon(self) -> int:
        return self.steps_per_delay + self.n_forward

    @property
    def n_nodes(self) -> int:
        """Node count over [-delay, horizon + delay]."""
        return self.n_forward + 2 * self.steps_per_delay + 1

    @cached_property
    def times(self) -> np.ndarray:
        t = (np.arange(self.n_nodes) - self.steps_per_delay) * self.dt
        t.flags.writeable = False
        return t

    def time_of(self, node: int) -> float:
        return (node - self.steps_per_delay) * self.dt

    def index_of(self, t: float) -> int:
        """Node index of a grid time; rejects off-grid times."""
        k = round((t + self.delay) / self.dt)
        if k < 0 or k >= self.n_nodes or abs(self.time_of(k) - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigurationError(f"time {t!r} is not a node of {self}")
        return k

    def __str__(self) -> str:  # used in error messages
        return (
            f"TimeGrid(horizon={self.horizon}, delay={self.delay}, "
            f"steps_per_delay={self.steps_per_delay})"
        )


def make_grid(horizon: float, delay: float, steps_per_delay: int) -> TimeGrid:
    """Build a uniform grid with dt = delay / steps_per_delay.

    Raises
    ------
    ConfigurationError
        If the horizon is not an exact multiple of dt, or the shape
        parameters are out of range.
    """
    if not horizon > 0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    if not 0 < delay <= horizon:
        raise ConfigurationError(
            f"delay must satisfy 0 < delay <= horizon, got delay={delay}, horizon={horizon}"
        )
    if steps_per_delay < 1:
        raise ConfigurationError(f"steps_per_delay must be >= 1, got {steps_per_delay}")
    ratio = horizon * steps_per_delay / delay
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)) or round(ratio) < 1:
        dt = delay / steps_per_delay
        raise ConfigurationError(
            f"horizon {horizon} is not an integer multiple of dt = delay/steps_per_delay "
            f"= {delay}/{steps_per_delay} = {dt}"
        )
    return TimeGrid(float(horizon), float(delay), int(steps_per_delay))


def _path_stream(seed: int, path: int) -> np.random.Generator:
    # Counter-based stream: the 128-bit Philox key is (seed, path index), so
    # increment (path, step) is a pure function of (seed, path, step) and any
    # path subset regenerates bit-identically regardless of partitioning.
    key = np.array([seed & _MASK64, path & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class NoiseEnsemble:
    """Brownian increments over [0, horizon], one stream per path.

    ``increments_for`` materializes any contiguous block of paths; the
    ``increments`` property caches the full (n_paths, n_forward) array.
    Increment ``[i, j]`` covers the step from node ``i_zero + j`` to
    ``i_zero + j + 1`` and has variance dt.
    """

    grid: TimeGrid
    seed: int
    n_paths: int

    def increments_for(self, start: int, stop: int) -> np.ndarray:
        stop = min(stop, self.n_paths)
        n_steps = self.grid.n_forward
        scale = np.sqrt(self.grid.dt)
        out = np.empty((stop - start, n_steps))
        for row, path in enumerate(range(start, stop)):
            out[row] = _path_stream(self.seed, path).standard_normal(n_steps)
        out *= scale
        return out

    @cached_property
    def increments(self) -> np.ndarray:
        out = self.increments_for(0, self.n_paths)
        out.flags.writeable = False
        return out


def sample_noise(grid: TimeGrid, seed: int, n_paths: int) -> NoiseEnsemble:
    """Create the deterministic noise ensemble keyed by (grid, seed, n_paths)."""
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    return NoiseEnsemble(grid, int(seed), int(n_paths))
