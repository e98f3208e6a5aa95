"""
Forward solver for the difference delay equation on a uniform grid.

The scheme marches t_k = k h. Delayed values come from linear interpolation,
the distributed term from a composite trapezoid over s-nodes {0, h, 2h, ...}
clamped to [0, L_N]. The s = 0 node makes every step a d x d linear solve.

x equals the initial segment phi on [-L_N, 0] (t = 0 included); the equation
holds for t > 0, so the solution may jump at t = 0. The right limit x(0+) is
kept separately and used for interpolation on (0, h).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.linalg import lu_factor, lu_solve

from delay_system import DelaySystem, GridFunction, grid_size
from errors import GridError, StepTooLargeError

logger = logging.getLogger(__name__)

# Times within ZERO_SLACK * h of 0 are read from the initial segment.
ZERO_SLACK = 1e-9


@dataclass(frozen=True)
class TrapezoidRule:
    """Composite trapezoid over s in [0, L] with nodes i h and a partial last cell."""

    h: float
    cells: int
    weights: np.ndarray
    remainder: float

    @property
    def tail_weight(self) -> float:
        return 0.5 * self.remainder

    @classmethod
    def build(cls, length: float, h: float) -> "TrapezoidRule":
        cells = int(math.floor(length / h + 1e-9))
        remainder = length - cells * h
        if remainder < 1e-9 * h:
            remainder = 0.0
        weights = np.full(cells + 1, h)
        weights[0] = 0.5 * h
        weights[-1] = 0.5 * h + 0.5 * remainder
        return cls(h, cells, weights, remainder)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Solution of the initial-value problem on [-L_N, T].

    nodes[k] holds x(k h) for k = 0..n with nodes[0] = phi(0); right_limit
    holds x(0+).
    """

    system: DelaySystem
    phi: GridFunction
    control: Optional[GridFunction]
    h: float
    nodes: np.ndarray
    right_limit: np.ndarray
    residual: float

    @property
    def T(self) -> float:
        return (self.nodes.shape[0] - 1) * self.h

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.nodes.shape[0])

    def evaluate(self, t: Union[float, np.ndarray]) -> np.ndarray:
        """x(t) for t in [-L_N, T]: phi for t <= 0, interpolated nodes after."""
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1)
        out = np.empty((flat.size, self.system.d))
        past = flat <= ZERO_SLACK * self.h
        if past.any():
            out[past] = self.phi.evaluate(flat[past], outside="clamp")
        if (~past).any():
            values = self.nodes.copy()
            values[0] = self.right_limit
            out[~past] = _interpolate(values, flat[~past] / self.h)
        return out.reshape(t.shape + (self.system.d,))

    @property
    def grid(self) -> GridFunction:
        """The trajectory as one GridFunction starting at the first grid node <= -L_N."""
        lead = int(math.ceil(self.system.max_delay / self.h - 1e-9))
        past_times = -self.h * np.arange(lead, 0, -1)
        past = self.phi.evaluate(past_times, outside="clamp")
        return GridFunction(-lead * self.h, self.h, np.vstack([past, self.nodes]), self.phi.q)

    def to_frame(self) -> pd.DataFrame:
        """One row per node: the segment nodes on [-L_N, 0), then 0..T."""
        past_mask = self.phi.times < -ZERO_SLACK * self.phi.h
        past_times = self.phi.times[past_mask]
        times = np.concatenate([past_times, self.times])
        values = np.vstack([self.phi.samples[past_mask], self.nodes])
        frame = pd.DataFrame(values, columns=[f"x{i + 1}" for i in range(self.system.d)])
        frame.insert(0, "t", times)
        return frame

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Trajectory written to {path}")
        return path


def _interpolate(values: np.ndarray, position: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(position).astype(np.int64), 0, values.shape[0] - 2)
    frac = np.clip(position - idx, 0.0, 1.0).reshape((-1,) + (1,) * (values.ndim - 1))
    return (1.0 - frac) * values[idx] + frac * values[idx + 1]


def check_step(system: DelaySystem, h: float) -> None:
    """Raise StepTooLargeError if h is too coarse for the delays or the implicit node."""
    if not h > 0:
        raise GridError(f"step must be positive, got {h}")
    if h > system.delays[0] * (1 + 1e-12):
        raise StepTooLargeError(
            f"step too large: h={h} exceeds the smallest delay {system.delays[0]}"
        )
    g0 = np.linalg.norm(0.5 * h * system.kernel.evaluate(0.0), ord=2)
    if g0 >= 0.5:
        raise StepTooLargeError(f"step too large: ||(h/2) g(0)|| = {g0:.3g} >= 1/2")


def fit_step(T: float, h: float) -> Tuple[int, float]:
    """Number of steps and the (possibly reduced) step that divides T."""
    if not T > 0:
        raise GridError(f"horizon must be positive, got T={T}")
    n = grid_size(T, h) - 1
    fitted = T / n
    if abs(fitted - h) > 1e-9 * h:
        logger.warning(f"Step adjusted from {h} to {fitted} so that T={T} is a whole number of steps")
    return n, fitted


def march(system: DelaySystem, h: float, n: int,
          history: Callable[[np.ndarray], np.ndarray],
          forcing: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Implicit-trapezoid march for x(t) = sum A_j x(t-L_j) + int g(s) x(t-s) ds + f(t).

    Args:
        system: The delay system (B is not used).
        h: Step.
        n: Number of steps.
        history: Maps an array of times <= 0 to values of shape (len, d, c).
        forcing: f at the nodes, shape (n+1, d, c).

    Returns:
        Tuple of nodes (n+1, d, c), where nodes[0] is the right limit x(0+),
        and the largest relative residual of the implicit node equations.
    """
    check_step(system, h)
    d, c = system.d, forcing.shape[2]
    length = system.max_delay
    rule = TrapezoidRule.build(length, h)
    cells = rule.cells
    raw_kernel = system.kernel.evaluate(h * np.arange(cells + 1))
    weighted = raw_kernel * rule.weights[:, None, None]
    tail_kernel = rule.tail_weight * system.kernel.evaluate(length) if rule.remainder > 0 else None

    lead = cells + 1
    past = history(-h * np.arange(lead, -1, -1))
    phi0 = past[-1]
    line = np.zeros((lead + n + 1, d, c))
    line[:lead + 1] = past
    nodes = np.zeros((n + 1, d, c))

    implicit = np.eye(d) - weighted[0]
    factors = lu_factor(implicit)
    # kernel rows for s-nodes i = cells..1 laid out against line[k+lead-cells : k+lead]
    if cells > 0:
        stacked = weighted[1:][::-1].transpose(1, 0, 2).reshape(d, cells * d)
    jump_fix = None
    if cells > 0:
        jump_fix = raw_kernel[cells] * (0.5 * h - 0.5 * rule.weights[cells]), \
            raw_kernel[cells] * (0.5 * rule.remainder - 0.5 * rule.weights[cells])

    def recall(times: np.ndarray, k: int) -> np.ndarray:
        out = np.empty((times.size, d, c))
        before = times <= ZERO_SLACK * h
        if before.any():
            out[before] = history(times[before])
        if (~before).any():
            out[~before] = _interpolate(nodes[:k], times[~before] / h)
        return out

    # right limit at t = 0: every s-node reads the initial segment
    rhs = forcing[0] + np.einsum("jab,jbc->ac", system.A, history(-system.delays))
    rhs = rhs + np.einsum("iab,ibc->ac", weighted, past[::-1][:cells + 1])
    if tail_kernel is not None:
        rhs = rhs + tail_kernel @ history(np.array([-length]))[0]
    nodes[0] = rhs
    line[lead] = 0.5 * (nodes[0] + phi0)

    worst = 0.0
    for k in range(1, n + 1):
        t = k * h
        rhs = forcing[k] + np.einsum("jab,jbc->ac", system.A, recall(t - system.delays, k))
        if cells > 0:
            window = line[k + lead - cells:k + lead].reshape(cells * d, c)
            rhs = rhs + stacked @ window
            if k == cells:
                rhs = rhs + jump_fix[0] @ nodes[0] + jump_fix[1] @ phi0
        if tail_kernel is not None:
            rhs = rhs + tail_kernel @ recall(np.array([t - length]), k)[0]
        x = lu_solve(factors, rhs)
        worst = max(worst, float(np.max(np.abs(implicit @ x - rhs)) / max(1.0, np.max(np.abs(rhs)))))
        nodes[k] = x
        line[k + lead] = x
    return nodes, worst


def solve_ivp(system: DelaySystem, phi: GridFunction, u: Optional[GridFunction] = None,
              T: float = 1.0, h: float = 1e-3) -> Trajectory:
    """
    Solve the initial-value problem with initial segment phi and control u.

    Args:
        system: Delay system.
        phi: Initial segment on [-L_N, 0].
        u: Control on [0, T]; None for the homogeneous equation.
        T: Horizon.
        h: Step; reduced to T/n when it does not divide T.

    Returns:
        Trajectory: the computed solution.
    """
    n, h = fit_step(T, h)
    _check_segment(system, phi)
    if abs(phi.h - h) > 1e-9 * h:
        logger.warning(f"Initial segment sampled with step {phi.h}, resampling by interpolation to {h}")
    if u is not None and u.value_shape != (system.m,):
        raise GridError(f"control has values of shape {u.value_shape}, expected ({system.m},)")
    if u is not None and (abs(u.h - h) > 1e-9 * h or abs(u.t_start) > ZERO_SLACK * h):
        logger.warning(f"Control sampled with step {u.h} from t={u.t_start}, resampling by interpolation")

    logger.debug(f"Solving IVP: d={system.d}, T={T}, h={h}, steps={n}")
    times = h * np.arange(n + 1)
    forcing = np.zeros((n + 1, system.d, 1))
    if u is not None:
        forcing[:, :, 0] = u.evaluate(times) @ system.B.T

    def history(t: np.ndarray) -> np.ndarray:
        return phi.evaluate(t, outside="clamp")[:, :, None]

    nodes, residual = march(system, h, n, history, forcing)
    values = nodes[:, :, 0].copy()
    right_limit = values[0].copy()
    values[0] = phi.evaluate(0.0, outside="clamp")
    logger.debug(f"IVP solved, max node residual {residual:.2e}")
    return Trajectory(system, phi, u, h, values, right_limit, residual)


def _check_segment(system: DelaySystem, phi: GridFunction) -> None:
    slack = ZERO_SLACK * phi.h + 1e-12 * system.max_delay
    if phi.value_shape != (system.d,):
        raise GridError(f"initial segment has values of shape {phi.value_shape}, expected ({system.d},)")
    if phi.t_start > -system.max_delay + slack or phi.t_end < -slack:
        raise GridError(
            f"initial segment covers [{phi.t_start}, {phi.t_end}], expected [-{system.max_delay}, 0]"
        )


def segment_grid(length: float, h: float) -> Tuple[float, int]:
    """
    First node and node count of the segment grid with step h ending at 0.

    Segment nodes are simulation nodes T - k h, so the first node lies in
    (-length - h, -length].
    """
    n = int(math.ceil(length / h - 1e-9)) + 1
    return -(n - 1) * h, n


def state_segment(traj: Trajectory, t: float) -> GridFunction:
    """x_t(theta) = x(t + theta) on the segment grid covering [-L_N, 0]."""
    slack = ZERO_SLACK * traj.h
    if t < -slack or t > traj.T + slack:
        raise GridError(f"segment time {t} outside [0, {traj.T}]")
    if abs(t) <= slack:
        return traj.phi
    start, n = segment_grid(traj.system.max_delay, traj.h)
    theta = start + traj.h * np.arange(n)
    return GridFunction(start, traj.h, traj.evaluate(t + theta), traj.phi.q)


def flow(system: DelaySystem, phi: GridFunction, t: float, h: float = 1e-3) -> GridFunction:
    """Homogeneous flow: the segment x_t of the solution started from phi."""
    return state_segment(solve_ivp(system, phi, None, t, h), t)


def extend_state(system: DelaySystem, y0: GridFunction, T: float) -> GridFunction:
    """
    Extend y0 on [0, L_N] to [0, T] by the homogeneous dynamics for t >= L_N.

    The extension is the solution started from the segment y0 shifted to
    [-L_N, 0], moved back by L_N.
    """
    length = system.max_delay
    if T < length * (1 - 1e-12):
        raise GridError(f"extension horizon T={T} is shorter than the largest delay {length}")
    phi = GridFunction(y0.t_start - length, y0.h, y0.samples, y0.q)
    if T - length <= ZERO_SLACK * y0.h:
        return y0
    traj = solve_ivp(system, phi, None, T - length, y0.h)
    n = grid_size(T, y0.h)
    step = T / (n - 1)
    times = step * np.arange(n)
    return GridFunction(0.0, step, traj.evaluate(times - length), y0.q)


def lq_norm(f: GridFunction, q: Optional[float] = None) -> float:
    """L^q norm of the interpolant by the composite trapezoid rule (q defaults to f.q)."""
    q = f.q if q is None else q
    if q < 1:
        raise GridError(f"norm exponent must be >= 1, got {q}")
    pointwise = np.linalg.norm(f.samples.reshape(f.n, -1), axis=1) ** q
    return float(trapezoid(pointwise, dx=f.h) ** (1.0 / q))
