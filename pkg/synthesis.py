"""
Numerical control synthesis: Tikhonov-regularized least squares on the
discretized input map E(T), end-to-end verification through the simulator,
and residual-versus-horizon curves.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq
from scipy.sparse.linalg import svds

from delay_system import DelaySystem, GridFunction
from errors import ConfigError
from fundamental import (DEFAULT_MAX_ATOMS, DEFAULT_MAX_MATRIX_ENTRIES, BVFundamentalSolution,
                         fundamental_solution, input_map, input_response)
from simulator import fit_step, lq_norm, solve_ivp, state_segment

logger = logging.getLogger(__name__)

AUTO_LAMBDA_FACTOR = 1e-8


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    """
    Control on [0, T] and the segment it reaches from the zero state.

    residual = ||achieved - target||_q / ||target||_q (0 when the target is 0).
    carried marks a control taken over from a shorter horizon.
    """

    control: GridFunction
    achieved: GridFunction
    target: GridFunction
    residual: float
    lam: float
    T: float
    h: float
    q: float
    sigma_max: float
    carried: bool = False

    @property
    def condition(self) -> float:
        """(sigma_max^2 + lambda) / lambda, the conditioning of the regularized system."""
        return (self.sigma_max ** 2 + self.lam) / self.lam

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.control.samples, columns=[f"u{i + 1}" for i in range(self.control.samples.shape[1])])
        frame.insert(0, "t", self.control.times)
        return frame

    def save_control_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Control written to {path}")
        return path


def relative_residual(achieved: GridFunction, target: GridFunction, q: float) -> float:
    """
    ||achieved - target||_q / ||target||_q, absolute when the target is zero.

    The target is read on the grid of achieved, held at its end values where
    that grid reaches past it.
    """
    if not achieved.same_grid(target):
        target = target.resample(achieved.t_start, achieved.h, achieved.n, outside="clamp")
    difference = lq_norm(achieved - target, q)
    scale = lq_norm(target, q)
    return difference / scale if scale > 0 else difference


def _trapezoid_weights(n: int, step: float) -> np.ndarray:
    weights = np.full(n, step)
    weights[0] = weights[-1] = 0.5 * step
    return weights


def _largest_singular_value(matrix: np.ndarray) -> float:
    if min(matrix.shape) < 3:
        return float(np.linalg.norm(matrix, ord=2))
    return float(svds(matrix, k=1, return_singular_vectors=False)[0])


def _tikhonov(matrix: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """argmin ||matrix v - rhs||^2 + lam ||v||^2 through the smaller SPD system."""
    rows, cols = matrix.shape
    try:
        if rows < cols:
            factor = cho_factor(matrix @ matrix.T + lam * np.eye(rows))
            return matrix.T @ cho_solve(factor, rhs)
        factor = cho_factor(matrix.T @ matrix + lam * np.eye(cols))
        return cho_solve(factor, matrix.T @ rhs)
    except LinAlgError:
        logger.warning(f"Cholesky failed for lambda={lam:.3g}, falling back to a least-squares solve")
        stacked = np.vstack([matrix, np.sqrt(lam) * np.eye(cols)])
        return lstsq(stacked, np.concatenate([rhs, np.zeros(cols)]))[0]


def synthesize_control(system: DelaySystem, psi: GridFunction, T: float, h: float,
                       lam: Optional[float] = None, q: float = 2.0,
                       fundamental: Optional[BVFundamentalSolution] = None,
                       threads: Optional[int] = None,
                       max_entries: int = DEFAULT_MAX_MATRIX_ENTRIES,
                       max_atoms: int = DEFAULT_MAX_ATOMS) -> SynthesisResult:
    """
    Steer the zero state toward psi at time T.

    Minimizes ||M u - psi||^2 + lam ||u||^2 in the L2 norms of the state and
    control grids, where M is the matrix of E(T).

    Args:
        system: Delay system.
        psi: Target segment on [-L_N, 0].
        T: Horizon.
        h: Grid step.
        lam: Regularization; None for 1e-8 ||M||^2.
        q: Exponent of the reported residual norm.
        fundamental: Precomputed fundamental solution covering T.

    Returns:
        SynthesisResult
    """
    if lam is not None and not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if q < 1:
        raise ConfigError(f"q must be >= 1, got {q}")
    M = input_map(system, T, h, fundamental, threads, max_entries, max_atoms)
    target = psi.resample(float(M.state_times[0]), M.state_step, M.state_times.size, outside="clamp")
    target = GridFunction(target.t_start, target.h, target.samples, q)
    b = target.samples.reshape(-1)

    state_weights = np.sqrt(np.repeat(_trapezoid_weights(M.state_times.size, M.state_step), system.d))
    control_weights = np.sqrt(np.repeat(_trapezoid_weights(M.control_times.size, M.control_step), system.m))
    weighted = M.matrix * state_weights[:, None]
    weighted /= control_weights[None, :]
    sigma_max = _largest_singular_value(weighted)
    if lam is None:
        lam = AUTO_LAMBDA_FACTOR * sigma_max ** 2 if sigma_max > 0 else AUTO_LAMBDA_FACTOR

    if not np.any(b):
        u = np.zeros(M.matrix.shape[1])
    else:
        u = _tikhonov(weighted, state_weights * b, lam) / control_weights
    control = M.control_function(u, q)
    achieved = M.segment_function(M.matrix @ u, q)
    residual = 0.0 if not np.any(b) else relative_residual(achieved, target, q)
    logger.info(f"Synthesis T={T:.6g}: residual {residual:.4g}, lambda {lam:.3g}, sigma_max {sigma_max:.3g}")
    return SynthesisResult(control, achieved, target, residual, lam, M.T, M.control_step, q, sigma_max)


def verify_control(system: DelaySystem, u: GridFunction, psi: GridFunction, T: float,
                   q: float = 2.0, h: Optional[float] = None) -> float:
    """
    Relative L^q distance between x_T and psi, with x solved from the zero
    initial segment by the simulator.
    """
    h = u.h if h is None else h
    zero = GridFunction.constant(np.zeros(system.d), -system.max_delay, 0.0, h)
    traj = solve_ivp(system, zero, u, T, h)
    segment = state_segment(traj, T)
    segment = GridFunction(segment.t_start, segment.h, segment.samples, q)
    return relative_residual(segment, psi, q)


@dataclass(frozen=True)
class CurvePoint:
    T: float
    residual: float
    lam: float
    h: float
    above_time_bound: bool
    carried: bool


def shift_control(control: GridFunction, T: float) -> GridFunction:
    """Zero-extend a control at the front so that it ends at T."""
    return GridFunction(T - control.t_end + control.t_start, control.h, control.samples, control.q)


def carry_control(system: DelaySystem, previous: SynthesisResult, psi: GridFunction, T: float,
                  fundamental: Optional[BVFundamentalSolution] = None,
                  max_atoms: int = DEFAULT_MAX_ATOMS) -> SynthesisResult:
    """
    Delay a control found for a shorter horizon so that it ends at T, and
    evaluate what it reaches with E(T).

    The delayed control keeps its own grid and is zero before it starts. When
    T - previous.T is a multiple of the step, the residual matches the earlier
    one up to rounding.
    """
    if T < previous.T:
        raise ConfigError(f"cannot carry a control from T={previous.T} back to T={T}")
    control = shift_control(previous.control, T)
    achieved = input_response(system, control, T, previous.h, fundamental, max_atoms)
    target = psi.resample(achieved.t_start, achieved.h, achieved.n, outside="clamp")
    target = GridFunction(target.t_start, target.h, target.samples, previous.q)
    achieved = GridFunction(achieved.t_start, achieved.h, achieved.samples, previous.q)
    residual = relative_residual(achieved, target, previous.q) if np.any(target.samples) else 0.0
    return replace(previous, control=control, achieved=achieved, target=target, residual=residual,
                   T=T, h=achieved.h, carried=True)


def residual_curve(system: DelaySystem, psi: GridFunction, T_list: Sequence[float], h: float,
                   lam: Optional[float] = None, q: float = 2.0,
                   threads: Optional[int] = None,
                   max_entries: int = DEFAULT_MAX_MATRIX_ENTRIES,
                   max_atoms: int = DEFAULT_MAX_ATOMS) -> List[CurvePoint]:
    """
    Residual of the synthesized control for each horizon in T_list.

    A control reaching psi at T1 reaches the same segment at T2 > T1 once it
    is delayed by T2 - T1 (zero input first). Each horizon re-evaluates the
    best earlier control that way and keeps it when it beats its own
    solution. With horizons on a common step grid the curve is nonincreasing.
    """
    T_values = [float(T) for T in T_list]
    if not T_values or any(T <= 0 for T in T_values):
        raise ConfigError("residual curve horizons must be positive")
    if any(b < a for a, b in zip(T_values, T_values[1:])):
        raise ConfigError("residual curve horizons must be sorted")

    longest = T_values[-1]
    _, shared_h = fit_step(longest, h)
    shared = fundamental_solution(system, longest, shared_h, max_atoms=max_atoms)
    best: Optional[SynthesisResult] = None
    curve = []
    for T in T_values:
        _, step = fit_step(T, h)
        fs = shared if abs(step - shared_h) <= 1e-9 * step else None
        fresh = synthesize_control(system, psi, T, h, lam, q, fs, threads, max_entries, max_atoms)
        chosen = fresh
        if best is not None:
            same_step = abs(best.h - step) <= 1e-9 * step
            if not same_step:
                logger.warning(f"T={T:.6g}: step {step:.6g} differs from {best.h:.6g} at T={best.T:.6g}, "
                               f"the curve need not be monotone here")
            carried = carry_control(system, best, psi, T, fs if same_step else None, max_atoms)
            if carried.residual < fresh.residual:
                chosen = carried
                logger.info(f"T={T:.6g}: keeping the control from T={best.T:.6g} "
                            f"(residual {carried.residual:.4g} against {fresh.residual:.4g})")
        best = chosen
        curve.append(CurvePoint(T, chosen.residual, chosen.lam, fresh.h,
                                T > system.time_bound, chosen.carried))
    return curve


def curve_to_frame(curve: List[CurvePoint]) -> pd.DataFrame:
    return pd.DataFrame({
        "T": [p.T for p in curve],
        "residual": [p.residual for p in curve],
        "lambda": [p.lam for p in curve],
        "h": [p.h for p in curve],
        "above_time_bound": [p.above_time_bound for p in curve],
        "carried": [p.carried for p in curve],
    })
