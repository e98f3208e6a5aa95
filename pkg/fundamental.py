"""
Fundamental solution of the delay equation and the discretized input map.

X(t) is split into a step part, with jumps J_i on the delay lattice obtained
by atomic renewal, and a continuous part C(t) solving a Volterra equation
whose forcing is assembled exactly from the jumps and kernel antiderivatives.
The input map E(T) sends a control on [0, T] to the state segment x_T.
"""

import heapq
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from delay_system import DelaySystem, GridFunction
from errors import GridError, LatticeOverflowError, MemoryBudgetError
from simulator import ZERO_SLACK, fit_step, march, segment_grid

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATOMS = 20000
DEFAULT_MAX_MATRIX_ENTRIES = 30_000_000
# multi-indices visited per admitted atom before the enumeration gives up
_VISIT_FACTOR = 50


def default_merge_tol(T: float) -> float:
    return 1e-12 * max(1.0, T)


@dataclass(frozen=True)
class LatticePoint:
    """A lattice time with every multi-index (n_1..n_N) that reaches it."""

    tau: float
    indices: Tuple[Tuple[int, ...], ...]


def lattice_points(delays: Sequence[float], T: float, merge_tol: Optional[float] = None,
                   max_atoms: int = DEFAULT_MAX_ATOMS) -> List[LatticePoint]:
    """
    Enumerate {sum n_j L_j <= T} in increasing order by best-first expansion.

    Args:
        delays: The delays L_1..L_N.
        T: Upper bound on lattice values.
        merge_tol: Values closer than this are merged (default 1e-12 max(1, T)).
        max_atoms: Cap on the number of merged lattice points.

    Returns:
        List of LatticePoint sorted by tau.
    """
    delays = np.asarray(delays, dtype=float)
    if T < 0:
        raise GridError(f"lattice horizon must be nonnegative, got T={T}")
    tol = default_merge_tol(T) if merge_tol is None else merge_tol
    if tol < 0:
        raise GridError(f"merge tolerance must be nonnegative, got {tol}")
    limit = T + tol

    start = (0,) * delays.size
    frontier = [(0.0, start)]
    seen = {start}
    points: List[LatticePoint] = []
    group: List[Tuple[int, ...]] = []
    group_tau = 0.0
    visited = 0
    while frontier:
        tau, index = heapq.heappop(frontier)
        visited += 1
        if visited > _VISIT_FACTOR * max_atoms:
            raise LatticeOverflowError(
                f"lattice enumeration visited more than {_VISIT_FACTOR * max_atoms} multi-indices below T={T}"
            )
        if group and tau - group_tau > tol:
            points.append(LatticePoint(group_tau, tuple(sorted(group))))
            group = []
            if len(points) > max_atoms:
                raise LatticeOverflowError(
                    f"lattice below T={T} has more than {max_atoms} atoms (raise max_atoms or lower T)"
                )
        if not group:
            group_tau = tau
        group.append(index)
        for j in range(delays.size):
            successor = index[:j] + (index[j] + 1,) + index[j + 1:]
            if successor in seen:
                continue
            value = float(np.dot(successor, delays))
            if value <= limit:
                seen.add(successor)
                heapq.heappush(frontier, (value, successor))
    if group:
        points.append(LatticePoint(group_tau, tuple(sorted(group))))
    if len(points) > max_atoms:
        raise LatticeOverflowError(
            f"lattice below T={T} has more than {max_atoms} atoms (raise max_atoms or lower T)"
        )
    return points


@dataclass(frozen=True, eq=False)
class FundamentalAtom:
    tau: float
    J: np.ndarray
    indices: Tuple[Tuple[int, ...], ...]


@dataclass(frozen=True, eq=False)
class BVFundamentalSolution:
    """
    X(t) = sum_{tau_i < t} J_i + C(t) on [0, T], X = 0 for t < 0.

    continuous holds C on the grid. ac_density holds c = C' at the nodes as
    the mean of the adjacent cell slopes (one-sided at the ends); quadrature
    against c uses the exact cell masses C(t_{k+1}) - C(t_k) instead.
    """

    T: float
    atoms: List[FundamentalAtom]
    ac_density: GridFunction
    continuous: GridFunction

    @property
    def h(self) -> float:
        return self.ac_density.h

    @property
    def taus(self) -> np.ndarray:
        return np.array([atom.tau for atom in self.atoms])

    @property
    def jumps(self) -> np.ndarray:
        return np.stack([atom.J for atom in self.atoms])

    def evaluate(self, t: Union[float, np.ndarray], right_continuous: bool = False) -> np.ndarray:
        """X(t), left-continuous by default; shape t.shape + (d, d)."""
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1)
        if np.any(flat > self.T * (1 + 1e-12)):
            raise GridError(f"fundamental solution is only known up to T={self.T}")
        cumulative = np.concatenate([np.zeros((1,) + self.atoms[0].J.shape),
                                     np.cumsum(self.jumps, axis=0)])
        side = "right" if right_continuous else "left"
        count = np.searchsorted(self.taus, flat, side=side)
        values = cumulative[count] + self.continuous.evaluate(flat)
        return values.reshape(t.shape + self.atoms[0].J.shape)

    def density_cells(self) -> np.ndarray:
        """Cell averages (C(t_{k+1}) - C(t_k)) / h of the density, shape (n, d, d)."""
        return np.diff(self.continuous.samples, axis=0) / self.h


def _renewal(system: DelaySystem, points: List[LatticePoint]) -> List[FundamentalAtom]:
    owner: Dict[Tuple[int, ...], int] = {}
    for i, point in enumerate(points):
        for index in point.indices:
            owner[index] = i
    d = system.d
    jumps = [np.eye(d)]
    for point in points[1:]:
        J = np.zeros((d, d))
        for j in range(system.N):
            predecessors = set()
            for index in point.indices:
                if index[j] > 0:
                    predecessors.add(owner[index[:j] + (index[j] - 1,) + index[j + 1:]])
            for i in predecessors:
                J += system.A[j] @ jumps[i]
        jumps.append(J)
    atoms = [FundamentalAtom(point.tau, J, point.indices)
             for k, (point, J) in enumerate(zip(points, jumps)) if k == 0 or np.any(J)]
    return atoms


def _atomic_forcing(system: DelaySystem, atoms: List[FundamentalAtom], times: np.ndarray) -> np.ndarray:
    """f(t) = sum_{tau_i < t} G(min(t - tau_i, L_N)) J_i with G(x) = int_0^x g."""
    d, length, h = system.d, system.max_delay, times[1] - times[0]
    kernel = system.kernel
    forcing = np.zeros((times.size, d, d))
    saturated = np.zeros((times.size + 1, d, d))
    full = kernel.integral(0.0, length)
    for atom in atoms:
        first = int(np.searchsorted(times, atom.tau, side="right"))
        last = int(np.searchsorted(times, atom.tau + length, side="left"))
        if first < last:
            lag = times[first:last] - atom.tau
            forcing[first:last] += kernel.cumulative_integral(lag) @ atom.J
        saturated[min(last, times.size)] += full @ atom.J
    forcing += np.cumsum(saturated, axis=0)[:times.size]
    return forcing


def _nodal_density(C: np.ndarray, h: float) -> np.ndarray:
    slopes = np.diff(C, axis=0) / h
    density = np.empty_like(C)
    density[0] = slopes[0]
    density[-1] = slopes[-1]
    density[1:-1] = 0.5 * (slopes[:-1] + slopes[1:])
    return density


def fundamental_solution(system: DelaySystem, T: float, h: float,
                         merge_tol: Optional[float] = None,
                         max_atoms: int = DEFAULT_MAX_ATOMS) -> BVFundamentalSolution:
    """
    Compute X on [0, T]: jumps by renewal over the delay lattice, continuous
    part by the implicit-trapezoid march, density by differencing.
    """
    n, h = fit_step(T, h)
    points = lattice_points(system.delays, T, merge_tol, max_atoms)
    atoms = _renewal(system, points)
    logger.info(f"Fundamental solution: {len(points)} lattice points, {len(atoms)} nonzero atoms up to T={T}")

    d = system.d
    times = h * np.arange(n + 1)
    if system.kernel.is_zero:
        C = np.zeros((n + 1, d, d))
    else:
        forcing = _atomic_forcing(system, atoms, times)

        def history(t: np.ndarray) -> np.ndarray:
            return np.zeros((t.size, d, d))

        C, residual = march(system, h, n, history, forcing)
        logger.debug(f"Continuous part solved, max node residual {residual:.2e}")
    density = _nodal_density(C, h)
    return BVFundamentalSolution(T, atoms, GridFunction(0.0, h, density), GridFunction(0.0, h, C))


def renewal_defect(system: DelaySystem, fs: BVFundamentalSolution, samples: int = 200) -> float:
    """
    Largest defect of X(t) = I + sum A_j X(t - L_j) + int g(s) X(t - s) ds over
    up to `samples` grid nodes at least 2h away from every lattice point.
    """
    h, d, length = fs.h, system.d, system.max_delay
    times = fs.continuous.times
    taus = fs.taus
    distance = np.min(np.abs(times[:, None] - taus[None, :]), axis=1)
    chosen = times[(distance > 2 * h) & (times > 0)]
    if chosen.size == 0:
        return 0.0
    chosen = chosen[::max(1, chosen.size // samples)]
    worst = 0.0
    C = fs.continuous
    for t in chosen:
        lhs = fs.evaluate(t)
        delayed = t - system.delays
        rhs = np.eye(d)
        for j in range(system.N):
            if delayed[j] > 0:
                rhs = rhs + system.A[j] @ fs.evaluate(delayed[j])
        for atom in fs.atoms:
            if atom.tau < t:
                rhs = rhs + system.kernel.integral(0.0, min(t - atom.tau, length)) @ atom.J
        span = min(t, length)
        s = np.linspace(0.0, span, max(int(round(span / h)), 1) + 1)
        integrand = system.kernel.evaluate(s) @ C.evaluate(t - s)
        rhs = rhs + trapezoid(integrand, s, axis=0)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def fundamental_to_dict(fs: BVFundamentalSolution) -> Dict[str, Any]:
    return {
        "T": fs.T,
        "atoms": [{"tau": atom.tau, "J": atom.J.tolist(), "indices": [list(i) for i in atom.indices]}
                  for atom in fs.atoms],
        "density": {
            "t_start": fs.ac_density.t_start,
            "h": fs.ac_density.h,
            "samples": fs.ac_density.samples.tolist(),
        },
    }


@dataclass(frozen=True, eq=False)
class InputMapMatrix:
    """
    Dense matrix of E(T): control node values (n_u * m, node-major) to state
    segment node values (n_x * d, node-major).
    """

    T: float
    state_times: np.ndarray
    control_times: np.ndarray
    matrix: np.ndarray
    d: int
    m: int

    @property
    def state_step(self) -> float:
        return float(self.state_times[1] - self.state_times[0])

    @property
    def control_step(self) -> float:
        return float(self.control_times[1] - self.control_times[0])

    def control_vector(self, u: GridFunction) -> np.ndarray:
        return u.evaluate(self.control_times).reshape(-1)

    def control_function(self, vector: np.ndarray, q: float = 2.0) -> GridFunction:
        return GridFunction(0.0, self.control_step, vector.reshape(-1, self.m), q)

    def segment_function(self, vector: np.ndarray, q: float = 2.0) -> GridFunction:
        return GridFunction(float(self.state_times[0]), self.state_step, vector.reshape(-1, self.d), q)

    def apply(self, u: GridFunction) -> GridFunction:
        return self.segment_function(self.matrix @ self.control_vector(u), u.q)


def _row_terms(fs: BVFundamentalSolution, B: np.ndarray, t: float, T: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadrature of x(t) = sum J_i B u(t - tau_i) + int_0^t c(s) B u(t - s) ds as
    control arguments alpha and d x m weights W, so that x(t) = sum W u(alpha).

    Atoms enter at their exact lattice times; an atom at tau = t is not yet
    felt (X is left-continuous). The density enters cell by cell through its
    mass C(s_{k+1}) - C(s_k) at the cell midpoint, which stays second order
    when c jumps inside a cell.
    """
    if t <= ZERO_SLACK * fs.h:
        return np.zeros(0), np.zeros((0,) + (B.shape[0], B.shape[1]))
    taus = fs.taus
    keep = (t - taus > ZERO_SLACK * fs.h) & (t - taus <= T + ZERO_SLACK * fs.h)
    alphas = [t - taus[keep]]
    weights = [fs.jumps[keep] @ B]

    h = fs.h
    C = fs.continuous
    cells = min(int(np.floor(t / h + 1e-9)), C.n - 1)
    masses = np.diff(C.samples[:cells + 1], axis=0)
    alphas.append(t - h * np.arange(cells) - 0.5 * h)
    weights.append(masses @ B)
    remainder = t - cells * h
    if remainder > 1e-9 * h:
        tail = C.evaluate(t) - C.samples[cells]
        alphas.append(np.array([0.5 * remainder]))
        weights.append((tail @ B)[None])
    return np.concatenate(alphas), np.concatenate(weights)


def _scatter_row(alphas: np.ndarray, weights: np.ndarray, step: float, nodes: int) -> np.ndarray:
    """Spread sum W u(alpha) onto control nodes by hat weights; returns (d, nodes * m)."""
    d, m = weights.shape[1], weights.shape[2]
    block = np.zeros((d, nodes, m))
    if alphas.size == 0:
        return block.reshape(d, nodes * m)
    position = alphas / step
    idx = np.clip(np.floor(position).astype(np.int64), 0, nodes - 2)
    frac = np.clip(position - idx, 0.0, 1.0)
    for a in range(d):
        for b in range(m):
            block[a, :, b] = (np.bincount(idx, weights=(1.0 - frac) * weights[:, a, b], minlength=nodes)[:nodes]
                              + np.bincount(idx + 1, weights=frac * weights[:, a, b], minlength=nodes)[:nodes])
    return block.reshape(d, nodes * m)


def _worker_count(threads: Optional[int]) -> int:
    if threads is None:
        return os.cpu_count() or 1
    return max(1, int(threads))


def input_map(system: DelaySystem, T: float, h: float,
              fundamental: Optional[BVFundamentalSolution] = None,
              threads: Optional[int] = None,
              max_entries: int = DEFAULT_MAX_MATRIX_ENTRIES,
              max_atoms: int = DEFAULT_MAX_ATOMS) -> InputMapMatrix:
    """
    Assemble the dense matrix of E(T) row block by row block.

    Args:
        system: Delay system.
        T: Horizon.
        h: Step of the control grid and of the fundamental solution.
        fundamental: Precomputed fundamental solution on [0, T' >= T] with step h.
        threads: Worker cap for row assembly (default: CPU count).
        max_entries: Memory budget on the number of matrix entries.

    Returns:
        InputMapMatrix: rows are state segment nodes, columns control nodes.
    """
    n, h = fit_step(T, h)
    state_start, n_x = segment_grid(system.max_delay, h)
    n_u = n + 1
    entries = system.d * n_x * system.m * n_u
    if entries > max_entries:
        raise MemoryBudgetError(
            f"input map would need {entries} entries, budget is {max_entries} (coarsen h or lower T)"
        )
    fs = _fundamental_for(system, T, h, fundamental, max_atoms)
    state_times = state_start + h * np.arange(n_x)
    control_times = h * np.arange(n_u)
    matrix = np.zeros((n_x * system.d, n_u * system.m))

    def assemble(rows: range) -> None:
        for r in rows:
            alphas, weights = _row_terms(fs, system.B, T + state_times[r], T)
            matrix[r * system.d:(r + 1) * system.d] = _scatter_row(alphas, weights, h, n_u)

    workers = min(_worker_count(threads), n_x)
    chunks = [range(k, n_x, workers) for k in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(assemble, chunks))
    logger.info(f"Input map assembled: {matrix.shape[0]}x{matrix.shape[1]} with {workers} workers")
    return InputMapMatrix(T, state_times, control_times, matrix, system.d, system.m)


def _fundamental_for(system: DelaySystem, T: float, h: float,
                     fundamental: Optional[BVFundamentalSolution], max_atoms: int) -> BVFundamentalSolution:
    if fundamental is None:
        return fundamental_solution(system, T, h, max_atoms=max_atoms)
    if fundamental.T < T * (1 - 1e-12) or abs(fundamental.h - h) > 1e-9 * h:
        raise GridError(
            f"fundamental solution on [0, {fundamental.T}] with step {fundamental.h} "
            f"does not cover T={T} with step {h}"
        )
    return fundamental


def input_response(system: DelaySystem, u: GridFunction, T: float, h: float,
                   fundamental: Optional[BVFundamentalSolution] = None,
                   max_atoms: int = DEFAULT_MAX_ATOMS) -> GridFunction:
    """
    E(T)u on the segment grid with the same quadrature as the matrix rows, without the matrix.

    u is sampled on its own grid and vanishes up to and including u.t_start,
    so a control delayed to start at s > 0 is felt only after s.
    """
    n, h = fit_step(T, h)
    fs = _fundamental_for(system, T, h, fundamental, max_atoms)
    state_start, n_x = segment_grid(system.max_delay, h)
    state_times = state_start + h * np.arange(n_x)
    values = np.zeros((n_x, system.d))
    for r, theta in enumerate(state_times):
        alphas, weights = _row_terms(fs, system.B, T + theta, T)
        active = alphas > u.t_start + ZERO_SLACK * h
        if np.any(active):
            values[r] = np.einsum("kab,kb->a", weights[active], u.evaluate(alphas[active]))
    return GridFunction(state_start, h, values, u.q)
