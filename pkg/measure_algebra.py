"""
Convolution algebra of compactly supported matrix measures of order zero.

A CompactMeasure is a finite list of matrix atoms plus a density stored as
cell averages on a grid of step h with its own origin: cell k covers
[origin + k h, origin + (k+1) h). Shifts and convolutions move the origin
exactly; only sums of densities on differently anchored grids redistribute
mass between neighbouring cells. On top of the algebra the module builds the
pair (Q, P) of a delay system, inverts Q on a window by two Neumann series and
computes transfer outputs y = pi(Q^-1 * P * u).
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve

from delay_system import DelaySystem, GridFunction, PiecewisePolyKernel
from errors import DimensionError, GridError, NeumannSplitError, WindowError

logger = logging.getLogger(__name__)

ATOM_MERGE_TOL = 1e-12
# grid offsets closer than this (in cells) are treated as equal
_SNAP = 1e-9
_MAX_TERMS = 10000

Density = Tuple[float, int, np.ndarray]


def _merge_tol(locations: np.ndarray) -> float:
    scale = float(np.max(np.abs(locations))) if locations.size else 1.0
    return ATOM_MERGE_TOL * max(1.0, scale)


def _normalize_origin(origin: float, start: int, h: float) -> Tuple[float, int]:
    whole = math.floor(origin / h)
    origin -= whole * h
    start += whole
    if origin > h * (1.0 - _SNAP):
        origin, start = 0.0, start + 1
    elif origin < h * _SNAP:
        origin = 0.0
    return origin, start


@dataclass(frozen=True, eq=False)
class CompactMeasure:
    """
    Matrix measure: sum_i W_i delta_{loc_i} + density.

    locations: (k,) atom locations, strictly increasing after merging.
    weights: (k, r, c) atom weights.
    origin, start: the first density cell is [origin + start h, origin + (start+1) h).
    values: (n, r, c) density cell averages.
    horizon: right end of the window on which a truncated measure is exact.
    """

    h: float
    shape: Tuple[int, int]
    locations: np.ndarray
    weights: np.ndarray
    start: int
    values: np.ndarray
    origin: float = 0.0
    horizon: Optional[float] = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        locations = np.asarray(self.locations, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape((locations.size,) + shape)
        values = np.asarray(self.values, dtype=float).reshape((-1,) + shape)
        locations, weights = _merge_atoms(locations, weights)
        start, values = _trim(int(self.start), values)
        origin, start = _normalize_origin(float(self.origin), start, self.h)
        if values.shape[0] == 0:
            origin, start = 0.0, 0
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def zero(cls, shape: Tuple[int, int], h: float) -> "CompactMeasure":
        return cls(h, shape, np.zeros(0), np.zeros((0,) + tuple(shape)), 0, np.zeros((0,) + tuple(shape)))

    @classmethod
    def dirac(cls, location: float, weight: np.ndarray, h: float) -> "CompactMeasure":
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        return cls(h, weight.shape, np.array([location]), weight[None], 0, np.zeros((0,) + weight.shape))

    @classmethod
    def from_density(cls, t_start: float, values: np.ndarray, h: float) -> "CompactMeasure":
        """Density with cells [t_start + k h, t_start + (k+1) h)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None, None]
        empty = np.zeros((0,) + values.shape[1:])
        return cls(h, values.shape[1:], np.zeros(0), empty, 0, values, origin=t_start)

    @classmethod
    def from_kernel(cls, kernel: PiecewisePolyKernel, h: float, offset: float = 0.0,
                    sign: float = 1.0) -> "CompactMeasure":
        """Exact cell averages of sign * g(t - offset) on cells anchored at offset."""
        cells = int(math.ceil(kernel.length / h - _SNAP))
        values = np.stack([sign * kernel.integral(k * h, (k + 1) * h) / h for k in range(cells)])
        return cls.from_density(offset, values, h)

    @classmethod
    def from_grid_function(cls, f: GridFunction, h: Optional[float] = None) -> "CompactMeasure":
        """Density whose cell averages are those of the linear interpolant of f."""
        h = f.h if h is None else h
        if abs(f.h - h) > 1e-9 * h:
            logger.warning(f"Resampling grid function of step {f.h} onto the measure step {h}")
            f = f.resample(f.t_start, h, int(math.floor((f.t_end - f.t_start) / h + _SNAP)) + 1)
        samples = f.samples.reshape((f.n,) + _column_shape(f.value_shape))
        return cls.from_density(f.t_start, 0.5 * (samples[:-1] + samples[1:]), h)

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.locations.size == 0 and self.values.shape[0] == 0

    @property
    def centers(self) -> np.ndarray:
        return self.origin + self.h * (self.start + np.arange(self.values.shape[0]) + 0.5)

    def support(self) -> Tuple[float, float]:
        ends = []
        if self.locations.size:
            ends += [self.locations[0], self.locations[-1]]
        if self.values.shape[0]:
            ends += [self.origin + self.start * self.h,
                     self.origin + (self.start + self.values.shape[0]) * self.h]
        if not ends:
            return (math.inf, -math.inf)
        return (float(min(ends)), float(max(ends)))

    @property
    def min_support(self) -> float:
        return self.support()[0]

    def atom_norm(self) -> float:
        return float(np.sum(np.linalg.norm(self.weights, axis=(1, 2))))

    def density_norm(self, ord=None) -> float:
        """L1 norm of the density with the Frobenius (default) or spectral norm per cell."""
        if self.values.shape[0] == 0:
            return 0.0
        return float(self.h * np.sum(np.linalg.norm(self.values, ord=ord, axis=(1, 2))))

    def l1_norm(self) -> float:
        return self.atom_norm() + self.density_norm()

    def atoms_only(self) -> "CompactMeasure":
        return CompactMeasure(self.h, self.shape, self.locations, self.weights, 0,
                              np.zeros((0,) + self.shape), horizon=self.horizon)

    def density_only(self) -> "CompactMeasure":
        return CompactMeasure(self.h, self.shape, np.zeros(0), np.zeros((0,) + self.shape),
                              self.start, self.values, self.origin, self.horizon)

    def _with(self, locations=None, weights=None, start=None, values=None, origin=None,
              shape=None, horizon="keep") -> "CompactMeasure":
        return CompactMeasure(
            self.h,
            self.shape if shape is None else shape,
            self.locations if locations is None else locations,
            self.weights if weights is None else weights,
            self.start if start is None else start,
            self.values if values is None else values,
            self.origin if origin is None else origin,
            self.horizon if horizon == "keep" else horizon,
        )

    def laplace(self, p) -> np.ndarray:
        """sum W e^{-p loc} + midpoint sum of the density; shape p.shape + (r, c)."""
        p = np.asarray(p, dtype=complex)
        flat = p.reshape(-1)
        out = np.einsum("pk,krc->prc", np.exp(-np.outer(flat, self.locations)), self.weights.astype(complex))
        if self.values.shape[0]:
            out += self.h * np.einsum("pk,krc->prc", np.exp(-np.outer(flat, self.centers)), self.values)
        return out.reshape(p.shape + self.shape)

    def restrict(self, lo: float, hi: float) -> "CompactMeasure":
        """Atoms in [lo, hi] and density cells whose centre lies in [lo, hi]."""
        tol = _merge_tol(np.array([lo, hi]))
        keep = (self.locations >= lo - tol) & (self.locations <= hi + tol)
        centers = self.centers
        inside = np.nonzero((centers >= lo) & (centers <= hi))[0]
        if inside.size:
            start, values = self.start + int(inside[0]), self.values[inside[0]:inside[-1] + 1]
        else:
            start, values = 0, np.zeros((0,) + self.shape)
        return self._with(locations=self.locations[keep], weights=self.weights[keep],
                          start=start, values=values)

    def shift(self, a: float) -> "CompactMeasure":
        """delta_a * self, exact: atoms move and the density grid is re-anchored."""
        horizon = None if self.horizon is None else self.horizon + a
        return self._with(locations=self.locations + a, origin=self.origin + a, horizon=horizon)

    def left(self, matrix: np.ndarray) -> "CompactMeasure":
        matrix = np.atleast_2d(matrix)
        return self._with(weights=np.einsum("ar,krc->kac", matrix, self.weights),
                          values=np.einsum("ar,krc->kac", matrix, self.values),
                          shape=(matrix.shape[0], self.cols))

    def right(self, matrix: np.ndarray) -> "CompactMeasure":
        matrix = np.atleast_2d(matrix)
        return self._with(weights=self.weights @ matrix, values=self.values @ matrix,
                          shape=(self.rows, matrix.shape[1]))

    def on_step(self, h: float) -> "CompactMeasure":
        """Same measure with the density re-binned to step h (mass preserving)."""
        if abs(h - self.h) <= 1e-12 * h:
            return self
        logger.warning(f"Resampling measure density from step {self.h} to {h}")
        if self.values.shape[0] == 0:
            return CompactMeasure(h, self.shape, self.locations, self.weights, 0, self.values,
                                  horizon=self.horizon)
        first_edge = self.origin + self.start * self.h
        old_edges = first_edge + self.h * np.arange(self.values.shape[0] + 1)
        mass = np.concatenate([np.zeros((1,) + self.shape), self.h * np.cumsum(self.values, axis=0)])
        cells = int(math.ceil((old_edges[-1] - first_edge) / h - _SNAP))
        new_edges = first_edge + h * np.arange(cells + 1)
        flat = mass.reshape(mass.shape[0], -1)
        resampled = np.stack([np.interp(new_edges, old_edges, flat[:, i]) for i in range(flat.shape[1])], axis=1)
        values = np.diff(resampled, axis=0).reshape((-1,) + self.shape) / h
        return CompactMeasure(h, self.shape, self.locations, self.weights, 0, values,
                              first_edge, self.horizon)

    def __add__(self, other: "CompactMeasure") -> "CompactMeasure":
        if self.shape != other.shape:
            raise DimensionError(f"dimension mismatch: {self.shape} vs {other.shape}")
        other = other.on_step(self.h)
        origin, start, values = _sum_densities(
            [(self.origin, self.start, self.values), (other.origin, other.start, other.values)],
            self.shape, self.h)
        return CompactMeasure(self.h, self.shape,
                              np.concatenate([self.locations, other.locations]),
                              np.concatenate([self.weights, other.weights]),
                              start, values, origin, _min_horizon(self.horizon, other.horizon))

    def __neg__(self) -> "CompactMeasure":
        return self._with(weights=-self.weights, values=-self.values)

    def __sub__(self, other: "CompactMeasure") -> "CompactMeasure":
        return self + (-other)

    def __mul__(self, scalar: float) -> "CompactMeasure":
        return self._with(weights=scalar * self.weights, values=scalar * self.values)

    __rmul__ = __mul__


def dirac(location: float, weight: np.ndarray, h: float) -> CompactMeasure:
    return CompactMeasure.dirac(location, weight, h)


def _column_shape(value_shape: tuple) -> Tuple[int, int]:
    if len(value_shape) == 1:
        return (value_shape[0], 1)
    return tuple(value_shape)


def _min_horizon(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


def _merge_atoms(locations: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if locations.size == 0:
        return locations, weights
    order = np.argsort(locations, kind="stable")
    locations, weights = locations[order], weights[order]
    tol = _merge_tol(locations)
    group = np.concatenate([[0], np.cumsum(np.diff(locations) > tol)])
    count = int(group[-1]) + 1
    merged = np.zeros((count,) + weights.shape[1:])
    np.add.at(merged, group, weights)
    first = np.concatenate([[True], np.diff(group) > 0])
    keep = np.any(merged.reshape(count, -1) != 0.0, axis=1)
    return locations[first][keep], merged[keep]


def _trim(start: int, values: np.ndarray) -> Tuple[int, np.ndarray]:
    if values.shape[0] == 0:
        return 0, values
    nonzero = np.nonzero(np.any(values.reshape(values.shape[0], -1) != 0.0, axis=1))[0]
    if nonzero.size == 0:
        return 0, values[:0]
    return start + int(nonzero[0]), values[nonzero[0]:nonzero[-1] + 1]


def _realign(density: Density, target: float, h: float) -> Tuple[int, np.ndarray]:
    """Move cell masses from the grid anchored at density's origin onto the grid anchored at target."""
    origin, start, values = density
    position = (origin - target) / h
    whole = math.floor(position)
    frac = position - whole
    if frac < _SNAP:
        return start + whole, values
    if frac > 1.0 - _SNAP:
        return start + whole + 1, values
    out = np.zeros((values.shape[0] + 1,) + values.shape[1:])
    out[:-1] += (1.0 - frac) * values
    out[1:] += frac * values
    return start + whole, out


def _sum_densities(parts: List[Density], shape: Tuple[int, int], h: float) -> Density:
    """Sum densities on the grid of the first nonempty part."""
    parts = [part for part in parts if part[2].shape[0]]
    if not parts:
        return 0.0, 0, np.zeros((0,) + tuple(shape))
    target = parts[0][0]
    aligned = [_realign(part, target, h) for part in parts]
    first = min(s for s, _ in aligned)
    last = max(s + v.shape[0] for s, v in aligned)
    total = np.zeros((last - first,) + tuple(shape))
    for s, v in aligned:
        total[s - first:s - first + v.shape[0]] += v
    return target, first, total


def _convolve_densities(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """Cell averages of the convolution of two piecewise-constant cell densities."""
    na, r, k = a.shape
    nb, c = b.shape[0], b.shape[2]
    left = np.broadcast_to(a[:, :, :, None], (na, r, k, c))
    right = np.broadcast_to(b[:, None, :, :], (nb, r, k, c))
    full = h * fftconvolve(left, right, axes=0).sum(axis=2)
    out = np.zeros((na + nb, r, c))
    out[:-1] += 0.5 * full
    out[1:] += 0.5 * full
    return out


def convolve(a: CompactMeasure, b: CompactMeasure) -> CompactMeasure:
    """
    Convolution a * b of matrix measures (matrix product inside).

    Args:
        a: Left factor of shape (r, k).
        b: Right factor of shape (k, c).

    Returns:
        CompactMeasure of shape (r, c) with atoms merged.
    """
    if a.cols != b.rows:
        raise DimensionError(f"dimension mismatch: cannot convolve {a.shape} with {b.shape}")
    b = b.on_step(a.h)
    h, shape = a.h, (a.rows, b.cols)

    locations = (a.locations[:, None] + b.locations[None, :]).reshape(-1)
    weights = np.einsum("irk,jkc->ijrc", a.weights, b.weights).reshape((-1,) + shape)

    parts: List[Density] = []
    if a.values.shape[0] and b.values.shape[0]:
        parts.append((a.origin + b.origin, a.start + b.start, _convolve_densities(a.values, b.values, h)))
    if b.values.shape[0]:
        for loc, W in zip(a.locations, a.weights):
            parts.append((b.origin + loc, b.start, np.einsum("rk,nkc->nrc", W, b.values)))
    if a.values.shape[0]:
        for loc, W in zip(b.locations, b.weights):
            parts.append((a.origin + loc, a.start, a.values @ W))
    parts = [(*_normalize_origin(o, s, h), v) for o, s, v in parts]
    origin, start, values = _sum_densities(parts, shape, h)
    return CompactMeasure(h, shape, locations, weights, start, values, origin,
                          _min_horizon(a.horizon, b.horizon))


def build_QP(system: DelaySystem, h: float) -> Tuple[CompactMeasure, CompactMeasure]:
    """
    Q = delta_{-L_N} I - sum_j delta_{-L_N + L_j} A_j - delta_{-L_N} * g and P = B delta_0.
    """
    length, d = system.max_delay, system.d
    locations = np.concatenate([[-length], -length + system.delays])
    weights = np.concatenate([np.eye(d)[None], -system.A])
    Q = CompactMeasure(h, (d, d), locations, weights, 0, np.zeros((0, d, d)))
    if not system.kernel.is_zero:
        Q = Q + CompactMeasure.from_kernel(system.kernel, h, offset=-length, sign=-1.0)
    P = CompactMeasure.dirac(0.0, system.B, h)
    return Q, P


@dataclass(frozen=True)
class NeumannReport:
    """Bookkeeping of invert_Q: split, series lengths and the a-posteriori defect."""

    split_eps: Optional[float]
    split_cut: float
    g1_norm: float
    geometric_terms: int
    g_terms: int
    window: float
    atom_defect: float
    density_defect: float


def invert_Q(Q: CompactMeasure, window: float, tol: float = 1e-8) -> Tuple[CompactMeasure, NeumannReport]:
    """
    Invert Q on [L_N, L_N + window].

    With Q = delta_{-L_N} W0 (I delta_0 - F), the density part of F is split
    as g1 + g2 with ||g1||_1 <= 1/2 (skipped when ||F density||_1 < 1), and

        (I delta_0 - F)^-1 = (I delta_0 + G)^-1 * (I delta_0 - g1)^-1,
        G = -(I delta_0 - g1)^-1 * (F - g1),

    where the first series is geometric and the second is finite on the
    window because min supp G > 0.
    """
    if not window > 0:
        raise WindowError(f"inversion window must be positive, got {window}")
    if Q.rows != Q.cols:
        raise DimensionError(f"dimension mismatch: Q must be square, got {Q.shape}")
    h, d = Q.h, Q.rows
    if Q.locations.size == 0 or Q.locations[0] > Q.min_support + _merge_tol(Q.locations):
        raise NeumannSplitError("Q has no leading atom, it is not invertible in the measure algebra")
    length = -float(Q.locations[0])
    W0 = Q.weights[0]
    if np.linalg.cond(W0) > 1e12:
        raise NeumannSplitError("leading atom weight of Q is singular")
    W0inv = np.linalg.inv(W0)
    identity = CompactMeasure.dirac(0.0, np.eye(d), h)

    normalized = Q.shift(length).left(W0inv)
    later = normalized.locations > _merge_tol(normalized.locations)
    F_atoms = CompactMeasure(h, (d, d), normalized.locations[later], -normalized.weights[later],
                             0, np.zeros((0, d, d)))
    g_tilde = -normalized.density_only()
    cell_norms = h * np.linalg.norm(g_tilde.values, ord=2, axis=(1, 2)) if g_tilde.values.shape[0] else np.zeros(0)
    total = float(np.sum(cell_norms))
    first_atom = float(F_atoms.locations[0]) if F_atoms.locations.size else length

    if total < 1.0:
        g1, F2 = g_tilde, F_atoms
        split_eps, cut = None, length
        logger.info(f"Kernel norm {total:.4g} < 1, no split needed")
    else:
        cumulative = np.cumsum(cell_norms)
        edges = g_tilde.origin + h * (g_tilde.start + np.arange(1, cell_norms.size + 1))
        admissible = np.nonzero((cumulative <= 0.5) & (edges <= first_atom * (1 + 1e-12)))[0]
        if admissible.size == 0:
            raise NeumannSplitError(
                f"no valid split: the first density cell already has norm {cell_norms[0]:.3g} > 1/2"
            )
        cells = int(admissible[-1]) + 1
        cut = float(edges[cells - 1])
        head = g_tilde.origin + h * g_tilde.start
        g1 = CompactMeasure.from_density(head, g_tilde.values[:cells], h)
        F2 = F_atoms + CompactMeasure.from_density(cut, g_tilde.values[cells:], h)
        split_eps = first_atom - cut
        logger.info(f"Kernel split at {cut:.6g} (eps={split_eps:.6g}), ||g1||_1={cumulative[cells - 1]:.4g}")
    g1_norm = g1.density_norm(ord=2)

    R, term, geometric_terms = identity, identity, 0
    while g1_norm > 0:
        term = convolve(term, g1).restrict(0.0, window)
        if term.is_empty:
            break
        R = R + term
        geometric_terms += 1
        if g1_norm ** geometric_terms / (1.0 - g1_norm) < tol:
            break
        if geometric_terms > _MAX_TERMS:
            raise NeumannSplitError(f"geometric series did not reach tol={tol} in {_MAX_TERMS} terms")

    G = -convolve(R, F2).restrict(0.0, window)
    S, term, g_terms = identity, identity, 0
    while not G.is_empty:
        term = -convolve(term, G).restrict(0.0, window)
        if term.is_empty:
            break
        S = S + term
        g_terms += 1
        if g_terms > _MAX_TERMS:
            raise NeumannSplitError(f"support series did not terminate in {_MAX_TERMS} terms")
    logger.info(f"Neumann series: {geometric_terms} geometric terms, {g_terms} support terms on window {window}")

    inverse = convolve(S, R).restrict(0.0, window).right(W0inv).shift(length)
    Qinv = inverse._with(horizon=length + window)
    atom_defect, density_defect = convolution_defect(Q, Qinv, window)
    report = NeumannReport(split_eps, cut, g1_norm, geometric_terms, g_terms, window,
                           atom_defect, density_defect)
    return Qinv, report


def convolution_defect(Q: CompactMeasure, Qinv: CompactMeasure, window: float) -> Tuple[float, float]:
    """
    Defect of Q * Qinv - delta_0 I on [-window, window], cut two cells short
    of where a truncated Qinv stops being exact.

    Returns:
        Tuple of the largest atom weight error (entrywise) and the density L1 norm.
    """
    if Q.cols != Qinv.rows:
        raise DimensionError(f"dimension mismatch: {Q.shape} vs {Qinv.shape}")
    hi = window
    if Qinv.horizon is not None:
        hi = min(window, Qinv.horizon + Q.min_support - 2 * Q.h)
    product = convolve(Q, Qinv).restrict(-window, hi)
    defect = product - CompactMeasure.dirac(0.0, np.eye(Q.rows, Qinv.cols), Q.h)
    atom_defect = float(np.max(np.abs(defect.weights))) if defect.locations.size else 0.0
    return atom_defect, defect.density_norm()


def impulse_response(Qinv: CompactMeasure, P: CompactMeasure, max_delay: float) -> CompactMeasure:
    """delta_{-L_N} * Qinv * P, the measure dX B of the fundamental solution."""
    return convolve(Qinv, P).shift(-max_delay)


def transfer_output(Qinv: CompactMeasure, P: CompactMeasure, u: GridFunction,
                    t_end: Optional[float] = None) -> GridFunction:
    """
    y = pi(Qinv * P * u) sampled at the nodes k h of [0, t_end].

    Atoms of Qinv * P meet u at their exact locations; density cells enter by
    their mass at the cell centre. The output is exact up to horizon + min
    supp(u); asking for more raises WindowError.
    """
    K = convolve(Qinv, P)
    h = K.h
    samples = u.samples.reshape(u.n, -1)
    if samples.shape[1] != K.cols:
        raise DimensionError(f"dimension mismatch: control of width {samples.shape[1]} for {K.shape}")
    active = np.flatnonzero(np.any(samples != 0.0, axis=1))
    valid = math.inf
    if Qinv.horizon is not None and active.size:
        valid = Qinv.horizon + u.t_start + max(int(active[0]) - 1, 0) * u.h
    if t_end is None:
        reach = K.support()[1] + u.t_end if not K.is_empty else 0.0
        t_end = min(valid, max(reach, 2 * h))
    if t_end > valid + 1e-9 * h:
        raise WindowError(f"window exceeded: output requested up to {t_end}, inverse is exact up to {valid}")
    last = int(math.floor(t_end / h + _SNAP))
    if last < 1:
        raise GridError(f"interval [0, {t_end}] holds fewer than two grid nodes")
    times = h * np.arange(last + 1)

    y = np.zeros((times.size, K.rows))
    for loc, W in zip(K.locations, K.weights):
        y += u.evaluate(times - loc).reshape(times.size, -1) @ W.T
    cells = K.values.shape[0]
    if cells:
        lags = h * np.arange(-(cells - 1), last + 1) - K.centers[0]
        w = u.evaluate(lags).reshape(lags.size, -1)
        for a in range(K.rows):
            for b in range(K.cols):
                y[:, a] += h * fftconvolve(w[:, b], K.values[:, a, b], mode="valid")
    return GridFunction(0.0, h, y, u.q)


def state_space_defect(system: DelaySystem, y: GridFunction) -> float:
    """L1 norm of pi(Q * y) on [0, T - L_N]; zero for extensions that follow the dynamics."""
    Q, _ = build_QP(system, y.h)
    span = y.t_end - system.max_delay
    if span <= 0:
        raise WindowError(f"state of length {y.t_end} does not exceed the largest delay {system.max_delay}")
    product = convolve(Q, CompactMeasure.from_grid_function(y))
    return product.restrict(0.0, span).l1_norm()


def measure_to_dict(measure: CompactMeasure) -> Dict[str, Any]:
    lo, hi = measure.support()
    return {
        "shape": list(measure.shape),
        "support": [lo, hi] if lo <= hi else None,
        "horizon": measure.horizon,
        "atoms": [{"loc": float(loc), "W": W.tolist()} for loc, W in zip(measure.locations, measure.weights)],
        "density": {
            "t_start": measure.origin + measure.start * measure.h,
            "h": measure.h,
            "cells": measure.values.tolist(),
        },
    }


def neumann_report_to_dict(report: NeumannReport) -> Dict[str, Any]:
    return {
        "split_eps": report.split_eps,
        "split_cut": report.split_cut,
        "g1_norm": report.g1_norm,
        "geometric_terms": report.geometric_terms,
        "g_terms": report.g_terms,
        "window": report.window,
        "atom_defect": report.atom_defect,
        "density_defect": report.density_defect,
    }
