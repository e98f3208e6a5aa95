"""
Characteristic matrix H(p) = I - sum_j A_j e^{-p L_j} - int_0^{L_N} g(s) e^{-ps} ds,
zero counting of det H by the argument principle, root refinement and the
frequency-domain controllability check:

  (b) rank [A_N, B] = d, and
  (a) rank [H(p), B] = d at every root p of det H in the scanned rectangle.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.linalg import svdvals

from delay_system import DelaySystem
from errors import BoundaryZeroError, GridError, PhaseTrackingError

logger = logging.getLogger(__name__)

MAX_PERTURBATIONS = 5
IM_PERIODS = 20.0
PERTURBATION = 1e-6
NEWTON_ITERATIONS = 100
# quadrisection cut positions, kept off the symmetry axes of real systems
_SPLIT_FRACTIONS = [(0.5137, 0.4871), (0.4619, 0.5413), (0.5581, 0.4357), (0.4289, 0.5723)]
_MAX_REFINEMENTS = 60


class Outcome(str, Enum):
    UNCONTROLLABLE_RANK_ANB = "UNCONTROLLABLE_RANK_ANB"
    UNCONTROLLABLE_FREQUENCY = "UNCONTROLLABLE_FREQUENCY"
    CONTROLLABLE_UP_TO_REGION = "CONTROLLABLE_UP_TO_REGION"


@dataclass(frozen=True)
class Rectangle:
    """Closed rectangle re_min <= Re p <= re_max, im_min <= Im p <= im_max."""

    re_min: float
    re_max: float
    im_min: float
    im_max: float

    def __post_init__(self):
        if not (self.re_min < self.re_max and self.im_min < self.im_max):
            raise GridError(f"empty rectangle {self}")

    @classmethod
    def symmetric(cls, re_min: float, re_max: float, im_max: float) -> "Rectangle":
        return cls(re_min, re_max, -im_max, im_max)

    @property
    def diameter(self) -> float:
        return math.hypot(self.re_max - self.re_min, self.im_max - self.im_min)

    @property
    def center(self) -> complex:
        return complex(0.5 * (self.re_min + self.re_max), 0.5 * (self.im_min + self.im_max))

    @property
    def is_symmetric(self) -> bool:
        return abs(self.im_min + self.im_max) <= 1e-12 * max(1.0, self.im_max)

    def expanded(self, delta: float) -> "Rectangle":
        return Rectangle(self.re_min - delta, self.re_max + delta, self.im_min - delta, self.im_max + delta)

    def contains(self, z: complex, slack: float = 0.0) -> bool:
        return (self.re_min - slack <= z.real <= self.re_max + slack
                and self.im_min - slack <= z.imag <= self.im_max + slack)

    def split(self, fx: float, fy: float) -> List["Rectangle"]:
        x = self.re_min + fx * (self.re_max - self.re_min)
        y = self.im_min + fy * (self.im_max - self.im_min)
        return [Rectangle(self.re_min, x, self.im_min, y), Rectangle(x, self.re_max, self.im_min, y),
                Rectangle(self.re_min, x, y, self.im_max), Rectangle(x, self.re_max, y, self.im_max)]

    def to_dict(self) -> Dict[str, float]:
        return {"re_min": self.re_min, "re_max": self.re_max, "im_min": self.im_min, "im_max": self.im_max}


@dataclass(frozen=True, eq=False)
class CharacteristicEvaluation:
    p: complex
    H: np.ndarray
    dH: np.ndarray
    det: complex
    ddet: complex
    sigma_min_aug: float
    sigma_max_aug: float

    @property
    def margin(self) -> float:
        """sigma_min / sigma_max of [H(p), B]."""
        return self.sigma_min_aug / self.sigma_max_aug if self.sigma_max_aug > 0 else 0.0


def characteristic_matrix(system: DelaySystem, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """H(p) and dH/dp for an array of p; each of shape p.shape + (d, d)."""
    p = np.asarray(p, dtype=complex)
    flat = p.reshape(-1)
    decay = np.exp(-np.outer(flat, system.delays))
    H = np.eye(system.d) - np.einsum("nj,jab->nab", decay, system.A) - system.kernel.laplace(flat, 0)
    dH = np.einsum("nj,jab->nab", decay * system.delays, system.A) - system.kernel.laplace(flat, 1)
    shape = p.shape + (system.d, system.d)
    return H.reshape(shape), dH.reshape(shape)


def _adjugate(H: np.ndarray) -> np.ndarray:
    d = H.shape[-1]
    if d == 1:
        return np.ones_like(H)
    adj = np.empty_like(H)
    for i in range(d):
        for j in range(d):
            minor = np.delete(np.delete(H, j, axis=-2), i, axis=-1)
            adj[..., i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return adj


def det_and_derivative(system: DelaySystem, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """det H(p) and its p-derivative trace(adj(H) H')."""
    H, dH = characteristic_matrix(system, p)
    det = np.linalg.det(H)
    ddet = np.einsum("...ij,...ji->...", _adjugate(H), dH)
    return det, ddet


def char_eval(system: DelaySystem, p: complex) -> CharacteristicEvaluation:
    H, dH = characteristic_matrix(system, np.array([p]))
    H, dH = H[0], dH[0]
    sigma = svdvals(np.hstack([H, system.B.astype(complex)]))
    ddet = complex(np.trace(_adjugate(H[None])[0] @ dH))
    return CharacteristicEvaluation(complex(p), H, dH, complex(np.linalg.det(H)), ddet,
                                    float(sigma[system.d - 1]), float(sigma[0]))


def default_rectangle(system: DelaySystem, re_min: float = -10.0, re_max: Optional[float] = None,
                      im_max: Optional[float] = None) -> Rectangle:
    """
    Scan region: Re in [re_min, ln(sum ||A_j|| + ||g||_1) + 1], |Im| <= 20 * 2 pi / L_1.
    """
    if re_max is None:
        bound = float(sum(np.linalg.norm(A, ord=2) for A in system.A)) + system.kernel.l1_norm()
        re_max = math.log(bound) + 1.0 if bound > 0 else 1.0
        re_max = max(re_max, re_min + 1.0)
        logger.info(f"Right edge Re p = {re_max:.4g} from sum ||A_j|| + ||g||_1 = {bound:.4g}")
    if im_max is None:
        im_max = IM_PERIODS * 2.0 * math.pi / float(system.delays[0])
    return Rectangle.symmetric(re_min, re_max, im_max)


class _Unresolved(Exception):
    def __init__(self, smallest: float):
        super().__init__(smallest)
        self.smallest = smallest


def _boundary(rect: Rectangle, spacing: float) -> np.ndarray:
    corners = [complex(rect.re_min, rect.im_min), complex(rect.re_max, rect.im_min),
               complex(rect.re_max, rect.im_max), complex(rect.re_min, rect.im_max)]
    points = []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        n = int(min(20000, max(16, math.ceil(abs(b - a) / spacing))))
        points.append(a + (b - a) * np.arange(n) / n)
    points.append(np.array([corners[0]]))
    return np.concatenate(points)


def _winding(system: DelaySystem, rect: Rectangle) -> int:
    spacing = 0.5 / system.max_delay
    z = _boundary(rect, spacing)
    f, _ = det_and_derivative(system, z)
    scale = max(1.0, float(np.median(np.abs(f))))
    for _ in range(_MAX_REFINEMENTS):
        if np.min(np.abs(f)) < 1e-13 * scale:
            raise _Unresolved(float(np.min(np.abs(f))))
        step = np.angle(f[1:] / f[:-1])
        bad = np.nonzero(np.abs(step) >= 0.5 * math.pi)[0]
        if bad.size == 0:
            winding = float(np.sum(step)) / (2.0 * math.pi)
            count = int(round(winding))
            if count < 0 or abs(winding - count) > 1e-6:
                raise PhaseTrackingError(f"phase tracking gave non-integer or negative winding {winding:.6g}")
            return count
        if np.min(np.abs(z[bad + 1] - z[bad])) < 1e-12 * rect.diameter:
            raise _Unresolved(float(np.min(np.abs(f))))
        mid = 0.5 * (z[bad] + z[bad + 1])
        f_mid, _ = det_and_derivative(system, mid)
        z = np.insert(z, bad + 1, mid)
        f = np.insert(f, bad + 1, f_mid)
    raise PhaseTrackingError(f"phase tracking did not settle after {_MAX_REFINEMENTS} refinements")


def count_zeros(system: DelaySystem, rectangle: Rectangle) -> int:
    """
    Zeros of det H inside the rectangle, with multiplicity.

    A zero on (or numerically at) the boundary makes the rectangle grow by
    1e-6 of its diameter, up to MAX_PERTURBATIONS times.
    """
    rect = rectangle
    smallest = math.inf
    for attempt in range(MAX_PERTURBATIONS + 1):
        try:
            return _winding(system, rect)
        except _Unresolved as e:
            smallest = min(smallest, e.smallest)
            if attempt == MAX_PERTURBATIONS:
                break
            rect = rectangle.expanded(PERTURBATION * rectangle.diameter * (attempt + 1))
            logger.warning(f"Zero of det H near the boundary of {rectangle}, retrying with {rect}")
    raise BoundaryZeroError(
        f"det H vanishes on the boundary of {rectangle} (min |det H| = {smallest:.3g}) "
        f"after {MAX_PERTURBATIONS} perturbations"
    )


@dataclass
class RootSet:
    """Refined roots of det H in a rectangle, with boxes where Newton failed."""

    rectangle: Rectangle
    count: int
    roots: List[complex] = field(default_factory=list)
    unresolved: List[Rectangle] = field(default_factory=list)

    def __iter__(self) -> Iterator[complex]:
        return iter(self.roots)

    def __len__(self) -> int:
        return len(self.roots)


def _newton(system: DelaySystem, z0: complex, tol: float, iterations: int) -> Optional[complex]:
    """Newton on det H from z0; None when it diverges or stalls away from a zero."""
    z = complex(z0)
    # diverging iterates overflow exp(-p L); they are rejected below
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(iterations):
            det, ddet = det_and_derivative(system, np.array([z]))
            if ddet[0] == 0:
                break
            step = det[0] / ddet[0]
            z -= step
            if not np.isfinite(z):
                return None
            if abs(step) <= 1e-15 * max(1.0, abs(z)):
                break
        det, ddet = det_and_derivative(system, np.array([z]))
        if abs(det[0]) <= tol * max(1.0, abs(ddet[0])):
            return z
    return None


def _polish(system: DelaySystem, box: Rectangle, tol: float) -> Optional[complex]:
    slack = 1e-6 * box.diameter
    starts = [box.center] + [complex(box.re_min + a * (box.re_max - box.re_min),
                                     box.im_min + b * (box.im_max - box.im_min))
                             for a, b in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]]
    for iterations in (NEWTON_ITERATIONS, 10 * NEWTON_ITERATIONS):
        for z0 in starts:
            z = _newton(system, z0, tol, iterations)
            if z is not None and box.contains(z, slack):
                return z
    return None


def _worker_count(threads: Optional[int]) -> int:
    if threads is None:
        return os.cpu_count() or 1
    return max(1, int(threads))


def _split_counts(system: DelaySystem, box: Rectangle, expected: int,
                  pool: Optional[ThreadPoolExecutor]) -> Optional[List[Tuple[Rectangle, int]]]:
    for fx, fy in _SPLIT_FRACTIONS:
        children = box.split(fx, fy)
        try:
            if pool is not None:
                counts = list(pool.map(lambda child: count_zeros(system, child), children))
            else:
                counts = [count_zeros(system, child) for child in children]
        except BoundaryZeroError:
            continue
        if sum(counts) == expected:
            return list(zip(children, counts))
        logger.debug(f"Child counts {counts} do not add up to {expected} for {box}, trying another split")
    return None


def find_roots(system: DelaySystem, rectangle: Rectangle, tol: float = 1e-10,
               threads: Optional[int] = None) -> RootSet:
    """
    Locate every zero of det H in the rectangle.

    Boxes are quadrisected until they hold a single zero (or are smaller than
    1e3 * tol), then polished by Newton on det H / det H'. Boxes Newton cannot
    resolve are reported as unresolved.

    Args:
        system: Delay system.
        rectangle: Region to search.
        tol: Newton acceptance |det H| <= tol * max(1, |det H'|).
        threads: Worker cap for counting sub-rectangles.

    Returns:
        RootSet: roots (conjugate pairs enforced) and unresolved boxes.
    """
    total = count_zeros(system, rectangle)
    result = RootSet(rectangle, total)
    logger.info(f"{total} zeros of det H in {rectangle}")
    if total == 0:
        return result
    workers = _worker_count(threads)
    pool = ThreadPoolExecutor(max_workers=min(workers, 4)) if workers > 1 else None
    try:
        stack = [(rectangle, total)]
        while stack:
            box, n = stack.pop()
            if n == 0:
                continue
            tiny = box.diameter < 1e3 * tol
            if n == 1 or tiny:
                root = _polish(system, box, tol)
                if root is not None:
                    result.roots.extend([root] * n)
                    continue
                if tiny:
                    logger.warning(f"Newton did not converge in {box}, flagged unresolved")
                    result.unresolved.append(box)
                    continue
            children = _split_counts(system, box, n, pool)
            if children is None:
                logger.warning(f"Could not split {box} consistently, flagged unresolved")
                result.unresolved.append(box)
                continue
            stack.extend(children)
    finally:
        if pool is not None:
            pool.shutdown()
    result.roots = _pair_conjugates(result.roots, rectangle)
    return result


def _pair_conjugates(roots: List[complex], rectangle: Rectangle) -> List[complex]:
    snapped = [complex(z.real, 0.0) if abs(z.imag) <= 1e-9 * max(1.0, abs(z)) else z for z in roots]
    if not rectangle.is_symmetric:
        return sorted(snapped, key=lambda z: (z.real, z.imag))
    upper = [z for z in snapped if z.imag > 0]
    lower = [z for z in snapped if z.imag < 0]
    real = [z for z in snapped if z.imag == 0]
    paired = []
    for z in upper:
        if lower:
            distances = [abs(w - z.conjugate()) for w in lower]
            k = int(np.argmin(distances))
            if distances[k] <= 1e-6 * max(1.0, abs(z)):
                lower.pop(k)
                paired += [z, z.conjugate()]
                continue
        logger.warning(f"Root {z} has no conjugate partner")
        paired.append(z)
    return sorted(real + paired + lower, key=lambda z: (z.real, z.imag))


@dataclass(frozen=True)
class RootMargin:
    p: complex
    det_abs: float
    margin: float


@dataclass
class ControllabilityVerdict:
    """Outcome of the rank test on [A_N, B] and on [H(p), B] at the roots of det H."""

    outcome: Outcome
    rectangle: Rectangle
    time_bound: float
    anb_margin: float
    rank_tol: float
    witness: Optional[complex] = None
    roots: List[RootMargin] = field(default_factory=list)
    unresolved: List[Rectangle] = field(default_factory=list)
    scan_margin: Optional[float] = None

    @property
    def controllable(self) -> bool:
        return self.outcome == Outcome.CONTROLLABLE_UP_TO_REGION

    @property
    def min_root_margin(self) -> Optional[float]:
        return min((r.margin for r in self.roots), default=None)

    @property
    def message(self) -> str:
        if self.outcome == Outcome.UNCONTROLLABLE_RANK_ANB:
            return "rank [A_N, B] < d: not approximately controllable"
        if self.outcome == Outcome.UNCONTROLLABLE_FREQUENCY:
            return f"rank [H(p), B] < d at p = {self.witness}: not approximately controllable"
        return (f"approximately controllable in any time T > {self.time_bound:.6g}, "
                f"provided no characteristic root outside the scanned rectangle breaks the rank condition")


def _anb_margin(system: DelaySystem) -> float:
    sigma = svdvals(np.hstack([system.A[-1], system.B]))
    return float(sigma[system.d - 1] / sigma[0]) if sigma[0] > 0 else 0.0


def check_controllability(system: DelaySystem, rectangle: Optional[Rectangle] = None,
                          rank_tol: float = 1e-8, tol: float = 1e-10,
                          threads: Optional[int] = None) -> ControllabilityVerdict:
    """
    Decide approximate controllability from the rank conditions.

    Args:
        system: Delay system.
        rectangle: Region where roots of det H are searched (default_rectangle if None).
        rank_tol: Relative singular value threshold in (0, 1).
        tol: Root acceptance tolerance.
        threads: Worker cap for root finding.

    Returns:
        ControllabilityVerdict
    """
    if not 0 < rank_tol < 1:
        raise GridError(f"rank_tol must lie in (0, 1), got {rank_tol}")
    rectangle = default_rectangle(system) if rectangle is None else rectangle
    anb = _anb_margin(system)
    verdict = ControllabilityVerdict(Outcome.CONTROLLABLE_UP_TO_REGION, rectangle,
                                     system.time_bound, anb, rank_tol)
    if anb <= rank_tol:
        verdict.outcome = Outcome.UNCONTROLLABLE_RANK_ANB
        logger.info(f"rank [A_N, B] < d (margin {anb:.3g})")
        return verdict

    found = find_roots(system, rectangle, tol, threads)
    verdict.unresolved = found.unresolved
    for p in found.roots:
        ev = char_eval(system, p)
        verdict.roots.append(RootMargin(p, abs(ev.det), ev.margin))
    for box in found.unresolved:
        ev = char_eval(system, box.center)
        verdict.roots.append(RootMargin(box.center, abs(ev.det), ev.margin))
    failing = [r for r in verdict.roots if r.margin <= rank_tol]
    if failing:
        witness = min(failing, key=lambda r: (abs(r.p.imag), r.margin))
        verdict.outcome = Outcome.UNCONTROLLABLE_FREQUENCY
        verdict.witness = witness.p
        logger.info(f"rank [H(p), B] < d at p = {witness.p:.10g} (margin {witness.margin:.3g})")
    else:
        logger.info(f"Controllable up to region: {len(verdict.roots)} roots, time bound {system.time_bound:.6g}")
    return verdict


def min_rank_margin_scan(system: DelaySystem, rectangle: Rectangle, n: int = 200) -> Tuple[float, complex]:
    """Smallest sigma_min / sigma_max of [H(p), B] over an n x n grid of the rectangle."""
    re = np.linspace(rectangle.re_min, rectangle.re_max, n)
    im = np.linspace(rectangle.im_min, rectangle.im_max, n)
    p = (re[:, None] + 1j * im[None, :]).reshape(-1)
    H, _ = characteristic_matrix(system, p)
    augmented = np.concatenate([H, np.broadcast_to(system.B.astype(complex), (p.size,) + system.B.shape)], axis=2)
    sigma = np.linalg.svd(augmented, compute_uv=False)
    margin = sigma[:, system.d - 1] / np.maximum(sigma[:, 0], np.finfo(float).tiny)
    k = int(np.argmin(margin))
    return float(margin[k]), complex(p[k])


def _complex_to_dict(z: Optional[complex]) -> Optional[Dict[str, float]]:
    if z is None:
        return None
    return {"re": z.real, "im": z.imag}


def verdict_to_dict(verdict: ControllabilityVerdict) -> Dict[str, Any]:
    return {
        "outcome": verdict.outcome.value,
        "message": verdict.message,
        "witness": _complex_to_dict(verdict.witness),
        "anb_margin": verdict.anb_margin,
        "min_root_margin": verdict.min_root_margin,
        "rank_tol": verdict.rank_tol,
        "scan_margin": verdict.scan_margin,
        "roots": [{"re": r.p.real, "im": r.p.imag, "abs_det": r.det_abs, "margin": r.margin}
                  for r in verdict.roots],
        "unresolved": [box.to_dict() for box in verdict.unresolved],
        "region": verdict.rectangle.to_dict(),
        "time_bound": verdict.time_bound,
    }
