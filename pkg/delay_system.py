"""
Delay system definitions: the difference delay equation

    x(t) = sum_j A_j x(t - L_j) + int_0^{L_N} g(s) x(t - s) ds + B u(t)

with its piecewise-polynomial distributed kernel g, plus the uniformly sampled
GridFunction used for states, controls and densities throughout the toolkit.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from errors import GridError, SystemValidationError

logger = logging.getLogger(__name__)

PI_LITERAL = "pi"
MAX_KERNEL_DEGREE = 3
# |p| * L_N below this switches kernel_laplace to the Taylor branch.
TAYLOR_SWITCH = 1e-4
_TAYLOR_TERMS = 7
_SERIES_RADIUS = 2.0
_SERIES_TERMS = 60
_SYSTEM_KEYS = {"d", "m", "delays", "A", "B", "kernel", "name", "description"}
_KERNEL_KEYS = {"breakpoints", "pieces"}


def parse_real(value: Any) -> float:
    """Parse a decimal real or the literal "pi" (optionally signed)."""
    if isinstance(value, bool):
        raise SystemValidationError(f"expected a real number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip().lower()
        sign = 1.0
        if text.startswith("-"):
            sign, text = -1.0, text[1:].strip()
        if text == PI_LITERAL:
            return sign * float(f"{math.pi:.16g}")
        try:
            return sign * float(text)
        except ValueError:
            pass
    raise SystemValidationError(f"expected a real number or \"pi\", got {value!r}")


def _parse_matrix(raw: Any, rows: int, cols: int, what: str) -> np.ndarray:
    try:
        matrix = np.array([[parse_real(v) for v in row] for row in raw], dtype=float)
    except TypeError:
        raise SystemValidationError(f"dimension mismatch: {what} is not a matrix")
    if matrix.shape != (rows, cols):
        raise SystemValidationError(
            f"dimension mismatch: {what} has shape {matrix.shape}, expected {(rows, cols)}"
        )
    return matrix


@dataclass(frozen=True, eq=False)
class PiecewisePolyKernel:
    """
    Matrix kernel g on [0, L] that is a polynomial of degree <= 3 on each
    half-open piece [s_i, s_{i+1}); the last piece is closed on the right.

    coeffs[i, k] is the d x d coefficient of s**k on piece i (absolute s).
    """

    breakpoints: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        co = np.asarray(self.coeffs, dtype=float)
        if bp.ndim != 1 or bp.size < 2:
            raise SystemValidationError("kernel needs at least two breakpoints")
        if bp[0] != 0.0:
            raise SystemValidationError("kernel domain mismatch: first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            raise SystemValidationError("kernel breakpoints not strictly increasing")
        if co.ndim != 4 or co.shape[0] != bp.size - 1 or co.shape[2] != co.shape[3]:
            raise SystemValidationError(
                f"dimension mismatch: kernel coefficients have shape {co.shape}"
            )
        if co.shape[1] > MAX_KERNEL_DEGREE + 1:
            raise SystemValidationError(
                f"kernel pieces must have degree <= {MAX_KERNEL_DEGREE}"
            )
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "coeffs", co)

    @classmethod
    def zero(cls, length: float, d: int) -> "PiecewisePolyKernel":
        return cls(np.array([0.0, length]), np.zeros((1, 1, d, d)))

    @classmethod
    def constant(cls, value: Union[float, np.ndarray], length: float, d: int = 1) -> "PiecewisePolyKernel":
        matrix = np.broadcast_to(np.asarray(value, dtype=float), (d, d))
        return cls(np.array([0.0, length]), matrix[None, None, :, :].copy())

    @property
    def d(self) -> int:
        return self.coeffs.shape[2]

    @property
    def length(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def evaluate(self, s: Union[float, np.ndarray]) -> np.ndarray:
        """Kernel values g(s), shape s.shape + (d, d); zero outside [0, L]."""
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        piece = np.clip(np.searchsorted(self.breakpoints, flat, side="right") - 1,
                        0, self.coeffs.shape[0] - 1)
        powers = flat[:, None] ** np.arange(self.coeffs.shape[1])[None, :]
        values = np.einsum("nk,nkij->nij", powers, self.coeffs[piece])
        inside = (flat >= 0.0) & (flat <= self.length)
        values[~inside] = 0.0
        return values.reshape(s.shape + (self.d, self.d))

    def moment(self, n: int) -> np.ndarray:
        """Exact moment int_0^L s**n g(s) ds."""
        total = np.zeros((self.d, self.d))
        for i in range(self.coeffs.shape[0]):
            a, b = self.breakpoints[i], self.breakpoints[i + 1]
            for k in range(self.coeffs.shape[1]):
                e = n + k + 1
                total += self.coeffs[i, k] * (b ** e - a ** e) / e
        return total

    def integral(self, a: float, b: float) -> np.ndarray:
        """Exact int_a^b g(s) ds with [a, b] clamped to [0, L]."""
        if a > b:
            raise GridError(f"kernel_integral needs a <= b, got [{a}, {b}]")
        lo_all, hi_all = max(a, 0.0), min(b, self.length)
        total = np.zeros((self.d, self.d))
        if lo_all >= hi_all:
            return total
        for i in range(self.coeffs.shape[0]):
            lo = max(lo_all, self.breakpoints[i])
            hi = min(hi_all, self.breakpoints[i + 1])
            if lo >= hi:
                continue
            for k in range(self.coeffs.shape[1]):
                total += self.coeffs[i, k] * (hi ** (k + 1) - lo ** (k + 1)) / (k + 1)
        return total

    def cumulative_integral(self, x: np.ndarray) -> np.ndarray:
        """G(x) = int_0^x g(s) ds for an array of x, shape x.shape + (d, d)."""
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.length)
        flat = x.reshape(-1)
        out = np.zeros((flat.size, self.d, self.d))
        for i in range(self.coeffs.shape[0]):
            a, b = self.breakpoints[i], self.breakpoints[i + 1]
            hi = np.clip(flat, a, b)
            for k in range(self.coeffs.shape[1]):
                weight = (hi ** (k + 1) - a ** (k + 1)) / (k + 1)
                out += weight[:, None, None] * self.coeffs[i, k]
        return out.reshape(x.shape + (self.d, self.d))

    def laplace(self, p: Union[complex, np.ndarray], order: int = 0) -> np.ndarray:
        """
        Laplace transform of the kernel.

        Args:
            p: Complex frequency, scalar or array.
            order: 0 for int g(s) e^{-ps} ds, 1 for its p-derivative
                -int s g(s) e^{-ps} ds.

        Returns:
            Complex array of shape p.shape + (d, d).
        """
        if order not in (0, 1):
            raise ValueError(f"order must be 0 or 1, got {order}")
        p = np.asarray(p, dtype=complex)
        flat = p.reshape(-1)
        out = np.zeros((flat.size, self.d, self.d), dtype=complex)
        if self.is_zero:
            return out.reshape(p.shape + (self.d, self.d))

        taylor = np.abs(flat) * self.length < TAYLOR_SWITCH
        if taylor.any():
            out[taylor] = self._laplace_taylor(flat[taylor], order)
        closed = ~taylor
        if closed.any():
            out[closed] = self._laplace_closed(flat[closed], order)
        return out.reshape(p.shape + (self.d, self.d))

    def _laplace_taylor(self, p: np.ndarray, order: int) -> np.ndarray:
        out = np.zeros((p.size, self.d, self.d), dtype=complex)
        factorial = 1.0
        for n in range(_TAYLOR_TERMS):
            if n > 0:
                factorial *= n
            term = (-p) ** n / factorial
            out += term[:, None, None] * self.moment(n + order)
        return -out if order == 1 else out

    def _laplace_closed(self, p: np.ndarray, order: int) -> np.ndarray:
        coeffs = self.coeffs
        if order == 1:
            shifted = np.zeros((coeffs.shape[0], coeffs.shape[1] + 1, self.d, self.d))
            shifted[:, 1:] = coeffs
            coeffs = shifted
        kmax = coeffs.shape[1] - 1
        out = np.zeros((p.size, self.d, self.d), dtype=complex)
        for i in range(coeffs.shape[0]):
            a, b = self.breakpoints[i], self.breakpoints[i + 1]
            local = _exp_moments(b - a, p, kmax)
            shift = np.exp(-p * a)
            for k in range(kmax + 1):
                if not np.any(coeffs[i, k]):
                    continue
                integral = np.zeros(p.size, dtype=complex)
                for j in range(k + 1):
                    integral += math.comb(k, j) * a ** (k - j) * local[j]
                out += (shift * integral)[:, None, None] * coeffs[i, k]
        return -out if order == 1 else out

    def l1_norm(self) -> float:
        """int_0^L ||g(s)||_2 ds by 16-point Gauss-Legendre per piece."""
        nodes, weights = leggauss(16)
        total = 0.0
        for i in range(self.coeffs.shape[0]):
            a, b = self.breakpoints[i], self.breakpoints[i + 1]
            s = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            norms = np.linalg.norm(self.evaluate(s), ord=2, axis=(-2, -1))
            total += 0.5 * (b - a) * float(np.dot(weights, norms))
        return total

    def sup_bound(self) -> float:
        """Upper bound on ess sup ||g||_2 from the coefficient norms."""
        bound = 0.0
        for i in range(self.coeffs.shape[0]):
            reach = max(abs(self.breakpoints[i]), abs(self.breakpoints[i + 1]))
            piece = sum(np.linalg.norm(self.coeffs[i, k], ord=2) * reach ** k
                        for k in range(self.coeffs.shape[1]))
            bound = max(bound, piece)
        return float(bound)


def _exp_moments(length: float, p: np.ndarray, kmax: int) -> np.ndarray:
    """E_i = int_0^length r**i e^{-p r} dr for i = 0..kmax; shape (kmax+1, p.size)."""
    z = p * length
    out = np.empty((kmax + 1, p.size), dtype=complex)
    small = np.abs(z) <= _SERIES_RADIUS
    if small.any():
        zs = z[small]
        terms = np.empty((_SERIES_TERMS, zs.size), dtype=complex)
        terms[0] = 1.0
        for n in range(1, _SERIES_TERMS):
            terms[n] = terms[n - 1] * (-zs) / n
        n = np.arange(_SERIES_TERMS)[:, None]
        for i in range(kmax + 1):
            out[i, small] = length ** (i + 1) * np.sum(terms / (n + i + 1), axis=0)
    large = ~small
    if large.any():
        pl, zl = p[large], z[large]
        decay = np.exp(-zl)
        partial = np.zeros(zl.size, dtype=complex)
        power = np.ones(zl.size, dtype=complex)
        for i in range(kmax + 1):
            if i > 0:
                power = power * zl / i
            partial = partial + power
            out[i, large] = math.factorial(i) / pl ** (i + 1) * (1.0 - decay * partial)
    return out


@dataclass(frozen=True, eq=False)
class DelaySystem:
    """
    Difference delay system with N discrete delays and a distributed kernel.

    delays: (N,) strictly increasing positive reals.
    A: (N, d, d) delay coefficient matrices.
    B: (d, m) input matrix.
    kernel: PiecewisePolyKernel on [0, delays[-1]].
    """

    delays: np.ndarray
    A: np.ndarray
    B: np.ndarray
    kernel: PiecewisePolyKernel
    name: str = ""

    def __post_init__(self):
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if delays.ndim != 1 or delays.size == 0:
            raise SystemValidationError("at least one delay is required")
        if delays[0] <= 0 or np.any(np.diff(delays) <= 0):
            raise SystemValidationError("delays not strictly increasing")
        if B.ndim != 2:
            raise SystemValidationError("dimension mismatch: B must be a matrix")
        d = B.shape[0]
        if A.shape != (delays.size, d, d):
            raise SystemValidationError(
                f"dimension mismatch: A has shape {A.shape}, expected {(delays.size, d, d)}"
            )
        if self.kernel.d != d:
            raise SystemValidationError(
                f"dimension mismatch: kernel is {self.kernel.d}x{self.kernel.d}, state dimension is {d}"
            )
        if abs(self.kernel.length - delays[-1]) > 1e-12 * delays[-1]:
            raise SystemValidationError(
                f"kernel domain mismatch: kernel ends at {self.kernel.length}, largest delay is {delays[-1]}"
            )
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def N(self) -> int:
        return self.delays.size

    @property
    def max_delay(self) -> float:
        return float(self.delays[-1])

    @property
    def time_bound(self) -> float:
        """Horizon 2 d L_N beyond which approximate controllability is decided."""
        return 2.0 * self.d * self.max_delay

    def with_input(self, B: np.ndarray) -> "DelaySystem":
        return DelaySystem(self.delays, self.A, B, self.kernel, self.name)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """
    Uniformly sampled function on [t_start, t_start + (n-1) h].

    samples has shape (n,) + value_shape. Between nodes the function is the
    linear interpolant; outside the domain it is zero.
    """

    t_start: float
    h: float
    samples: np.ndarray
    q: float = 2.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] < 2:
            raise GridError("a GridFunction needs at least 2 samples")
        if not self.h > 0:
            raise GridError(f"grid step must be positive, got {self.h}")
        if self.q < 1:
            raise GridError(f"norm exponent must be >= 1, got {self.q}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def from_function(cls, f, t_start: float, t_end: float, h: float, q: float = 2.0) -> "GridFunction":
        """Sample f on the uniform grid covering [t_start, t_end] (step adjusted to fit)."""
        n = grid_size(t_end - t_start, h)
        times = np.linspace(t_start, t_end, n)
        values = np.array([np.atleast_1d(f(t)) for t in times], dtype=float)
        return cls(t_start, (t_end - t_start) / (n - 1), values, q)

    @classmethod
    def constant(cls, value, t_start: float, t_end: float, h: float, q: float = 2.0) -> "GridFunction":
        n = grid_size(t_end - t_start, h)
        value = np.atleast_1d(np.asarray(value, dtype=float))
        samples = np.broadcast_to(value, (n,) + value.shape).copy()
        return cls(t_start, (t_end - t_start) / (n - 1), samples, q)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n - 1) * self.h

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.h * np.arange(self.n)

    @property
    def value_shape(self) -> tuple:
        return self.samples.shape[1:]

    def evaluate(self, t: Union[float, np.ndarray], outside: str = "zero") -> np.ndarray:
        """
        Linear interpolation at t; shape t.shape + value_shape.

        Args:
            t: Evaluation times.
            outside: "zero" (default) or "clamp" for end-value extension.
        """
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1)
        pos = (flat - self.t_start) / self.h
        idx = np.clip(np.floor(pos).astype(np.int64), 0, self.n - 2)
        frac = np.clip(pos - idx, 0.0, 1.0)
        frac = frac.reshape((-1,) + (1,) * len(self.value_shape))
        values = (1.0 - frac) * self.samples[idx] + frac * self.samples[idx + 1]
        if outside == "zero":
            slack = 1e-9 * self.h
            inside = (flat >= self.t_start - slack) & (flat <= self.t_end + slack)
            values[~inside] = 0.0
        return values.reshape(t.shape + self.value_shape)

    def resample(self, t_start: float, h: float, n: int, outside: str = "zero") -> "GridFunction":
        times = t_start + h * np.arange(n)
        return GridFunction(t_start, h, self.evaluate(times, outside), self.q)

    def same_grid(self, other: "GridFunction") -> bool:
        return (self.n == other.n and abs(self.h - other.h) <= 1e-12 * self.h
                and abs(self.t_start - other.t_start) <= 1e-9 * self.h)

    def with_samples(self, samples: np.ndarray) -> "GridFunction":
        return GridFunction(self.t_start, self.h, samples, self.q)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        if not self.same_grid(other):
            other = other.resample(self.t_start, self.h, self.n)
        return self.with_samples(self.samples + other.samples)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        if not self.same_grid(other):
            other = other.resample(self.t_start, self.h, self.n)
        return self.with_samples(self.samples - other.samples)

    def __mul__(self, scalar: float) -> "GridFunction":
        return self.with_samples(self.samples * scalar)

    __rmul__ = __mul__


def grid_size(span: float, h: float) -> int:
    """Number of nodes of the uniform grid covering an interval of length span with step <= h."""
    if not h > 0:
        raise GridError(f"grid step must be positive, got {h}")
    if span <= 0:
        raise GridError(f"grid interval must have positive length, got {span}")
    cells = span / h
    rounded = round(cells)
    if abs(cells - rounded) <= 1e-9 * max(1.0, cells):
        return max(int(rounded), 1) + 1
    return int(math.ceil(cells)) + 1


def validate_system(raw: Dict[str, Any]) -> DelaySystem:
    """
    Build a DelaySystem from a raw description (the JSON system format).

    Args:
        raw: Mapping with keys d, m, delays, A, B and optionally kernel, name.

    Returns:
        DelaySystem: validated system.
    """
    if not isinstance(raw, dict):
        raise SystemValidationError("system description must be a JSON object")
    unknown = set(raw) - _SYSTEM_KEYS
    if unknown:
        raise SystemValidationError(f"unknown keys in system description: {sorted(unknown)}")
    for key in ("d", "m", "delays", "A", "B"):
        if key not in raw:
            raise SystemValidationError(f"missing key {key!r} in system description")
    d, m = raw["d"], raw["m"]
    if not (isinstance(d, int) and d > 0 and isinstance(m, int) and m > 0):
        raise SystemValidationError("d and m must be positive integers")

    delays = np.array([parse_real(v) for v in raw["delays"]], dtype=float)
    if delays.size == 0:
        raise SystemValidationError("at least one delay is required")
    if delays[0] <= 0 or np.any(np.diff(delays) <= 0):
        raise SystemValidationError("delays not strictly increasing")
    if len(raw["A"]) != delays.size:
        raise SystemValidationError(
            f"dimension mismatch: {len(raw['A'])} matrices A for {delays.size} delays"
        )
    A = np.stack([_parse_matrix(a, d, d, f"A[{j}]") for j, a in enumerate(raw["A"])])
    B = _parse_matrix(raw["B"], d, m, "B")

    kernel_raw = raw.get("kernel")
    if kernel_raw is None:
        kernel = PiecewisePolyKernel.zero(delays[-1], d)
    else:
        kernel = _parse_kernel(kernel_raw, d, delays[-1])
    system = DelaySystem(delays, A, B, kernel, str(raw.get("name", "")))
    logger.debug(f"Validated system d={system.d} m={system.m} N={system.N}")
    return system


def _parse_kernel(raw: Dict[str, Any], d: int, max_delay: float) -> PiecewisePolyKernel:
    if not isinstance(raw, dict):
        raise SystemValidationError("kernel must be a JSON object")
    unknown = set(raw) - _KERNEL_KEYS
    if unknown:
        raise SystemValidationError(f"unknown keys in kernel description: {sorted(unknown)}")
    breakpoints = np.array([parse_real(v) for v in raw.get("breakpoints", [])], dtype=float)
    pieces = raw.get("pieces", [])
    if breakpoints.size < 2 or breakpoints[0] != 0.0:
        raise SystemValidationError("kernel domain mismatch: breakpoints must start at 0")
    if abs(breakpoints[-1] - max_delay) > 1e-12 * max_delay:
        raise SystemValidationError(
            f"kernel domain mismatch: kernel ends at {breakpoints[-1]}, largest delay is {max_delay}"
        )
    breakpoints[-1] = max_delay
    if len(pieces) != breakpoints.size - 1:
        raise SystemValidationError(
            f"dimension mismatch: {len(pieces)} kernel pieces for {breakpoints.size - 1} intervals"
        )
    degree = max((len(piece) for piece in pieces), default=1)
    if degree == 0 or degree > MAX_KERNEL_DEGREE + 1:
        raise SystemValidationError(f"kernel pieces must have degree <= {MAX_KERNEL_DEGREE}")
    coeffs = np.zeros((len(pieces), degree, d, d))
    for i, piece in enumerate(pieces):
        for k, matrix in enumerate(piece):
            coeffs[i, k] = _parse_matrix(matrix, d, d, f"kernel piece {i} coefficient {k}")
    return PiecewisePolyKernel(breakpoints, coeffs)


def load_system(path: Union[str, Path]) -> DelaySystem:
    """Read and validate a system description file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"System file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise SystemValidationError(f"malformed system file {path.name}: {e}")
    system = validate_system(raw)
    logger.info(f"Loaded system {path.name}: d={system.d}, m={system.m}, delays={system.delays.tolist()}")
    return system


def system_to_dict(system: DelaySystem) -> Dict[str, Any]:
    return {
        "name": system.name,
        "d": system.d,
        "m": system.m,
        "delays": system.delays.tolist(),
        "A": system.A.tolist(),
        "B": system.B.tolist(),
        "kernel": {
            "breakpoints": system.kernel.breakpoints.tolist(),
            "pieces": system.kernel.coeffs.tolist(),
        },
    }


def kernel_laplace(kernel: PiecewisePolyKernel, p: Union[complex, np.ndarray], order: int = 0) -> np.ndarray:
    """int_0^{L_N} g(s) e^{-ps} ds (order 0) or its p-derivative (order 1)."""
    return kernel.laplace(p, order)


def kernel_integral(kernel: PiecewisePolyKernel, a: float, b: float) -> np.ndarray:
    """Exact int_a^b g(s) ds, interval clamped to the kernel domain."""
    return kernel.integral(a, b)


def kernel_eval(kernel: PiecewisePolyKernel, s: Union[float, np.ndarray]) -> np.ndarray:
    return kernel.evaluate(s)


def kernel_l1_norm(kernel: PiecewisePolyKernel) -> float:
    return kernel.l1_norm()


def kernel_sup_bound(kernel: PiecewisePolyKernel) -> float:
    return kernel.sup_bound()


def constant_kernel(value: Union[float, np.ndarray], length: float, d: int = 1) -> PiecewisePolyKernel:
    """Kernel equal to value on all of [0, length]."""
    return PiecewisePolyKernel.constant(value, length, d)
