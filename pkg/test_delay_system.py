#!/usr/bin/env python3
"""
Tests for system parsing, the piecewise-polynomial kernel and GridFunction.
"""

import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from delay_system import (TAYLOR_SWITCH, DelaySystem, GridFunction, PiecewisePolyKernel, constant_kernel,
                          grid_size, kernel_eval, kernel_integral, kernel_l1_norm, kernel_laplace,
                          kernel_sup_bound, load_system, parse_real, system_to_dict, validate_system)
from errors import GridError, SystemValidationError

SYSTEMS = Path(__file__).parent / "systems"


def scalar_pi_raw():
    return {
        "d": 1, "m": 1,
        "delays": [1, "pi"],
        "A": [[[0.3]], [[0.2]]],
        "B": [[1]],
        "kernel": {"breakpoints": [0, "pi"], "pieces": [[[[1]]]]},
    }


def two_piece_kernel():
    # g(s) = 1 + 2s on [0, 1), 3 - s^2 on [1, 2]
    coeffs = np.zeros((2, 3, 1, 1))
    coeffs[0, 0], coeffs[0, 1] = 1.0, 2.0
    coeffs[1, 0], coeffs[1, 2] = 3.0, -1.0
    return PiecewisePolyKernel(np.array([0.0, 1.0, 2.0]), coeffs)


def scalar_g(s):
    return 1.0 + 2.0 * s if s < 1.0 else 3.0 - s * s


def test_parse_real_accepts_pi_literal():
    assert parse_real("pi") == math.pi
    assert parse_real(" -PI ") == -math.pi
    assert parse_real(2) == 2.0
    assert parse_real("0.25") == 0.25


@pytest.mark.parametrize("value", [True, "tau", None, [1.0]])
def test_parse_real_rejects_other_values(value):
    with pytest.raises(SystemValidationError):
        parse_real(value)


def test_validate_scalar_pi_system():
    system = validate_system(scalar_pi_raw())
    assert system.d == 1 and system.m == 1 and system.N == 2
    assert_allclose(system.delays, [1.0, math.pi])
    assert system.max_delay == math.pi
    assert system.time_bound == pytest.approx(2 * math.pi)
    assert_allclose(system.kernel.evaluate(np.array([0.0, 1.5, math.pi]))[:, 0, 0], [1.0, 1.0, 1.0])


def test_missing_kernel_means_zero_kernel():
    raw = scalar_pi_raw()
    del raw["kernel"]
    system = validate_system(raw)
    assert system.kernel.is_zero
    assert system.kernel.length == pytest.approx(math.pi)


@pytest.mark.parametrize("change, message", [
    ({"delays": [2, 1]}, "not strictly increasing"),
    ({"delays": [0, 1]}, "not strictly increasing"),
    ({"B": [[1, 0]]}, "dimension mismatch"),
    ({"A": [[[0.3]]]}, "dimension mismatch"),
    ({"kernel": {"breakpoints": [0, 3], "pieces": [[[[1]]]]}}, "kernel domain mismatch"),
    ({"extra": 1}, "unknown keys"),
])
def test_invalid_descriptions_are_rejected(change, message):
    raw = scalar_pi_raw()
    raw.update(change)
    with pytest.raises(SystemValidationError, match=message):
        validate_system(raw)


def test_missing_required_key():
    raw = scalar_pi_raw()
    del raw["B"]
    with pytest.raises(SystemValidationError, match="missing key"):
        validate_system(raw)


def test_system_dict_reloads_to_the_same_system():
    system = validate_system(scalar_pi_raw())
    raw = system_to_dict(system)
    again = validate_system(raw)
    assert_allclose(again.delays, system.delays)
    assert_allclose(again.A, system.A)
    assert_allclose(again.kernel.coeffs, system.kernel.coeffs)


@pytest.mark.parametrize("name", ["scalar_pi", "scalar_pi_mild", "rank_deficient",
                                  "uncontrolled_mode", "pure_difference", "memoryless"])
def test_bundled_systems_load(name):
    system = load_system(SYSTEMS / f"{name}.json")
    assert isinstance(system, DelaySystem)


def test_load_system_reports_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"d\": 1,", encoding="utf-8")
    with pytest.raises(SystemValidationError, match="malformed"):
        load_system(path)


def test_kernel_pieces_are_half_open():
    kernel = two_piece_kernel()
    values = kernel_eval(kernel, np.array([0.0, 0.999, 1.0, 2.0, 2.5, -0.1]))[:, 0, 0]
    assert_allclose(values, [1.0, 2.998, 2.0, -1.0, 0.0, 0.0])


def test_kernel_integral_matches_quadrature():
    kernel = two_piece_kernel()
    exact, _ = quad(scalar_g, 0.3, 1.7, points=[1.0], epsabs=1e-14)
    assert kernel_integral(kernel, 0.3, 1.7)[0, 0] == pytest.approx(exact, abs=1e-12)
    # clamped to the kernel domain
    assert kernel_integral(kernel, -1.0, 5.0)[0, 0] == pytest.approx(kernel.integral(0.0, 2.0)[0, 0])
    with pytest.raises(GridError):
        kernel_integral(kernel, 1.0, 0.5)


def test_cumulative_integral_agrees_with_integral():
    kernel = two_piece_kernel()
    x = np.array([0.0, 0.4, 1.0, 1.3, 2.0, 3.0])
    expected = [kernel.integral(0.0, min(v, 2.0))[0, 0] for v in x]
    assert_allclose(kernel.cumulative_integral(x)[:, 0, 0], expected, atol=1e-14)


@pytest.mark.parametrize("p", [0.7 + 2.0j, 5.0, 30.0j, -1.5 + 0.5j])
def test_kernel_laplace_matches_quadrature(p):
    kernel = two_piece_kernel()

    def part(s, which):
        value = scalar_g(s) * np.exp(-p * s)
        return value.real if which == 0 else value.imag

    re, _ = quad(part, 0.0, 2.0, args=(0,), points=[1.0], limit=200, epsabs=1e-13, epsrel=1e-13)
    im, _ = quad(part, 0.0, 2.0, args=(1,), points=[1.0], limit=200, epsabs=1e-13, epsrel=1e-13)
    assert_allclose(kernel_laplace(kernel, p)[0, 0], re + 1j * im, atol=1e-9)


def test_kernel_laplace_small_p_uses_moments():
    kernel = two_piece_kernel()
    p = 1e-7 + 1e-7j
    expected = kernel.moment(0) - p * kernel.moment(1)
    assert_allclose(kernel_laplace(kernel, p), expected, atol=1e-12)


@pytest.mark.parametrize("p", [1e-6, 0.8 - 0.3j, 4.0 + 7.0j])
def test_kernel_laplace_derivative_matches_difference_quotient(p):
    kernel = two_piece_kernel()
    delta = 1e-5
    numeric = (kernel_laplace(kernel, p + delta) - kernel_laplace(kernel, p - delta)) / (2 * delta)
    assert_allclose(kernel_laplace(kernel, p, order=1), numeric, atol=1e-7)


def random_kernel(seed):
    rng = np.random.default_rng(seed)
    pieces = int(rng.integers(1, 4))
    inner = np.sort(rng.uniform(0.2, 2.8, size=pieces - 1))
    breakpoints = np.concatenate([[0.0], inner, [3.0]])
    degree = int(rng.integers(0, 4))
    coeffs = rng.uniform(-1.0, 1.0, size=(pieces, degree + 1, 1, 1))
    return PiecewisePolyKernel(breakpoints, coeffs)


@pytest.mark.parametrize("seed", range(6))
def test_random_kernels_match_quadrature(seed):
    kernel = random_kernel(seed)
    points = list(kernel.breakpoints[1:-1])

    def g(s):
        return float(kernel.evaluate(s)[0, 0])

    a, b = np.sort(np.random.default_rng(1000 + seed).uniform(0.0, 3.0, size=2))
    exact, _ = quad(g, a, b, points=[x for x in points if a < x < b] or None, epsabs=1e-14, limit=200)
    assert kernel_integral(kernel, a, b)[0, 0] == pytest.approx(exact, abs=1e-11)

    for p in (0.5 + 1.0j, 3.0, -0.7 + 4.0j):
        for order in (0, 1):
            def part(s, which):
                value = (-s) ** order * g(s) * np.exp(-p * s)
                return value.real if which == 0 else value.imag

            re, _ = quad(part, 0.0, 3.0, args=(0,), points=points or None, limit=200, epsabs=1e-13)
            im, _ = quad(part, 0.0, 3.0, args=(1,), points=points or None, limit=200, epsabs=1e-13)
            assert_allclose(kernel_laplace(kernel, p, order=order)[0, 0], re + 1j * im, atol=1e-9)


@pytest.mark.parametrize("factor", [0.5, 0.9, 0.999, 1.001, 1.1, 2.0])
@pytest.mark.parametrize("angle", [0.0, 0.7, math.pi / 2, 2.5])
def test_laplace_branches_agree_around_the_switch(factor, angle):
    kernel = two_piece_kernel()
    p = np.array([factor * TAYLOR_SWITCH / kernel.length * np.exp(1j * angle)])
    for order in (0, 1):
        taylor = kernel._laplace_taylor(p, order)
        closed = kernel._laplace_closed(p, order)
        assert_allclose(taylor, closed, rtol=1e-12, atol=1e-14)
        assert_allclose(kernel_laplace(kernel, p, order=order), closed, rtol=1e-12, atol=1e-14)


def test_scalar_pi_kernel_laplace_at_one():
    kernel = load_system(SYSTEMS / "scalar_pi.json").kernel
    assert kernel_laplace(kernel, 1.0)[0, 0] == pytest.approx(1.0 - math.exp(-math.pi), abs=1e-14)


def test_kernel_norms():
    kernel = constant_kernel(-0.5, 3.0)
    assert kernel_l1_norm(kernel) == pytest.approx(1.5)
    assert kernel_sup_bound(kernel) == pytest.approx(0.5)
    curved = two_piece_kernel()
    exact, _ = quad(lambda s: abs(scalar_g(s)), 0.0, 2.0, points=[1.0, math.sqrt(3.0)])
    assert kernel_l1_norm(curved) == pytest.approx(exact, rel=5e-3)
    samples = np.abs(curved.evaluate(np.linspace(0, 2, 401))[:, 0, 0])
    assert kernel_sup_bound(curved) >= samples.max()


def test_grid_size():
    assert grid_size(1.0, 0.1) == 11
    assert grid_size(1.0, 0.3) == 5
    with pytest.raises(GridError):
        grid_size(0.0, 0.1)


def test_grid_function_interpolates_and_is_zero_outside():
    f = GridFunction(0.0, 0.5, np.array([0.0, 1.0, 4.0]))
    assert_allclose(f.evaluate(np.array([0.25, 0.75, 1.0]))[:, 0], [0.5, 2.5, 4.0])
    assert f.evaluate(1.5)[0] == 0.0
    assert f.evaluate(1.5, outside="clamp")[0] == 4.0
    assert f.t_end == 1.0


def test_grid_function_from_function_fits_the_step():
    f = GridFunction.from_function(np.sin, 0.0, 1.0, 0.3)
    assert f.n == 5
    assert f.h == pytest.approx(0.25)
    assert_allclose(f.samples[:, 0], np.sin(np.linspace(0.0, 1.0, 5)))


def test_grid_function_arithmetic_resamples():
    a = GridFunction.constant([1.0, 2.0], 0.0, 1.0, 0.1)
    b = GridFunction.from_function(lambda t: [t, 0.0], 0.0, 1.0, 0.05)
    total = a + b
    assert total.same_grid(a)
    assert_allclose(total.samples[:, 0], 1.0 + a.times)
    assert_allclose((2.0 * a).samples, 2.0 * a.samples)
    assert_allclose((a - a).samples, 0.0)


def test_grid_function_validation():
    with pytest.raises(GridError):
        GridFunction(0.0, 0.1, np.array([1.0]))
    with pytest.raises(GridError):
        GridFunction(0.0, -0.1, np.zeros(3))
    with pytest.raises(GridError):
        GridFunction(0.0, 0.1, np.zeros(3), q=0.5)


if __name__ == "__main__":
    pytest.main([__file__])
