#!/usr/bin/env python3
"""
Tests for the measure convolution algebra, Q inversion and transfer outputs.
"""

import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from delay_system import GridFunction, load_system
from errors import DimensionError, NeumannSplitError, WindowError
from fundamental import fundamental_solution
from measure_algebra import (CompactMeasure, build_QP, convolution_defect, convolve, dirac, impulse_response,
                             invert_Q, measure_to_dict, state_space_defect, transfer_output)
from simulator import solve_ivp

SYSTEMS = Path(__file__).parent / "systems"


def system(name):
    return load_system(SYSTEMS / f"{name}.json")


def mass(measure):
    return measure.h * measure.values.sum(axis=0) + measure.weights.sum(axis=0)


def test_dirac_convolution_adds_locations_and_multiplies_weights():
    a = dirac(1.0, [[2.0, 0.0], [0.0, 1.0]], 0.1)
    b = dirac(0.5, [[3.0, 1.0], [0.0, 1.0]], 0.1)
    c = convolve(a, b)
    assert_allclose(c.locations, [1.5])
    assert_allclose(c.weights[0], [[6.0, 2.0], [0.0, 1.0]])


def test_density_convolution_multiplies_masses():
    a = CompactMeasure.from_density(0.0, np.ones(10), 0.1)
    b = CompactMeasure.from_density(0.3, 2.0 * np.ones(5), 0.1)
    c = convolve(a, b)
    assert_allclose(mass(c), mass(a) @ mass(b))
    assert c.support() == pytest.approx((0.3, 1.8))


def test_mixed_convolution_with_an_atom_shifts_the_density():
    density = CompactMeasure.from_density(0.0, np.arange(1.0, 5.0), 0.25)
    shifted = convolve(dirac(0.5, [[2.0]], 0.25), density)
    assert shifted.support() == pytest.approx((0.5, 1.5))
    assert_allclose(shifted.values[:, 0, 0], 2.0 * np.arange(1.0, 5.0))


def test_convolution_checks_inner_dimensions():
    with pytest.raises(DimensionError):
        convolve(dirac(0.0, np.eye(2), 0.1), dirac(0.0, np.eye(3), 0.1))


def test_laplace_of_atomic_convolution_is_the_product():
    a = CompactMeasure(0.1, (2, 2), np.array([0.0, 1.0]),
                       np.array([np.eye(2), [[0.5, 0.1], [0.0, 0.2]]]), 0, np.zeros((0, 2, 2)))
    b = CompactMeasure(0.1, (2, 1), np.array([0.5, 2.0]),
                       np.array([[[1.0], [2.0]], [[0.0], [-1.0]]]), 0, np.zeros((0, 2, 1)))
    for p in (0.3 + 1.0j, -0.5, 4.0j):
        assert_allclose(convolve(a, b).laplace(p), a.laplace(p) @ b.laplace(p), atol=1e-13)


def test_shift_is_exact():
    m = CompactMeasure.from_density(0.02, np.linspace(1.0, 2.0, 8), 0.1) + dirac(0.4, [[1.5]], 0.1)
    back = m.shift(0.37).shift(-0.37)
    assert back.support() == pytest.approx(m.support())
    assert_allclose(back.values, m.values)
    assert_allclose(back.locations, m.locations)


def test_restrict_keeps_cells_by_their_centre():
    m = CompactMeasure.from_density(0.0, np.ones(10), 0.1) + dirac(0.2, [[1.0]], 0.1)
    cut = m.restrict(0.0, 0.2)
    assert cut.values.shape[0] == 2
    assert_allclose(cut.locations, [0.2])


def test_sum_of_offset_densities_preserves_mass():
    a = CompactMeasure.from_density(0.0, np.ones(10), 0.1)
    b = CompactMeasure.from_density(0.03, 3.0 * np.ones(4), 0.1)
    total = a + b
    assert_allclose(mass(total), mass(a) + mass(b))
    assert total.origin == pytest.approx(0.0)


def test_measure_dict_reports_atoms_and_density():
    m = CompactMeasure.from_density(-1.0, np.ones(2), 0.5) + dirac(0.0, [[2.0]], 0.5)
    raw = measure_to_dict(m)
    assert raw["atoms"] == [{"loc": 0.0, "W": [[2.0]]}]
    assert raw["density"]["t_start"] == pytest.approx(-1.0)
    assert raw["support"] == pytest.approx([-1.0, 0.0])


def test_build_qp_for_pure_difference():
    Q, P = build_QP(system("pure_difference"), 0.01)
    assert_allclose(Q.locations, [-2.0, -1.0, 0.0])
    assert_allclose(Q.weights[:, 0, 0], [1.0, -0.5, -0.25])
    assert Q.values.shape[0] == 0
    assert_allclose(P.locations, [0.0])


def test_build_qp_carries_the_kernel_as_a_density():
    Q, _ = build_QP(system("scalar_pi"), 0.01)
    assert Q.min_support == pytest.approx(-math.pi)
    # g = 1 on [0, pi] enters with a minus sign
    assert mass(Q.density_only())[0, 0] == pytest.approx(-math.pi)


def test_memoryless_inverse_is_a_single_atom():
    Q, _ = build_QP(system("memoryless"), 0.01)
    Qinv, report = invert_Q(Q, 2.0)
    assert_allclose(Qinv.locations, [1.0])
    assert_allclose(Qinv.weights[0], [[1.0]])
    assert Qinv.values.shape[0] == 0
    assert report.atom_defect == 0.0
    assert report.split_eps is None


def test_pure_difference_inverse_carries_the_renewal_jumps():
    Q, _ = build_QP(system("pure_difference"), 0.01)
    Qinv, report = invert_Q(Q, 4.0)
    assert_allclose(Qinv.locations, [2.0, 3.0, 4.0, 5.0, 6.0])
    assert_allclose(Qinv.weights[:, 0, 0], [1.0, 0.5, 0.5, 0.375, 0.3125])
    assert Qinv.horizon == pytest.approx(6.0)
    assert report.g_terms == 4
    assert report.atom_defect < 1e-14


def test_inversion_needs_a_leading_atom():
    Q = CompactMeasure.from_density(-1.0, np.ones(10), 0.1)
    with pytest.raises(NeumannSplitError):
        invert_Q(Q, 2.0)


def test_inversion_window_must_be_positive():
    Q, _ = build_QP(system("memoryless"), 0.01)
    with pytest.raises(WindowError):
        invert_Q(Q, 0.0)


def test_transfer_output_is_the_delayed_solution():
    sys_ = system("pure_difference")
    h = 0.01
    Q, P = build_QP(sys_, h)
    Qinv, _ = invert_Q(Q, 4.0)
    u = GridFunction.from_function(lambda t: np.sin(2 * t), 0.0, 3.0, h)
    y = transfer_output(Qinv, P, u, t_end=5.0)
    zero = GridFunction.constant([0.0], -2.0, 0.0, h)
    traj = solve_ivp(sys_, zero, u, 3.0, h)
    t = np.linspace(2.5, 4.5, 21)
    assert_allclose(y.evaluate(t)[:, 0], traj.evaluate(t - 2.0)[:, 0], atol=1e-3)
    assert y.t_start == 0.0 and y.h == pytest.approx(h)
    nodes = y.times[(y.times >= 2.0) & (y.times <= 4.5)]
    assert_allclose(y.evaluate(nodes)[:, 0], traj.evaluate(nodes - 2.0)[:, 0], atol=1e-10)
    assert abs(y.evaluate(1.0)[0]) < 1e-12
    with pytest.raises(WindowError):
        transfer_output(Qinv, P, u, t_end=7.0)


def test_transfer_output_is_exact_at_nodes_across_a_kink():
    # unit density on [0, 1] against u = 1 gives y(t) = min(t, 1)
    h = 0.01
    Qinv = CompactMeasure.from_density(0.0, np.ones(100), h)
    P = dirac(0.0, [[1.0]], h)
    u = GridFunction.constant([1.0], 0.0, 3.0, h)
    y = transfer_output(Qinv, P, u, t_end=3.0)
    assert y.n == 301
    assert_allclose(y.samples[:, 0], np.minimum(y.times, 1.0), atol=1e-12)


def test_transfer_output_checks_the_control_width():
    Q, P = build_QP(system("pure_difference"), 0.01)
    Qinv, _ = invert_Q(Q, 4.0)
    u = GridFunction.constant([1.0, 1.0], 0.0, 1.0, 0.01)
    with pytest.raises(DimensionError):
        transfer_output(Qinv, P, u, t_end=2.0)


def test_state_space_defect_needs_a_long_enough_state():
    sys_ = system("pure_difference")
    with pytest.raises(WindowError):
        state_space_defect(sys_, GridFunction.constant([1.0], 0.0, 1.5, 0.01))


@pytest.mark.slow
def test_scalar_pi_inverse_defect():
    Q, _ = build_QP(system("scalar_pi"), 1e-3)
    Qinv, report = invert_Q(Q, 2 * math.pi, tol=1e-8)
    assert report.split_eps is not None and report.split_eps > 0
    assert report.atom_defect <= 1e-6
    assert report.density_defect <= 1e-3
    assert convolution_defect(Q, Qinv, 2 * math.pi) == pytest.approx((report.atom_defect, report.density_defect))


@pytest.mark.slow
def test_impulse_response_matches_the_fundamental_solution():
    sys_ = system("scalar_pi")
    h, T = 1e-3, 4.0
    Q, P = build_QP(sys_, h)
    Qinv, _ = invert_Q(Q, T)
    response = impulse_response(Qinv, P, sys_.max_delay)
    fs = fundamental_solution(sys_, T, h)

    early = response.locations < T - 1e-6
    expected = fs.taus < T - 1e-6
    assert_allclose(response.locations[early], fs.taus[expected], atol=1e-10, rtol=0)
    assert_allclose(response.weights[early], fs.jumps[expected] @ sys_.B, atol=1e-8, rtol=0)

    assert response.origin < 1e-6
    cells = fs.density_cells()
    index = response.start + np.arange(response.values.shape[0])
    usable = (index >= 0) & (response.centers <= T - 2 * h) & (index < cells.shape[0])
    gap = h * np.sum(np.abs(response.values[usable, 0, 0] - cells[index[usable], 0, 0]))
    assert gap <= 1e-3


if __name__ == "__main__":
    pytest.main([__file__])
