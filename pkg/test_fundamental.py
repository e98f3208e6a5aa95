#!/usr/bin/env python3
"""
Tests for the delay lattice, the fundamental solution and the input map E(T).
"""

import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from delay_system import GridFunction, load_system
from errors import GridError, LatticeOverflowError, MemoryBudgetError
from fundamental import (fundamental_solution, fundamental_to_dict, input_map, input_response,
                         lattice_points, renewal_defect)
from simulator import flow, solve_ivp, state_segment

SYSTEMS = Path(__file__).parent / "systems"


def system(name):
    return load_system(SYSTEMS / f"{name}.json")


def random_control(T, h, seed, m=1):
    rng = np.random.default_rng(seed)
    amplitudes = 0.1 * rng.uniform(-1.0, 1.0, size=(3, m))

    def u(t):
        return sum(amplitudes[k] * np.sin((k + 1) * t) for k in range(3))

    return GridFunction.from_function(u, 0.0, T, h)


def random_segment(length, h, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(-1.0, 1.0, size=3)
    return GridFunction.from_function(lambda t: a * np.cos(t) + b * np.sin(3 * t) + c, -length, 0.0, h)


def test_lattice_merges_coinciding_multi_indices():
    points = lattice_points([1.0, 2.0], 4.0)
    assert_allclose([p.tau for p in points], [0.0, 1.0, 2.0, 3.0, 4.0])
    assert points[2].indices == ((0, 1), (2, 0))
    assert points[0].indices == ((0, 0),)


def test_lattice_with_incommensurate_delays():
    points = lattice_points([1.0, math.pi], 4.0)
    assert_allclose([p.tau for p in points], [0.0, 1.0, 2.0, 3.0, math.pi, 4.0])


def test_lattice_overflow():
    with pytest.raises(LatticeOverflowError):
        lattice_points([1.0, 2.0], 100.0, max_atoms=10)


def test_pure_difference_jumps_follow_the_renewal():
    fs = fundamental_solution(system("pure_difference"), 3.0, 0.01)
    assert_allclose(fs.taus, [0.0, 1.0, 2.0, 3.0])
    assert_allclose(fs.jumps[:, 0, 0], [1.0, 0.5, 0.5, 0.375])
    assert not np.any(fs.continuous.samples)
    assert not np.any(fs.density_cells())


def test_fundamental_solution_is_left_continuous():
    fs = fundamental_solution(system("pure_difference"), 3.0, 0.01)
    assert fs.evaluate(0.0)[0, 0] == 0.0
    assert fs.evaluate(0.0, right_continuous=True)[0, 0] == 1.0
    assert fs.evaluate(1.0)[0, 0] == pytest.approx(1.0)
    assert fs.evaluate(1.0, right_continuous=True)[0, 0] == pytest.approx(1.5)
    assert_allclose(fs.evaluate(np.array([0.5, 2.5]))[:, 0, 0], [1.0, 2.0])
    with pytest.raises(GridError):
        fs.evaluate(3.5)


def test_scalar_pi_satisfies_the_renewal_equation():
    sys_ = system("scalar_pi")
    fs = fundamental_solution(sys_, 4.0, 1e-3)
    assert len(fs.atoms) == 6
    assert renewal_defect(sys_, fs) < 1e-3


def test_fundamental_dict_lists_atoms():
    fs = fundamental_solution(system("pure_difference"), 2.0, 0.1)
    raw = fundamental_to_dict(fs)
    assert raw["T"] == 2.0
    assert [atom["tau"] for atom in raw["atoms"]] == pytest.approx([0.0, 1.0, 2.0])
    assert raw["atoms"][2]["indices"] == [[0, 1], [2, 0]]
    assert raw["density"]["h"] == pytest.approx(0.1)


def test_input_map_matches_the_simulator_for_pure_difference():
    sys_ = system("pure_difference")
    T, h = 3.0, 0.01
    M = input_map(sys_, T, h)
    assert M.matrix.shape == (201, 301)
    u = random_control(T, h, seed=3)
    zero = GridFunction.constant([0.0], -2.0, 0.0, h)
    direct = state_segment(solve_ivp(sys_, zero, u, T, h), T)
    assert_allclose(M.apply(u).samples, direct.samples, atol=1e-10)


def test_input_response_agrees_with_the_matrix():
    sys_ = system("scalar_pi")
    T, h = 4.0, 0.02
    fs = fundamental_solution(sys_, T, h)
    M = input_map(sys_, T, h, fundamental=fs)
    u = random_control(T, h, seed=11)
    applied = M.apply(u)
    response = input_response(sys_, u, T, h, fundamental=fs)
    assert response.same_grid(applied)
    assert_allclose(response.samples, applied.samples, atol=1e-10)


def test_constant_control_reaches_the_fundamental_solution_exactly():
    # for u = 1, x(t) = (sum_{tau < t} J + C(t) - C(0)) B, so the cell masses telescope
    sys_ = system("scalar_pi")
    T, h = 4.0, 0.02
    fs = fundamental_solution(sys_, T, h)
    ones = GridFunction.constant([1.0], 0.0, T, h)
    response = input_response(sys_, ones, T, h, fundamental=fs)
    assert response.h == pytest.approx(h)
    assert -math.pi - h < response.t_start <= -math.pi
    C = fs.continuous
    for theta, value in zip(response.times, response.samples):
        t = T + theta
        felt = t - fs.taus > 1e-9 * h
        expected = (fs.jumps[felt].sum(axis=0) + C.evaluate(t) - C.samples[0]) @ sys_.B
        assert_allclose(value, expected[:, 0], atol=1e-12)


def test_input_map_respects_the_memory_budget():
    with pytest.raises(MemoryBudgetError):
        input_map(system("pure_difference"), 3.0, 0.01, max_entries=10)


def test_input_map_rejects_a_short_fundamental_solution():
    sys_ = system("pure_difference")
    fs = fundamental_solution(sys_, 2.0, 0.01)
    with pytest.raises(GridError):
        input_map(sys_, 3.0, 0.01, fundamental=fs)


def test_input_map_does_not_depend_on_the_thread_count():
    sys_ = system("scalar_pi_mild")
    fs = fundamental_solution(sys_, 4.0, 0.05)
    single = input_map(sys_, 4.0, 0.05, fundamental=fs, threads=1)
    pooled = input_map(sys_, 4.0, 0.05, fundamental=fs, threads=4)
    assert_array_equal(single.matrix, pooled.matrix)


def representation_gap(sys_, phi, u, T, h):
    direct = state_segment(solve_ivp(sys_, phi, u, T, h), T)
    split = flow(sys_, phi, T, h) + input_response(sys_, u, T, h)
    return float(np.max(np.abs(direct.samples - split.samples)))


@pytest.mark.slow
def test_representation_formula_converges():
    sys_ = system("scalar_pi")
    T = 4.0
    u = random_control(T, 1e-4, seed=5)
    phi = random_segment(math.pi, 1e-4, seed=6)
    coarse = representation_gap(sys_, phi, u, T, 1e-3)
    fine = representation_gap(sys_, phi, u, T, 5e-4)
    assert coarse <= 5e-3
    assert fine == 0.0 or coarse / fine >= 1.8


if __name__ == "__main__":
    pytest.main([__file__])
