#!/usr/bin/env python3
"""
Tests for the forward solver, the flow map and state extension.
"""

import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from delay_system import DelaySystem, GridFunction, constant_kernel, load_system
from errors import GridError, StepTooLargeError
from measure_algebra import state_space_defect
from simulator import extend_state, fit_step, flow, lq_norm, solve_ivp, state_segment

SYSTEMS = Path(__file__).parent / "systems"


def system(name):
    return load_system(SYSTEMS / f"{name}.json")


def smooth_segment(length, h=1e-3, seed=7):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(-1.0, 1.0, size=3)
    return GridFunction.from_function(lambda t: a * np.cos(t) + b * np.sin(2 * t) + c, -length, 0.0, h)


def test_memoryless_system_reproduces_the_control():
    sys_ = system("memoryless")
    phi = GridFunction.constant([0.0], -1.0, 0.0, 0.01)
    u = GridFunction.from_function(lambda t: np.sin(3 * t) + 0.5, 0.0, 2.0, 0.01)
    traj = solve_ivp(sys_, phi, u, T=2.0, h=0.01)
    assert_allclose(traj.nodes[1:, 0], u.samples[1:, 0], atol=1e-12, rtol=0)
    assert traj.nodes[0, 0] == 0.0
    assert traj.right_limit[0] == pytest.approx(0.5, abs=1e-12)


def test_pure_difference_constant_history():
    sys_ = system("pure_difference")
    phi = GridFunction.constant([1.0], -2.0, 0.0, 0.01)
    traj = solve_ivp(sys_, phi, None, T=3.0, h=0.01)
    history = {-1: 1.0, 0: 1.0}
    for k in range(1, 4):
        history[k] = 0.5 * history[k - 1] + 0.25 * history[k - 2]
    # x is constant on each (k-1, k]
    values = traj.evaluate(np.array([0.5, 1.5, 2.5]))[:, 0]
    assert_allclose(values, [history[1], history[2], history[3]], atol=1e-12)


def test_scalar_pi_matches_closed_form_on_first_interval():
    # with phi = 1, x(t) = 1 + (pi - 1/2) e^t on (0, 1/2]
    sys_ = system("scalar_pi")
    phi = GridFunction.constant([1.0], -math.pi, 0.0, 1e-3)
    traj = solve_ivp(sys_, phi, None, T=0.5, h=1e-3)
    exact = 1.0 + (math.pi - 0.5) * np.exp(traj.times[1:])
    assert_allclose(traj.nodes[1:, 0], exact, atol=1e-4)
    assert traj.right_limit[0] == pytest.approx(math.pi + 0.5, abs=1e-4)
    assert traj.residual < 1e-10


@pytest.mark.slow
def test_self_convergence_on_scalar_pi():
    sys_ = system("scalar_pi")
    phi = GridFunction.from_function(lambda t: np.cos(t) + 0.5, -math.pi, 0.0, 1e-3)
    coarse, medium, fine = (solve_ivp(sys_, phi, None, T=2.0, h=h).nodes[:, 0] for h in (4e-3, 2e-3, 1e-3))
    first = np.max(np.abs(coarse - medium[::2]))
    second = np.max(np.abs(medium - fine[::2]))
    assert second > 0
    assert first / second >= 1.8


def test_flow_semigroup_property():
    sys_ = system("scalar_pi_mild")
    phi = smooth_segment(math.pi)
    h = 1e-3
    direct = flow(sys_, phi, 1.2, h)
    composed = flow(sys_, flow(sys_, phi, 0.5, h), 0.7, h)
    gap = lq_norm(direct - composed, 1)
    assert gap <= 1e-2 * lq_norm(direct, 1)


def test_state_segment_at_zero_is_the_initial_segment():
    sys_ = system("pure_difference")
    phi = smooth_segment(2.0)
    traj = solve_ivp(sys_, phi, None, T=1.0, h=0.01)
    assert state_segment(traj, 0.0) is phi
    with pytest.raises(GridError):
        state_segment(traj, 1.5)


def test_state_segment_nodes_are_simulation_nodes():
    sys_ = system("scalar_pi")
    traj = solve_ivp(sys_, smooth_segment(math.pi, h=0.01), None, T=4.0, h=0.01)
    segment = state_segment(traj, 4.0)
    assert segment.h == pytest.approx(traj.h)
    assert -math.pi - traj.h < segment.t_start <= -math.pi
    assert segment.t_end == pytest.approx(0.0)
    index = np.round((4.0 + segment.times) / traj.h).astype(int)
    assert_allclose(4.0 + segment.times, traj.h * index, atol=1e-12)
    assert_allclose(segment.samples, traj.nodes[index], rtol=0, atol=1e-12)


def test_trajectory_frame_lists_history_then_solution():
    sys_ = system("memoryless")
    phi = GridFunction.constant([0.0], -1.0, 0.0, 0.25)
    traj = solve_ivp(sys_, phi, None, T=1.0, h=0.25)
    frame = traj.to_frame()
    assert list(frame.columns) == ["t", "x1"]
    assert_allclose(frame["t"].to_numpy(), [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0])


def test_extend_state_at_the_largest_delay_is_identity():
    sys_ = system("pure_difference")
    y0 = GridFunction.from_function(np.cos, 0.0, 2.0, 0.01)
    assert extend_state(sys_, y0, 2.0) is y0
    with pytest.raises(GridError):
        extend_state(sys_, y0, 1.0)


def test_extension_lies_in_the_output_space():
    sys_ = system("pure_difference")
    # y0(2) = 0.5 y0(1) + 0.25 y0(0), so the extension stays continuous
    y0 = GridFunction.from_function(lambda t: 1.0 - t / 6.0, 0.0, 2.0, 1e-3)
    y = extend_state(sys_, y0, 5.0)
    assert y.t_end == pytest.approx(5.0)
    assert_allclose(y.evaluate(np.array([0.5, 1.5]))[:, 0], [1.0 - 0.5 / 6.0, 1.0 - 1.5 / 6.0])
    assert state_space_defect(sys_, y) < 1e-6


def test_constant_output_is_not_in_the_output_space():
    sys_ = system("pure_difference")
    y = GridFunction.constant([1.0], 0.0, 5.0, 1e-3)
    # (Q * y)(t) = 1 - 0.5 - 0.25 on [0, 3]
    assert state_space_defect(sys_, y) == pytest.approx(0.75, rel=1e-3)


def test_step_larger_than_smallest_delay_is_rejected():
    sys_ = system("pure_difference")
    phi = GridFunction.constant([1.0], -2.0, 0.0, 0.1)
    with pytest.raises(StepTooLargeError):
        solve_ivp(sys_, phi, None, T=3.0, h=1.5)


def test_step_too_large_for_the_kernel_node():
    sys_ = DelaySystem(np.array([1.0]), np.zeros((1, 1, 1)), np.eye(1), constant_kernel(10.0, 1.0))
    phi = GridFunction.constant([1.0], -1.0, 0.0, 0.1)
    with pytest.raises(StepTooLargeError, match="g\\(0\\)"):
        solve_ivp(sys_, phi, None, T=1.0, h=0.2)


def test_fit_step_reduces_the_step(caplog):
    n, h = fit_step(1.0, 0.3)
    assert n == 4
    assert h == pytest.approx(0.25)
    assert "Step adjusted" in caplog.text
    assert fit_step(1.0, 0.25) == (4, 0.25)


def test_control_with_wrong_width_is_rejected():
    sys_ = system("memoryless")
    phi = GridFunction.constant([0.0], -1.0, 0.0, 0.1)
    u = GridFunction.constant([1.0, 2.0], 0.0, 1.0, 0.1)
    with pytest.raises(GridError):
        solve_ivp(sys_, phi, u, T=1.0, h=0.1)


def test_initial_segment_must_cover_the_largest_delay():
    sys_ = system("pure_difference")
    phi = GridFunction.constant([1.0], -1.0, 0.0, 0.1)
    with pytest.raises(GridError):
        solve_ivp(sys_, phi, None, T=1.0, h=0.1)


def test_lq_norm():
    f = GridFunction.constant([2.0], 0.0, 1.0, 0.1)
    assert lq_norm(f, 1) == pytest.approx(2.0)
    assert lq_norm(f, 2) == pytest.approx(2.0)
    ramp = GridFunction.from_function(lambda t: t, 0.0, 1.0, 1e-3)
    assert lq_norm(ramp, 1) == pytest.approx(0.5)
    with pytest.raises(GridError):
        lq_norm(f, 0.5)


if __name__ == "__main__":
    pytest.main([__file__])
