import math

import numpy as np
import pytest

from toneflow.errors import DimensionMismatchError, NumericsError, TimeRangeError
from toneflow.flow import (
    CANONICAL,
    FlowState,
    Schedule,
    TimeGrid,
    euler_step,
    integrate,
    interpolate,
    path_velocity,
    velocity_matching_loss,
)


def test_interpolate_midpoint():
    out = interpolate(np.array([0.0]), np.array([2.0]), 0.5)
    assert out == pytest.approx([1.0])


def test_interpolate_endpoints_bitwise():
    rng = np.random.default_rng(7)
    for _ in range(20):
        z0 = rng.normal(size=(5, 3))
        z1 = rng.normal(size=(5, 3))
        assert np.array_equal(interpolate(z0, z1, 0.0), z0)
        assert np.array_equal(interpolate(z0, z1, 1.0), z1)


def test_interpolate_quarter_point_hand_check():
    # Oracle: (1 - t) * z0 + t * z1 evaluated by hand at t = 0.25:
    # [0.75*1 + 0.25*3, 0.75*(-1) + 0.25*1] = [1.5, -0.5]
    out = interpolate(np.array([1.0, -1.0]), np.array([3.0, 1.0]), 0.25)
    assert out == pytest.approx([1.5, -0.5], abs=1e-15)


def test_interpolate_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)


def test_path_velocity_canonical_is_difference_for_all_t():
    z0 = np.array([0.0])
    z1 = np.array([2.0])
    for t in [0.0, 0.3, 0.5, 0.99, 1.0]:
        assert path_velocity(z0, z1, t) == pytest.approx([2.0], abs=1e-15)


def test_path_velocity_coincident_endpoints():
    z = np.array([1.2, -3.4])
    assert np.array_equal(path_velocity(z, z, 0.7), np.zeros(2))


def test_path_velocity_custom_trig_schedule():
    # Symbolic differentiation oracle: alpha = cos(pi t / 2), beta = sin(pi t / 2),
    # so alpha'(0) = -(pi/2) sin(0) = 0 and beta'(0) = (pi/2) cos(0) = pi/2.
    # With z0 = [1], z1 = [0]: velocity at t=0 is 0*1 + (pi/2)*0 = 0.
    exact = Schedule(
        alpha=lambda t: math.cos(math.pi * t / 2),
        beta=lambda t: math.sin(math.pi * t / 2),
        alpha_dot=lambda t: -math.pi / 2 * math.sin(math.pi * t / 2),
        beta_dot=lambda t: math.pi / 2 * math.cos(math.pi * t / 2),
    )
    out = path_velocity(np.array([1.0]), np.array([0.0]), 0.0, exact)
    assert out == pytest.approx([0.0], abs=1e-15)
    # Same schedule without explicit derivatives exercises the FD fallback.
    fd = Schedule(alpha=lambda t: math.cos(math.pi * t / 2), beta=lambda t: math.sin(math.pi * t / 2))
    out_fd = path_velocity(np.array([1.0]), np.array([0.0]), 0.0, fd)
    assert out_fd == pytest.approx([0.0], abs=1e-5)


def test_schedule_endpoint_validation():
    CANONICAL.check_endpoints()
    bad = Schedule(alpha=lambda t: 1.0, beta=lambda t: t)
    with pytest.raises(ValueError):
        bad.check_endpoints()


def test_canonical_straightness_invariant():
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=8)
    z1 = rng.normal(size=8)
    base = path_velocity(z0, z1, 0.0)
    for t in np.linspace(0.0, 1.0, 11):
        assert np.max(np.abs(path_velocity(z0, z1, float(t)) - base)) <= 1e-15


def test_loss_perfect_predictor_is_zero():
    # A predictor hard-wired to the target velocity gives exactly zero loss.
    rng = np.random.default_rng(0)
    for _ in range(5):
        z0 = rng.normal(size=4)
        z1 = rng.normal(size=4)
        t = float(rng.uniform())
        loss = velocity_matching_loss(lambda z, tt, c: z1 - z0, [(z0, z1, t)])
        assert loss == 0.0


def test_loss_constant_offset_closed_form():
    # Closed-form expansion oracle: with prediction = target + c on every
    # element, each squared residual is c^2, and the per-element mean over a
    # batch is therefore exactly c^2 regardless of latent dimension.
    rng = np.random.default_rng(1)
    c = 0.3
    batch = [(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), 0.25), (rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), 0.8)]
    items = {id(z0): (z0, z1) for z0, z1, _ in batch}

    def field(z, t, cond):
        # Reconstruct the target from the batch closure by matching z_t.
        for z0, z1 in items.values():
            if np.allclose(z, interpolate(z0, z1, t)):
                return (z1 - z0) + c
        raise AssertionError("unknown batch item")

    loss = velocity_matching_loss(field, batch)
    assert loss == pytest.approx(c * c, abs=1e-12)


def test_loss_single_item_brute_force():
    # Brute-force summation oracle: explicit python accumulation of
    # (prediction - target)^2 over every element, divided by element count.
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(3, 5))
    z1 = rng.normal(size=(3, 5))
    t = 0.4
    pred = rng.normal(size=(3, 5))

    loss = velocity_matching_loss(lambda z, tt, c: pred, [(z0, z1, t)])

    target = z1 - z0
    acc = 0.0
    for i in range(3):
        for j in range(5):
            acc += (pred[i, j] - target[i, j]) ** 2
    assert loss == pytest.approx(acc / 15.0, abs=1e-12)


def test_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        velocity_matching_loss(lambda z, t, c: z, [])


def test_euler_step_constant_field():
    state = euler_step(lambda z, t, c: np.array([1.0]), FlowState(np.array([0.0]), 0.0), 0.1)
    assert state.z == pytest.approx([0.1])
    assert state.t == pytest.approx(0.1)


def test_euler_step_zero_h_identity():
    z = np.array([0.3, -0.7])
    state = euler_step(lambda z, t, c: z, FlowState(z, 0.5), 0.0)
    assert np.array_equal(state.z, z)
    assert state.t == 0.5


def test_euler_step_exponential_error():
    # Analytic oracle: dz/dt = z from z(0)=1 has z(0.5) = e^0.5. One Euler
    # step of h=0.5 gives 1.5; the method error is e^0.5 - 1.5.
    state = euler_step(lambda z, t, c: z, FlowState(np.array([1.0]), 0.0), 0.5)
    assert state.z == pytest.approx([1.5], abs=1e-15)
    assert abs(math.exp(0.5) - state.z[0]) == pytest.approx(0.14872127070012822, abs=1e-12)


def test_euler_step_range_error():
    with pytest.raises(TimeRangeError):
        euler_step(lambda z, t, c: z, FlowState(np.array([1.0]), 0.9), 0.2)


def test_integrate_constant_field_both_steppers():
    c = np.array([0.5, -1.5])
    for stepper in ("euler", "rf2"):
        for grid in (TimeGrid.uniform(1), TimeGrid.uniform(7)):
            traj = integrate(lambda z, t, cc: c, FlowState(np.zeros(2), 0.0), grid, stepper)
            assert len(traj) == grid.steps + 1
            assert traj[-1].t == pytest.approx(1.0)
            assert traj[-1].z == pytest.approx(c, abs=1e-14)


def test_integrate_single_step_matches_euler_step():
    field = lambda z, t, c: np.sin(z) + t
    start = FlowState(np.array([0.2]), 0.0)
    traj = integrate(field, start, TimeGrid.uniform(1), "euler")
    direct = euler_step(field, start, 1.0)
    assert np.array_equal(traj[-1].z, direct.z)


def test_integrate_left_riemann_sum():
    # Left-Riemann oracle for dz/dt = 2t on K=4 uniform steps:
    # sum(2 * t_i * 0.25 for t_i in {0, 0.25, 0.5, 0.75}) = 0.75,
    # versus the exact solution t^2 giving 1.0 at t=1.
    expected = sum(2.0 * ti * 0.25 for ti in (0.0, 0.25, 0.5, 0.75))
    assert expected == 0.75
    traj = integrate(lambda z, t, c: np.array([2.0 * t]), FlowState(np.array([0.0]), 0.0), TimeGrid.uniform(4), "euler")
    assert traj[-1].z == pytest.approx([expected], abs=1e-14)


def test_integrate_grid_refinement_monotone():
    # Euler error against the antiderivative decreases monotonically as K doubles.
    field = lambda z, t, c: np.array([math.cos(2.0 * t)])
    exact = 0.5 * math.sin(2.0)
    errors = []
    for k in (4, 8, 16, 32, 64):
        traj = integrate(field, FlowState(np.array([0.0]), 0.0), TimeGrid.uniform(k), "euler")
        errors.append(abs(traj[-1].z[0] - exact))
    assert all(errors[i + 1] < errors[i] for i in range(len(errors) - 1))


def test_integrate_reversibility_time_constant_field():
    # A time-constant field makes the forward and reverse quadratures use
    # identical values, so the round trip cancels to machine precision.
    rng = np.random.default_rng(5)
    c = rng.normal(size=6)
    z0 = rng.normal(size=6)
    grid = TimeGrid.uniform(13)
    fwd = integrate(lambda z, t, cc: c, FlowState(z0, 0.0), grid, "euler")
    back = integrate(lambda z, t, cc: c, FlowState(fwd[-1].z, 1.0), grid.mirrored(), "euler")
    assert np.max(np.abs(back[-1].z - z0)) <= 1e-12


def test_integrate_initial_time_mismatch():
    with pytest.raises(ValueError):
        integrate(lambda z, t, c: z, FlowState(np.array([0.0]), 0.5), TimeGrid.uniform(4), "euler")


def test_integrate_nan_reports_step_index():
    def field(z, t, cond):
        return np.array([np.inf if t > 0.3 else 1.0])

    # Evaluations happen at t = 0, 0.2, 0.4, ...; the first non-finite value
    # enters the state on the step indexed 2.
    with pytest.raises(NumericsError, match="step 2"):
        integrate(field, FlowState(np.array([0.0]), 0.0), TimeGrid.uniform(5), "euler")


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 1.0]), direction="sideways")
    grid = TimeGrid.uniform(4, "reverse")
    assert grid.start_time == 1.0
    assert grid.segments()[0] == (1.0, 0.75)
    assert grid.mirrored().direction == "forward"


def test_flow_state_validation():
    with pytest.raises(TimeRangeError):
        FlowState(np.zeros(2), 1.5)
    with pytest.raises(NumericsError):
        FlowState(np.array([np.nan]), 0.5)
