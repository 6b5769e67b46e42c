import math

import numpy as np
import pytest

import toneflow.solver as solver_mod
from toneflow.errors import TimeRangeError
from toneflow.flow import FlowState, TimeGrid, euler_step, integrate
from toneflow.solver import (
    SolverConfig,
    convergence_order,
    estimate_time_derivative,
    invert,
    reconstruct,
    rf_solver_step,
)


def wavy_field(z, t, cond):
    """Smooth nonlinear benchmark field: sin(2 pi t) * (1 + 0.1 z)."""
    return np.sin(2.0 * math.pi * t) * (1.0 + 0.1 * z)


def test_derivative_linear_in_time_exact():
    for dt in (0.001, 0.01, 0.1):
        est = estimate_time_derivative(
            lambda z, t, c: np.array([t]), FlowState(np.array([5.0]), 0.3), dt
        )
        assert est == pytest.approx([1.0], abs=1e-12)


def test_derivative_constant_field_zero():
    est = estimate_time_derivative(
        lambda z, t, c: np.array([2.0, -1.0]), FlowState(np.zeros(2), 0.5), 0.01
    )
    assert np.array_equal(est, np.zeros(2))


def test_derivative_quadratic_forward_difference():
    # Hand-evaluated forward difference oracle for v = t^2 at t=0.5, dt=0.01:
    # (0.51^2 - 0.5^2) / 0.01 = 1.01, versus the true derivative 1.0.
    expected = (0.51**2 - 0.5**2) / 0.01
    assert expected == pytest.approx(1.01, abs=1e-12)
    est = estimate_time_derivative(
        lambda z, t, c: np.array([t * t]), FlowState(np.array([0.0]), 0.5), 0.01
    )
    assert est == pytest.approx([expected], abs=1e-12)


def test_derivative_backward_at_upper_boundary():
    # At t=1 the forward probe would exit [0, 1]; the difference flips around.
    est = estimate_time_derivative(
        lambda z, t, c: np.array([t]), FlowState(np.array([0.0]), 1.0), 0.01
    )
    assert est == pytest.approx([1.0], abs=1e-12)


def test_derivative_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        estimate_time_derivative(lambda z, t, c: z, FlowState(np.zeros(1), 0.5), 0.0)


def test_rf_step_linear_field_matches_quadratic_solution():
    # Analytic oracle: dz/dt = t from z(0)=0 has z(t) = t^2 / 2, so one step
    # with h=1 must land exactly on 0.5 (the Taylor series terminates).
    out = rf_solver_step(lambda z, t, c: np.array([t]), FlowState(np.array([0.0]), 0.0), 1.0)
    assert out.z == pytest.approx([0.5], abs=1e-15)
    assert out.t == 1.0


def test_rf_step_constant_field_equals_euler():
    field = lambda z, t, c: np.array([0.7, -0.2])
    state = FlowState(np.array([1.0, 2.0]), 0.25)
    assert np.array_equal(rf_solver_step(field, state, 0.5).z, euler_step(field, state, 0.5).z)


def test_rf_step_zero_h_identity():
    z = np.array([0.1, 0.9])
    out = rf_solver_step(lambda z, t, c: z, FlowState(z, 0.4), 0.0)
    assert np.array_equal(out.z, z)
    assert out.t == 0.4


def test_rf_step_range_error():
    with pytest.raises(TimeRangeError):
        rf_solver_step(lambda z, t, c: z, FlowState(np.zeros(1), 0.05), -0.1)


def test_rf_step_zero_derivative_reproduces_euler(monkeypatch):
    # Removing the quadratic term must collapse the update onto plain Euler.
    monkeypatch.setattr(
        solver_mod, "estimate_time_derivative", lambda field, state, dt, cond=None, v0=None, direction=1.0: np.zeros_like(state.z)
    )
    rng = np.random.default_rng(11)
    field = lambda z, t, c: np.sin(z) + t
    state = FlowState(rng.normal(size=6), 0.3)
    assert np.array_equal(rf_solver_step(field, state, 0.4).z, euler_step(field, state, 0.4).z)


def test_rf_step_exact_on_affine_time_field():
    # v = a + b t is integrated exactly by the quadratic update for any h,
    # in either direction, because the finite difference recovers b exactly.
    rng = np.random.default_rng(4)
    a = rng.normal(size=3)
    b = rng.normal(size=3)
    field = lambda z, t, c: a + b * t
    for t0, h in [(0.0, 1.0), (0.0, 0.37), (1.0, -1.0), (0.8, -0.55), (0.25, 0.5)]:
        z0 = rng.normal(size=3)
        out = rf_solver_step(field, FlowState(z0, t0), h)
        exact = z0 + a * h + b * ((t0 + h) ** 2 - t0**2) / 2.0
        assert np.max(np.abs(out.z - exact)) <= 1e-12


def test_invert_requires_reverse_grid():
    with pytest.raises(ValueError):
        invert(lambda z, t, c: z, np.zeros(2), TimeGrid.uniform(4, "forward"))


def test_invert_zero_field_is_identity():
    data = np.array([0.4, -1.1])
    res = invert(lambda z, t, c: np.zeros_like(z), data, TimeGrid.uniform(6, "reverse"))
    assert np.array_equal(res.noise_latent, data)
    times = [s.t for s in res.trajectory]
    assert times[0] == 1.0 and times[-1] == 0.0
    assert all(times[i] > times[i + 1] for i in range(len(times) - 1))


def test_invert_round_trip_time_only_field():
    # Time-reversible quadrature: with the probe spacing tied to the step
    # size, forward and reverse passes evaluate the field at mirrored points
    # and cancel exactly for z-independent fields.
    field = lambda z, t, c: np.array([math.sin(2.0 * math.pi * t) + 0.3])
    k = 16
    cfg = SolverConfig(delta_t=1.0 / k)
    z0 = np.array([0.7])
    fwd = integrate(field, FlowState(z0, 0.0), TimeGrid.uniform(k, "forward"), "rf2", solver_config=cfg)
    res = invert(field, fwd[-1].z, TimeGrid.uniform(k, "reverse"), "rf2", config=cfg)
    assert np.max(np.abs(res.noise_latent - z0)) <= 1e-10


def test_reconstruct_time_only_field_error_tiny():
    field = lambda z, t, c: np.array([np.cos(t), np.sin(t)])
    k = 12
    report = reconstruct(
        field, np.array([1.0, 2.0]), TimeGrid.uniform(k, "reverse"), "rf2", config=SolverConfig(delta_t=1.0 / k)
    )
    assert report.relative
    assert report.error <= 1e-10


def test_reconstruct_zero_field_exact():
    report = reconstruct(lambda z, t, c: np.zeros_like(z), np.array([1.0, -2.0]), TimeGrid.uniform(5, "reverse"))
    assert report.error == 0.0
    assert report.relative


def test_reconstruct_zero_norm_data_flagged():
    report = reconstruct(lambda z, t, c: np.ones_like(z), np.zeros(3), TimeGrid.uniform(4, "reverse"), "euler")
    assert not report.relative
    assert report.error >= 0.0


def test_reconstruct_richardson_ratios():
    # Richardson oracle on a smooth z-dependent field: doubling K halves the
    # Euler round-trip error (slope ~1) while the second-order stepper gains
    # at least a factor 4 per doubling (round trips benefit further from the
    # mirrored probe points, so the ratio can exceed 4).
    def gen_field(z, t, cond):
        return np.cos(1.3 * t + 0.4) * (1.0 + 0.2 * z) + 0.05 * z * z

    data = np.array([0.9])
    counts = [8, 16, 32]
    errs = {}
    for stepper in ("euler", "rf2"):
        errs[stepper] = [
            reconstruct(gen_field, data, TimeGrid.uniform(k, "reverse"), stepper, config=SolverConfig()).error
            for k in counts
        ]
    euler_slope = np.polyfit(np.log(1.0 / np.asarray(counts)), np.log(errs["euler"]), 1)[0]
    assert 0.8 <= euler_slope <= 1.2
    for a, b in zip(errs["rf2"], errs["rf2"][1:]):
        assert a / b >= 3.5
    assert all(r < e for r, e in zip(errs["rf2"], errs["euler"]))


def test_convergence_order_wavy_field():
    fits = convergence_order(wavy_field, None, [8, 16, 32, 64, 128], z0=np.array([0.0]))
    assert 0.8 <= fits["euler"].slope <= 1.2
    assert 1.7 <= fits["rf2"].slope <= 2.3


def test_convergence_order_constant_field_saturates():
    fits = convergence_order(
        lambda z, t, c: np.array([0.3]), lambda t: np.array([0.3 * t]), [8, 16, 32], z0=np.array([0.0])
    )
    assert fits["euler"].saturated and fits["euler"].slope is None
    assert fits["rf2"].saturated


def test_convergence_order_linear_field_rf2_saturates():
    field = lambda z, t, c: np.array([t])
    fits = convergence_order(field, lambda t: np.array([t * t / 2.0]), [8, 16, 32, 64], z0=np.array([0.0]))
    assert fits["rf2"].saturated
    assert not fits["euler"].saturated


def test_convergence_order_needs_three_counts():
    with pytest.raises(ValueError):
        convergence_order(wavy_field, None, [8, 16])


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(delta_t=0.0)
    with pytest.raises(ValueError):
        SolverConfig(delta_t=0.2)
    with pytest.raises(ValueError):
        SolverConfig(order="rk4")
