import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvclab.errors import IntegrationError, RejectedInput
from cvclab.flowcore import (
    TimeGrid,
    as_latent,
    euler_step,
    integrate_euler,
    integrate_reference,
    interpolate,
    write_trajectory_csv,
)
from cvclab.oracle import make_model, OracleField

finite = st.floats(-1e3, 1e3, allow_nan=False)


def exp_field(z, t, c):
    return z


def test_interpolate_endpoints_and_midpoint():
    x0, n = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(interpolate(x0, n, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, n, 1.0), n)
    np.testing.assert_allclose(interpolate(x0, n, 0.5), [1.0, 1.0], atol=1e-12)


def test_interpolate_rejects_mismatch_and_bad_time():
    with pytest.raises(RejectedInput):
        interpolate([1.0, 2.0], [1.0], 0.5)
    with pytest.raises(RejectedInput):
        interpolate([1.0], [1.0], 1.5)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3), st.floats(0, 1))
def test_interpolate_is_affine_in_t(x0, n, t):
    x0, n = np.array(x0), np.array(n)
    np.testing.assert_allclose(interpolate(x0, n, t), x0 + t * (n - x0), atol=1e-9, rtol=1e-12)


def test_euler_step_arithmetic():
    np.testing.assert_array_equal(euler_step(np.array([1.0, 1.0]), np.zeros(2), -0.3), [1.0, 1.0])
    np.testing.assert_allclose(euler_step(np.array([1.0, 1.0]), np.array([2.0, -2.0]), -0.5), [0.0, 2.0])


def test_euler_step_rejects_nonfinite_with_step():
    with pytest.raises(IntegrationError, match="step 4"):
        euler_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1, step=4)


def test_as_latent_rejects_nan():
    with pytest.raises(RejectedInput):
        as_latent([np.inf, 0.0])


def test_time_grid():
    g = TimeGrid(10)
    assert g.n_max == 10 and g.points[0] == 0.0 and g.points[-1] == 1.0
    steps = g.backward_steps()
    assert steps[0][:2] == (10, 1.0) and steps[-1][2] == 0.0
    assert all(tn - t < 0 for _, t, tn in steps)
    assert TimeGrid.from_fraction(50, 0.9).n_max == 45
    with pytest.raises(RejectedInput):
        TimeGrid(10, 11)
    with pytest.raises(RejectedInput):
        TimeGrid(0)


def test_constant_field_exact():
    k = np.array([0.3, -1.2])
    g = TimeGrid(17)
    traj = integrate_euler(lambda z, t, c: k, np.ones(2), g)
    assert len(traj) == 18
    np.testing.assert_allclose(traj.final, np.ones(2) + (0.0 - 1.0) * k, atol=1e-12)
    ref = integrate_reference(lambda z, t, c: k, np.ones(2), g)
    np.testing.assert_allclose(ref.final, traj.final, atol=1e-12)


def test_composed_euler_steps_match_integrate():
    field = lambda z, t, c: np.sin(z) * t
    g = TimeGrid(12)
    z = np.array([0.4, -1.0])
    traj = integrate_euler(field, z, g)
    for i, t, tn in g.backward_steps():
        z = euler_step(z, field(z, t, None), tn - t)
    np.testing.assert_array_equal(traj.final, z)


def test_affine_path_reproduced_exactly():
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    g = TimeGrid(20)
    traj = integrate_euler(lambda z, t, c: b, a, g, direction="forward")
    np.testing.assert_allclose(traj.states, a + g.points[:, None] * b, atol=1e-12)


def test_exponential_euler_and_reference():
    euler = integrate_euler(exp_field, [1.0], TimeGrid(1000), direction="forward")
    assert abs(euler.final[0] - math.e) < 1e-2
    ref = integrate_reference(exp_field, [1.0], TimeGrid(100), direction="forward")
    assert abs(ref.final[0] - math.e) < 1e-6


@pytest.mark.parametrize("n", [100, 200, 400])
def test_euler_first_order(n):
    ref = integrate_reference(exp_field, [1.0], TimeGrid(100), direction="forward").final[0]
    err = lambda m: abs(integrate_euler(exp_field, [1.0], TimeGrid(m), direction="forward").final[0] - ref)
    assert 0.4 <= err(2 * n) / err(n) <= 0.6


def test_oracle_field_euler_converges():
    model = make_model([[1.0, -0.5]], 0.7)
    field = OracleField(model)
    z1 = np.array([0.8, -0.3])
    errs = []
    for n in (25, 50, 100):
        ref = integrate_reference(field, z1, TimeGrid(n * 100 // 10)).final
        errs.append(np.linalg.norm(integrate_euler(field, z1, TimeGrid(n)).final - ref))
    assert errs[0] > errs[1] > errs[2]
    assert 0.3 < errs[2] / errs[1] < 0.7


def test_integrate_reports_step_on_field_error():
    def bad(z, t, c):
        if t < 0.5:
            raise ValueError("boom")
        return z

    with pytest.raises(IntegrationError) as info:
        integrate_euler(bad, [1.0], TimeGrid(10))
    assert info.value.step == 4


def test_deterministic_trajectories():
    field = lambda z, t, c: np.tanh(z) - t
    a = integrate_euler(field, [0.2, 0.1], TimeGrid(30))
    b = integrate_euler(field, [0.2, 0.1], TimeGrid(30))
    assert a.states.tobytes() == b.states.tobytes()


def test_trajectory_csv(tmp_path):
    traj = integrate_euler(lambda z, t, c: -z, [1.0, 2.0], TimeGrid(4))
    traj.annotations["speed"] = np.linalg.norm(np.nan_to_num(traj.velocities), axis=1)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "t", "z_0", "z_1", "speed"]
    assert len(rows) == 6
    assert float(rows[-1][1]) == 0.0 and float(rows[-1][2]) == traj.final[0]
