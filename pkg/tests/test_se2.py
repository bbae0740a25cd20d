import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from corrnoise import se2
from corrnoise.errors import InvalidArgumentError
from corrnoise.estimator import (
    measurement_error,
    measurement_jacobian,
    motion_error,
    motion_jacobians,
)

from conftest import random_poses

finite = st.floats(-10.0, 10.0, allow_nan=False)
angles = st.floats(-np.pi + 1e-6, np.pi - 1e-6, allow_nan=False)
twists = st.tuples(finite, finite, angles).map(np.array)


def test_exp_identity():
    np.testing.assert_array_equal(se2.exp(np.zeros(3)), np.eye(3))


def test_exp_pure_translation():
    T = se2.exp([1.5, -0.25, 0.0])
    np.testing.assert_allclose(T[:2, :2], np.eye(2), atol=1e-15)
    np.testing.assert_allclose(T[:2, 2], [1.5, -0.25], atol=1e-15)


def test_exp_half_turn_matches_product_integral():
    xi = np.array([1.0, 0.0, np.pi])
    n = 10_000
    step = scipy.linalg.expm(se2.hat(xi / n))
    T = np.linalg.matrix_power(step, n)
    np.testing.assert_allclose(se2.exp(xi), T, atol=1e-9)
    # closed form: translation = V(pi) [1, 0] with V = [[0, -2/pi], [2/pi, 0]]
    np.testing.assert_allclose(se2.exp(xi)[:2, 2], [0.0, 2.0 / np.pi], atol=1e-12)


def test_exp_matches_matrix_exponential(rng):
    xi = np.column_stack([rng.normal(size=(200, 2)) * 3, rng.uniform(-3, 3, 200)])
    for x in xi:
        np.testing.assert_allclose(se2.exp(x), scipy.linalg.expm(se2.hat(x)), atol=1e-12)


def test_log_identity_and_pure_rotation():
    np.testing.assert_array_equal(se2.log(np.eye(3)), np.zeros(3))
    np.testing.assert_allclose(se2.log(se2.from_xyt([0, 0, np.pi / 2])), [0, 0, np.pi / 2],
                               atol=1e-15)


def test_log_half_turn_branch_is_positive():
    T = se2.from_xyt([0.3, -0.1, np.pi])
    T[1, 0] = -0.0  # negative-zero sine must not flip the branch
    assert se2.log(T)[2] == np.pi
    assert se2.log(se2.from_xyt([0.0, 0.0, -np.pi]))[2] == np.pi


def test_round_trip_many(rng):
    n = 10_000
    xi = np.column_stack([rng.uniform(-5, 5, (n, 2)), rng.uniform(-np.pi + 1e-6, np.pi - 1e-6, n)])
    np.testing.assert_allclose(se2.log(se2.exp(xi)), xi, atol=1e-9)
    T = random_poses(rng, n)
    np.testing.assert_allclose(se2.exp(se2.log(T)), T, atol=1e-9)


def test_small_angle_branch_continuous():
    for phi in (1e-9, 5e-8, 1.01e-7, 1e-6):
        xi = np.array([0.7, -0.4, phi])
        np.testing.assert_allclose(se2.exp(xi), scipy.linalg.expm(se2.hat(xi)), atol=1e-14)
        np.testing.assert_allclose(se2.log(se2.exp(xi)), xi, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(twists)
def test_round_trip_property(xi):
    np.testing.assert_allclose(se2.log(se2.exp(xi)), xi, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(twists, twists, twists)
def test_group_axioms(a, b, c):
    A, B, C = se2.exp(a), se2.exp(b), se2.exp(c)
    np.testing.assert_allclose(se2.compose(se2.compose(A, B), C),
                               se2.compose(A, se2.compose(B, C)), atol=1e-9)
    np.testing.assert_allclose(se2.compose(A, se2.inverse(A)), np.eye(3), atol=1e-9)
    np.testing.assert_allclose(se2.inverse(se2.inverse(A)), A, atol=1e-12)
    np.testing.assert_allclose(se2.compose(A, np.eye(3)), A)
    AB = se2.compose(A, B)
    np.testing.assert_allclose(AB[:2, 2], A[:2, :2] @ B[:2, 2] + A[:2, 2], atol=1e-12)


def test_determinant_after_long_chain(rng):
    T = np.eye(3)
    steps = se2.exp(rng.normal(scale=0.3, size=(100_000, 3)))
    for k in range(steps.shape[0]):
        T = se2.normalize(steps[k] @ T)
    assert abs(np.linalg.det(T[:2, :2]) - 1.0) < 1e-9
    np.testing.assert_allclose(T[:2, :2] @ T[:2, :2].T, np.eye(2), atol=1e-9)


def test_adjoint_identity(rng):
    for T in random_poses(rng, 50):
        xi = rng.normal(size=3)
        np.testing.assert_allclose(T @ se2.exp(xi) @ se2.inverse(T),
                                   se2.exp(se2.adjoint(T) @ xi), atol=1e-10)


def test_left_jacobian_first_order(rng):
    h = 1e-6
    for _ in range(100):
        xi = np.concatenate([rng.normal(size=2), rng.uniform(-3, 3, 1)])
        J = se2.left_jacobian(xi)
        num = np.empty((3, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = h
            plus = se2.log(se2.exp(xi + d) @ se2.inverse(se2.exp(xi)))
            minus = se2.log(se2.exp(xi - d) @ se2.inverse(se2.exp(xi)))
            num[:, i] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(J, num, atol=1e-7)
        np.testing.assert_allclose(se2.left_jacobian_inv(xi) @ J, np.eye(3), atol=1e-12)


def test_invalid_input():
    with pytest.raises(InvalidArgumentError):
        se2.exp([np.nan, 0.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        se2.log(np.full((3, 3), np.inf))


def _numeric_left(fn, T, h=1e-6):
    out = np.empty((3, 3))
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        out[:, i] = (fn(se2.exp(d) @ T) - fn(se2.exp(-d) @ T)) / (2 * h)
    return out


def _configurations(rng, n):
    T_prev = random_poses(rng, n)
    odom = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-2, 2, n)])
    # poses near the propagated one so that the error stays away from the pi branch
    T_k = se2.exp(rng.normal(scale=0.5, size=(n, 3))) @ T_prev
    return T_prev, T_k, odom


def test_motion_jacobians_match_finite_differences(rng):
    dt = 0.1
    T_prev, T_k, odom = _configurations(rng, 1000)
    worst = 0.0
    for i in range(1000):
        _, J_prev, J_k = motion_jacobians(T_prev[i], T_k[i], odom[i], dt)
        n_prev = _numeric_left(lambda T: motion_error(T, T_k[i], odom[i], dt), T_prev[i])
        n_k = _numeric_left(lambda T: motion_error(T_prev[i], T, odom[i], dt), T_k[i])
        worst = max(worst, np.abs(J_prev - n_prev).max(), np.abs(J_k - n_k).max())
    assert worst < 1e-5


def test_measurement_jacobian_matches_finite_differences(rng):
    T_m, T_k, _ = _configurations(rng, 1000)
    worst = 0.0
    for i in range(1000):
        _, J = measurement_jacobian(T_m[i], T_k[i])
        num = _numeric_left(lambda T: measurement_error(T_m[i], T), T_k[i])
        worst = max(worst, np.abs(J - num).max())
    assert worst < 1e-5


def test_composition_jacobian_of_log(rng):
    # d/d delta of log(exp(delta) A B) at 0 is J_l(log(AB))^-1
    for _ in range(100):
        A, B = random_poses(rng, 2, max_angle=1.2)
        e = se2.log(A @ B)
        num = _numeric_left(lambda T: se2.log(T @ B), A)
        np.testing.assert_allclose(se2.left_jacobian_inv(e), num, atol=1e-5)
