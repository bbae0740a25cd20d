import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrnoise import se2
from corrnoise.errors import ConvergenceError, InvalidArgumentError, UnsupportedInputError
from corrnoise.estimator import (
    EstimationProblem,
    GNSettings,
    PointMeasurements,
    cost,
    dead_reckon,
    gauss_newton,
    linearize,
    measurement_error,
    measurement_jacobian,
    motion_error,
    motion_jacobians,
    point_error,
    propagate,
)
from corrnoise.evaluation import batch_nees, pose_errors
from corrnoise.noise_model import BandedNoiseModel

from conftest import random_poses, random_spd

DT = 0.1


def random_model(rng, K, b, scale=1.0):
    W = np.array([random_spd(rng, 3, scale) for _ in range(K)])
    S = rng.normal(scale=0.3, size=(K, b, 3, 3))
    for j in range(1, b + 1):
        S[:j, j - 1] = 0.0
    return BandedNoiseModel(W, S)


def dense_information(model):
    K, b = model.length, model.bandwidth
    S = np.eye(3 * K)
    W = np.zeros((3 * K, 3 * K))
    for k in range(K):
        W[3 * k:3 * k + 3, 3 * k:3 * k + 3] = model.W[k]
        for j in range(1, min(b, k) + 1):
            S[3 * k:3 * k + 3, 3 * (k - j):3 * (k - j) + 3] = model.S[k, j - 1]
    return S.T @ W @ S


def random_problem(rng, K, b_meas, b_motion, noise=0.05):
    odom = np.column_stack([rng.uniform(0, 1, K), rng.uniform(-1, 1, K)])
    odom[0] = 0.0
    truth = dead_reckon(random_poses(rng, 1)[0], odom, DT)
    truth = se2.exp(rng.normal(scale=noise, size=(K, 3))) @ truth
    pseudo = se2.exp(rng.normal(scale=noise, size=(K, 3))) @ truth
    problem = EstimationProblem(DT, odom, random_model(rng, K - 1, b_motion), pseudo,
                                random_model(rng, K, b_meas))
    return problem, truth


def dense_system(problem, poses):
    """Stack every error and Jacobian densely and form J^T Sigma^-1 J, -J^T Sigma^-1 e."""
    K = problem.K
    e_v, J_prev, J_k = motion_jacobians(poses[:-1], poses[1:], problem.odometry[1:], problem.dt)
    Jv = np.zeros((3 * (K - 1), 3 * K))
    for m in range(K - 1):
        Jv[3 * m:3 * m + 3, 3 * m:3 * m + 3] = J_prev[m]
        Jv[3 * m:3 * m + 3, 3 * m + 3:3 * m + 6] = J_k[m]
    e_y, J_y = measurement_jacobian(problem.pseudo, poses)
    Jy = np.zeros((3 * K, 3 * K))
    for k in range(K):
        Jy[3 * k:3 * k + 3, 3 * k:3 * k + 3] = J_y[k]
    Qi = dense_information(problem.motion_model)
    Ri = dense_information(problem.measurement_model)
    A = Jv.T @ Qi @ Jv + Jy.T @ Ri @ Jy
    g = -(Jv.T @ Qi @ e_v.ravel() + Jy.T @ Ri @ e_y.ravel())
    quad = 0.5 * (e_v.ravel() @ Qi @ e_v.ravel() + e_y.ravel() @ Ri @ e_y.ravel())
    return A, g, quad


def dense_gauss_newton(problem, poses, iterations=30):
    for _ in range(iterations):
        A, g, _ = dense_system(problem, poses)
        step = np.linalg.solve(A, g)
        poses = se2.normalize(se2.exp(step.reshape(-1, 3)) @ poses)
        if np.linalg.norm(step) < 1e-13:
            break
    A, _, _ = dense_system(problem, poses)
    return poses, A


problems = st.tuples(st.integers(2, 30), st.integers(0, 5), st.integers(0, 5),
                     st.integers(0, 2**32 - 1))


@settings(max_examples=100, deadline=None)
@given(problems)
def test_normal_equations_match_dense_assembly(params):
    K, b_meas, b_motion, seed = params
    rng = np.random.default_rng(seed)
    b_motion = min(b_motion, K - 2)
    problem, truth = random_problem(rng, K, b_meas, b_motion)
    poses = se2.exp(rng.normal(scale=0.05, size=(K, 3))) @ truth
    A, g, _ = linearize(problem, poses)
    A_ref, g_ref, _ = dense_system(problem, poses)
    Ad = A.to_dense()
    assert np.abs(Ad - A_ref).max() <= 1e-8 * np.abs(A_ref).max()
    assert np.abs(g - g_ref).max() <= 1e-8 * max(np.abs(g_ref).max(), 1e-300)
    assert A.bandwidth == max(b_motion + 1, b_meas)


def test_bandwidths_of_normal_equations(rng):
    problem, truth = random_problem(rng, 8, 0, 0)
    assert linearize(problem, truth)[0].bandwidth == 1
    problem, truth = random_problem(rng, 8, 1, 0)
    assert linearize(problem, truth)[0].bandwidth == 1
    problem, truth = random_problem(rng, 8, 3, 1)
    assert linearize(problem, truth)[0].bandwidth == 3


def test_cost_includes_log_determinants(rng):
    problem, truth = random_problem(rng, 10, 1, 1)
    _, _, quad = dense_system(problem, truth)
    logdets = sum(np.linalg.slogdet(problem.motion_model.W)[1]) + \
        sum(np.linalg.slogdet(problem.measurement_model.W)[1])
    assert cost(problem, truth) == pytest.approx(quad - 0.5 * logdets, rel=1e-10)


def test_motion_error_examples(rng):
    T = random_poses(rng, 1)[0]
    v = np.array([0.7, -0.3])
    np.testing.assert_allclose(motion_error(T, propagate(T, v, DT), v, DT), 0, atol=1e-14)
    np.testing.assert_allclose(motion_error(T, T, [0.0, 0.0], DT), 0, atol=1e-14)
    # forward motion along the robot's x axis
    T_k = propagate(np.eye(3), [1.0, 0.0], 1.0)
    np.testing.assert_allclose(se2.inverse(T_k)[:2, 2], [1.0, 0.0], atol=1e-15)
    T_prev, T_k = random_poses(rng, 2)
    ref = se2.log(se2.exp(DT * np.array([-v[0], 0.0, -v[1]])) @ T_prev @ np.linalg.inv(T_k))
    np.testing.assert_allclose(motion_error(T_prev, T_k, v, DT), ref, atol=1e-12)


def test_measurement_error_examples(rng):
    T = random_poses(rng, 1)[0]
    np.testing.assert_allclose(measurement_error(T, T), 0, atol=1e-14)
    d = np.array([1e-4, -2e-4, 3e-4])
    np.testing.assert_allclose(measurement_error(se2.exp(d) @ T, T), d, atol=1e-8)
    A, B = random_poses(rng, 2)
    np.testing.assert_allclose(measurement_error(A, B), se2.log(A @ np.linalg.inv(B)), atol=1e-12)


def test_point_error_jacobian(rng):
    T = random_poses(rng, 20)
    lms = rng.uniform(-5, 5, size=(20, 2))
    obs = rng.normal(size=(20, 2))
    e, J = point_error(T, lms, obs)
    h = 1e-6
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        num = (point_error(se2.exp(d) @ T, lms, obs)[0] - point_error(se2.exp(-d) @ T, lms, obs)[0]) / (2 * h)
        np.testing.assert_allclose(J[:, :, i], num, atol=1e-6)


def _zero_noise_problem(rng, K=40):
    odom = np.column_stack([np.full(K, 0.5), 0.4 * np.sin(np.arange(K) / 5.0)])
    odom[0] = 0.0
    truth = dead_reckon(se2.from_xyt([1.0, 2.0, 0.3]), odom, DT)
    ident = BandedNoiseModel(np.broadcast_to(np.eye(3) * 100, (K, 3, 3)).copy(), None)
    motion = BandedNoiseModel(np.broadcast_to(np.eye(3) * 100, (K - 1, 3, 3)).copy(), None)
    return EstimationProblem(DT, odom, motion, truth.copy(), ident), truth


def test_zero_noise_from_truth_converges_immediately(rng):
    problem, truth = _zero_noise_problem(rng)
    problem.initial = truth.copy()
    res = gauss_newton(problem)
    assert res.iterations == 1
    np.testing.assert_allclose(res.poses, truth, atol=1e-12)
    assert res.cost_trace[0] == pytest.approx(cost(problem, truth))


def test_zero_noise_from_perturbed_start_recovers_truth(rng):
    problem, truth = _zero_noise_problem(rng)
    problem.initial = se2.exp(rng.normal(scale=0.2, size=(problem.K, 3))) @ truth
    res = gauss_newton(problem)
    err = se2.to_xyt(res.poses @ se2.inverse(truth))
    assert np.abs(err[:, :2]).max() < 1e-6
    assert np.abs(err[:, 2]).max() < 1e-6
    assert np.all(np.diff(res.cost_trace) <= 1e-12)


def test_matches_dense_reference(rng):
    for _ in range(5):
        problem, truth = random_problem(rng, 25, 2, 1)
        res = gauss_newton(problem, GNSettings(rel_cost_tol=1e-15))
        ref_poses, ref_A = dense_gauss_newton(problem, problem.initial.copy())
        np.testing.assert_allclose(res.poses, ref_poses, atol=1e-7)
        P = np.linalg.inv(ref_A)
        for k in range(problem.K):
            blk = P[3 * k:3 * k + 3, 3 * k:3 * k + 3]
            np.testing.assert_allclose(res.marginals[k], blk, rtol=1e-7, atol=1e-7 * np.abs(blk).max())
        assert np.all(np.linalg.eigvalsh(res.information.to_dense()) > 0)
        e = pose_errors(res.poses, truth).ravel()
        assert batch_nees(pose_errors(res.poses, truth), res.information) == pytest.approx(
            e @ np.linalg.solve(P, e), rel=1e-8)


def test_anchor_used_without_first_measurement(rng):
    K = 12
    problem, truth = random_problem(rng, K, 0, 0)
    problem.pseudo_valid = np.ones(K, dtype=bool)
    problem.pseudo_valid[:3] = False
    res = gauss_newton(problem)
    assert np.all(np.linalg.eigvalsh(res.information.to_dense()) > 0)
    # the weak anchor sits at the dead-reckoned initial pose
    assert res.information.blocks[0, 0][0, 0] > 1e5


def test_gaps_need_bandwidth_zero(rng):
    problem, _ = random_problem(rng, 10, 1, 0)
    valid = np.ones(10, dtype=bool)
    valid[4] = False
    with pytest.raises(UnsupportedInputError):
        EstimationProblem(DT, problem.odometry, problem.motion_model, problem.pseudo,
                          problem.measurement_model, valid)


def test_model_lengths_checked(rng):
    problem, _ = random_problem(rng, 10, 0, 0)
    with pytest.raises(InvalidArgumentError):
        EstimationProblem(DT, problem.odometry, problem.measurement_model, problem.pseudo,
                          problem.measurement_model)
    with pytest.raises(InvalidArgumentError):
        EstimationProblem(0.0, problem.odometry, problem.motion_model)


def test_non_convergence_carries_trace(rng):
    problem, truth = random_problem(rng, 15, 1, 1, noise=0.3)
    problem.initial = se2.exp(rng.normal(scale=0.5, size=(15, 3))) @ truth
    with pytest.raises(ConvergenceError) as info:
        gauss_newton(problem, GNSettings(max_iterations=1))
    assert len(info.value.cost_trace) == 2


def test_point_measurement_problem(rng):
    K = 20
    odom = np.column_stack([np.full(K, 0.5), np.full(K, 0.2)])
    odom[0] = 0.0
    truth = dead_reckon(np.eye(3), odom, DT)
    lms = rng.uniform(-3, 3, size=(6, 2))
    state = np.repeat(np.arange(K), 6)
    obs = se2.transform_points(truth[state], lms[np.tile(np.arange(6), K)][:, None, :])[:, 0]
    pts = PointMeasurements(state, lms[np.tile(np.arange(6), K)], obs, np.eye(2) * 1e4)
    motion = BandedNoiseModel(np.broadcast_to(np.eye(3), (K - 1, 3, 3)).copy(), None)
    problem = EstimationProblem(DT, odom, motion, points=pts)
    problem.initial = se2.exp(rng.normal(scale=0.1, size=(K, 3))) @ truth
    res = gauss_newton(problem)
    np.testing.assert_allclose(res.poses, truth, atol=1e-8)


def test_result_serialization(rng):
    problem, _ = random_problem(rng, 6, 0, 0)
    out = gauss_newton(problem).to_dict()
    assert [r["k"] for r in out["trajectory"]] == list(range(1, 7))
    assert len(out["marginal_covariances"][0]) == 9
    assert out["iterations"] >= 1 and len(out["cost_trace"]) >= 1
