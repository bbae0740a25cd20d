import numpy as np
import pytest

from corrnoise import se2
from corrnoise.dataset import World
from corrnoise.estimator import dead_reckon
from corrnoise.simulator import (
    TEST,
    TRAIN,
    SimConfig,
    ar_noise,
    generate_trajectory,
    generate_trial,
    generate_world,
    run_trials,
    simulate_measurements,
    simulate_sequence,
    visible_landmarks,
)


def test_default_noise_parameters():
    cfg = SimConfig()
    np.testing.assert_array_equal(cfg.ar_matrix(), 0.9 * np.eye(2))
    np.testing.assert_allclose(cfg.innovation_matrix(), 0.0009 * np.eye(2))
    assert cfg.fov_deg == 270.0 and cfg.max_range == 5.0
    # 0.0009 / (1 - 0.81)
    np.testing.assert_allclose(cfg.stationary_cov(), 0.004736842 * np.eye(2), rtol=1e-6)


def test_invalid_configs():
    with pytest.raises(ValueError):
        SimConfig(ar_gain=1.0)
    with pytest.raises(ValueError):
        SimConfig(innovation_cov=[[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        World(np.zeros((1, 2)), fov=0.0)
    with pytest.raises(ValueError):
        World(np.zeros((1, 2)), max_range=-1.0)


def test_stationary_variance_and_autocovariance():
    cfg = SimConfig()
    w = ar_noise(cfg, 100_000, 2)
    x = w.reshape(100_000, -1)
    var = x.var(axis=0)
    np.testing.assert_allclose(var, 0.004737, rtol=0.03)
    lag1 = np.mean((x[1:] - x.mean(0)) * (x[:-1] - x.mean(0)), axis=0)
    np.testing.assert_allclose(lag1 / var, 0.9, atol=0.01)


def test_white_noise_limit():
    cfg = SimConfig(ar_gain=0.0, innovation_cov=[[0.0009, 0.0003], [0.0003, 0.0016]])
    w = ar_noise(cfg, 100_000, 1)[:, 0]
    C = np.cov(w.T, bias=True)
    R = cfg.innovation_matrix()
    assert np.linalg.norm(C - R) < 0.03 * np.linalg.norm(R)


def test_matrix_gain_stationary_covariance():
    S = [[0.5, 0.2], [-0.1, 0.7]]
    cfg = SimConfig(ar_gain=S, innovation_cov=[[0.01, 0.002], [0.002, 0.02]])
    V = cfg.stationary_cov()
    Sm = np.array(S)
    np.testing.assert_allclose(Sm @ V @ Sm.T + cfg.innovation_matrix(), V, atol=1e-15)
    w = ar_noise(cfg, 100_000, 1)[:, 0]
    assert np.linalg.norm(np.cov(w.T, bias=True) - V) < 0.03 * np.linalg.norm(V)


def test_static_trajectory_is_constant():
    poses, odom = generate_trajectory(SimConfig(trajectory="static", odom_v_std=0, odom_omega_std=0), 50)
    np.testing.assert_array_equal(poses, np.broadcast_to(poses[0], poses.shape))
    np.testing.assert_array_equal(odom, 0.0)


def test_circle_kinematics():
    cfg = SimConfig(trajectory="circle", speed=0.5, circle_radius=2.0, slip_std=0.0)
    poses, _ = generate_trajectory(cfg, 200)
    # T holds C(-theta), so theta = atan2(T01, T00)
    heading = np.unwrap(np.arctan2(poses[:, 0, 1], poses[:, 0, 0]))
    np.testing.assert_allclose(np.diff(heading), 0.5 * cfg.dt / 2.0, atol=1e-12)
    centers = se2.inverse(poses)[:, :2, 2]
    center = np.array([cfg.area / 2, cfg.area / 2])
    np.testing.assert_allclose(np.linalg.norm(centers - center, axis=1), 2.0, atol=1e-9)


def test_noiseless_odometry_dead_reckons_truth():
    cfg = SimConfig(odom_v_std=0.0, odom_omega_std=0.0, slip_std=0.0)
    poses, odom = generate_trajectory(cfg, 1000)
    np.testing.assert_allclose(dead_reckon(poses[0], odom, cfg.dt), poses, atol=1e-9)


def test_random_trajectory_is_smooth_and_bounded():
    cfg = SimConfig()
    poses, odom = generate_trajectory(cfg, 3000)
    assert np.abs(odom[1:, 1]).max() < cfg.turn_rate_max + 5 * cfg.odom_omega_std
    pos = se2.inverse(poses)[:, :2, 2]
    assert pos.min() > -1.0 and pos.max() < cfg.area + 1.0


def test_visibility_gating_examples():
    world = World(np.array([[6.0, 0.0], [-2.0, 0.0], [4.99, 0.0], [0.0, 3.0]]), np.deg2rad(270), 5.0)
    ids, pts = visible_landmarks(np.eye(3), world)
    assert ids.tolist() == [2, 3]
    np.testing.assert_array_equal(pts, world.landmarks[[2, 3]])


def test_emitted_measurements_satisfy_gating():
    cfg = SimConfig()
    world = generate_world(cfg)
    poses, _ = generate_trajectory(cfg, 300)
    obs, w = simulate_measurements(poses, world, cfg)
    n_visible = 0
    for k, (ids, pts) in enumerate(obs):
        q = se2.transform_points(poses[k], world.landmarks[ids])
        assert np.all(np.linalg.norm(q, axis=1) <= cfg.max_range)
        assert np.all(np.abs(np.arctan2(q[:, 1], q[:, 0])) <= np.deg2rad(135))
        np.testing.assert_allclose(pts - q, w[k, ids], atol=1e-12)
        n_visible += len(ids)
    assert n_visible / len(obs) >= 3


def test_noise_persists_through_invisibility():
    # the same noise array is produced whatever the trajectory
    cfg = SimConfig()
    world = generate_world(cfg)
    a, _ = generate_trajectory(cfg, 100)
    b = np.broadcast_to(a[0], a.shape)
    _, wa = simulate_measurements(a, world, cfg)
    _, wb = simulate_measurements(b, world, cfg)
    np.testing.assert_array_equal(wa, wb)


def test_determinism_and_independence():
    cfg = SimConfig(K=50, N=60)
    t1, t2 = generate_trial(cfg, 3), generate_trial(cfg, 3)
    np.testing.assert_array_equal(t1.train.odometry, t2.train.odometry)
    np.testing.assert_array_equal(t1.test.gt, t2.test.gt)
    for (i1, p1), (i2, p2) in zip(t1.test.observations, t2.test.observations):
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_array_equal(p1, p2)
    other = generate_trial(cfg, 4)
    assert not np.array_equal(other.test.odometry, t1.test.odometry)
    assert not np.array_equal(t1.train.odometry[:50], t1.test.odometry)
    assert not np.array_equal(generate_trial(SimConfig(K=50, N=60, seed=1), 3).test.odometry,
                              t1.test.odometry)


def test_run_trials():
    cfg = SimConfig(K=20, N=30)
    trials = list(run_trials(cfg, 2))
    assert [t.index for t in trials] == [0, 1]
    assert len(trials[0].train) == 30 and len(trials[0].test) == 20
    with pytest.raises(ValueError):
        list(run_trials(cfg, 0))


def test_range_scaled_noise_grows_with_range():
    cfg = SimConfig(range_noise_scale=1.0)
    world = generate_world(cfg)
    seq = simulate_sequence(cfg, world, 3000, 0, TRAIN)
    near, far = [], []
    for k, (ids, pts) in enumerate(seq.observations):
        q = se2.transform_points(seq.gt[k], world.landmarks[ids])
        r = np.linalg.norm(q, axis=1)
        d = np.linalg.norm(pts - q, axis=1)
        near.extend(d[r < 2])
        far.extend(d[r > 4])
    assert np.mean(far) > 2 * np.mean(near)
    assert TEST != TRAIN
