"""Simulated landmark world with AR(1) time-correlated measurement noise.

Measurements are body-frame landmark points ``y_k = g(x_k, l) + w_k`` with
``w_k = S' w_{k-1} + n`` and ``n ~ N(0, R')``. The noise process runs for
every landmark at every timestep, visible or not, and starts from its
stationary distribution.

Random streams come from a Philox generator keyed by
``(master seed, trial, split, purpose[, landmark, coordinate])`` so any
trial can be regenerated on its own.
"""

from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from . import se2
from .dataset import Sequence, World
from .estimator import motion_twist

WORLD, TRAJECTORY, ODOMETRY, NOISE, SLIP = range(5)
TRAIN, TEST = 0, 1


@dataclass
class SimConfig:
    K: int = 1000
    N: int = 3000
    dt: float = 0.1
    ar_gain: object = 0.9
    innovation_cov: object = 0.03 ** 2
    fov_deg: float = 270.0
    max_range: float = 5.0
    # world: jittered grid over [0, area]^2
    area: float = 10.0
    spacing: float = 2.5
    jitter: float = 0.3
    # trajectory
    trajectory: str = "random"
    speed: float = 0.4
    speed_variation: float = 0.1
    turn_rate_std: float = 0.3
    turn_rate_max: float = 1.0
    turn_correlation_time: float = 2.0
    circle_radius: float = 2.0
    boundary_margin: float = 2.0
    # odometry white noise (std per component)
    odom_v_std: float = 0.02
    odom_omega_std: float = 0.02
    # lateral slip of the true motion while driving (m/s std, unseen by odometry)
    slip_std: float = 0.01
    # innovation std multiplier 1 + range_noise_scale * range (0: constant)
    range_noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        S = self.ar_matrix()
        if np.max(np.abs(np.linalg.eigvals(S))) >= 1.0:
            raise ValueError("AR gain must have spectral radius below 1")
        try:
            np.linalg.cholesky(self.innovation_matrix())
        except np.linalg.LinAlgError:
            raise ValueError("innovation covariance must be positive definite") from None

    def ar_matrix(self):
        S = np.asarray(self.ar_gain, dtype=float)
        return S * np.eye(2) if S.ndim == 0 else S.reshape(2, 2)

    def innovation_matrix(self):
        R = np.asarray(self.innovation_cov, dtype=float)
        return R * np.eye(2) if R.ndim == 0 else R.reshape(2, 2)

    def stationary_cov(self):
        return scipy.linalg.solve_discrete_lyapunov(self.ar_matrix(), self.innovation_matrix())

    def world(self, landmarks):
        return World(landmarks, np.deg2rad(self.fov_deg), self.max_range)

    def to_dict(self):
        out = asdict(self)
        for key in ("ar_gain", "innovation_cov"):
            out[key] = np.asarray(out[key], dtype=float).tolist()
        return out


def stream(seed, *key):
    """Independent Philox generator for the given key path."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def generate_world(config: SimConfig, trial=0) -> World:
    rng = stream(config.seed, trial, 0, WORLD)
    ticks = np.arange(0.0, config.area + 1e-9, config.spacing)
    gx, gy = np.meshgrid(ticks, ticks)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    grid += rng.uniform(-config.jitter, config.jitter, size=grid.shape)
    return config.world(grid)


def _robot_position_heading(T):
    Ti = se2.inverse(T)
    return Ti[:2, 2], np.arctan2(Ti[1, 0], Ti[0, 0])


def generate_trajectory(config: SimConfig, length, trial=0, split=TEST):
    """Groundtruth poses and noisy odometry.

    The robot drives with piecewise-constant body twists. While moving it
    also slips sideways with white lateral speed ``slip_std``, which the
    odometry does not see. ``odometry[k]`` holds the measured ``(v, omega)``
    of the transition into timestep k; row 0 is zero.
    """
    rng = stream(config.seed, trial, split, TRAJECTORY)
    dt = config.dt
    speeds = np.zeros((length, 2))
    poses = np.empty((length, 3, 3))
    kind = config.trajectory
    if kind == "static":
        start = np.array([config.area / 2, config.area / 2, 0.0])
    elif kind == "circle":
        start = np.array([config.area / 2, config.area / 2 - config.circle_radius, 0.0])
    elif kind == "random":
        lo, hi = config.boundary_margin, config.area - config.boundary_margin
        start = np.array([*rng.uniform(lo, hi, size=2), rng.uniform(-np.pi, np.pi)])
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    # T maps inertial points into the robot frame: T = [C(-theta), -C(-theta) p]
    poses[0] = se2.inverse(se2.from_xyt(start))

    slip = stream(config.seed, trial, split, SLIP).normal(size=length) * config.slip_std
    omega = 0.0
    a = np.exp(-dt / config.turn_correlation_time)
    center = np.full(2, config.area / 2)
    for k in range(1, length):
        if kind == "static":
            v, w = 0.0, 0.0
        elif kind == "circle":
            v, w = config.speed, config.speed / config.circle_radius
        else:
            pos, heading = _robot_position_heading(poses[k - 1])
            omega = a * omega + np.sqrt(1 - a * a) * config.turn_rate_std * rng.normal()
            w = omega
            dist = np.linalg.norm(pos - center)
            limit = config.area / 2 - config.boundary_margin
            if dist > limit:
                # steer back towards the center of the area
                to_center = np.arctan2(*(center - pos)[::-1])
                err = se2.wrap_angle(to_center - heading)
                w += 2.0 * err * min(1.0, (dist - limit))
            w = float(np.clip(w, -config.turn_rate_max, config.turn_rate_max))
            v = config.speed * (1.0 + config.speed_variation * np.sin(2 * np.pi * k * dt / 20.0))
        speeds[k] = (v, w)
        twist = motion_twist(speeds[k])
        if v != 0.0:
            twist[1] = -slip[k]
        poses[k] = se2.exp(dt * twist) @ poses[k - 1]
        poses[k] = se2.normalize(poses[k])

    orng = stream(config.seed, trial, split, ODOMETRY)
    noise = orng.normal(size=(length, 2)) * [config.odom_v_std, config.odom_omega_std]
    odometry = speeds + noise
    odometry[0] = 0.0
    return poses, odometry


def visible_landmarks(pose, world: World):
    """Ids and body-frame points of the landmarks inside range and field of view."""
    q = se2.transform_points(pose, world.landmarks)
    rng = np.linalg.norm(q, axis=1)
    bearing = np.arctan2(q[:, 1], q[:, 0])
    ok = (rng <= world.max_range) & (np.abs(bearing) <= world.fov / 2)
    ids = np.flatnonzero(ok)
    return ids, q[ids]


def ar_noise(config: SimConfig, length, n_landmarks, trial=0, split=TEST, scale=None):
    """AR(1) noise for every landmark coordinate, shape (length, L, 2).

    ``scale`` optionally multiplies the innovation of each (k, landmark).
    """
    S = config.ar_matrix()
    R = config.innovation_matrix()
    L_R = np.linalg.cholesky(R)
    L_V = np.linalg.cholesky(config.stationary_cov())
    z = np.empty((length, n_landmarks, 2))
    z0 = np.empty((n_landmarks, 2))
    for lm in range(n_landmarks):
        for c in range(2):
            g = stream(config.seed, trial, split, NOISE, lm, c)
            z0[lm, c] = g.normal()
            z[:, lm, c] = g.normal(size=length)
    innov = z @ L_R.T
    if scale is not None:
        innov *= scale[..., None]
    w = np.empty((length, n_landmarks, 2))
    prev = z0 @ L_V.T
    ST = S.T
    for k in range(length):
        prev = prev @ ST + innov[k]
        w[k] = prev
    return w


def simulate_measurements(poses, world: World, config: SimConfig, trial=0, split=TEST):
    """Noisy body-frame landmark observations per timestep.

    Returns the observation list ``[(ids, points), ...]`` and the full noise
    array for inspection.
    """
    K = poses.shape[0]
    n_lm = world.landmarks.shape[0]
    q_all = se2.transform_points(poses, np.broadcast_to(world.landmarks, (K, n_lm, 2)))
    scale = None
    if config.range_noise_scale:
        scale = 1.0 + config.range_noise_scale * np.linalg.norm(q_all, axis=2)
    w = ar_noise(config, K, n_lm, trial, split, scale)
    observations = []
    for k in range(K):
        ids, q = visible_landmarks(poses[k], world)
        observations.append((ids, q + w[k, ids]))
    return observations, w


def simulate_sequence(config: SimConfig, world: World, length, trial=0, split=TEST) -> Sequence:
    poses, odometry = generate_trajectory(config, length, trial, split)
    observations, _ = simulate_measurements(poses, world, config, trial, split)
    return Sequence(config.dt, odometry, observations, gt=poses)


@dataclass
class Trial:
    index: int
    world: World
    train: Sequence
    test: Sequence


def generate_trial(config: SimConfig, index) -> Trial:
    world = generate_world(config, index)
    train = simulate_sequence(config, world, config.N, index, TRAIN)
    test = simulate_sequence(config, world, config.K, index, TEST)
    return Trial(index, world, train, test)


def run_trials(config: SimConfig, n_trials):
    """Generate ``n_trials`` independent (train, test) pairs lazily."""
    if n_trials < 1:
        raise ValueError("need at least one trial")
    for i in range(n_trials):
        yield generate_trial(config, i)
