"""Landmark observations to pose pseudomeasurements, features and residuals."""

import numpy as np

from . import se2
from .dataset import Sequence, World
from .errors import DegenerateConfigurationError, InvalidArgumentError, UnderdeterminedError
from .estimator import PointMeasurements, measurement_error, motion_error
from .noise_model import ErrorDataset


def svd_pose_fit(map_points, observed):
    """Rigid transform ``T`` minimizing ``sum ||p_j - T l_j||^2``.

    Centers both point sets, takes the SVD of their 2x2 cross-covariance and
    flips the weaker singular direction when needed so that the result is a
    proper rotation.
    """
    L = np.asarray(map_points, dtype=float).reshape(-1, 2)
    P = np.asarray(observed, dtype=float).reshape(-1, 2)
    if L.shape != P.shape:
        raise InvalidArgumentError("map and observed point counts differ")
    n = L.shape[0]
    if n < 2:
        raise UnderdeterminedError(f"need at least 2 correspondences, got {n}")
    l_mean = L.mean(axis=0)
    p_mean = P.mean(axis=0)
    Lc = L - l_mean
    Pc = P - p_mean
    if np.max(np.linalg.norm(Lc, axis=1)) < 1e-12 * max(1.0, np.abs(l_mean).max()):
        raise DegenerateConfigurationError("map points coincide; rotation is unobservable")
    H = Lc.T @ Pc
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    C = Vt.T @ D @ U.T
    T = np.eye(3)
    T[:2, :2] = C
    T[:2, 2] = p_mean - C @ l_mean
    return se2.normalize(T)


def extract_feature(points):
    """``[count, mean_x, mean_y, cov_xx, cov_xy, cov_yy]`` with 1/n covariance.

    An empty point set gives the zero vector (count 0).
    """
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    n = P.shape[0]
    if n == 0:
        return np.zeros(6)
    mean = P.mean(axis=0)
    D = P - mean
    cov = D.T @ D / n
    return np.array([n, mean[0], mean[1], cov[0, 0], cov[0, 1], cov[1, 1]])


def pseudomeasurements(seq: Sequence, world: World):
    """SVD pose fits and features for every timestep.

    Timesteps with fewer than two landmarks get no pseudomeasurement.
    """
    K = len(seq)
    pseudo = np.tile(np.eye(3), (K, 1, 1))
    valid = np.zeros(K, dtype=bool)
    features = np.zeros((K, 6))
    for k, (ids, pts) in enumerate(seq.observations):
        features[k] = extract_feature(pts)
        if len(ids) >= 2:
            try:
                pseudo[k] = svd_pose_fit(world.landmarks[ids], pts)
                valid[k] = True
            except (UnderdeterminedError, DegenerateConfigurationError):
                pass
    return pseudo, valid, features


def with_pseudomeasurements(seq: Sequence, world: World) -> Sequence:
    pseudo, valid, features = pseudomeasurements(seq, world)
    return Sequence(seq.dt, seq.odometry, seq.observations, seq.gt, pseudo, valid, features)


def point_measurements(seq: Sequence, world: World, information=None) -> PointMeasurements:
    state, lms, obs = [], [], []
    for k, (ids, pts) in enumerate(seq.observations):
        state.extend([k] * len(ids))
        lms.append(world.landmarks[ids].reshape(-1, 2))
        obs.append(np.asarray(pts, dtype=float).reshape(-1, 2))
    info = np.eye(2) if information is None else information
    return PointMeasurements(np.array(state, dtype=int), np.concatenate(lms),
                             np.concatenate(obs), info)


def measurement_residuals(seq: Sequence, groundtruth=None) -> ErrorDataset:
    """Pseudomeasurement errors ``ln(T_m T^-1)`` against groundtruth, with features."""
    gt = seq.gt if groundtruth is None else groundtruth
    if gt is None or seq.pseudo is None:
        raise InvalidArgumentError("need groundtruth and pseudomeasurements")
    if len(gt) != len(seq):
        raise InvalidArgumentError("groundtruth length does not match the sequence")
    e = measurement_error(seq.pseudo, gt)
    e[~seq.pseudo_valid] = 0.0
    return ErrorDataset(e, seq.features, seq.pseudo_valid.copy())


def motion_residuals(seq: Sequence, groundtruth=None) -> ErrorDataset:
    """Motion errors of the groundtruth for the K-1 transitions."""
    gt = seq.gt if groundtruth is None else groundtruth
    if gt is None:
        raise InvalidArgumentError("need groundtruth")
    if len(gt) != len(seq):
        raise InvalidArgumentError("groundtruth length does not match the sequence")
    e = motion_error(gt[:-1], gt[1:], seq.odometry[1:], seq.dt)
    feats = None if seq.features is None else seq.features[1:]
    return ErrorDataset(e, feats)


def point_residuals(seq: Sequence, world: World, groundtruth=None) -> ErrorDataset:
    """Landmark point errors ``p - T l`` for every observation (uncorrelated)."""
    gt = seq.gt if groundtruth is None else groundtruth
    if gt is None:
        raise InvalidArgumentError("need groundtruth")
    pts = point_measurements(seq, world)
    q = se2.transform_points(gt[pts.state], pts.landmarks[:, None, :])[:, 0]
    return ErrorDataset(pts.observed - q)


def residuals_from_groundtruth(seq: Sequence, groundtruth=None):
    """Measurement and motion residual datasets used to train noise models."""
    return measurement_residuals(seq, groundtruth), motion_residuals(seq, groundtruth)
