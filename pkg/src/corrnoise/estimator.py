"""Batch MAP trajectory estimation on SE(2) with block-banded noise models.

The objective is the sum of three groups of factors, all whitened by their
banded noise models:

* motion errors ``ln(exp(dt v_k^) T_{k-1} T_k^-1)`` with
  ``v_k = [-v, 0, -omega]``, one per transition;
* pose pseudomeasurement errors ``ln(T_mk T_k^-1)``, one per timestep;
* optionally, raw landmark point errors ``p - T_k l`` (uncorrelated) and a
  unary prior on the first pose.

Gauss-Newton with left perturbations ``T <- exp(delta^) T`` solves it; the
normal equations are block-banded so each iteration is linear in K.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import se2
from .banded import BlockBanded, cholesky, takahashi
from .errors import (
    ConditioningError,
    ConvergenceError,
    InvalidArgumentError,
    UnsupportedInputError,
)
from .noise_model import BandedNoiseModel

log = logging.getLogger(__name__)

STATE_DIM = 3


def motion_twist(odometry):
    """Twist ``[-v, 0, -omega]`` for odometry rows ``(v, omega)``."""
    odometry = np.asarray(odometry, dtype=float)
    return np.stack([-odometry[..., 0], np.zeros_like(odometry[..., 0]), -odometry[..., 1]], axis=-1)


def propagate(T_prev, odometry, dt):
    """Noise-free motion: ``T_k = exp(dt v_k^) T_{k-1}``."""
    return se2.exp(dt * motion_twist(odometry)) @ T_prev


def motion_error(T_prev, T_k, odometry, dt):
    Xi = se2.exp(dt * motion_twist(odometry))
    return se2.log(Xi @ T_prev @ se2.inverse(T_k))


def motion_jacobians(T_prev, T_k, odometry, dt):
    """Motion error and its Jacobians w.r.t. left perturbations of both poses."""
    Xi = se2.exp(dt * motion_twist(odometry))
    e = se2.log(Xi @ T_prev @ se2.inverse(T_k))
    J_prev = se2.left_jacobian_inv(e) @ se2.adjoint(Xi)
    J_k = -se2.right_jacobian_inv(e)
    return e, J_prev, J_k


def measurement_error(T_m, T_k):
    return se2.log(np.asarray(T_m) @ se2.inverse(T_k))


def measurement_jacobian(T_m, T_k):
    e = measurement_error(T_m, T_k)
    return e, -se2.right_jacobian_inv(e)


def point_error(T_k, landmarks, observed):
    """Landmark point errors ``p - T l`` and their pose Jacobians.

    ``T_k`` and ``landmarks`` are paired along the leading dimension.
    """
    q = se2.transform_points(T_k, np.asarray(landmarks, dtype=float)[..., None, :])[..., 0, :]
    e = np.asarray(observed, dtype=float) - q
    J = np.zeros(q.shape[:-1] + (2, 3))
    J[..., 0, 0] = -1.0
    J[..., 1, 1] = -1.0
    J[..., 0, 2] = q[..., 1]
    J[..., 1, 2] = -q[..., 0]
    return e, J


def dead_reckon(T_start, odometry, dt, start_index=0):
    """Integrate odometry forwards and backwards from the pose at ``start_index``."""
    odometry = np.asarray(odometry, dtype=float)
    K = odometry.shape[0]
    steps = se2.exp(dt * motion_twist(odometry))
    poses = np.empty((K, 3, 3))
    poses[start_index] = T_start
    for k in range(start_index + 1, K):
        poses[k] = steps[k] @ poses[k - 1]
    for k in range(start_index - 1, -1, -1):
        poses[k] = se2.inverse(steps[k + 1]) @ poses[k + 1]
    return se2.normalize(poses)


@dataclass
class PointMeasurements:
    """Raw landmark observations with one constant 2x2 information matrix."""

    state: np.ndarray      # (F,) timestep of each observation
    landmarks: np.ndarray  # (F, 2) map points
    observed: np.ndarray   # (F, 2) body-frame points
    information: np.ndarray

    def count_at(self, k):
        return int(np.count_nonzero(self.state == k))


@dataclass
class EstimationProblem:
    """Inputs of one batch estimation.

    ``odometry[k]`` drives the transition from k-1 to k (row 0 is unused) and
    the motion model covers the K-1 transitions. The measurement model covers
    all K timesteps; ``pseudo_valid`` marks timesteps that have a
    pseudomeasurement.
    """

    dt: float
    odometry: np.ndarray
    motion_model: BandedNoiseModel
    pseudo: np.ndarray = None
    measurement_model: BandedNoiseModel = None
    pseudo_valid: np.ndarray = None
    points: PointMeasurements = None
    prior: tuple = None
    initial: np.ndarray = None

    def __post_init__(self):
        self.odometry = np.asarray(self.odometry, dtype=float)
        K = self.K
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        if self.motion_model.length != K - 1:
            raise InvalidArgumentError("motion model must cover the K-1 transitions")
        if self.pseudo is not None:
            self.pseudo = np.asarray(self.pseudo, dtype=float)
            if self.measurement_model is None or self.measurement_model.length != K:
                raise InvalidArgumentError("measurement model must cover all K timesteps")
            if self.pseudo_valid is None:
                self.pseudo_valid = np.ones(K, dtype=bool)
            self.pseudo_valid = np.asarray(self.pseudo_valid, dtype=bool)
            if self.measurement_model.bandwidth > 0 and not np.all(self.pseudo_valid):
                raise UnsupportedInputError(
                    "gaps in the pseudomeasurement stream are only supported for bandwidth 0")

    @property
    def K(self):
        return self.odometry.shape[0]

    def has_measurement_at(self, k):
        if self.pseudo is not None and self.pseudo_valid[k]:
            return True
        return self.points is not None and self.points.count_at(k) >= 2


@dataclass
class GNSettings:
    rel_cost_tol: float = 1e-9
    step_tol: float = 1e-10
    max_iterations: int = 100
    max_halvings: int = 20
    anchor_information: float = 1e6


@dataclass
class EstimationResult:
    poses: np.ndarray
    information: BlockBanded
    marginals: np.ndarray
    cost_trace: list = field(default_factory=list)
    iterations: int = 0

    def to_dict(self):
        xyt = se2.to_xyt(self.poses)
        return {
            "trajectory": [{"k": k + 1, "x": p[0], "y": p[1], "theta": p[2]}
                           for k, p in enumerate(xyt.tolist())],
            "marginal_covariances": [P.ravel().tolist() for P in self.marginals],
            "cost_trace": list(self.cost_trace),
            "iterations": self.iterations,
        }


def _logdet_sum(W):
    _, logdet = np.linalg.slogdet(W)
    return float(np.sum(logdet))


class _Accumulator:
    def __init__(self, K, bandwidth, with_system=True):
        self.with_system = with_system
        if with_system:
            self.A = BlockBanded.zeros(K, STATE_DIM, bandwidth)
            self.g = np.zeros((K, STATE_DIM))
        self.quad = 0.0
        self.const = 0.0

    def add(self, end, G, W, r):
        """Add factors touching states ``end - s`` with Jacobians ``G[:, s]``."""
        self.quad += 0.5 * float(np.einsum("fa,fab,fb->", r, W, r))
        self.const -= 0.5 * _logdet_sum(W)
        if not self.with_system:
            return
        WG = np.einsum("fab,fsbd->fsad", W, G)
        Wr = np.einsum("fab,fb->fa", W, r)
        n = G.shape[1]
        unique = np.unique(end).size == end.size
        for i in range(n):
            rows = end - i
            ok = rows >= 0
            gi = -np.einsum("fad,fa->fd", G[ok, i], Wr[ok])
            if unique:
                self.g[rows[ok]] += gi
            else:
                np.add.at(self.g, rows[ok], gi)
            for j in range(i, n):
                okj = (end - j) >= 0
                C = np.einsum("fad,fae->fde", G[okj, i], WG[okj, j])
                if unique:
                    self.A.blocks[rows[okj], j - i] += C
                else:
                    np.add.at(self.A.blocks, (rows[okj], j - i), C)


def _system_bandwidth(problem):
    w = problem.motion_model.bandwidth + 1 if problem.K > 1 else 0
    if problem.measurement_model is not None and problem.pseudo is not None:
        w = max(w, problem.measurement_model.bandwidth)
    return w


def _needs_anchor(problem):
    return problem.prior is None and not problem.has_measurement_at(0)


def _evaluate(problem, poses, settings, with_system):
    K = problem.K
    acc = _Accumulator(K, _system_bandwidth(problem), with_system)
    eye = np.eye(STATE_DIM)

    if K > 1:
        model = problem.motion_model
        e, J_prev, J_cur = motion_jacobians(poses[:-1], poses[1:], problem.odometry[1:], problem.dt)
        bv = model.bandwidth
        S_full = np.concatenate(
            [np.broadcast_to(eye, (K - 1, 1, 3, 3)), model.S], axis=1)
        G = np.zeros((K - 1, bv + 2, 3, 3))
        m = np.arange(K - 1)
        for s in range(bv + 2):
            if s <= bv:
                src = m - s
                ok = src >= 0
                G[ok, s] += S_full[ok, s] @ J_cur[src[ok]]
            if s >= 1:
                src = m - s + 1
                ok = src >= 0
                G[ok, s] += S_full[ok, s - 1] @ J_prev[src[ok]]
        acc.add(m + 1, G, model.W, model.whiten(e))

    if problem.pseudo is not None:
        model = problem.measurement_model
        valid = problem.pseudo_valid
        e, J = measurement_jacobian(problem.pseudo, poses)
        e = np.where(valid[:, None], e, 0.0)
        b = model.bandwidth
        S_full = np.concatenate([np.broadcast_to(eye, (K, 1, 3, 3)), model.S], axis=1)
        G = np.zeros((K, b + 1, 3, 3))
        k = np.arange(K)
        for s in range(b + 1):
            ok = k - s >= 0
            G[ok, s] = S_full[ok, s] @ J[k[ok] - s]
        keep = np.flatnonzero(valid)
        acc.add(keep, G[keep], model.W[keep], model.whiten(e)[keep])

    if problem.points is not None and problem.points.state.size:
        pts = problem.points
        e, J = point_error(poses[pts.state], pts.landmarks, pts.observed)
        W = np.broadcast_to(pts.information, (e.shape[0], 2, 2))
        acc.add(pts.state, J[:, None], W, e)

    prior = problem.prior
    if prior is None and _needs_anchor(problem):
        prior = (problem.initial[0], settings.anchor_information * eye)
    if prior is not None:
        pose0, info = prior
        e, J = measurement_jacobian(pose0, poses[0])
        acc.add(np.array([0]), J[None, None], np.asarray(info, dtype=float)[None], e[None])
    return acc


def linearize(problem, poses, settings=None):
    """Banded normal equations ``A delta = g`` at ``poses``.

    ``A = J^T Sigma^-1 J`` and ``g = -J^T Sigma^-1 e``; also returns the cost
    (quadratic part plus the constant log-determinant terms).
    """
    settings = settings or GNSettings()
    _ensure_initial(problem)
    acc = _evaluate(problem, poses, settings, True)
    return acc.A, acc.g.reshape(-1), acc.quad + acc.const


def cost(problem, poses, settings=None):
    settings = settings or GNSettings()
    _ensure_initial(problem)
    acc = _evaluate(problem, poses, settings, False)
    return acc.quad + acc.const


def _ensure_initial(problem):
    if problem.initial is None:
        problem.initial = initial_guess(problem)


def initial_guess(problem):
    """Dead-reckoned odometry started from the first available absolute pose."""
    K = problem.K
    if problem.prior is not None:
        return dead_reckon(problem.prior[0], problem.odometry, problem.dt, 0)
    if problem.pseudo is not None and np.any(problem.pseudo_valid):
        k0 = int(np.flatnonzero(problem.pseudo_valid)[0])
        return dead_reckon(problem.pseudo[k0], problem.odometry, problem.dt, k0)
    if problem.points is not None:
        from .preprocessing import svd_pose_fit

        for k in range(K):
            sel = problem.points.state == k
            if np.count_nonzero(sel) >= 2:
                try:
                    T0 = svd_pose_fit(problem.points.landmarks[sel], problem.points.observed[sel])
                except ValueError:
                    continue
                return dead_reckon(T0, problem.odometry, problem.dt, k)
    return dead_reckon(np.eye(3), problem.odometry, problem.dt, 0)


def _solve(A, g):
    try:
        factor = cholesky(A)
    except ConditioningError:
        raise ConditioningError("normal equations are singular; check the gauge") from None
    return factor.solve(g), factor


def gauss_newton(problem: EstimationProblem, settings: GNSettings = None) -> EstimationResult:
    """Gauss-Newton with step halving; marginals by Takahashi's recursion."""
    settings = settings or GNSettings()
    _ensure_initial(problem)
    poses = problem.initial.copy()
    acc = _evaluate(problem, poses, settings, True)
    quad = acc.quad
    trace = [acc.quad + acc.const]
    iterations = 0
    converged = False
    while iterations < settings.max_iterations:
        iterations += 1
        step, _ = _solve(acc.A, acc.g.reshape(-1))
        if np.linalg.norm(step) < settings.step_tol:
            converged = True
            break
        step = step.reshape(-1, STATE_DIM)
        alpha = 1.0
        accepted = False
        for _ in range(settings.max_halvings + 1):
            trial = se2.normalize(se2.exp(alpha * step) @ poses)
            new = _evaluate(problem, trial, settings, False)
            if new.quad <= quad + 1e-12:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        poses = trial
        decrease = (quad - new.quad) / max(quad, 1e-300)
        acc = _evaluate(problem, poses, settings, True)
        quad = acc.quad
        trace.append(acc.quad + acc.const)
        if decrease < settings.rel_cost_tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"Gauss-Newton did not converge in {settings.max_iterations} iterations", trace)
    factor = cholesky(acc.A)
    cov = takahashi(factor)
    return EstimationResult(poses, acc.A, cov.diagonal_blocks().copy(), trace, iterations)
