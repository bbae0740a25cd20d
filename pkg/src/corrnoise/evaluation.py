"""Consistency and accuracy metrics for trajectory estimates."""

from dataclasses import dataclass

import numpy as np

from . import se2
from .banded import BlockBanded
from .chi2 import chi2_quantile
from .errors import InvalidArgumentError, ModelInvalidError

STATE_DIM = 3
CONFIDENCE_PAIRS = {"99.8%": (0.001, 0.999), "95%": (0.025, 0.975)}


def pose_errors(estimate, groundtruth):
    """``ln(T_hat T_true^-1)`` for each timestep."""
    return se2.log(np.asarray(estimate) @ se2.inverse(groundtruth))


def marginal_nees(e, P):
    """``e^T P^-1 e`` via Cholesky solves; batched over leading dimensions."""
    e = np.asarray(e, dtype=float)
    P = np.asarray(P, dtype=float)
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ModelInvalidError("covariance must be symmetric positive definite") from None
    z = np.linalg.solve(L, e[..., None])[..., 0]
    return np.sum(z * z, axis=-1)


def ergodic_nees(eps):
    return float(np.mean(eps))


def batch_nees(e, information: BlockBanded):
    """Full-trajectory NEES ``e^T A e`` with the posterior information ``A``."""
    e = np.asarray(e, dtype=float).ravel()
    return float(e @ information.matvec(e))


def rmse(estimate, groundtruth):
    """Root-mean-square translation (m) and wrapped rotation (rad) errors."""
    D = np.asarray(estimate) @ se2.inverse(groundtruth)
    trans = np.linalg.norm(D[:, :2, 2], axis=1)
    rot = se2.wrap_angle(se2.angle(D))
    return float(np.sqrt(np.mean(trans ** 2))), float(np.sqrt(np.mean(rot ** 2)))


@dataclass
class Chi2TestResult:
    lower_bound: float
    upper_bound: float
    sums: np.ndarray
    passed: np.ndarray

    @property
    def violation_fraction(self):
        return float(1.0 - np.mean(self.passed))


def nees_chi2_test(eps, lower, upper, dim=STATE_DIM):
    """Aggregate per-trial NEES and test each timestep against chi-squared bounds.

    ``eps`` has shape (N_t, K). A timestep passes when the sum over trials
    lies within the ``lower`` and ``upper`` quantiles of ``chi2(N_t * dim)``.
    """
    try:
        eps = np.asarray(eps, dtype=float)
    except ValueError:
        raise InvalidArgumentError("all trials must have the same length") from None
    if eps.ndim != 2:
        raise InvalidArgumentError("expected an (N_t, K) array of NEES values")
    n_trials = eps.shape[0]
    dof = n_trials * dim
    lo = chi2_quantile(dof, lower)
    hi = chi2_quantile(dof, upper)
    sums = eps.sum(axis=0)
    return Chi2TestResult(lo, hi, sums, (sums >= lo) & (sums <= hi))


@dataclass
class NeesReport:
    """Per-trial metrics of one method, with chi-squared tests across trials."""

    nees: np.ndarray            # (N_t, K) marginal NEES
    ergodic: np.ndarray         # (N_t,)
    batch: np.ndarray           # (N_t,)
    rmse_translation: np.ndarray
    rmse_rotation: np.ndarray

    def chi2_tests(self):
        return {name: nees_chi2_test(self.nees, lo, hi)
                for name, (lo, hi) in CONFIDENCE_PAIRS.items()}

    def summary(self):
        tests = self.chi2_tests()
        return {
            "trials": int(self.nees.shape[0]),
            "timesteps": int(self.nees.shape[1]),
            "violation_fraction": {k: t.violation_fraction for k, t in tests.items()},
            "chi2_bounds": {k: [t.lower_bound, t.upper_bound] for k, t in tests.items()},
            "ergodic_nees": self.ergodic.tolist(),
            "ergodic_nees_median": float(np.median(self.ergodic)),
            "batch_nees": self.batch.tolist(),
            "rmse_translation": self.rmse_translation.tolist(),
            "rmse_rotation": self.rmse_rotation.tolist(),
            "rmse_translation_median": float(np.median(self.rmse_translation)),
            "rmse_rotation_median": float(np.median(self.rmse_rotation)),
        }


@dataclass
class TrajectoryMetrics:
    nees: np.ndarray
    ergodic: float
    batch: float
    rmse_translation: float
    rmse_rotation: float
    errors: np.ndarray
    sigma: np.ndarray


def trajectory_metrics(result, groundtruth) -> TrajectoryMetrics:
    e = pose_errors(result.poses, groundtruth)
    eps = marginal_nees(e, result.marginals)
    t, r = rmse(result.poses, groundtruth)
    sigma = np.sqrt(np.einsum("kii->ki", result.marginals))
    return TrajectoryMetrics(eps, ergodic_nees(eps), batch_nees(e, result.information), t, r,
                             e, sigma)


def collect(metrics) -> NeesReport:
    metrics = list(metrics)
    return NeesReport(
        np.array([m.nees for m in metrics]),
        np.array([m.ergodic for m in metrics]),
        np.array([m.batch for m in metrics]),
        np.array([m.rmse_translation for m in metrics]),
        np.array([m.rmse_rotation for m in metrics]),
    )


def kfold_splits(n, folds=4):
    """Contiguous, equally sized test folds; the remainder goes to the last fold.

    Returns a list of ``(test_range, train_ranges)`` with Python ranges.
    """
    if folds < 2 or n < folds:
        raise InvalidArgumentError("need at least two folds and one timestep per fold")
    size = n // folds
    edges = [i * size for i in range(folds)] + [n]
    out = []
    for f in range(folds):
        test = range(edges[f], edges[f + 1])
        train = [range(edges[g], edges[g + 1]) for g in range(folds) if g != f]
        out.append((test, train))
    return out


def fold_table(per_fold):
    """Per-fold metric rows plus their average, keyed by metric name."""
    keys = per_fold[0].keys()
    table = {k: [row[k] for row in per_fold] for k in keys}
    return {k: {"folds": v, "avg": float(np.mean(v))} for k, v in table.items()}


def envelope_rows(metrics: TrajectoryMetrics, dt):
    """Rows ``k, t, e_1, e_2, e_phi, 3 sigma_1, 3 sigma_2, 3 sigma_phi`` for plotting."""
    rows = []
    for k in range(metrics.errors.shape[0]):
        rows.append([k + 1, k * dt, *metrics.errors[k], *(3.0 * metrics.sigma[k]),
                     metrics.nees[k]])
    return rows
