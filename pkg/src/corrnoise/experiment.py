"""Method definitions and experiment drivers.

Methods:

``P2P-CONST``
    raw landmark points, constant uncorrelated point noise, constant
    uncorrelated motion noise.
``SVD-CONST``
    SVD pose pseudomeasurements with a constant uncorrelated model and
    constant uncorrelated motion noise.
``SVD-FEAT-X``
    pseudomeasurements with a feature-conditioned model of bandwidth X and a
    constant motion model of bandwidth X.
"""

import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .dataset import Sequence, World
from .estimator import EstimationProblem, gauss_newton
from .noise_model import (
    ErrorDataset,
    KernelSearch,
    constant_model,
    learn_constant,
    train_kernel_weights,
    varying_model,
)
from .preprocessing import (
    measurement_residuals,
    motion_residuals,
    point_measurements,
    point_residuals,
    with_pseudomeasurements,
)
from .simulator import TEST, TRAIN, SimConfig, generate_trial, generate_world, simulate_sequence

log = logging.getLogger(__name__)

# invalid rows inserted between concatenated training segments
SEGMENT_GAP = 16


@dataclass(frozen=True)
class Method:
    kind: str
    bandwidth: int = 0

    @classmethod
    def parse(cls, tag):
        tag = tag.strip().upper()
        if tag in ("P2P-CONST", "SVD-CONST"):
            return cls(tag, 0)
        m = re.fullmatch(r"SVD-FEAT-(\d+)", tag)
        if m:
            return cls("SVD-FEAT", int(m.group(1)))
        raise ValueError(f"unknown method tag {tag!r}")

    @property
    def tag(self):
        return f"SVD-FEAT-{self.bandwidth}" if self.kind == "SVD-FEAT" else self.kind


@dataclass
class LearnerSettings:
    kernel_training: bool = True
    search: KernelSearch = field(default_factory=KernelSearch)


@dataclass
class MethodOutput:
    method: Method
    result: object
    problem: EstimationProblem
    kernel_weights: np.ndarray = None
    timings: dict = field(default_factory=dict)


def concat_errors(datasets, gap=SEGMENT_GAP):
    """Join residual datasets so that no window spans two segments."""
    errors, feats, valid = [], [], []
    M = datasets[0].block_dim
    has_feats = all(d.features is not None for d in datasets)
    for i, d in enumerate(datasets):
        if i:
            errors.append(np.zeros((gap, M)))
            valid.append(np.zeros(gap, dtype=bool))
            if has_feats:
                feats.append(np.zeros((gap, d.features.shape[1])))
        errors.append(d.errors)
        valid.append(d.valid)
        if has_feats:
            feats.append(d.features)
    return ErrorDataset(np.concatenate(errors), np.concatenate(feats) if has_feats else None,
                        np.concatenate(valid))


def prepare(seq: Sequence, world: World) -> Sequence:
    if seq.pseudo is None or seq.features is None:
        return with_pseudomeasurements(seq, world)
    return seq


def learn_models(method: Method, train, test, world, settings: LearnerSettings = None):
    """Noise models for the test sequence learned from training sequence(s).

    ``train`` may be a single sequence or a list of segments. Returns a dict
    with the motion model, measurement model (or point information) and the
    kernel weights when trained, plus timing of the prediction step.
    """
    settings = settings or LearnerSettings()
    segments = train if isinstance(train, (list, tuple)) else [train]
    segments = [prepare(s, world) for s in segments]
    test = prepare(test, world)
    K = len(test)
    b = method.bandwidth
    out = {"timings": {}}
    motion_data = concat_errors([motion_residuals(s) for s in segments])
    out["motion_model"] = constant_model(motion_data, b, K - 1)

    if method.kind == "P2P-CONST":
        pts = concat_errors([point_residuals(s, world) for s in segments])
        _, W = learn_constant(pts, 0)
        out["point_information"] = W
        return out

    meas = concat_errors([measurement_residuals(s) for s in segments])
    if method.kind == "SVD-CONST":
        out["measurement_model"] = constant_model(meas, 0, K)
        return out

    t0 = time.perf_counter()
    if settings.kernel_training:
        Mmat = train_kernel_weights(meas, b, settings.search)
    else:
        Mmat = np.zeros((meas.features.shape[1],) * 2)
    out["timings"]["train_kernel"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    out["measurement_model"] = varying_model(meas, b, Mmat, test.features)
    out["timings"]["predict"] = time.perf_counter() - t0
    out["kernel_weights"] = Mmat
    return out


def build_problem(method: Method, test: Sequence, world: World, models) -> EstimationProblem:
    test = prepare(test, world)
    if method.kind == "P2P-CONST":
        pts = point_measurements(test, world, models["point_information"])
        return EstimationProblem(test.dt, test.odometry, models["motion_model"], points=pts)
    return EstimationProblem(test.dt, test.odometry, models["motion_model"], test.pseudo,
                             models["measurement_model"], test.pseudo_valid)


def run_method(method, train, test, world, learner=None, gn=None) -> MethodOutput:
    models = learn_models(method, train, test, world, learner)
    problem = build_problem(method, test, world, models)
    t0 = time.perf_counter()
    result = gauss_newton(problem, gn)
    timings = dict(models["timings"])
    timings["optimize"] = time.perf_counter() - t0
    return MethodOutput(method, result, problem, models.get("kernel_weights"), timings)


def _run_trial(args):
    config, index, methods, learner, gn = args
    t0 = time.perf_counter()
    trial = generate_trial(config, index)
    world = trial.world
    train = prepare(trial.train, world)
    test = prepare(trial.test, world)
    seconds = {"generate": time.perf_counter() - t0}
    metrics = {}
    for method in methods:
        t0 = time.perf_counter()
        res = run_method(method, train, test, world, learner, gn)
        seconds[method.tag] = time.perf_counter() - t0
        metrics[method.tag] = evaluation.trajectory_metrics(res.result, test.gt)
    return metrics, seconds


@dataclass
class Study:
    """Per-method reports and per-trial wall-clock seconds.

    ``seconds`` maps ``"generate"`` and each method tag to an array over
    trials. Timings never enter the written reports.
    """

    reports: dict
    seconds: dict


def simulation_study(config: SimConfig, n_trials, methods, learner=None, gn=None,
                     workers=1) -> Study:
    """Run every method on ``n_trials`` simulated trials.

    Trials are independent and may run in a process pool; results are
    gathered in trial order so the reduction is deterministic.
    """
    methods = [Method.parse(m) if isinstance(m, str) else m for m in methods]
    jobs = [(config, i, methods, learner, gn) for i in range(n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(_run_trial, jobs))
    else:
        per_trial = []
        for job in jobs:
            per_trial.append(_run_trial(job))
            log.info("trial %d/%d done", len(per_trial), n_trials)
    reports = {m.tag: evaluation.collect(t[0][m.tag] for t in per_trial) for m in methods}
    keys = ["generate"] + [m.tag for m in methods]
    seconds = {k: np.array([t[1][k] for t in per_trial]) for k in keys}
    return Study(reports, seconds)


def crossval_study(seq: Sequence, world: World, methods, folds=4, learner=None, gn=None):
    """K-fold evaluation on one long sequence: train on the other folds.

    Returns ``{tag: {"per_fold": [...], "table": {...}}}`` with ergodic NEES,
    RMSE translation and rotation per fold and on average.
    """
    seq = prepare(seq, world)
    methods = [Method.parse(m) if isinstance(m, str) else m for m in methods]
    report = {}
    for method in methods:
        rows = []
        for test_rng, train_rngs in evaluation.kfold_splits(len(seq), folds):
            test = seq.slice(test_rng.start, test_rng.stop)
            train = [seq.slice(r.start, r.stop) for r in train_rngs]
            res = run_method(method, train, test, world, learner, gn)
            m = evaluation.trajectory_metrics(res.result, test.gt)
            rows.append({
                "ergodic_nees": m.ergodic,
                "rmse_translation": m.rmse_translation,
                "rmse_rotation": m.rmse_rotation,
                "batch_nees": m.batch,
            })
        report[method.tag] = {"per_fold": rows, "table": evaluation.fold_table(rows)}
    return report


def fit_exponent(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _timed(fn, repeats):
    best, out = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def benchmark(config: SimConfig, bandwidths=tuple(range(6)), length=3000,
              scaling_lengths=(1000, 10000, 100000), scaling_bandwidth=1, repeats=1,
              kernel_weights=None, gn=None):
    """Wall-clock of Predict and Optimize per bandwidth, and Optimize against K.

    Predict evaluates the varying noise model at every test timestep;
    Optimize runs Gauss-Newton to convergence including the marginal
    covariances. Kernel weights are fixed (``1 / var`` per feature unless
    given) so that kernel training does not enter the timings. The best of
    ``repeats`` runs is reported.
    """
    world = generate_world(config, 0)
    train = prepare(simulate_sequence(config, world, config.N, 0, TRAIN), world)
    meas = measurement_residuals(train)
    motion = motion_residuals(train)
    if kernel_weights is None:
        var = meas.features[meas.valid].var(axis=0)
        kernel_weights = np.diag(np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), 0.0))

    def optimize(test, b):
        problem = EstimationProblem(test.dt, test.odometry, constant_model(motion, b, len(test) - 1),
                                    test.pseudo, models[b], test.pseudo_valid)
        return gauss_newton(problem, gn)

    test = prepare(simulate_sequence(config, world, length, 0, TEST), world)
    rows = []
    models = {}
    for b in bandwidths:
        t_pred, models[b] = _timed(lambda: varying_model(meas, b, kernel_weights, test.features),
                                   repeats)
        t_opt, result = _timed(lambda: optimize(test, b), repeats)
        rows.append({"bandwidth": int(b), "predict_seconds": t_pred, "optimize_seconds": t_opt,
                     "iterations": result.iterations})

    scaling = []
    for K in scaling_lengths:
        test = prepare(simulate_sequence(config, world, K, 0, TEST), world)
        b = scaling_bandwidth
        models[b] = varying_model(meas, b, kernel_weights, test.features)
        t_opt, result = _timed(lambda: optimize(test, b), repeats)
        scaling.append({"K": int(K), "bandwidth": int(b), "optimize_seconds": t_opt,
                        "iterations": result.iterations})

    steps = [r["bandwidth"] + 1 for r in rows]
    out = {"bandwidth_rows": rows, "scaling_rows": scaling}
    if len(rows) > 1:
        out["predict_exponent"] = fit_exponent(steps, [r["predict_seconds"] for r in rows])
        out["optimize_exponent"] = fit_exponent(steps, [r["optimize_seconds"] for r in rows])
    if len(scaling) > 1:
        out["length_exponent"] = fit_exponent([r["K"] for r in scaling],
                                              [r["optimize_seconds"] for r in scaling])
    return out
