"""Command line runner: ``corrnoise <mode> --config <path> [overrides]``.

The config is a JSON object; every key is optional and command line flags
override it. Keys:

``mode``
    simulate | learn | estimate | evaluate | full-pipeline | benchmark
``method``
    P2P-CONST | SVD-CONST | SVD-FEAT-X; ``methods`` lists several for
    comparisons in full-pipeline mode
``bandwidth``
    overrides X of an SVD-FEAT method
``seed``, ``out_dir``, ``trials``, ``workers``, ``folds``
``experiment``
    ``simulation`` (independent trials with chi-squared tests) or
    ``crossval`` (k-fold on one long sequence of ``crossval_length`` steps)
``sim``
    simulator settings, see :class:`corrnoise.simulator.SimConfig`
``learner``
    ``kernel_training`` plus kernel search settings
``estimator``
    Gauss-Newton tolerances
``inputs``
    ``train``, ``test``, ``map``, ``model``, ``result`` paths for the
    single-stage modes
``benchmark``
    ``length``, ``bandwidths``, ``scaling_lengths``, ``scaling_bandwidth``,
    ``repeats``
``full_scale``
    100 trials of 3000 steps instead of the defaults

Exit status is 0 on success, 1 when a stage fails and 2 for config errors.
"""

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__, evaluation, experiment, se2
from .banded import BlockBanded
from .dataset import read_jsonl, read_world, write_jsonl, write_world
from .estimator import EstimationResult, GNSettings, gauss_newton
from .noise_model import BandedNoiseModel, KernelSearch
from .simulator import SimConfig, generate_trial, generate_world, simulate_sequence

log = logging.getLogger("corrnoise")

MODES = ("simulate", "learn", "estimate", "evaluate", "full-pipeline", "benchmark")

DEFAULTS = {
    "mode": "full-pipeline",
    "method": "SVD-FEAT-1",
    "methods": None,
    "bandwidth": None,
    "seed": 0,
    "out_dir": "corrnoise-out",
    "trials": 25,
    "workers": 1,
    "experiment": "simulation",
    "folds": 4,
    "crossval_length": 12000,
    "full_scale": False,
    "sim": {},
    "learner": {"kernel_training": True},
    "estimator": {},
    "inputs": {},
    "benchmark": {"length": 3000, "bandwidths": [0, 1, 2, 3, 4, 5],
                  "scaling_lengths": [1000, 10000, 100000], "scaling_bandwidth": 1,
                  "repeats": 1},
}
INPUT_KEYS = ("train", "test", "map", "model", "result")
REQUIRED_INPUTS = {
    "learn": ("train", "test", "map"),
    "estimate": ("test", "map", "model"),
    "evaluate": ("test", "result"),
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# --------------------------------------------------------------------------- config


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def resolve_config(file_config, args):
    unknown = set(file_config) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, file_config)
    mode = args.mode_flag or args.mode
    if args.mode_flag and args.mode and args.mode_flag != args.mode:
        raise ConfigError("positional mode and --mode disagree")
    for key, value in (("mode", mode), ("seed", args.seed), ("out_dir", args.out_dir),
                       ("method", args.method), ("bandwidth", args.bandwidth),
                       ("trials", args.trials), ("workers", args.workers)):
        if value is not None:
            cfg[key] = value
    if args.full_scale:
        cfg["full_scale"] = True
    if cfg["full_scale"]:
        cfg["trials"] = 100
        cfg["sim"] = {**cfg["sim"], "K": 3000}
    validate_config(cfg)
    return cfg


def _method_list(cfg):
    tags = cfg["methods"] or [cfg["method"]]
    methods = []
    for tag in tags:
        try:
            m = experiment.Method.parse(str(tag))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if cfg["bandwidth"] is not None and not cfg["methods"]:
            if m.kind != "SVD-FEAT":
                if cfg["bandwidth"] != 0:
                    raise ConfigError(f"{m.tag} is defined for bandwidth 0 only")
            else:
                m = experiment.Method("SVD-FEAT", int(cfg["bandwidth"]))
        methods.append(m)
    return methods


def validate_config(cfg):
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg["bandwidth"] is not None and (not isinstance(cfg["bandwidth"], int)
                                         or cfg["bandwidth"] < 0):
        raise ConfigError("bandwidth must be a non-negative integer")
    for key in ("trials", "workers", "folds", "crossval_length"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if cfg["folds"] < 2:
        raise ConfigError("folds must be at least 2")
    if cfg["experiment"] not in ("simulation", "crossval"):
        raise ConfigError("experiment must be 'simulation' or 'crossval'")
    _method_list(cfg)
    sim_config(cfg)
    learner_settings(cfg)
    gn_settings(cfg)
    unknown = set(cfg["inputs"]) - set(INPUT_KEYS)
    if unknown:
        raise ConfigError(f"unknown input keys: {sorted(unknown)}")
    for key in REQUIRED_INPUTS.get(cfg["mode"], ()):
        path = cfg["inputs"].get(key)
        if path is None:
            raise ConfigError(f"mode {cfg['mode']} needs inputs.{key}")
        if not Path(path).exists():
            raise ConfigError(f"inputs.{key} does not exist: {path}")
    bench = cfg["benchmark"]
    unknown = set(bench) - set(DEFAULTS["benchmark"])
    if unknown:
        raise ConfigError(f"unknown benchmark keys: {sorted(unknown)}")


def sim_config(cfg):
    params = {**cfg["sim"], "seed": cfg["seed"]}
    try:
        return SimConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad simulator settings: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def learner_settings(cfg):
    opts = dict(cfg["learner"])
    training = opts.pop("kernel_training", True)
    if "grid" in opts:
        opts["grid"] = tuple(opts["grid"])
    if "starts" in opts:
        opts["starts"] = tuple(opts["starts"])
    try:
        search = KernelSearch(**opts)
    except TypeError as exc:
        raise ConfigError(f"bad learner settings: {exc}") from None
    return experiment.LearnerSettings(bool(training), search)


def gn_settings(cfg):
    try:
        return GNSettings(**cfg["estimator"])
    except TypeError as exc:
        raise ConfigError(f"bad estimator settings: {exc}") from None


def config_hash(cfg):
    """SHA-256 of the canonical config; the output location is not part of it."""
    cfg = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------- artifacts


class Run:
    """Output directory, artifact bookkeeping and the run manifest."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["out_dir"])
        self.artifacts = []
        self.stage = None

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def write_json(self, name, data):
        with open(self.path(name), "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    @contextmanager
    def step(self, name):
        self.stage = name
        log.info("stage %s", name)
        try:
            yield
        except Exception as exc:
            raise StageError(name, exc) from exc

    def manifest(self, status, error=None):
        data = {
            "mode": self.cfg["mode"],
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "versions": {"corrnoise": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "status": status,
            "artifacts": list(self.artifacts),
            "partial": status != "ok",
        }
        if error is not None:
            data["failed_stage"] = error.stage
            data["error"] = str(error)
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


# --------------------------------------------------------------------------- modes


def run_simulate(run):
    config = sim_config(run.cfg)
    for i in range(run.cfg["trials"]):
        with run.step(f"simulate trial {i}"):
            trial = generate_trial(config, i)
            prefix = f"trial_{i:03d}"
            write_world(run.path(f"{prefix}/map.json"), trial.world)
            write_jsonl(run.path(f"{prefix}/train.jsonl"), trial.train)
            write_jsonl(run.path(f"{prefix}/test.jsonl"), trial.test)


def _read_inputs(run, *keys):
    inputs = run.cfg["inputs"]
    out = {}
    with run.step("read inputs"):
        for key in keys:
            if key in ("train", "test"):
                out[key] = read_jsonl(inputs[key])
            elif key == "map":
                out[key] = read_world(inputs[key])
            else:
                with open(inputs[key]) as fh:
                    out[key] = json.load(fh)
    return out


def run_learn(run):
    (method,) = _method_list(run.cfg)[:1]
    data = _read_inputs(run, "train", "test", "map")
    with run.step("learn"):
        models = experiment.learn_models(method, data["train"], data["test"], data["map"],
                                         learner_settings(run.cfg))
    with run.step("write model"):
        doc = {
            "method": method.tag,
            "motion_model": models["motion_model"].to_dict(),
            "measurement_model": (models["measurement_model"].to_dict()
                                  if "measurement_model" in models else None),
            "point_information": _jsonable(models.get("point_information")),
            "kernel_weights": _jsonable(models.get("kernel_weights")),
        }
        run.write_json("model.json", doc)


def _models_from_doc(doc):
    models = {"motion_model": BandedNoiseModel.from_dict(doc["motion_model"])}
    if doc.get("measurement_model") is not None:
        models["measurement_model"] = BandedNoiseModel.from_dict(doc["measurement_model"])
    if doc.get("point_information") is not None:
        models["point_information"] = np.asarray(doc["point_information"], dtype=float)
    return models


def run_estimate(run):
    data = _read_inputs(run, "test", "map", "model")
    with run.step("estimate"):
        method = experiment.Method.parse(data["model"]["method"])
        models = _models_from_doc(data["model"])
        problem = experiment.build_problem(method, data["test"], data["map"], models)
        result = gauss_newton(problem, gn_settings(run.cfg))
    with run.step("write result"):
        doc = result.to_dict()
        doc["method"] = method.tag
        doc["information"] = {"bandwidth": result.information.bandwidth,
                              "blocks": result.information.blocks.tolist()}
        run.write_json("result.json", doc)


def _result_from_doc(doc):
    xyt = np.array([[p["x"], p["y"], p["theta"]] for p in doc["trajectory"]])
    marg = np.array(doc["marginal_covariances"], dtype=float).reshape(-1, 3, 3)
    info = BlockBanded(np.array(doc["information"]["blocks"], dtype=float))
    return EstimationResult(se2.from_xyt(xyt), info, marg, doc.get("cost_trace", []),
                            doc.get("iterations", 0))


def _write_trajectory_report(run, metrics, dt, method_tag):
    run.write_json("report.json", {
        "method": method_tag,
        "ergodic_nees": metrics.ergodic,
        "batch_nees": metrics.batch,
        "rmse_translation": metrics.rmse_translation,
        "rmse_rotation": metrics.rmse_rotation,
    })
    run.write_csv("nees.csv", ["k", "nees"],
                  [[k + 1, v] for k, v in enumerate(metrics.nees.tolist())])
    run.write_csv("envelope.csv",
                  ["k", "t", "e_1", "e_2", "e_phi", "3sigma_1", "3sigma_2", "3sigma_phi", "nees"],
                  evaluation.envelope_rows(metrics, dt))


def run_evaluate(run):
    data = _read_inputs(run, "test", "result")
    with run.step("evaluate"):
        test = data["test"]
        if test.gt is None:
            raise ValueError("the test dataset has no groundtruth poses")
        metrics = evaluation.trajectory_metrics(_result_from_doc(data["result"]), test.gt)
    with run.step("write report"):
        _write_trajectory_report(run, metrics, test.dt, data["result"].get("method"))


def run_full_pipeline(run):
    cfg = run.cfg
    methods = _method_list(cfg)
    config = sim_config(cfg)
    learner = learner_settings(cfg)
    gn = gn_settings(cfg)
    if cfg["experiment"] == "crossval":
        with run.step("simulate"):
            world = generate_world(config, 0)
            seq = simulate_sequence(config, world, cfg["crossval_length"], 0)
        with run.step("cross-validate"):
            report = experiment.crossval_study(seq, world, methods, cfg["folds"], learner, gn)
        with run.step("write report"):
            run.write_json("report.json", _jsonable(report))
            rows = []
            for tag, entry in report.items():
                for metric, vals in entry["table"].items():
                    rows.append([tag, metric, *vals["folds"], vals["avg"]])
            header = ["method", "metric"] + [f"fold_{i + 1}" for i in range(cfg["folds"])]
            run.write_csv("report.csv", header + ["avg"], rows)
        return

    with run.step("simulation study"):
        study = experiment.simulation_study(config, cfg["trials"], methods, learner, gn,
                                            workers=cfg["workers"])
        reports = study.reports
        for key, secs in study.seconds.items():
            log.info("%s: %.1f s over %d trials", key, float(np.sum(secs)), secs.size)
    with run.step("write report"):
        run.write_json("report.json", {tag: _jsonable(r.summary()) for tag, r in reports.items()})
        header = ["method", "k", "nees_sum", "lower_99.8", "upper_99.8", "lower_95", "upper_95"]
        rows = []
        for tag, r in reports.items():
            tests = r.chi2_tests()
            t998, t95 = tests["99.8%"], tests["95%"]
            for k, total in enumerate(t998.sums.tolist()):
                rows.append([tag, k + 1, total, t998.lower_bound, t998.upper_bound,
                             t95.lower_bound, t95.upper_bound])
        run.write_csv("nees.csv", header, rows)


def run_benchmark(run):
    opts = run.cfg["benchmark"]
    with run.step("benchmark"):
        table = experiment.benchmark(
            sim_config(run.cfg),
            bandwidths=tuple(opts["bandwidths"]),
            length=opts["length"],
            scaling_lengths=tuple(opts["scaling_lengths"]),
            scaling_bandwidth=opts["scaling_bandwidth"],
            repeats=opts["repeats"],
            gn=gn_settings(run.cfg),
        )
    with run.step("write report"):
        run.write_json("report.json", table)
        run.write_csv("report.csv", ["bandwidth", "predict_seconds", "optimize_seconds"],
                      [[r["bandwidth"], r["predict_seconds"], r["optimize_seconds"]]
                       for r in table["bandwidth_rows"]])


RUNNERS = {
    "simulate": run_simulate,
    "learn": run_learn,
    "estimate": run_estimate,
    "evaluate": run_evaluate,
    "full-pipeline": run_full_pipeline,
    "benchmark": run_benchmark,
}


# --------------------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="corrnoise", description=__doc__.splitlines()[0])
    p.add_argument("mode", nargs="?", choices=MODES)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--mode", dest="mode_flag", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--method")
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--full-scale", action="store_true",
                   help="100 trials of 3000 timesteps")
    p.add_argument("--log-level", default="WARNING")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_config = load_config(args.config) if args.config else {}
        cfg = resolve_config(file_config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg)
    try:
        RUNNERS[cfg["mode"]](run)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.manifest("failed", exc)
        return 1
    run.manifest("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
