"""In-memory sequence dataset and its line-delimited JSON file format.

One record per timestep::

    {"k": 1, "t": 0.0, "odom": [v, omega],
     "landmarks": [{"id": 3, "x_body": 1.2, "y_body": -0.4}, ...],
     "gt_pose": [x, y, theta], "pseudo_pose": [x, y, theta], "feature": [...]}

The last three keys are optional. Poses are stored as ``(x, y, theta)`` of
the homogeneous matrix ``T_k`` (inertial to robot). The landmark map lives
next to the records in ``map.json``: ``{"landmarks": [{"id", "x", "y"}],
"fov": rad, "max_range": m}``.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import se2


@dataclass
class World:
    landmarks: np.ndarray
    fov: float = np.deg2rad(270.0)
    max_range: float = 5.0

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 2)
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.fov <= 2 * np.pi:
            raise ValueError("field of view must lie in (0, 2 pi]")

    def to_dict(self):
        return {
            "landmarks": [{"id": i, "x": p[0], "y": p[1]}
                          for i, p in enumerate(self.landmarks.tolist())],
            "fov": float(self.fov),
            "max_range": float(self.max_range),
        }

    @classmethod
    def from_dict(cls, data):
        entries = sorted(data["landmarks"], key=lambda e: e["id"])
        if [e["id"] for e in entries] != list(range(len(entries))):
            raise ValueError("landmark ids must be 0..L-1")
        return cls(np.array([[e["x"], e["y"]] for e in entries]), data["fov"], data["max_range"])


@dataclass
class Sequence:
    """A recorded or simulated sequence.

    ``observations[k]`` is a pair ``(ids, body_points)``; ``gt`` and
    ``pseudo`` are (K, 3, 3) pose arrays, ``pseudo_valid`` flags timesteps
    with a pseudomeasurement.
    """

    dt: float
    odometry: np.ndarray
    observations: list
    gt: np.ndarray = None
    pseudo: np.ndarray = None
    pseudo_valid: np.ndarray = None
    features: np.ndarray = None

    def __len__(self):
        return self.odometry.shape[0]

    def slice(self, start, stop):
        def cut(x):
            return None if x is None else x[start:stop]

        odom = self.odometry[start:stop].copy()
        return Sequence(self.dt, odom, self.observations[start:stop], cut(self.gt),
                        cut(self.pseudo), cut(self.pseudo_valid), cut(self.features))


def _num(x):
    return float(x)


def write_jsonl(path, seq: Sequence):
    path = Path(path)
    with path.open("w") as fh:
        for k in range(len(seq)):
            ids, pts = seq.observations[k]
            rec = {
                "k": k + 1,
                "t": _num(k * seq.dt),
                "odom": [_num(v) for v in seq.odometry[k]],
                "landmarks": [{"id": int(i), "x_body": _num(p[0]), "y_body": _num(p[1])}
                              for i, p in zip(ids, pts)],
            }
            if seq.gt is not None:
                rec["gt_pose"] = [_num(v) for v in se2.to_xyt(seq.gt[k])]
            if seq.pseudo is not None and seq.pseudo_valid[k]:
                rec["pseudo_pose"] = [_num(v) for v in se2.to_xyt(seq.pseudo[k])]
            if seq.features is not None:
                rec["feature"] = [_num(v) for v in seq.features[k]]
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> Sequence:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    records.sort(key=lambda r: r["k"])
    K = len(records)
    if K > 1:
        dt = records[1]["t"] - records[0]["t"]
    else:
        dt = 0.1
    odom = np.array([r["odom"] for r in records], dtype=float).reshape(K, 2)
    observations = []
    for r in records:
        lms = r.get("landmarks", [])
        ids = np.array([lm["id"] for lm in lms], dtype=int)
        pts = np.array([[lm["x_body"], lm["y_body"]] for lm in lms], dtype=float).reshape(-1, 2)
        observations.append((ids, pts))
    gt = None
    if all("gt_pose" in r for r in records):
        gt = se2.from_xyt(np.array([r["gt_pose"] for r in records]))
    pseudo = valid = None
    if any("pseudo_pose" in r for r in records):
        valid = np.array(["pseudo_pose" in r for r in records])
        xyt = np.array([r.get("pseudo_pose", [0.0, 0.0, 0.0]) for r in records])
        pseudo = se2.from_xyt(xyt)
    features = None
    if all("feature" in r for r in records):
        features = np.array([r["feature"] for r in records], dtype=float)
    return Sequence(dt, odom, observations, gt, pseudo, valid, features)


def write_world(path, world: World):
    Path(path).write_text(json.dumps(world.to_dict(), indent=1) + "\n")


def read_world(path) -> World:
    return World.from_dict(json.loads(Path(path).read_text()))
