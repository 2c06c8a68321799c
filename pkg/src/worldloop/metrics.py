"""Trajectory-accuracy metrics and the interaction scoring protocol.

Covers closed-form similarity alignment of pose trajectories (scale,
rotation, translation with reflection guard), relative pose error over the
aligned estimate, a pluggable motion-magnitude metric, and the six-dimension
interaction record model with ordinal scales and hierarchical aggregation.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .camera import (CameraPose, Trajectory, quat_angle, quat_multiply,
                     quat_normalize, quat_rotate)


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# similarity alignment (Umeyama)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray  # unit quaternion
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise MetricError("scale must be positive")
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float))

    def apply_point(self, p: np.ndarray) -> np.ndarray:
        return self.scale * quat_rotate(self.rotation, p) + self.translation

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        return CameraPose(quat_multiply(self.rotation, pose.rotation),
                          self.apply_point(pose.position))

    def apply(self, traj: Trajectory) -> Trajectory:
        return Trajectory([self.apply_pose(p) for p in traj.poses])


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method, numerically safe for all sign cases.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        return quat_normalize(np.array([0.25 * s,
                                        (m[2, 1] - m[1, 2]) / s,
                                        (m[0, 2] - m[2, 0]) / s,
                                        (m[1, 0] - m[0, 1]) / s]))
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
    q = np.zeros(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


def umeyama_align(est: Trajectory, gt: Trajectory) -> Sim3:
    """Least-squares Sim3 minimizing sum ||s R est_i + t - gt_i||^2."""
    if len(est) != len(gt):
        raise MetricError("trajectories must have equal length")
    if len(est) < 3:
        raise MetricError("need at least 3 poses to align")
    x = est.positions()  # source
    y = gt.positions()   # target
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    n = x.shape[0]
    cov = yc.T @ xc / n
    var_x = (xc ** 2).sum() / n
    u, d, vt = np.linalg.svd(cov)
    rank = int((d > d[0] * 1e-12).sum()) if d[0] > 0 else 0
    if rank < 2:
        raise MetricError("degenerate point set: positions are collinear")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    if scale <= 0:
        raise MetricError("alignment collapsed to non-positive scale")
    trans = mu_y - scale * rot @ mu_x
    return Sim3(scale, _matrix_to_quat(rot), trans)


# --------------------------------------------------------------------------
# relative pose error
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RpeResult:
    trans_rmse: float
    rot_rmse: float
    trans_residuals: tuple[float, ...]
    rot_residuals: tuple[float, ...]


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> RpeResult:
    """Relative pose error; expects ``est`` already aligned onto ``gt``.

    Residual per step: E_i = (gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d});
    reported as RMSE of translation norms and of rotation angles.
    """
    if len(est) != len(gt):
        raise MetricError("trajectories must have equal length")
    if delta < 1 or delta >= len(est):
        raise MetricError("delta must satisfy 1 <= delta < length")
    trans, rots = [], []
    for i in range(len(est) - delta):
        rel_gt = gt[i].inverse().compose(gt[i + delta])
        rel_est = est[i].inverse().compose(est[i + delta])
        err = rel_gt.inverse().compose(rel_est)
        trans.append(float(np.linalg.norm(err.position)))
        rots.append(quat_angle(err.rotation))
    trans_arr = np.array(trans)
    rot_arr = np.array(rots)
    return RpeResult(trans_rmse=float(np.sqrt((trans_arr ** 2).mean())),
                     rot_rmse=float(np.sqrt((rot_arr ** 2).mean())),
                     trans_residuals=tuple(trans),
                     rot_residuals=tuple(rots))


def aligned_rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> RpeResult:
    """Umeyama-align the estimate (positions and orientations), then RPE."""
    sim = umeyama_align(est, gt)
    return rpe(sim.apply(est), gt, delta)


# --------------------------------------------------------------------------
# motion magnitude
# --------------------------------------------------------------------------

def frame_difference_backend(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute per-element difference; the default flow stand-in."""
    return float(np.abs(np.asarray(b, dtype=float) - np.asarray(a, dtype=float)).mean())


def dynamic_average(frames, backend=frame_difference_backend) -> float:
    """Mean over consecutive frame pairs of the backend's mean displacement."""
    frames = list(frames)
    if len(frames) < 2:
        raise MetricError("need at least two frames")
    vals = [backend(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# interaction records
# --------------------------------------------------------------------------

ORDINAL_SCORES = (0, 1, 3, 5)
DIMENSIONS = ("align", "fluency", "scope", "end_state", "physics")


@dataclass(frozen=True)
class InterBenchRecord:
    trigger: int
    align: int
    fluency: int
    scope: int
    end_state: int
    physics: int

    def __post_init__(self):
        if self.trigger not in (0, 1):
            raise MetricError("trigger must be 0 or 1")
        for name in DIMENSIONS:
            v = getattr(self, name)
            if v not in ORDINAL_SCORES:
                raise MetricError(f"{name} must be one of {ORDINAL_SCORES}")
        if self.trigger == 0 and any(getattr(self, n) != 0 for n in DIMENSIONS):
            raise MetricError("trigger 0 forces all dimension scores to 0")


@dataclass(frozen=True)
class CategoryReport:
    category: str
    trigger: float
    align: float
    fluency: float
    scope: float
    end_state: float
    physics: float
    overall: float

    def means(self) -> dict[str, float]:
        return {"trigger": self.trigger,
                **{n: getattr(self, n) for n in DIMENSIONS}}


def interbench_overall(record) -> float:
    """Weighted overall: (5*trigger + the five dimension scores) / 6."""
    if isinstance(record, (InterBenchRecord, CategoryReport)):
        trigger = record.trigger
        dims = [getattr(record, n) for n in DIMENSIONS]
    else:
        trigger, *dims = record
        if len(dims) != 5:
            raise MetricError("expected trigger plus five dimension scores")
    if not 0.0 <= trigger <= 1.0:
        raise MetricError("trigger mean must lie in [0, 1]")
    if any(not 0.0 <= d <= 5.0 for d in dims):
        raise MetricError("dimension means must lie in [0, 5]")
    return (5.0 * trigger + sum(dims)) / 6.0


def aggregate(records: list[InterBenchRecord],
              categories: list[str]) -> tuple[list[CategoryReport], CategoryReport]:
    """Per-category dimension means with a global report over categories."""
    if not records or len(records) != len(categories):
        raise MetricError("need one category label per record")
    by_cat: dict[str, list[InterBenchRecord]] = {}
    for rec, cat in zip(records, categories):
        by_cat.setdefault(cat, []).append(rec)
    reports = []
    for cat in sorted(by_cat):
        rows = by_cat[cat]
        means = {"trigger": float(np.mean([r.trigger for r in rows]))}
        for name in DIMENSIONS:
            means[name] = float(np.mean([getattr(r, name) for r in rows]))
        overall = interbench_overall((means["trigger"],
                                      *[means[n] for n in DIMENSIONS]))
        reports.append(CategoryReport(category=cat, overall=overall, **means))
    global_means = {"trigger": float(np.mean([r.trigger for r in reports]))}
    for name in DIMENSIONS:
        global_means[name] = float(np.mean([getattr(r, name) for r in reports]))
    global_overall = float(np.mean([r.overall for r in reports]))
    global_report = CategoryReport(category="global", overall=global_overall,
                                   **global_means)
    return reports, global_report


# --------------------------------------------------------------------------
# record ingestion / report export
# --------------------------------------------------------------------------

RECORD_FIELDS = ("video_id", "category", "trigger", "align", "fluency",
                 "scope", "end_state", "physics")


def read_records_csv(text: str):
    """Parse `video_id,category,trigger,align,...` rows into records."""
    reader = csv.DictReader(io.StringIO(text))
    missing = set(RECORD_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise MetricError(f"records CSV missing columns: {sorted(missing)}")
    records, categories, video_ids = [], [], []
    for row in reader:
        records.append(InterBenchRecord(
            trigger=int(row["trigger"]),
            align=int(row["align"]), fluency=int(row["fluency"]),
            scope=int(row["scope"]), end_state=int(row["end_state"]),
            physics=int(row["physics"])))
        categories.append(row["category"])
        video_ids.append(row["video_id"])
    if not records:
        raise MetricError("records CSV contains no rows")
    return records, categories, video_ids


def report_to_json(reports: list[CategoryReport],
                   global_report: CategoryReport) -> str:
    payload = {
        "categories": [
            {"category": r.category, "means": r.means(), "overall": r.overall}
            for r in reports
        ],
        "global": {"means": global_report.means(),
                   "overall": global_report.overall},
    }
    return json.dumps(payload, indent=2)
