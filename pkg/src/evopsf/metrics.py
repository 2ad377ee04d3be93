"""Planning, prediction and detection metrics plus per-stream aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

COLLISION_RADIUS = 1.5
MISS_THRESHOLD = 2.0
MATCH_RADIUS = 2.0
L2_STEPS = (1, 3, 5)  # waypoints at 1 s, 2 s, 3 s


def plan_l2(chosen: np.ndarray, ego_future_gt: np.ndarray) -> float:
    """Mean of the Euclidean errors at 1 s, 2 s and 3 s."""
    chosen = np.asarray(chosen, dtype=np.float64)
    gt = np.asarray(ego_future_gt, dtype=np.float64)
    if chosen.shape != gt.shape:
        raise ValueError(f"plan_l2: shapes {chosen.shape} and {gt.shape} differ")
    d = np.linalg.norm(chosen[list(L2_STEPS)] - gt[list(L2_STEPS)], axis=1)
    return float(d.mean())


def plan_collides(chosen: np.ndarray, agent_future_gt: np.ndarray, radius: float = COLLISION_RADIUS) -> bool:
    """True if any waypoint comes within ``radius`` of an agent at the same future step."""
    futures = np.asarray(agent_future_gt, dtype=np.float64)
    if futures.size == 0:
        return False
    steps = min(len(chosen), futures.shape[1])
    d = np.linalg.norm(futures[:, :steps] - np.asarray(chosen)[None, :steps], axis=-1)
    return bool(np.any(d <= radius))


def collision_rate(plans: Iterable[np.ndarray], agent_futures: Iterable[np.ndarray],
                   radius: float = COLLISION_RADIUS) -> float:
    flags = [plan_collides(p, f, radius) for p, f in zip(plans, agent_futures)]
    return float(np.mean(flags)) if flags else 0.0


def displacement_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent average and final displacement error."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"displacement_errors: shapes {pred.shape} and {gt.shape} differ")
    if pred.size == 0:
        return np.zeros(0), np.zeros(0)
    d = np.linalg.norm(pred - gt, axis=-1)
    return d.mean(axis=1), d[:, -1]


def ade_fde_mr(pred: np.ndarray, gt: np.ndarray, miss_threshold: float = MISS_THRESHOLD) -> tuple[float, float, float]:
    ade, fde = displacement_errors(pred, gt)
    if ade.size == 0:
        return 0.0, 0.0, 0.0
    return float(ade.mean()), float(fde.mean()), float(np.mean(fde > miss_threshold))


@dataclass(frozen=True)
class MatchResult:
    errors: tuple[float, ...]
    true_positives: int
    false_positives: int
    false_negatives: int


def match_detections(centers: np.ndarray, truth: np.ndarray, radius: float = MATCH_RADIUS) -> MatchResult:
    """Greedy nearest-pair matching within ``radius``.

    Pairs are taken in order of increasing distance; ties fall back to the
    lower detection index, then the lower ground-truth index.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0 or len(truth) == 0:
        return MatchResult((), 0, len(centers), len(truth))
    dist = np.linalg.norm(centers[:, None] - truth[None], axis=-1)
    pairs = sorted((dist[i, j], i, j) for i in range(len(centers)) for j in range(len(truth)) if dist[i, j] <= radius)
    used_d, used_t, errors = set(), set(), []
    for d, i, j in pairs:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        errors.append(float(d))
    tp = len(errors)
    return MatchResult(tuple(errors), tp, len(centers) - tp, len(truth) - tp)


def detection_quality(detections, scene_frame) -> tuple[float, float, float]:
    """(mean centre error of matches, precision, recall) for one frame.

    With no match the centre error is NaN; precision over an empty
    detection set is 1 (nothing was wrong).
    """
    m = match_detections(detections.centers(), scene_frame.positions())
    err = float(np.mean(m.errors)) if m.errors else math.nan
    n_det = m.true_positives + m.false_positives
    n_true = m.true_positives + m.false_negatives
    precision = m.true_positives / n_det if n_det else 1.0
    recall = m.true_positives / n_true if n_true else 1.0
    return err, precision, recall


@dataclass
class MetricsReport:
    plan_l2_mean: float
    collision_rate: float
    ade: float
    fde: float
    miss_rate: float
    det_center_err: float
    det_precision: float
    det_recall: float
    update_count: int
    wall_time_s: float

    def validate(self) -> None:
        for name in ("collision_rate", "miss_rate", "det_precision", "det_recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("plan_l2_mean", "ade", "fde", "det_center_err"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} is negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MetricsAccumulator:
    """Collects per-frame quantities of one stream and reduces them to a report."""

    def __init__(self):
        self.plan_errors: list[float] = []
        self.collisions: list[bool] = []
        self.ade: list[float] = []
        self.fde: list[float] = []
        self.det_errors: list[float] = []
        self.tp = self.fp = self.fn = 0

    def add_frame(self, scene_frame, chosen: np.ndarray, pred_ids, pred_traj: np.ndarray, detections) -> None:
        self.plan_errors.append(plan_l2(chosen, scene_frame.ego_future_gt))
        self.collisions.append(plan_collides(chosen, scene_frame.agent_future_gt))
        if len(pred_ids):
            gt = np.array([scene_frame.future_of(i) for i in pred_ids])
            ade, fde = displacement_errors(pred_traj, gt)
            self.ade.extend(ade.tolist())
            self.fde.extend(fde.tolist())
        m = match_detections(detections.centers(), scene_frame.positions())
        self.det_errors.extend(m.errors)
        self.tp += m.true_positives
        self.fp += m.false_positives
        self.fn += m.false_negatives

    def report(self, update_count: int, wall_time_s: float) -> MetricsReport:
        fde = np.array(self.fde)
        return MetricsReport(
            plan_l2_mean=float(np.mean(self.plan_errors)) if self.plan_errors else 0.0,
            collision_rate=float(np.mean(self.collisions)) if self.collisions else 0.0,
            ade=float(np.mean(self.ade)) if self.ade else 0.0,
            fde=float(fde.mean()) if fde.size else 0.0,
            miss_rate=float(np.mean(fde > MISS_THRESHOLD)) if fde.size else 0.0,
            det_center_err=float(np.mean(self.det_errors)) if self.det_errors else 0.0,
            det_precision=self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0,
            det_recall=self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0,
            update_count=int(update_count),
            wall_time_s=float(wall_time_s),
        )


# CSV -------------------------------------------------------------------------

KEY_COLUMNS = ("suite", "split", "strategy", "seed")
METRIC_COLUMNS = tuple(f.name for f in fields(MetricsReport))
CSV_HEADER = KEY_COLUMNS + METRIC_COLUMNS


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(suite: str, split: str, strategy: str, seed: int, report: MetricsReport) -> dict:
    row = {"suite": suite, "split": split, "strategy": strategy, "seed": seed}
    row.update(asdict(report))
    return row


def write_csv(rows: Iterable[dict], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in CSV_HEADER])
    Path(path).write_text(buf.getvalue())


def append_csv_row(row: dict, path: str | Path) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(CSV_HEADER)
        writer.writerow([format_value(row[c]) for c in CSV_HEADER])


def read_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = dict(raw)
            row["seed"] = int(row["seed"])
            row["update_count"] = int(row["update_count"])
            for c in METRIC_COLUMNS:
                if c != "update_count":
                    row[c] = float(row[c])
            rows.append(row)
    return rows
