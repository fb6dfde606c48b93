"""KITTI-style matching, precision-recall and interpolated average precision.

Detections are greedily matched to ground truth in descending score order
(one-to-one). Ground truth stricter than the evaluated difficulty, ground
truth of a neighboring class (Car/Van, Pedestrian/Person_sitting) and
DontCare regions absorb detections without producing either a true or a
false positive. Evaluation is deterministic and independent of input order.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box3D, Rect, iou2d, iou3d, iou_bev
from .errors import InvalidInputError, UndefinedRecallError
from .kitti_io import LabelRecord, label_to_box3d

# KITTI devkit difficulty gates: minimum 2D box height (px), maximum
# occlusion level, maximum truncation.
_DIFFICULTY_GATES = {
    "Easy": (40.0, 0, 0.15),
    "Moderate": (25.0, 1, 0.30),
    "Hard": (25.0, 2, 0.50),
}
_DIFFICULTY_RANK = {"Easy": 0, "Moderate": 1, "Hard": 2}

# Classes whose ground truth is ignored (not penalized) when evaluating the
# partner class.
_NEIGHBOR_CLASSES = {
    "Car": {"Van"},
    "Van": {"Car"},
    "Pedestrian": {"Person_sitting"},
    "Person_sitting": {"Pedestrian"},
}

_DONTCARE_SUPPRESSION_IOU = 0.5


class Outcome(enum.Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "IgnoredMatch"


@dataclass(frozen=True)
class Detection:
    box3d: Box3D
    box2d: Rect
    score: float
    class_name: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidInputError("detection score must be finite")


@dataclass(frozen=True)
class GroundTruthObj:
    box3d: Box3D
    box2d: Rect
    class_name: str
    truncation: float = 0.0
    occlusion: int = 0


@dataclass(frozen=True)
class EvalConfig:
    """What to evaluate: overlap metric, IoU threshold, difficulty, AP grid.

    ``difficulty=None`` evaluates against every ground-truth object
    regardless of size/occlusion/truncation. ``ap_points`` is the number of
    recall levels of the interpolated AP (11 -> {0, 0.1, ..., 1}).
    """

    metric: str = "3D"
    iou_threshold: float = 0.5
    difficulty: Optional[str] = "Moderate"
    ap_points: int = 11
    skip_zero_recall: bool = False

    def __post_init__(self):
        if self.metric not in ("2D", "BEV", "3D"):
            raise InvalidInputError("metric must be one of 2D, BEV, 3D")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise InvalidInputError("iou_threshold must lie in (0, 1]")
        if self.difficulty is not None and self.difficulty not in _DIFFICULTY_GATES:
            raise InvalidInputError("difficulty must be Easy, Moderate, Hard or None")
        if self.ap_points < 2:
            raise InvalidInputError("ap_points must be at least 2")


def detection_from_label(rec: LabelRecord) -> Detection:
    if rec.score is None:
        raise InvalidInputError("detection labels must carry a score (16th field)")
    return Detection(
        box3d=label_to_box3d(rec),
        box2d=rec.bbox2d,
        score=rec.score,
        class_name=rec.class_name,
    )


def groundtruth_from_label(rec: LabelRecord) -> GroundTruthObj:
    return GroundTruthObj(
        box3d=label_to_box3d(rec) if rec.class_name != "DontCare" else Box3D(0, 0, 1, 0, 0, 0),
        box2d=rec.bbox2d,
        class_name=rec.class_name,
        truncation=rec.truncation,
        occlusion=rec.occlusion,
    )


def assign_difficulty(gt: GroundTruthObj) -> str:
    """Easiest KITTI difficulty bucket a ground-truth object qualifies for."""
    for name in ("Easy", "Moderate", "Hard"):
        min_h, max_occ, max_trunc = _DIFFICULTY_GATES[name]
        if (
            gt.box2d.h >= min_h
            and gt.occlusion <= max_occ
            and gt.truncation <= max_trunc
        ):
            return name
    return "Ignored"


def _pair_iou(det: Detection, gt: GroundTruthObj, metric: str) -> float:
    if metric == "2D":
        return iou2d(det.box2d, gt.box2d)
    if metric == "BEV":
        return iou_bev(det.box3d, gt.box3d)
    return iou3d(det.box3d, gt.box3d)


@dataclass(frozen=True)
class MatchResult:
    """Per-detection outcomes (score order preserved) plus the image's counts."""

    outcomes: List[Tuple[float, Outcome]]
    n_valid_gt: int
    fn: int


def _gt_role(gt: GroundTruthObj, cfg: EvalConfig, class_name: str) -> str:
    """Classify a ground-truth object for one evaluation run."""
    if gt.class_name == "DontCare":
        return "dontcare"
    if gt.class_name == class_name:
        if cfg.difficulty is None:
            return "valid"
        bucket = assign_difficulty(gt)
        if bucket != "Ignored" and _DIFFICULTY_RANK[bucket] <= _DIFFICULTY_RANK[cfg.difficulty]:
            return "valid"
        return "ignored"
    if gt.class_name in _NEIGHBOR_CLASSES.get(class_name, ()):
        return "ignored"
    return "other"


def match_image(dets: Sequence[Detection], gts: Sequence[GroundTruthObj],
                cfg: EvalConfig, class_name: str = "Car") -> MatchResult:
    """Greedy one-to-one matching of one image's detections to ground truth.

    Detections are visited in descending score order (ties keep input
    order); each claims the unmatched valid ground truth with the highest
    IoU at or above the threshold. Detections that only reach an ignored
    ground truth, or whose 2D box overlaps a DontCare region with IoU >=
    0.5, are neither true nor false positives. Unmatched valid ground truth
    counts as false negatives.
    """
    dets = [d for d in dets if d.class_name == class_name]
    roles = [_gt_role(gt, cfg, class_name) for gt in gts]
    valid = [gt for gt, role in zip(gts, roles) if role == "valid"]
    ignored = [gt for gt, role in zip(gts, roles) if role == "ignored"]
    dontcare = [gt.box2d for gt, role in zip(gts, roles) if role == "dontcare"]

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(valid)
    outcomes: List[Tuple[float, Outcome]] = []
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, -1.0
        for j, gt in enumerate(valid):
            if taken[j]:
                continue
            overlap = _pair_iou(det, gt, cfg.metric)
            if overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0 and best_iou >= cfg.iou_threshold:
            taken[best_j] = True
            outcomes.append((det.score, Outcome.TP))
            continue
        if any(
            _pair_iou(det, gt, cfg.metric) >= cfg.iou_threshold for gt in ignored
        ) or any(
            iou2d(det.box2d, rect) >= _DONTCARE_SUPPRESSION_IOU for rect in dontcare
        ):
            outcomes.append((det.score, Outcome.IGNORED))
        else:
            outcomes.append((det.score, Outcome.FP))
    fn = sum(1 for t in taken if not t)
    return MatchResult(outcomes=outcomes, n_valid_gt=len(valid), fn=fn)


def precision_recall(matches: Sequence[MatchResult]) -> List[Tuple[float, float]]:
    """Pooled precision-recall points, one per counted detection.

    Sweeps the score threshold through every detection's score (descending,
    deterministic tie-break) and records (recall, precision) after each
    counted detection. Ignored detections contribute nothing.

    Raises:
        UndefinedRecallError: no valid ground truth in the evaluated set.
    """
    n_gt = sum(m.n_valid_gt for m in matches)
    if n_gt == 0:
        raise UndefinedRecallError("no valid ground truth to evaluate against")
    flat = [
        (score, outcome)
        for m in matches
        for score, outcome in m.outcomes
        if outcome is not Outcome.IGNORED
    ]
    flat.sort(key=lambda t: -t[0])
    curve = []
    tp = fp = 0
    for score, outcome in flat:
        if outcome is Outcome.TP:
            tp += 1
        else:
            fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))
    return curve


def average_precision(curve: Sequence[Tuple[float, float]], n_points: int = 11,
                      skip_zero_recall: bool = False) -> float:
    """N-point interpolated AP: mean over a recall grid of the best precision
    achievable at that recall or beyond (0 where unreachable).

    ``skip_zero_recall=True`` drops the recall-0 level, giving the 40-point
    KITTI protocol with ``n_points=41``.
    """
    levels = np.linspace(0.0, 1.0, n_points)
    if skip_zero_recall:
        levels = levels[1:]
    if not curve:
        return 0.0
    recalls = np.array([r for r, _ in curve])
    precisions = np.array([p for _, p in curve])
    total = 0.0
    for r in levels:
        reachable = precisions[recalls >= r - 1e-12]
        total += float(reachable.max()) if reachable.size else 0.0
    return total / len(levels)


def evaluate(dets_per_image: Dict[str, Sequence[Detection]],
             gts_per_image: Dict[str, Sequence[GroundTruthObj]],
             cfg: EvalConfig, class_name: str = "Car") -> float:
    """Dataset AP for one class under one metric/threshold/difficulty."""
    matches = []
    for key in sorted(gts_per_image):
        dets = dets_per_image.get(key, [])
        matches.append(match_image(dets, gts_per_image[key], cfg, class_name))
    extra = set(dets_per_image) - set(gts_per_image)
    if extra:
        raise InvalidInputError(
            f"detections reference unknown images: {sorted(extra)[:3]}"
        )
    curve = precision_recall(matches)
    return average_precision(curve, cfg.ap_points, cfg.skip_zero_recall)


def results_csv(rows: Sequence[Tuple[str, str, str, float, float]]) -> str:
    """Render (metric, class, difficulty, threshold, AP) rows as CSV text."""
    lines = ["metric,class,difficulty,threshold,ap"]
    for metric, cls, difficulty, threshold, ap in rows:
        ap_txt = "nan" if ap is None or not math.isfinite(ap) else f"{ap:.6f}"
        lines.append(f"{metric},{cls},{difficulty},{threshold},{ap_txt}")
    return "\n".join(lines) + "\n"
