"""Detection evaluation: rotated-box IoU, difficulty binning, and AP.

Follows the KITTI 3D benchmark conventions: overlap is measured either on
the ground-plane footprint (bird's-eye view) or in 3D, ground truths are
binned into easy/moderate/hard by 2D height, occlusion and truncation, and
average precision is computed from interpolated precision at fixed recall
points (the classic 11-point grid or the 40-point variant).

Matching is greedy in descending score with each ground truth matched at
most once.  Ground truths harder than the evaluated difficulty and
detections overlapping DontCare regions are "ignore-neutral": they count
neither as hits nor as false alarms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from .geom import Box3D, box_corners_3d

# Minimum 2D overlap with a DontCare region for a detection to be ignored.
DONTCARE_IOU_2D = 0.5


class FrameMismatchError(KeyError):
    """A detection frame has no corresponding ground-truth frame."""


class Difficulty(IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min 2D height px, max occlusion level, max truncation) per difficulty.
_DIFFICULTY_GATES = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class GtObject:
    box: Box3D
    bbox2d: tuple[float, float, float, float]
    truncated: float
    occluded: int
    category: str


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    category: str
    bbox2d: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    recall_variant: str = "r40"   # "r11" or "r40"
    metric: str = "3d"            # "3d" or "bev"
    category: str = "Car"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.recall_variant not in ("r11", "r40"):
            raise ValueError(f"recall_variant must be 'r11' or 'r40', got {self.recall_variant!r}")
        if self.metric not in ("3d", "bev"):
            raise ValueError(f"metric must be '3d' or 'bev', got {self.metric!r}")

    @property
    def recall_points(self) -> list[float]:
        if self.recall_variant == "r11":
            return [i / 10.0 for i in range(11)]
        return [i / 40.0 for i in range(1, 41)]


@dataclass
class PrCurve:
    """Interpolated precision sampled at the fixed recall grid."""

    recalls: list[float]
    precisions: list[float]
    ap: float


@dataclass
class EvalReport:
    metric: str
    recall_variant: str
    iou_threshold: float
    category: str
    per_difficulty: dict[str, PrCurve] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rotated-box overlap


def _polygon_area(poly: Sequence) -> float:
    """Absolute area by the shoelace formula."""
    if len(poly) < 3:
        return 0.0
    total = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return abs(total) / 2.0


def _signed_area(poly: Sequence) -> float:
    total = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return total / 2.0


def _clip_convex(subject: list, clip: list) -> list:
    """Sutherland-Hodgman clipping of a polygon by a convex polygon.

    Points exactly on a clip edge are kept, so clipping a polygon by itself
    returns it unchanged.
    """
    orient = 1.0 if _signed_area(clip) >= 0 else -1.0
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return orient * (ex * (p[1] - ay) - ey * (p[0] - ax))

        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_side = side(prev)
        for cur in input_pts:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(
                        (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                    )
                output.append(tuple(cur))
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            prev, prev_side = cur, cur_side
    return output


def bev_footprint(box: Box3D) -> np.ndarray:
    """Ground-plane footprint as a (4, 2) ring of (x, z) corners."""
    corners = box_corners_3d(box)
    return corners[[0, 1, 5, 4]][:, [0, 2]]


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of the yaw-rotated ground footprints."""
    fa = [tuple(p) for p in bev_footprint(a)]
    fb = [tuple(p) for p in bev_footprint(b)]
    inter = _polygon_area(_clip_convex(fa, fb))
    # areas from the same shoelace path so IoU(a, a) is exactly 1
    area_a = _polygon_area(fa)
    area_b = _polygon_area(fb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint intersection times vertical overlap of [y-h, y]."""
    fa = [tuple(p) for p in bev_footprint(a)]
    fb = [tuple(p) for p in bev_footprint(b)]
    inter_area = _polygon_area(_clip_convex(fa, fb))
    # heights from the rounded extents so IoU(a, a) is exactly 1
    ya0, yb0 = a.y - a.dims.h, b.y - b.dims.h
    y_overlap = max(0.0, min(a.y, b.y) - max(ya0, yb0))
    inter = inter_area * y_overlap
    vol_a = _polygon_area(fa) * (a.y - ya0)
    vol_b = _polygon_area(fb) * (b.y - yb0)
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def bbox_iou_2d(a: Sequence[float], b: Sequence[float]) -> float:
    """Axis-aligned IoU of (u1, v1, u2, v2) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


# ---------------------------------------------------------------------------
# Difficulty and average precision


def assign_difficulty(gt: GtObject) -> Difficulty:
    height = gt.bbox2d[3] - gt.bbox2d[1]
    for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        min_h, max_occ, max_trunc = _DIFFICULTY_GATES[level]
        if height >= min_h and gt.occluded <= max_occ and gt.truncated <= max_trunc:
            return level
    return Difficulty.IGNORED


_TP, _FP, _NEUTRAL = 1, 0, -1


def _match_frame(
    gts: Sequence[GtObject],
    dets: Sequence[Detection],
    cfg: EvalConfig,
    difficulty: Difficulty,
    dontcare: Sequence[Sequence[float]] | None,
) -> list[tuple[float, int]]:
    """Per-frame greedy matching; returns (score, flag) per relevant detection."""
    iou_fn = bev_iou if cfg.metric == "bev" else iou_3d
    relevant_gts = [g for g in gts if g.category == cfg.category]
    counted = [assign_difficulty(g) <= difficulty for g in relevant_gts]
    matched = [False] * len(relevant_gts)

    det_indices = sorted(
        (i for i in range(len(dets)) if dets[i].category == cfg.category),
        key=lambda i: -dets[i].score,
    )
    flags: dict[int, tuple[float, int]] = {}
    for i in det_indices:
        det = dets[i]
        overlaps = [
            iou_fn(det.box, g.box) if not matched[j] else -1.0
            for j, g in enumerate(relevant_gts)
        ]

        def best(pool) -> int | None:
            j_best, best_iou = None, cfg.iou_threshold
            for j in pool:
                if overlaps[j] >= best_iou:
                    j_best, best_iou = j, overlaps[j]
            return j_best

        # Prefer consuming a counted ground truth over a neutral one.
        j = best(j for j in range(len(relevant_gts)) if counted[j])
        if j is not None:
            matched[j] = True
            flags[i] = (det.score, _TP)
            continue
        j = best(j for j in range(len(relevant_gts)) if not counted[j])
        if j is not None:
            matched[j] = True
            flags[i] = (det.score, _NEUTRAL)
            continue
        if dontcare and det.bbox2d is not None and any(
            bbox_iou_2d(det.bbox2d, dc) >= DONTCARE_IOU_2D for dc in dontcare
        ):
            flags[i] = (det.score, _NEUTRAL)
            continue
        flags[i] = (det.score, _FP)
    # Emit in input order; the caller does the global score sort.
    return [flags[i] for i in sorted(flags)]


def ap_from_matches(
    gts: Mapping[str, Sequence[GtObject]],
    dets: Mapping[str, Sequence[Detection]],
    cfg: EvalConfig,
    difficulty: Difficulty,
    dontcare: Mapping[str, Sequence[Sequence[float]]] | None = None,
) -> PrCurve:
    """Average precision over a set of frames at one difficulty.

    Precision is interpolated as the maximum precision at any recall >= r;
    the AP is the mean over the fixed recall grid.  With no counted ground
    truths or no detections the AP is 0 by convention.
    """
    n_gt = 0
    entries: list[tuple[float, int, int]] = []   # (score, seq, flag)
    seq = 0
    for frame in sorted(gts):
        frame_gts = gts[frame]
        n_gt += sum(
            1
            for g in frame_gts
            if g.category == cfg.category and assign_difficulty(g) <= difficulty
        )
        frame_dets = dets.get(frame, ())
        dc = dontcare.get(frame) if dontcare else None
        for score, flag in _match_frame(frame_gts, frame_dets, cfg, difficulty, dc):
            entries.append((score, seq, flag))
            seq += 1

    entries.sort(key=lambda e: (-e[0], e[1]))
    recalls: list[float] = []
    precisions: list[float] = []
    tp = fp = 0
    for _, _, flag in entries:
        if flag == _NEUTRAL:
            continue
        if flag == _TP:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt if n_gt > 0 else 0.0)

    grid = cfg.recall_points
    sampled = []
    for r in grid:
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r - 1e-9 and prec > best:
                best = prec
        sampled.append(best)
    ap = float(np.mean(sampled)) if sampled else 0.0
    return PrCurve(recalls=list(grid), precisions=sampled, ap=ap)


def evaluate(
    gts: Mapping[str, Sequence[GtObject]],
    dets: Mapping[str, Sequence[Detection]],
    cfg: EvalConfig,
    dontcare: Mapping[str, Sequence[Sequence[float]]] | None = None,
) -> EvalReport:
    """AP at every difficulty for one metric/recall-variant configuration.

    ``gts`` and ``dets`` map frame ids to per-frame object lists.  Frames
    with detections but no ground-truth entry raise FrameMismatchError;
    ground-truth frames without detections simply contribute misses.
    """
    unknown = sorted(set(dets) - set(gts))
    if unknown:
        raise FrameMismatchError(
            f"detections reference unknown frame(s): {', '.join(unknown[:5])}"
        )
    report = EvalReport(
        metric=cfg.metric,
        recall_variant=cfg.recall_variant,
        iou_threshold=cfg.iou_threshold,
        category=cfg.category,
    )
    for difficulty in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        report.per_difficulty[difficulty.name.lower()] = ap_from_matches(
            gts, dets, cfg, difficulty, dontcare
        )
    return report
