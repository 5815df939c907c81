"""ROI filtering, greedy matching and 11-point interpolated AP / mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box3D, bev_iou, iou_3d

IOU_FUNCS: dict[str, Callable[[Box3D, Box3D], float]] = {"bev": bev_iou, "3d": iou_3d}
DEFAULT_ROI = (0.0, -39.12, 100.0, 39.12)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    modes: tuple[str, ...] = ("3d", "bev")
    roi: tuple[float, float, float, float] = DEFAULT_ROI

    def __post_init__(self):
        if not all(0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must be in (0, 1]")
        if any(m not in IOU_FUNCS for m in self.modes):
            raise ValueError(f"modes must be among {sorted(IOU_FUNCS)}")
        x0, y0, x1, y1 = self.roi
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError("ROI must satisfy x_min <= x_max and y_min <= y_max")


@dataclass
class EvalResult:
    ap: dict[tuple[int, str, float], float] = field(default_factory=dict)
    map: dict[tuple[str, float], float] = field(default_factory=dict)
    counts: dict[tuple[int, str, float], dict[str, int]] = field(default_factory=dict)
    ab_mean: float = 0.0
    classes_without_gt: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "map": {f"{m}@{t}": v for (m, t), v in sorted(self.map.items())},
            "ap": {f"class{c}/{m}@{t}": v for (c, m, t), v in sorted(self.ap.items())},
            "counts": {f"class{c}/{m}@{t}": v for (c, m, t), v in sorted(self.counts.items())},
            "ab_mean": self.ab_mean,
            "classes_without_gt": list(self.classes_without_gt),
        }


def roi_filter(boxes: Sequence[Box3D], roi=DEFAULT_ROI) -> list[Box3D]:
    x0, y0, x1, y1 = roi
    return [b for b in boxes if x0 <= b.cx <= x1 and y0 <= b.cy <= y1]


def confidence_order(preds: Sequence[Box3D]) -> list[int]:
    """Descending confidence, ties by ascending index."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))


def match(preds: Sequence[Box3D], gts: Sequence[Box3D], iou_fn=bev_iou, threshold: float = 0.5) -> list[bool]:
    """TP flags aligned with ``preds``; each GT is consumed at most once."""
    flags = [False] * len(preds)
    used = [False] * len(gts)
    for i in confidence_order(preds):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            iou = iou_fn(preds[i], g)
            if iou >= threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """11-point interpolated AP from confidence-ordered TP/FP flags."""
    if num_gt <= 0 or len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    n = np.arange(1, len(flags) + 1)
    precision = tp / n
    total = 0.0
    for k in range(11):
        # recall >= k/10 without floating-point recall
        reach = 10 * tp >= k * num_gt
        total += float(precision[reach].max()) if reach.any() else 0.0
    return total / 11.0


def mean_ap(per_class_ap: dict | Sequence[float]) -> float:
    vals = list(per_class_ap.values()) if isinstance(per_class_ap, dict) else list(per_class_ap)
    if not vals:
        raise ValueError("mean AP over an empty class set")
    return float(sum(vals) / len(vals))


@dataclass
class FrameBoxes:
    preds: list[Box3D]
    gts: list[Box3D]


def evaluate_run(frames: Sequence[FrameBoxes], cfg: EvalConfig = EvalConfig(), ab_log: Sequence[float] = ()) -> EvalResult:
    """Pool every frame into one PR curve per (class, IoU type, threshold)."""
    filtered = [(roi_filter(f.preds, cfg.roi), roi_filter(f.gts, cfg.roi)) for f in frames]
    classes = sorted({b.class_id for p, g in filtered for b in (*p, *g)})
    result = EvalResult(ab_mean=float(np.mean(ab_log)) if len(ab_log) else 0.0)
    for cls in classes:
        per = [([b for b in p if b.class_id == cls], [b for b in g if b.class_id == cls]) for p, g in filtered]
        num_gt = sum(len(g) for _, g in per)
        if num_gt == 0:
            result.classes_without_gt.append(cls)
        for mode in cfg.modes:
            for thr in cfg.iou_thresholds:
                scored = []  # (confidence, frame, index, tp)
                for fi, (p, g) in enumerate(per):
                    for pi, tp in enumerate(match(p, g, IOU_FUNCS[mode], thr)):
                        scored.append((-p[pi].confidence, fi, pi, tp))
                scored.sort(key=lambda s: s[:3])
                flags = [s[3] for s in scored]
                result.ap[(cls, mode, thr)] = average_precision(flags, num_gt)
                n_tp = sum(flags)
                result.counts[(cls, mode, thr)] = {"tp": n_tp, "fp": len(flags) - n_tp, "num_gt": num_gt}
    for mode in cfg.modes:
        for thr in cfg.iou_thresholds:
            aps = [result.ap[(c, mode, thr)] for c in classes]
            result.map[(mode, thr)] = mean_ap(aps) if aps else 0.0
    return result
