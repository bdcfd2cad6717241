"""Detection-quality and perceptibility scoring.

mAP-50 with greedy confidence-ordered matching and the all-point interpolated
precision-recall area, averaged over several object-confidence thresholds;
plus the rank-sum scoring used to compare patch configurations (lower is
better, minimum 2).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from camopatch.imaging import BoundingBox

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.1, 0.001)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two axis-aligned boxes."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def _match_flags(
    detections: Sequence, truth_boxes: dict[int, list[BoundingBox]], iou_threshold: float
) -> tuple[np.ndarray, int]:
    """Greedy matching in descending confidence; one match per truth box.

    ``detections`` are (image_id, Detection) pairs. Returns the TP/FP flag per
    detection in match order plus the total truth count.
    """
    order = sorted(
        range(len(detections)),
        key=lambda i: (
            -detections[i][1].confidence,
            detections[i][0],
            detections[i][1].box.x_min,
            detections[i][1].box.y_min,
            detections[i][1].box.x_max,
            detections[i][1].box.y_max,
        ),
    )
    matched: dict[int, list[bool]] = {
        img: [False] * len(boxes) for img, boxes in truth_boxes.items()
    }
    flags = np.zeros(len(detections), dtype=bool)
    for rank, i in enumerate(order):
        img, det = detections[i]
        boxes = truth_boxes.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, tb in enumerate(boxes):
            if matched[img][j]:
                continue
            v = iou(det.box, tb)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[img][best_j] = True
            flags[rank] = True
    total_truth = sum(len(b) for b in truth_boxes.values())
    return flags, total_truth


def average_precision(
    detections: Sequence,
    truth_boxes: dict[int, list[BoundingBox]],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP at the given IoU threshold.

    ``detections`` are (image_id, Detection) pairs carrying confidences;
    ``truth_boxes`` maps image_id to its ground-truth boxes.
    """
    total_truth = sum(len(b) for b in truth_boxes.values())
    if total_truth == 0:
        if detections:
            logger.warning(
                "average_precision: %d detections against empty truth; AP is 0",
                len(detections),
            )
        return 0.0
    if not detections:
        return 0.0
    flags, _ = _match_flags(detections, truth_boxes, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_truth
    precision = tp / (tp + fp)
    # envelope from the right, then sum precision over recall increments
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p, f in zip(recall, prec_env, flags):
        if f:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class EvalReport:
    map50_percent: float
    per_threshold_ap: dict[float, float]
    mean_perc_distance: float = 0.0

    def as_dict(self) -> dict:
        return {
            "map50_percent": self.map50_percent,
            "per_threshold_ap": {str(k): v for k, v in self.per_threshold_ap.items()},
            "mean_perc_distance": self.mean_perc_distance,
        }


def map50_multi_threshold(
    handle,
    images: Sequence[np.ndarray],
    truths: Sequence[Sequence[tuple[BoundingBox, int]]],
    target_class: int = 0,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """AP at IoU 0.5 for the target class, averaged over confidence thresholds,
    expressed as a percentage."""
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"threshold {t} outside [0, 1]")
    truth_boxes = {
        i: [box for box, cid in entries if cid == target_class]
        for i, entries in enumerate(truths)
    }
    per_threshold: dict[float, float] = {}
    for thr in thresholds:
        detections = []
        for i, image in enumerate(images):
            for det in handle.detect(image, thr):
                if det.class_id == target_class:
                    detections.append((i, det))
        per_threshold[thr] = average_precision(detections, truth_boxes, iou_threshold)
    mean_ap = float(np.mean(list(per_threshold.values())))
    return EvalReport(map50_percent=100.0 * mean_ap, per_threshold_ap=per_threshold)


@dataclass
class ScoreRow:
    label: str
    map50: float
    mean_perc: float
    rank_map: int = 0
    rank_perc: int = 0
    combined_score: int = 0
    notes: str = ""


def _dense_ranks(values: list[float]) -> list[int]:
    distinct = sorted(set(values))
    lookup = {v: r + 1 for r, v in enumerate(distinct)}
    return [lookup[v] for v in values]


def combined_rank_score(rows: Sequence[tuple[str, float, float]]) -> list[ScoreRow]:
    """Rank-sum scoring: ascending ranks on mAP and mean PerC, summed.

    Ties share a dense rank; the narrative tie-breaks (execution time, then
    robustness/imperceptibility balance) are reported as annotations for a
    human decision, never applied automatically.
    """
    if len(rows) < 2:
        raise ValueError("need at least 2 rows to rank")
    maps = [r[1] for r in rows]
    percs = [r[2] for r in rows]
    rank_map = _dense_ranks(maps)
    rank_perc = _dense_ranks(percs)
    out = []
    for (label, m, p), rm, rp in zip(rows, rank_map, rank_perc):
        out.append(
            ScoreRow(
                label=label,
                map50=m,
                mean_perc=p,
                rank_map=rm,
                rank_perc=rp,
                combined_score=rm + rp,
            )
        )
    scores = [r.combined_score for r in out]
    for r in out:
        if scores.count(r.combined_score) > 1:
            r.notes = "tied score: break by execution time, then balance"
    return out


@dataclass
class AblationCell:
    label: str
    field: str
    value: object
    report: EvalReport | None = None
    row: ScoreRow | None = None
    failed: bool = False
    error: str = ""


def override_config(config, dotted_field: str, value):
    """Replace one (possibly dotted) field on a frozen dataclass tree."""
    parts = dotted_field.split(".")
    if len(parts) == 1:
        return replace(config, **{parts[0]: value})
    child = getattr(config, parts[0])
    return replace(config, **{parts[0]: override_config(child, ".".join(parts[1:]), value)})


def run_ablation(
    grid: Sequence[tuple[str, str, object]],
    base_config,
    handle,
    images_with_boxes,
    truths,
    target_class: int = 0,
) -> list[AblationCell]:
    """Train one patch per variant per image at fixed seeds and rank the cells.

    Each grid entry is (label, dotted config field, value). Failed cells are
    marked and excluded from ranking, never silently dropped.
    """
    from camopatch import optimizer  # local import: optimizer logs through evaluation

    cells = [AblationCell(label=l, field=f, value=v) for l, f, v in grid]
    for cell in cells:
        try:
            config = override_config(base_config, cell.field, cell.value)
            patched_images = []
            perc_values = []
            for image, box in images_with_boxes:
                result = optimizer.train_patch([(image, box)], handle, config)
                patched_images.append(
                    optimizer.apply_final_patch(image, result)
                )
                perc_values.append(result.final_perc_distance)
            report = map50_multi_threshold(handle, patched_images, truths, target_class)
            report.mean_perc_distance = float(np.mean(perc_values))
            cell.report = report
        except Exception as exc:  # noqa: BLE001 - cell failures are data
            cell.failed = True
            cell.error = f"{type(exc).__name__}: {exc}"
            logger.error("ablation cell %r failed: %s", cell.label, cell.error)

    ok = [c for c in cells if not c.failed]
    if len(ok) >= 2:
        rows = combined_rank_score(
            [(c.label, c.report.map50_percent, c.report.mean_perc_distance) for c in ok]
        )
        for c, row in zip(ok, rows):
            c.row = row
    elif len(ok) == 1:
        c = ok[0]
        c.row = ScoreRow(
            label=c.label,
            map50=c.report.map50_percent,
            mean_perc=c.report.mean_perc_distance,
            rank_map=1,
            rank_perc=1,
            combined_score=2,
        )
    return cells
