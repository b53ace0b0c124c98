"""Detection metrics: precision, recall, AP@0.5, and mAP@0.5:0.95.

Matching is score-greedy: detections in descending score order each claim
the unmatched ground-truth box of highest IoU, provided that IoU reaches
the threshold. AP uses 101-point interpolation (mean over recall levels
0.00, 0.01, …, 1.00 of the maximum precision at or beyond each level), the
COCO-style convention implied by reporting mAP@0.5:0.95; VOC-style 11-point
numbers are NOT comparable.

Detections are canonically ordered (score desc, then area, then
coordinates), so reports do not depend on input permutation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EvalError
from .slicer import Detection, iou

Rect = tuple[float, float, float, float]

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = tuple(i / 100.0 for i in range(101))
DEFAULT_SCORE_CUTOFF = 0.25


def _canonical(dets: list[Detection]) -> list[tuple[int, Detection]]:
    return sorted(enumerate(dets), key=lambda pair: (-pair[1].score, pair[1].area, pair[1].box))


@dataclass
class MatchLedger:
    """One image's matching outcome at a single IoU threshold."""

    iou_threshold: float
    # (input detection index, matched gt index or None, IoU at the match)
    matches: list[tuple[int, int | None, float]] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def match_detections(dets: list[Detection], gts: list[Rect], iou_threshold: float) -> MatchLedger:
    """Greedy one-to-one matching; each ground-truth box is claimed at most once."""
    if not 0.0 < iou_threshold <= 1.0:
        raise EvalError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    ledger = MatchLedger(iou_threshold=iou_threshold)
    claimed: set[int] = set()
    for det_index, det in _canonical(dets):
        best_iou, best_gt = 0.0, None
        for gt_index, gt in enumerate(gts):
            if gt_index in claimed:
                continue
            value = iou(det.box, gt)
            if value > best_iou:
                best_iou, best_gt = value, gt_index
        if best_gt is not None and best_iou >= iou_threshold:
            claimed.add(best_gt)
            ledger.matches.append((det_index, best_gt, best_iou))
            ledger.tp += 1
        else:
            ledger.matches.append((det_index, None, 0.0))
            ledger.fp += 1
    ledger.fn = len(gts) - len(claimed)
    return ledger


def average_precision(
    dets_by_image: dict[str, list[Detection]],
    gts_by_image: dict[str, list[Rect]],
    iou_threshold: float,
) -> float:
    """101-point interpolated AP at one IoU threshold over a whole image set."""
    total_gt = sum(len(g) for g in gts_by_image.values())
    flagged: list[tuple[float, str, Rect, bool]] = []
    for image_id in sorted(gts_by_image):
        dets = dets_by_image.get(image_id, [])
        ledger = match_detections(dets, gts_by_image[image_id], iou_threshold)
        for det_index, gt_index, _ in ledger.matches:
            det = dets[det_index]
            flagged.append((det.score, image_id, det.box, gt_index is not None))
    if total_gt == 0 or not flagged:
        return 0.0
    flagged.sort(key=lambda t: (-t[0], t[1], t[2]))
    precisions: list[float] = []
    recalls: list[float] = []
    tp = fp = 0
    for _, _, _, is_tp in flagged:
        tp += is_tp
        fp += not is_tp
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)
    ap = 0.0
    for level in RECALL_LEVELS:
        best = max((p for p, r in zip(precisions, recalls) if r >= level), default=0.0)
        ap += best
    return ap / len(RECALL_LEVELS)


@dataclass
class EvalReport:
    precision: float
    recall: float
    ap_per_threshold: dict[float, float]
    map_50: float
    map_50_95: float
    score_cutoff: float = DEFAULT_SCORE_CUTOFF
    images: int = 0
    ground_truth_boxes: int = 0
    detections: int = 0

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "map_50": self.map_50,
            "map_50_95": self.map_50_95,
            "score_cutoff": self.score_cutoff,
            "images": self.images,
            "ground_truth_boxes": self.ground_truth_boxes,
            "detections": self.detections,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            precision=float(doc["precision"]),
            recall=float(doc["recall"]),
            ap_per_threshold={float(k): float(v) for k, v in doc.get("ap_per_threshold", {}).items()},
            map_50=float(doc["map_50"]),
            map_50_95=float(doc["map_50_95"]),
            score_cutoff=float(doc.get("score_cutoff", DEFAULT_SCORE_CUTOFF)),
            images=int(doc.get("images", 0)),
            ground_truth_boxes=int(doc.get("ground_truth_boxes", 0)),
            detections=int(doc.get("detections", 0)),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def as_text(self) -> str:
        header = f"{'Precision':>10}  {'Recall':>10}  {'mAP@0.5':>10}  {'mAP@0.5:0.95':>13}"
        row = f"{self.precision:>10.3f}  {self.recall:>10.3f}  {self.map_50:>10.3f}  {self.map_50_95:>13.3f}"
        meta = (
            f"images={self.images} gt_boxes={self.ground_truth_boxes} "
            f"detections={self.detections} score_cutoff={self.score_cutoff}"
        )
        return "\n".join([header, row, meta])


def evaluate(
    dets_by_image: dict[str, list[Detection]],
    gts_by_image: dict[str, list[Rect]],
    score_cutoff: float = DEFAULT_SCORE_CUTOFF,
) -> EvalReport:
    """Full report: AP at 0.50:0.05:0.95, plus P/R at IoU 0.5 with a score cutoff.

    The image id sets must match exactly; an image with no detections needs
    an explicit empty entry.
    """
    det_ids, gt_ids = set(dets_by_image), set(gts_by_image)
    if det_ids != gt_ids:
        missing = sorted(gt_ids - det_ids)[:5]
        extra = sorted(det_ids - gt_ids)[:5]
        raise EvalError(f"image id sets differ (missing dets for {missing}, unknown images {extra})")

    ap_per_threshold = {t: average_precision(dets_by_image, gts_by_image, t) for t in IOU_THRESHOLDS}
    map_50 = ap_per_threshold[0.5]
    map_50_95 = sum(ap_per_threshold.values()) / len(ap_per_threshold)

    tp = fp = fn = 0
    for image_id in sorted(gts_by_image):
        confident = [d for d in dets_by_image[image_id] if d.score >= score_cutoff]
        ledger = match_detections(confident, gts_by_image[image_id], 0.5)
        tp, fp, fn = tp + ledger.tp, fp + ledger.fp, fn + ledger.fn
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0

    return EvalReport(
        precision=precision,
        recall=recall,
        ap_per_threshold=ap_per_threshold,
        map_50=map_50,
        map_50_95=map_50_95,
        score_cutoff=score_cutoff,
        images=len(gts_by_image),
        ground_truth_boxes=sum(len(g) for g in gts_by_image.values()),
        detections=sum(len(d) for d in dets_by_image.values()),
    )
