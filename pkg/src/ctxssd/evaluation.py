"""VOC-style average precision, overall and per COCO size bucket."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix
from .structures import BUCKETS

AP_MODES = ("voc07_11point", "all_point")

PROTOCOL_NOTE = (
    "size buckets: small < 32^2 <= medium <= 96^2 < large (pixel area); "
    "bucket AP ignores detections matched to out-of-bucket or difficult gts"
)


def voc_ap(recall: np.ndarray, precision: np.ndarray, mode: str = "voc07_11point") -> float:
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if mode == "voc07_11point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            hit = recall >= t - 1e-12
            total += precision[hit].max() if hit.any() else 0.0
        # divide once so a perfect curve scores exactly 1.0
        return float(total / 11.0)
    if mode == "all_point":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
        return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())
    raise ValueError(f"unknown ap_mode {mode!r}; expected one of {AP_MODES}")


def class_pr(dets, gts, class_id: int, bucket: str | None, iou_threshold: float):
    """Precision/recall arrays for one class, optionally restricted to a size bucket.

    ``dets``/``gts`` map image id -> list.  Returns (recall, precision, npos).
    """
    records, npos = [], 0
    gt_info = {}
    for image_id, objs in gts.items():
        mine = [g for g in objs if g.class_id == class_id]
        boxes = np.array([g.normalized for g in mine]).reshape(-1, 4)
        ignore = np.array([g.difficult or (bucket is not None and g.size_bucket != bucket) for g in mine], bool)
        npos += int((~ignore).sum())
        gt_info[image_id] = (boxes, ignore, np.zeros(len(mine), bool))
        for k, d in enumerate(dets.get(image_id, ())):
            if d.class_id == class_id:
                records.append((-float(d.score), str(image_id), k, d))
    # order independent of dict/image iteration order
    records.sort(key=lambda r: (r[0], r[1], r[2]))

    tp, fp = [], []
    for _, image_id, _, det in records:
        boxes, ignore, used = gt_info[image_id]
        if len(boxes):
            ious = iou_matrix(np.asarray(det.box)[None], boxes)[0]
            j = int(ious.argmax())
            best = ious[j]
        else:
            best = -1.0
        if best >= iou_threshold:
            if ignore[j]:
                continue
            if not used[j]:
                used[j] = True
                tp.append(1.0)
                fp.append(0.0)
                continue
        tp.append(0.0)
        fp.append(1.0)
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / npos if npos else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision, npos


@dataclass
class EvalReport:
    map: float | None
    per_class: dict
    per_bucket: dict
    grid: dict
    gt_counts: dict
    gt_total: int
    ap_mode: str
    iou_threshold: float
    notes: list = field(default_factory=lambda: [PROTOCOL_NOTE])

    def to_table(self, fps: float | None = None) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{100 * v:5.1f}"

        lines = [f"# {n}" for n in self.notes]
        lines.append(f"# ap_mode={self.ap_mode} iou={self.iou_threshold}")
        head = f"{'':14s} {'mAP':>5s} {'Small':>5s} {'Medium':>6s} {'Large':>5s}"
        if fps is not None:
            head += f" {'FPS':>7s}"
        lines.append(head)
        row = f"{'all':14s} {fmt(self.map)} {fmt(self.per_bucket['small'])} {fmt(self.per_bucket['medium']):>6s} {fmt(self.per_bucket['large'])}"
        if fps is not None:
            row += f" {fps:7.2f}"
        lines.append(row)
        lines.append("")
        lines.append(f"{'class':14s} {'AP':>5s} {'S':>5s} {'M':>6s} {'L':>5s}")
        for name, ap in self.per_class.items():
            g = self.grid[name]
            lines.append(f"{name:14s} {fmt(ap)} {fmt(g['small'])} {fmt(g['medium']):>6s} {fmt(g['large'])}")
        lines.append("")
        counts = " ".join(f"{b}={self.gt_counts[b]}" for b in BUCKETS)
        lines.append(f"gt counts: {counts} total={self.gt_total}")
        return "\n".join(lines) + "\n"

    def to_records(self, fps: float | None = None) -> str:
        def val(v):
            return "absent" if v is None else f"{v:.6f}"

        recs = [f"mAP={val(self.map)}"]
        recs += [f"mAP.{b}={val(self.per_bucket[b])}" for b in BUCKETS]
        if fps is not None:
            recs.append(f"fps={fps:.3f}")
        for name, ap in self.per_class.items():
            recs.append(f"AP.{name}={val(ap)}")
            recs += [f"AP.{name}.{b}={val(self.grid[name][b])}" for b in BUCKETS]
        recs += [f"gt_count.{b}={self.gt_counts[b]}" for b in BUCKETS]
        recs += [f"gt_count.total={self.gt_total}", f"ap_mode={self.ap_mode}", f"iou_threshold={self.iou_threshold}"]
        return "\n".join(recs) + "\n"


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(detections: dict, ground_truths: dict, class_names, iou_threshold: float = 0.5,
             ap_mode: str = "voc07_11point") -> EvalReport:
    """Score per-image detections against per-image ground truths.

    Both arguments map image id -> list (:class:`Detection` / :class:`GroundTruth`)
    and must cover the same image ids.
    """
    if ap_mode not in AP_MODES:
        raise ValueError(f"unknown ap_mode {ap_mode!r}; expected one of {AP_MODES}")
    if set(detections) != set(ground_truths):
        extra = sorted(set(detections) - set(ground_truths))[:3]
        missing = sorted(set(ground_truths) - set(detections))[:3]
        raise ValueError(f"inconsistent image id sets (extra={extra}, missing={missing})")
    per_class, grid = {}, {}
    for cid, name in enumerate(class_names):
        rec, prec, npos = class_pr(detections, ground_truths, cid, None, iou_threshold)
        per_class[name] = voc_ap(rec, prec, ap_mode) if npos else None
        grid[name] = {}
        for b in BUCKETS:
            rec, prec, npos = class_pr(detections, ground_truths, cid, b, iou_threshold)
            grid[name][b] = voc_ap(rec, prec, ap_mode) if npos else None
    counts = {b: 0 for b in BUCKETS}
    for objs in ground_truths.values():
        for g in objs:
            counts[g.size_bucket] += 1
    return EvalReport(
        map=_mean(per_class.values()),
        per_class=per_class,
        per_bucket={b: _mean(grid[n][b] for n in class_names) for b in BUCKETS},
        grid=grid,
        gt_counts=counts,
        gt_total=int(sum(len(v) for v in ground_truths.values())),
        ap_mode=ap_mode,
        iou_threshold=iou_threshold,
    )
