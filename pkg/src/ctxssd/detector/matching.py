"""Ground-truth to prior assignment and regression-target encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import VARIANCES, center_to_corner, encode, iou_matrix


@dataclass
class MatchResult:
    matched_gt: np.ndarray  # (P,) gt index, -1 for background
    loc_targets: np.ndarray  # (P, 4)
    conf_targets: np.ndarray  # (P,) 0 = background, else class_id + 1

    @property
    def positives(self) -> np.ndarray:
        return self.conf_targets > 0


def match_and_encode(gt_boxes, gt_labels, priors, iou_threshold: float = 0.5, variances=VARIANCES) -> MatchResult:
    """Assign every prior a ground truth or background.

    ``gt_boxes`` are normalised corner boxes (G, 4), ``gt_labels`` foreground
    class ids (G,).  Each gt first claims its best-overlapping prior (greedily,
    most confident gt first, so no two gts fight over one prior); remaining
    priors take their best gt when IoU >= ``iou_threshold``.
    """
    pboxes = priors.boxes if hasattr(priors, "boxes") else np.asarray(priors)
    n_priors = len(pboxes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return MatchResult(
            np.full(n_priors, -1, dtype=np.int64),
            np.zeros((n_priors, 4)),
            np.zeros(n_priors, dtype=np.int64),
        )
    overlaps = iou_matrix(gt_boxes, center_to_corner(pboxes))  # (G, P)
    best_gt = overlaps.argmax(axis=0)
    best_gt_iou = overlaps[best_gt, np.arange(n_priors)]

    forced = np.full(n_priors, False)
    order = np.argsort(-overlaps.max(axis=1), kind="stable")
    for g in order:
        row = np.where(forced, -np.inf, overlaps[g])
        p = int(row.argmax())
        forced[p] = True
        best_gt[p] = g
        best_gt_iou[p] = 2.0

    matched = np.where(best_gt_iou >= iou_threshold, best_gt, -1)
    conf = np.where(matched >= 0, gt_labels[best_gt] + 1, 0)
    loc = encode(gt_boxes[best_gt], pboxes, variances)
    loc[matched < 0] = 0.0
    return MatchResult(matched, loc, conf.astype(np.int64))
