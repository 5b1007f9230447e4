"""Box geometry shared by matching, decoding, NMS and evaluation.

Corner form is ``(x1, y1, x2, y2)``; center form is ``(cx, cy, w, h)``.
"""
from __future__ import annotations

import numpy as np

VARIANCES = (0.1, 0.2)


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes ``a`` (A, 4) and ``b`` (B, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(matched: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Offsets of corner boxes ``matched`` relative to center-form ``priors``."""
    v0, v1 = variances
    gt = corner_to_center(np.asarray(matched, dtype=np.float64))
    pr = np.asarray(priors, dtype=np.float64)
    dxy = (gt[..., :2] - pr[..., :2]) / (v0 * pr[..., 2:])
    dwh = np.log(gt[..., 2:] / pr[..., 2:]) / v1
    return np.concatenate([dxy, dwh], axis=-1)


def decode(loc: np.ndarray, priors: np.ndarray, variances=VARIANCES, clip: bool = True) -> np.ndarray:
    """Inverse of :func:`encode`; returns corner boxes, clipped to the unit square."""
    v0, v1 = variances
    loc = np.asarray(loc, dtype=np.float64)
    pr = np.asarray(priors, dtype=np.float64)
    cxy = pr[..., :2] + loc[..., :2] * v0 * pr[..., 2:]
    # exp overflow guard for wildly wrong predictions
    wh = pr[..., 2:] * np.exp(np.clip(loc[..., 2:] * v1, -50.0, 50.0))
    boxes = center_to_corner(np.concatenate([cxy, wh], axis=-1))
    return np.clip(boxes, 0.0, 1.0) if clip else boxes
