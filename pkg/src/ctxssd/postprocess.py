"""Detection decoding, per-class NMS, and the forward / post-processing time split."""
from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from .boxes import VARIANCES, decode
from .nn.tensor import Tensor, no_grad
from .structures import Detection

__all__ = ["decode", "nms", "nms_indices", "postprocess", "PostprocessParams", "TimingReport", "profile"]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order (ties: lower index first)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[iou <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(dets: list, iou_threshold: float = 0.45) -> list:
    """Greedy NMS over :class:`Detection` objects of a single class."""
    if not dets:
        return []
    keep = nms_indices(np.array([d.box for d in dets]), np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


@dataclass
class PostprocessParams:
    conf_threshold: float = 0.01
    nms_iou: float = 0.45
    top_k: int = 200
    max_per_image: int = 200
    variances: tuple = VARIANCES


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def postprocess(loc, conf, priors, params: PostprocessParams | None = None) -> list:
    """Raw head outputs -> per-image lists of :class:`Detection` (class ids exclude background).

    Softmax, per-class confidence filter, per-class top-k, per-class NMS, then a
    global score cut to ``max_per_image``.
    """
    params = params or PostprocessParams()
    loc = loc.data if isinstance(loc, Tensor) else np.asarray(loc)
    conf = conf.data if isinstance(conf, Tensor) else np.asarray(conf)
    pboxes = priors.boxes if hasattr(priors, "boxes") else np.asarray(priors)
    probs = _softmax(conf.astype(np.float64))
    results = []
    for b in range(loc.shape[0]):
        boxes = decode(loc[b], pboxes, params.variances)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        found = []
        for c in range(1, probs.shape[-1]):
            sc = probs[b, :, c]
            idx = np.nonzero((sc > params.conf_threshold) & valid)[0]
            if idx.size == 0:
                continue
            if idx.size > params.top_k:
                idx = idx[np.argsort(-sc[idx], kind="stable")[: params.top_k]]
            keep = idx[nms_indices(boxes[idx], sc[idx], params.nms_iou)]
            found.extend((float(sc[i]), c - 1, i) for i in keep)
        found.sort(key=lambda t: (-t[0], t[1], t[2]))
        results.append(
            [Detection(cls, score, tuple(boxes[i])) for score, cls, i in found[: params.max_per_image]]
        )
    return results


@dataclass
class TimingReport:
    forward_ms: float
    post_ms: float
    total_ms: float
    fps: float
    warmup: int
    runs: int
    batch_size: int
    label: str = ""

    NOTE = "per-image averages; softmax is counted in post-processing"

    @property
    def overhead_ms(self) -> float:
        return self.total_ms - (self.forward_ms + self.post_ms)

    def to_table(self) -> str:
        return (
            f"# {self.NOTE}; warmup={self.warmup} runs={self.runs} batch={self.batch_size}\n"
            f"{'':10s} {'Total time (ms)':>16s} {'Forward time (ms)':>18s} {'Post processing time (ms)':>26s} {'FPS':>8s}\n"
            f"{self.label or 'model':10s} {self.total_ms:16.2f} {self.forward_ms:18.2f} {self.post_ms:26.2f} {self.fps:8.2f}\n"
        )

    def to_records(self) -> str:
        fields = {
            "label": self.label or "model",
            "total_ms": f"{self.total_ms:.4f}",
            "forward_ms": f"{self.forward_ms:.4f}",
            "post_ms": f"{self.post_ms:.4f}",
            "fps": f"{self.fps:.4f}",
            "warmup": self.warmup,
            "runs": self.runs,
            "batch_size": self.batch_size,
        }
        return "".join(f"{k}={v}\n" for k, v in fields.items())


def profile(model, images, warmup: int = 1, runs: int = 5, params: PostprocessParams | None = None,
            label: str = "") -> TimingReport:
    """Time model forward and post-processing separately with a monotonic clock.

    The model must not be used concurrently while profiling.  Like ``timeit``,
    the garbage collector is paused for the timed loop so collection pauses do
    not land inside individual runs.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    was_training = model.training
    model.eval()
    fwd, post, total = [], [], []
    clock = time.perf_counter
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with no_grad():
            for i in range(warmup + runs):
                t0 = clock()
                loc, conf = model(x)
                t1 = clock()
                postprocess(loc, conf, model.priors, params)
                t2 = clock()
                if i >= warmup:
                    fwd.append(t1 - t0)
                    post.append(t2 - t1)
                    total.append(t2 - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
        model.train(was_training)
    n = x.shape[0]
    f_ms = 1000.0 * float(np.mean(fwd)) / n
    p_ms = 1000.0 * float(np.mean(post)) / n
    t_ms = 1000.0 * float(np.mean(total)) / n
    return TimingReport(f_ms, p_ms, t_ms, 1000.0 / t_ms, warmup, runs, n, label)
