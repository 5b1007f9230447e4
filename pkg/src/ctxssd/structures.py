"""Plain records passed between detection, post-processing and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96
BUCKETS = ("small", "medium", "large")


def size_bucket(pixel_area: float) -> str:
    """COCO size class; both thresholds are strict, so 32^2 and 96^2 are medium."""
    if pixel_area < SMALL_AREA:
        return "small"
    if pixel_area > LARGE_AREA:
        return "large"
    return "medium"


@dataclass
class GroundTruth:
    class_id: int
    box: tuple  # absolute pixels (x1, y1, x2, y2)
    image_size: tuple  # (width, height)
    difficult: bool = False
    size_bucket: str = field(init=False)

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"inverted or empty box {self.box}")
        self.size_bucket = size_bucket(self.pixel_area)

    @property
    def pixel_area(self) -> float:
        x1, y1, x2, y2 = self.box
        return float((x2 - x1) * (y2 - y1))

    @property
    def normalized(self) -> np.ndarray:
        w, h = self.image_size
        x1, y1, x2, y2 = self.box
        return np.array([x1 / w, y1 / h, x2 / w, y2 / h], dtype=np.float64)


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # normalised corner form

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
