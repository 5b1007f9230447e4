"""Default (prior) boxes tiled over the pyramid levels."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


@dataclass(frozen=True)
class LevelLayout:
    feature_size: int
    min_size: float
    max_size: float
    aspect_ratios: tuple

    @property
    def priors_per_cell(self) -> int:
        return 2 + 2 * len(self.aspect_ratios)


SSD300_LAYOUT = (
    LevelLayout(38, 30, 60, (2,)),
    LevelLayout(19, 60, 111, (2, 3)),
    LevelLayout(10, 111, 162, (2, 3)),
    LevelLayout(5, 162, 213, (2, 3)),
    LevelLayout(3, 213, 264, (2,)),
    LevelLayout(1, 264, 315, (2,)),
)


@dataclass
class PriorBoxSet:
    boxes: np.ndarray  # (P, 4) center form, normalised
    layout: tuple

    def __len__(self):
        return len(self.boxes)

    @property
    def total(self) -> int:
        return len(self.boxes)

    def level_slices(self) -> list:
        out, start = [], 0
        for lvl in self.layout:
            n = lvl.feature_size**2 * lvl.priors_per_cell
            out.append(slice(start, start + n))
            start += n
        return out


def generate_priors(layout=SSD300_LAYOUT, image_size: int = 300) -> PriorBoxSet:
    """Center-form priors, cell-major then per-cell in (small square, large square, ratios) order."""
    if not layout:
        raise ValueError("empty prior layout")
    rows = []
    for lvl in layout:
        f = lvl.feature_size
        s = lvl.min_size / image_size
        s_big = np.sqrt(s * (lvl.max_size / image_size))
        for i, j in product(range(f), repeat=2):
            cx, cy = (j + 0.5) / f, (i + 0.5) / f
            rows.append((cx, cy, s, s))
            rows.append((cx, cy, s_big, s_big))
            for r in lvl.aspect_ratios:
                q = np.sqrt(r)
                rows.append((cx, cy, s * q, s / q))
                rows.append((cx, cy, s / q, s * q))
    boxes = np.clip(np.array(rows, dtype=np.float64), 0.0, 1.0)
    return PriorBoxSet(boxes=boxes, layout=tuple(layout))
