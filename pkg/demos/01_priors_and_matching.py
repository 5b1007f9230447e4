"""Where the 8732 default boxes come from, and how one ground-truth box turns into training targets."""
import numpy as np

from ctxssd.boxes import center_to_corner, decode, iou_matrix
from ctxssd.detector import SSD300_LAYOUT, generate_priors, match_and_encode

priors = generate_priors()
print("levels (feature size, boxes per cell, count):")
for lvl, sl in zip(SSD300_LAYOUT, priors.level_slices()):
    print(f"  {lvl.feature_size:3d}x{lvl.feature_size:<3d} {lvl.priors_per_cell}  {sl.stop - sl.start:5d}")
print("total", priors.total)

# the first cell of the 38x38 map: two squares and two 2:1 boxes, all centred at 0.5/38
print("\nfirst four priors (cx, cy, w, h):")
print(np.round(priors.boxes[:4], 4))

# a small object in the upper left, 24x30 pixels of a 300x300 image
gt = np.array([[30, 40, 54, 70]]) / 300.0
ious = iou_matrix(gt, center_to_corner(priors.boxes))[0]
print(f"\nbest IoU with any prior: {ious.max():.3f} (prior {ious.argmax()})")

m = match_and_encode(gt, [1], priors)
pos = np.nonzero(m.positives)[0]
print(f"{len(pos)} positive prior(s): {pos.tolist()}, class targets {m.conf_targets[pos].tolist()}")
print("encoded offsets:\n", np.round(m.loc_targets[pos], 3))

# decoding the targets against their priors recovers the box
print("decoded:", np.round(decode(m.loc_targets[pos], priors.boxes[pos]) * 300, 2)[0], "px")
