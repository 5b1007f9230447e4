"""Briefly train an attention variant, then dump its masks as grayscale heatmaps.

    python demos/05_attention_heatmaps.py [out_dir]

The conv4_3 masks come out at 38x38 and the conv7 masks at 19x19; both are
upsampled to 300x300 without smoothing so the resolution difference stays visible.
"""
import sys
from pathlib import Path

import numpy as np

from ctxssd.backbones import BackboneSpec
from ctxssd.data import generate_synthetic_dataset
from ctxssd.detector import VariantSpec, build_variant
from ctxssd.training import TrainSettings, train
from ctxssd.viz import attention_heatmaps, write_heatmaps

out = Path(sys.argv[1] if len(sys.argv) > 1 else "heatmaps")
ds = generate_synthetic_dataset(1, 8, size_mix=(0.5, 0.5, 0.0))
model = build_variant(VariantSpec("a_ssd", BackboneSpec("resnet18", width=0.125), num_classes=4),
                      np.random.default_rng(0))
train(model, ds, TrainSettings(steps=150, batch_size=2, optimizer="adam", weight_decay=0.0))

maps = attention_heatmaps(model, ds[0].image, channels=(0, 1, 2))
for path in write_heatmaps(maps, out):
    print(path)
for (layer, stage, ch), (raw, _) in sorted(maps.items()):
    print(f"{layer} stage {stage} ch {ch}: {raw.shape[0]}x{raw.shape[1]}, mask range {raw.min():.3f}..{raw.max():.3f}")
