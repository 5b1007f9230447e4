"""Forward time against post-processing time for each variant.

An untrained head spreads probability evenly over the classes, so every class
fills its top-k quota before NMS.  A trained model usually sends fewer
candidates through, which shifts the balance towards the forward pass.
"""
import numpy as np

from ctxssd.backbones import BackboneSpec, normalize_images
from ctxssd.data import generate_synthetic_dataset
from ctxssd.detector import VariantSpec, build_variant
from ctxssd.postprocess import profile

images = np.stack([s.image for s in generate_synthetic_dataset(0, 2).samples])
x = normalize_images(images)

for kind in ("ssd", "f_ssd", "a_ssd", "fa_ssd"):
    model = build_variant(VariantSpec(kind, BackboneSpec("resnet18", width=0.25), num_classes=4),
                          np.random.default_rng(0))
    rep = profile(model, x, warmup=1, runs=3, label=kind)
    print(rep.to_table().splitlines()[-1] if kind != "ssd" else rep.to_table().rstrip())
