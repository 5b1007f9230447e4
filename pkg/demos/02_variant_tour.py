"""The four detectors side by side: what each adds on top of the plain pyramid, and what it costs."""
import numpy as np

from ctxssd.backbones import BackboneSpec
from ctxssd.detector import VariantSpec, build_variant
from ctxssd.nn.tensor import Tensor, no_grad

WIDTH = 0.25  # full width works too, it is just slower on a CPU

x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 300, 300)).astype(np.float32))
for bb in ("vgg16", "resnet34"):
    print(f"== {bb} (width {WIDTH})")
    for kind in ("ssd", "f_ssd", "a_ssd", "fa_ssd"):
        model = build_variant(VariantSpec(kind, BackboneSpec(bb, width=WIDTH), num_classes=21),
                              np.random.default_rng(0)).eval()
        n_params = sum(p.data.size for p in model.parameters())
        with no_grad():
            loc, conf = model(x)
        extras = []
        if model.fusion:
            extras.append("fusion on " + ", ".join(model.fusion))
        if model.attention:
            stages = {k: len(v.stages) for k, v in model.attention.items()}
            extras.append("attention " + ", ".join(f"{k} x{s}" for k, s in stages.items()))
        print(f"  {kind:7s} params {n_params / 1e6:6.2f}M  head channels {model.head_channels}")
        print(f"          loc {loc.shape} conf {conf.shape}  {'; '.join(extras) or 'plain pyramid'}")
