"""SSD, F-SSD, A-SSD and FA-SSD assembled from backbone, fusion and attention blocks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attention import AttentionModule, AttentionStageSpec
from ..backbones import PYRAMID_NAMES, BackboneSpec, build_backbone
from ..fusion import FusionBlock, FusionSpec
from ..nn import functional as F
from ..nn.layers import Conv2d, L2Norm, Module
from ..nn.tensor import Tensor
from .priors import SSD300_LAYOUT, generate_priors

VARIANTS = ("ssd", "f_ssd", "a_ssd", "fa_ssd")

DEFAULT_CONTEXTS = {
    "conv4_3": ("conv7", "conv8_2"),
    "conv7": ("conv8_2", "conv9_2"),
}
DEFAULT_ATTENTION_LAYERS = ("conv4_3", "conv7")


@dataclass
class VariantSpec:
    kind: str = "ssd"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    num_classes: int = 21
    contexts: dict = field(default_factory=lambda: dict(DEFAULT_CONTEXTS))
    attention_layers: tuple = DEFAULT_ATTENTION_LAYERS
    attention_stages: int | None = None  # default: 2 for a_ssd, 1 for fa_ssd
    residual_form: bool = False
    layout: tuple = SSD300_LAYOUT

    @property
    def uses_fusion(self) -> bool:
        return self.kind in ("f_ssd", "fa_ssd")

    @property
    def uses_attention(self) -> bool:
        return self.kind in ("a_ssd", "fa_ssd")

    def stages(self) -> int:
        if self.attention_stages is not None:
            return self.attention_stages
        return 2 if self.kind == "a_ssd" else 1

    def validate(self) -> "VariantSpec":
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ValueError("num_classes counts background and must be >= 2")
        for target, ctxs in self.contexts.items():
            for name in (target, *ctxs):
                if name not in PYRAMID_NAMES:
                    raise ValueError(f"fusion references unknown layer {name!r}")
            if PYRAMID_NAMES.index(target) >= min(PYRAMID_NAMES.index(c) for c in ctxs):
                raise ValueError(f"context layers for {target} must be deeper than it")
        for name in self.attention_layers:
            if name not in PYRAMID_NAMES:
                raise ValueError(f"attention references unknown layer {name!r}")
        if self.uses_fusion and self.kind == "fa_ssd" and set(self.attention_layers) - set(self.contexts):
            raise ValueError("fa_ssd attention layers must also be fusion targets")
        if len(self.layout) != len(PYRAMID_NAMES):
            raise ValueError("prior layout must have one entry per pyramid level")
        return self


class DetectorModel(Module):
    def __init__(self, spec: VariantSpec, rng=None):
        super().__init__()
        spec.validate()
        rng = rng if rng is not None else np.random.default_rng()
        self.spec = spec
        self.backbone = build_backbone(spec.backbone, rng)
        size = spec.backbone.input_size
        chans = spec.backbone.pyramid_channels()
        shapes = {
            name: (c, lvl.feature_size, lvl.feature_size)
            for name, c, lvl in zip(PYRAMID_NAMES, chans, spec.layout)
        }
        self.pyramid_shapes = shapes
        self.priors = generate_priors(spec.layout, size)

        self.l2norm = L2Norm(chans[0]) if spec.kind == "ssd" else None
        self.attention = {}
        self.fusion = {}
        if spec.uses_attention:
            for name in spec.attention_layers:
                aspec = AttentionStageSpec(shapes[name][0], 2, spec.stages(), spec.residual_form)
                self.attention[name] = AttentionModule(aspec, rng=rng)
        if spec.uses_fusion:
            for target, ctxs in spec.contexts.items():
                include_conv = not (spec.kind == "fa_ssd" and target in self.attention)
                fspec = FusionSpec(target, tuple(ctxs), include_target_conv=include_conv)
                self.fusion[target] = FusionBlock(fspec, shapes, rng=rng)

        self.head_channels = []
        for name, (c, _, _) in shapes.items():
            self.head_channels.append(self.fusion[name].out_channels if name in self.fusion else c)
        self.loc_heads, self.conf_heads = [], []
        for cin, lvl in zip(self.head_channels, spec.layout):
            k = lvl.priors_per_cell
            self.loc_heads.append(Conv2d(cin, k * 4, 3, 1, 1, rng=rng))
            self.conf_heads.append(Conv2d(cin, k * spec.num_classes, 3, 1, 1, rng=rng))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def head_inputs(self, images: Tensor) -> dict:
        """Per-level tensors the detection heads read."""
        pyramid = self.backbone(images)
        feats = dict(pyramid)
        if self.l2norm is not None:
            feats["conv4_3"] = self.l2norm(pyramid["conv4_3"])
        attended = {name: mod(pyramid[name]) for name, mod in self.attention.items()}
        for name, block in self.fusion.items():
            target = attended.get(name) if not block.spec.include_target_conv else None
            feats[name] = block(pyramid, target)
        for name, value in attended.items():
            if name not in self.fusion:
                feats[name] = value
        return feats

    def forward(self, images: Tensor):
        """images (N, 3, 300, 300) -> loc (N, P, 4), conf (N, P, num_classes)."""
        feats = self.head_inputs(images)
        n = images.shape[0]
        locs, confs = [], []
        for name, lh, ch in zip(PYRAMID_NAMES, self.loc_heads, self.conf_heads):
            x = feats[name]
            locs.append(F.permute(lh(x), (0, 2, 3, 1)).reshape(n, -1, 4))
            confs.append(F.permute(ch(x), (0, 2, 3, 1)).reshape(n, -1, self.num_classes))
        return F.concat(locs, axis=1), F.concat(confs, axis=1)

    def attention_masks(self) -> dict:
        """Masks from the most recent forward: ``{layer: [stage1_mask, ...]}``."""
        return {name: list(mod.masks) for name, mod in self.attention.items()}


def build_variant(spec: VariantSpec, rng=None) -> DetectorModel:
    return DetectorModel(spec, rng)
