"""VGG16 and ResNet feature extractors emitting the six-level SSD300 pyramid."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, ConvBNReLU, MaxPool2d, Module
from .nn.tensor import Tensor

PYRAMID_NAMES = ("conv4_3", "conv7", "conv8_2", "conv9_2", "conv10_2", "conv11_2")
PYRAMID_SIZES = (38, 19, 10, 5, 3, 1)
PYRAMID_CHANNELS = (512, 1024, 512, 256, 256, 256)

# per-channel means subtracted from 0..255 RGB input; no std scaling
PIXEL_MEAN = np.array([123.0, 117.0, 104.0])

VGG16_TABLE = (64, 64, "M", 128, 128, "M", 256, 256, 256, "C", 512, 512, 512, "M", 512, 512, 512)

# (1x1 reduce channels, 3x3 out channels, stride, padding) for conv8 .. conv11
EXTRA_TABLE = ((256, 512, 2, 1), (128, 256, 2, 1), (128, 256, 1, 0), (128, 256, 1, 0))

RESNET_TABLE = {
    "resnet18": {"block": "basic", "counts": (2, 2, 2), "channels": (64, 128, 256), "strides": (1, 2, 2)},
    "resnet34": {"block": "basic", "counts": (3, 4, 6), "channels": (64, 128, 256), "strides": (1, 2, 2)},
    "resnet50": {"block": "bottleneck", "counts": (3, 4, 6), "channels": (64, 128, 256), "strides": (1, 2, 2)},
}

BACKBONE_KINDS = ("vgg16",) + tuple(RESNET_TABLE)


class FeaturePyramid(OrderedDict):
    """Ordered ``name -> Tensor`` map of multi-scale features, shallowest first."""

    def validate(self) -> "FeaturePyramid":
        if len(self) != len(PYRAMID_NAMES):
            raise ValueError(f"pyramid must have {len(PYRAMID_NAMES)} levels, got {len(self)}")
        sizes = [t.shape[2] for t in self.values()]
        if any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"pyramid sizes must strictly decrease, got {sizes}")
        return self

    def shapes(self) -> dict:
        return {k: tuple(v.shape[1:]) for k, v in self.items()}


@dataclass
class BackboneSpec:
    kind: str = "vgg16"
    input_size: int = 300
    width: float = 1.0
    batch_norm: bool = False
    table: dict = field(default_factory=dict)

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width)))

    def pyramid_channels(self) -> tuple:
        return tuple(self.scaled(c) for c in PYRAMID_CHANNELS)

    def layer_table(self) -> dict:
        """Resolved layer configuration (defaults overlaid with ``table``)."""
        if self.kind == "vgg16":
            base = {"features": VGG16_TABLE, "extras": EXTRA_TABLE}
        else:
            base = dict(RESNET_TABLE[self.kind], extras=EXTRA_TABLE)
        base.update(self.table)
        return base


def build_backbone(spec: BackboneSpec, rng=None) -> "Backbone":
    if spec.kind not in BACKBONE_KINDS:
        raise ValueError(f"unknown backbone kind {spec.kind!r}; expected one of {BACKBONE_KINDS}")
    if spec.input_size != 300:
        raise ValueError(f"only 300x300 input is supported, got {spec.input_size}")
    if spec.width <= 0:
        raise ValueError("width must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    if spec.kind == "vgg16":
        return VGGBackbone(spec, rng)
    return ResNetBackbone(spec, rng)


class Backbone(Module):
    spec: BackboneSpec

    def forward(self, images: Tensor) -> FeaturePyramid:
        if images.ndim != 4 or images.shape[1:] != (3, self.spec.input_size, self.spec.input_size):
            raise ValueError(f"expected (N, 3, {self.spec.input_size}, {self.spec.input_size}), got {images.shape}")
        c4, c7 = self.trunk(images)
        pyramid = FeaturePyramid(conv4_3=c4, conv7=c7)
        x = c7
        for name, (reduce, expand) in zip(PYRAMID_NAMES[2:], self.extras):
            x = F.relu(expand(F.relu(reduce(x))))
            pyramid[name] = x
        return pyramid

    def _build_extras(self, in_ch, rng):
        extras = []
        for red, out, stride, pad in self.spec.layer_table()["extras"]:
            red, out = self.spec.scaled(red), self.spec.scaled(out)
            extras.append((Conv2d(in_ch, red, 1, rng=rng), Conv2d(red, out, 3, stride, pad, rng=rng)))
            in_ch = out
        self.extras = extras
        # flattened so parameter discovery sees the convs
        self.extra_layers = [m for pair in extras for m in pair]


class _VGGConv(Module):
    def __init__(self, cin, cout, batch_norm, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, 1, 1, bias=not batch_norm, rng=rng)
        self.bn = BatchNorm2d(cout) if batch_norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return F.relu(x)


class VGGBackbone(Backbone):
    """SSD300 VGG16 stack: conv4_3 tapped before pool4, fc6/fc7 as dilated conv6 + 1x1 conv7."""

    def __init__(self, spec: BackboneSpec, rng):
        super().__init__()
        self.spec = spec
        layers, stage4_end, cin = [], None, 3
        n_conv = 0
        for item in spec.layer_table()["features"]:
            if item == "M":
                layers.append(MaxPool2d(2, 2))
            elif item == "C":
                layers.append(MaxPool2d(2, 2, ceil_mode=True))
            else:
                cout = spec.scaled(item)
                layers.append(_VGGConv(cin, cout, spec.batch_norm, rng))
                cin = cout
                n_conv += 1
                if n_conv == 10:
                    stage4_end = len(layers)
        self.features = layers
        self._tap = stage4_end
        self.pool5 = MaxPool2d(3, 1, 1)
        c6 = spec.scaled(1024)
        self.conv6 = Conv2d(cin, c6, 3, 1, padding=6, dilation=6, rng=rng)
        self.conv7 = Conv2d(c6, c6, 1, rng=rng)
        self._build_extras(c6, rng)

    def trunk(self, x):
        for layer in self.features[: self._tap]:
            x = layer(x)
        c4 = x
        for layer in self.features[self._tap :]:
            x = layer(x)
        x = self.pool5(x)
        x = F.relu(self.conv6(x))
        c7 = F.relu(self.conv7(x))
        return c4, c7


class BasicBlock(Module):
    expansion = 1

    def __init__(self, cin, planes, stride, rng):
        super().__init__()
        self.a = ConvBNReLU(cin, planes, 3, stride, 1, rng=rng)
        self.b = ConvBNReLU(planes, planes, 3, 1, 1, relu=False, rng=rng)
        out = planes * self.expansion
        self.down = ConvBNReLU(cin, out, 1, stride, 0, relu=False, rng=rng) if stride != 1 or cin != out else None

    def forward(self, x):
        skip = self.down(x) if self.down is not None else x
        return F.relu(self.b(self.a(x)) + skip)


class Bottleneck(Module):
    expansion = 4

    def __init__(self, cin, planes, stride, rng):
        super().__init__()
        out = planes * self.expansion
        self.a = ConvBNReLU(cin, planes, 1, 1, 0, rng=rng)
        self.b = ConvBNReLU(planes, planes, 3, stride, 1, rng=rng)
        self.c = ConvBNReLU(planes, out, 1, 1, 0, relu=False, rng=rng)
        self.down = ConvBNReLU(cin, out, 1, stride, 0, relu=False, rng=rng) if stride != 1 or cin != out else None

    def forward(self, x):
        skip = self.down(x) if self.down is not None else x
        return F.relu(self.c(self.b(self.a(x))) + skip)


class ResNetBackbone(Backbone):
    """ResNet stem + stages 1-3; stage 2 (38x38) and stage 3 (19x19) feed the pyramid.

    Stage outputs whose width differs from the SSD level width get a 1x1
    conv + BN + ReLU projection.
    """

    def __init__(self, spec: BackboneSpec, rng):
        super().__init__()
        self.spec = spec
        table = spec.layer_table()
        block = BasicBlock if table["block"] == "basic" else Bottleneck
        stem = spec.scaled(64)
        self.stem = ConvBNReLU(3, stem, 7, 2, 3, rng=rng)
        self.pool = MaxPool2d(3, 2, 1)
        cin, stages = stem, []
        for count, ch, stride in zip(table["counts"], table["channels"], table["strides"]):
            planes = spec.scaled(ch)
            blocks = []
            for i in range(count):
                blocks.append(block(cin, planes, stride if i == 0 else 1, rng))
                cin = planes * block.expansion
            stages.append(blocks)
        self.stages = stages
        self.stage_modules = [b for s in stages for b in s]
        s2 = spec.scaled(table["channels"][1]) * block.expansion
        s3 = spec.scaled(table["channels"][2]) * block.expansion
        c4, c7 = spec.scaled(512), spec.scaled(1024)
        self.proj4 = ConvBNReLU(s2, c4, 1, rng=rng) if s2 != c4 else None
        self.proj7 = ConvBNReLU(s3, c7, 1, rng=rng) if s3 != c7 else None
        self._build_extras(c7, rng)

    def stage_outputs(self, x) -> dict:
        """Raw outputs keyed by stage number (1: 75x75, 2: 38x38, 3: 19x19)."""
        x = self.pool(self.stem(x))
        outs = {}
        for i, blocks in enumerate(self.stages, start=1):
            for b in blocks:
                x = b(x)
            outs[i] = x
        return outs

    def trunk(self, x):
        outs = self.stage_outputs(x)
        c4 = self.proj4(outs[2]) if self.proj4 is not None else outs[2]
        c7 = self.proj7(outs[3]) if self.proj7 is not None else outs[3]
        return c4, c7


def normalize_images(images_uint8: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, H, W, 3) uint8 RGB -> (N, 3, H, W) mean-subtracted floats."""
    x = images_uint8.astype(dtype) - PIXEL_MEAN.astype(dtype)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))
