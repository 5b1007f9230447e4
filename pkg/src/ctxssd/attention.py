"""Residual attention: trunk of residual blocks gated by a down-up sampled sigmoid mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, L2Norm, Module
from .nn.tensor import Tensor


class ResidualBlock(Module):
    """Pre-activation bottleneck: (BN, ReLU, conv) x3 with 1x1 / 3x3 / 1x1 kernels plus identity."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        mid = max(1, channels // reduction)
        self.bn1 = BatchNorm2d(channels)
        self.conv1 = Conv2d(channels, mid, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, 1, 1, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, channels, 1, bias=False, rng=rng)

    def forward(self, x):
        y = self.conv1(F.relu(self.bn1(x)))
        y = self.conv2(F.relu(self.bn2(y)))
        y = self.conv3(F.relu(self.bn3(y)))
        return x + y


@dataclass
class AttentionStageSpec:
    channels: int
    down_up_depth: int = 2
    stage_count: int = 2
    residual_form: bool = False  # (1 + mask) * trunk instead of mask * trunk

    def __post_init__(self):
        if self.down_up_depth < 1:
            raise ValueError("down_up_depth must be >= 1")
        if self.stage_count not in (1, 2):
            raise ValueError("stage_count must be 1 or 2")


class MaskBranch(Module):
    """Max-pool / residual-block descent, nearest upsampling back with skips, 1x1 conv, sigmoid.

    Pools use ceil mode and every upsample targets the size recorded on the way
    down, so odd sizes (19 -> 10 -> 5 -> 10 -> 19) round-trip exactly.
    """

    def __init__(self, channels: int, depth: int, rng=None):
        super().__init__()
        self.depth = depth
        self.down = [ResidualBlock(channels, rng=rng) for _ in range(depth)]
        self.up = [ResidualBlock(channels, rng=rng) for _ in range(depth - 1)]
        self.out_bn = BatchNorm2d(channels)
        self.out_conv = Conv2d(channels, channels, 1, rng=rng)
        self.last_sizes = None

    def logits(self, x: Tensor) -> Tensor:
        sizes = [x.shape[2:]]
        skips = []
        h = x
        for block in self.down:
            h = block(F.max_pool2d(h, 2, 2, ceil_mode=True))
            skips.append(h)
            sizes.append(h.shape[2:])
        up_sizes = []
        for level in reversed(range(self.depth)):
            h = F.upsample_nearest(h, sizes[level])
            up_sizes.append(h.shape[2:])
            if level > 0:
                h = self.up[level - 1](h + skips[level - 1])
        self.last_sizes = {"down": sizes, "up": up_sizes}
        return self.out_conv(F.relu(self.out_bn(h)))

    def forward(self, x: Tensor) -> Tensor:
        return F.sigmoid(self.logits(x), strict=True)


class AttentionStage(Module):
    def __init__(self, channels: int, down_up_depth: int, residual_form: bool = False, rng=None):
        super().__init__()
        self.channels = channels
        self.trunk = [ResidualBlock(channels, rng=rng), ResidualBlock(channels, rng=rng)]
        self.mask_branch = MaskBranch(channels, down_up_depth, rng=rng)
        self.post = ResidualBlock(channels, rng=rng)
        self.norm = L2Norm(channels)
        self.residual_form = residual_form
        self.last = {}

    def forward(self, x: Tensor, mask_override: np.ndarray | None = None):
        """Return ``(attended, mask)``; ``mask_override`` substitutes fixed mask values."""
        if x.shape[1] != self.channels:
            raise ValueError(f"attention stage expects {self.channels} channels, got {x.shape[1]}")
        trunk = x
        for block in self.trunk:
            trunk = block(trunk)
        mask = self.mask_branch(x) if mask_override is None else Tensor(np.broadcast_to(mask_override, x.shape).astype(x.dtype))
        gate = mask + 1.0 if self.residual_form else mask
        gated = trunk * gate
        out = F.relu(self.norm(self.post(gated)))
        self.last = {"trunk": trunk, "gated": gated, "mask": mask}
        return out, mask


def attention_stage(x: Tensor, stage: AttentionStage, mask_override=None):
    return stage(x, mask_override)


class AttentionModule(Module):
    """``stage_count`` stages in sequence; the first uses a depth-2 mask, the second depth-1."""

    def __init__(self, spec: AttentionStageSpec, rng=None):
        super().__init__()
        depths = (spec.down_up_depth, 1)[: spec.stage_count]
        self.spec = spec
        self.stages = [AttentionStage(spec.channels, d, spec.residual_form, rng=rng) for d in depths]
        self.masks = []

    def forward(self, x: Tensor) -> Tensor:
        self.masks = []
        for stage in self.stages:
            x, mask = stage(x)
            self.masks.append(mask.data)
        return x


def attention_module(x: Tensor, module: AttentionModule) -> Tensor:
    return module(x)
