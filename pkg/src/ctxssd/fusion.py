"""Context feature fusion: deconvolve deeper maps to the target size and concatenate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .nn.tensor import Tensor


@dataclass
class FusionSpec:
    target_name: str
    context_names: tuple
    include_target_conv: bool = True
    context_channels: int | None = None  # defaults to target_channels // 2
    extra: dict = field(default_factory=dict)


def deconv_geometry(target_hw: int, context_hw: int) -> int:
    """Kernel == stride: the smallest power of two >= ceil(target / context)."""
    ratio = math.ceil(target_hw / context_hw)
    return 1 << max(0, (ratio - 1).bit_length())


class _ContextBranch(Module):
    def __init__(self, cin, cout, k, rng):
        super().__init__()
        # no bias: the batch-statistics BN that follows cancels it exactly
        self.deconv = ConvTranspose2d(cin, cout, k, stride=k, padding=0, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, target_hw):
        return F.relu(self.bn(self.deconv(x, target_hw)))


class FusionBlock(Module):
    """Target branch first, then one branch per context layer, concatenated on channels.

    With ``include_target_conv`` the target passes a 3x3 conv (channels and
    size preserved) before BN + ReLU; without it, the caller supplies an
    already-transformed target (e.g. attention output) that only gets BN + ReLU.
    """

    def __init__(self, spec: FusionSpec, pyramid_shapes: dict, rng=None):
        super().__init__()
        if not spec.context_names:
            raise ValueError("fusion needs at least one context layer")
        missing = [n for n in (spec.target_name, *spec.context_names) if n not in pyramid_shapes]
        if missing:
            raise KeyError(f"fusion layers not in pyramid: {missing}")
        tc, th, tw = pyramid_shapes[spec.target_name]
        half = spec.context_channels if spec.context_channels is not None else tc // 2
        self.spec = spec
        self.target_hw = (th, tw)
        self.target_channels = tc
        self.context_channels = half
        self.target_conv = Conv2d(tc, tc, 3, 1, 1, bias=False, rng=rng) if spec.include_target_conv else None
        self.target_bn = BatchNorm2d(tc)
        branches = []
        for name in spec.context_names:
            cc, ch, cw = pyramid_shapes[name]
            if ch > th or cw > tw:
                raise ValueError(f"context {name} ({ch}x{cw}) is shallower than target {spec.target_name} ({th}x{tw})")
            k = deconv_geometry(th, ch)
            branches.append(_ContextBranch(cc, half, k, rng))
        self.branches = branches

    @property
    def out_channels(self) -> int:
        return self.target_channels + self.context_channels * len(self.branches)

    def branch_outputs(self, pyramid, target: Tensor | None = None) -> list:
        missing = [n for n in (self.spec.target_name, *self.spec.context_names) if n not in pyramid]
        if missing:
            raise KeyError(f"pyramid is missing {missing}")
        t = pyramid[self.spec.target_name] if target is None else target
        if self.target_conv is not None:
            t = self.target_conv(t)
        outs = [F.relu(self.target_bn(t))]
        for name, branch in zip(self.spec.context_names, self.branches):
            outs.append(branch(pyramid[name], self.target_hw))
        return outs

    def forward(self, pyramid, target: Tensor | None = None) -> Tensor:
        return F.concat_channels(self.branch_outputs(pyramid, target))


def build_fusion(spec: FusionSpec, pyramid_shapes: dict, rng=None) -> FusionBlock:
    return FusionBlock(spec, pyramid_shapes, rng)


def fuse(block: FusionBlock, pyramid, target: Tensor | None = None) -> Tensor:
    return block(pyramid, target)
