import numpy as np
import pytest

from ctxssd.backbones import PYRAMID_CHANNELS, PYRAMID_NAMES, PYRAMID_SIZES
from ctxssd.fusion import FusionSpec, build_fusion, deconv_geometry, fuse
from ctxssd.nn import functional as F
from ctxssd.nn.tensor import Tensor

SSD_SHAPES = {n: (c, s, s) for n, c, s in zip(PYRAMID_NAMES, PYRAMID_CHANNELS, PYRAMID_SIZES)}


def random_pyramid(shapes, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return {n: Tensor(rng.standard_normal((batch, *s)).astype(np.float32)) for n, s in shapes.items()}


@pytest.mark.parametrize("target,ctx", [(38, 19), (38, 10), (19, 10), (19, 5), (10, 5), (7, 7), (9, 2)])
def test_deconv_geometry_rule(target, ctx):
    k = deconv_geometry(target, ctx)
    ratio = -(-target // ctx)
    assert k >= ratio and k & (k - 1) == 0 and (k == 1 or k // 2 < ratio)
    assert (ctx - 1) * k + k >= target  # raw output never needs padding


def test_table_of_deconv_geometries():
    assert [deconv_geometry(38, 19), deconv_geometry(38, 10), deconv_geometry(19, 5)] == [2, 4, 4]


@pytest.mark.parametrize("target,contexts,channels", [
    ("conv4_3", ("conv7", "conv8_2"), 512 + 2 * 256),
    ("conv7", ("conv8_2", "conv9_2"), 1024 + 2 * 512),
])
def test_ssd300_fusion_shapes_and_slice_decomposition(target, contexts, channels):
    block = build_fusion(FusionSpec(target, contexts), SSD_SHAPES, np.random.default_rng(0))
    pyr = random_pyramid(SSD_SHAPES)
    fused = fuse(block, pyr)
    size = SSD_SHAPES[target][1]
    assert block.out_channels == channels
    assert fused.shape == (1, channels, size, size)
    parts = block.branch_outputs(pyr)
    half = SSD_SHAPES[target][0] // 2
    assert [p.shape[1] for p in parts] == [SSD_SHAPES[target][0], half, half]
    start = 0
    for p in parts:
        assert np.array_equal(fused.data[:, start : start + p.shape[1]], p.data)
        start += p.shape[1]
    assert np.all(fused.data >= 0)


def test_single_equal_context_gives_one_and_a_half_channels():
    shapes = {"conv4_3": (8, 6, 6), "conv7": (8, 6, 6)}
    block = build_fusion(FusionSpec("conv4_3", ("conv7",)), shapes, np.random.default_rng(0))
    out = fuse(block, random_pyramid(shapes))
    assert out.shape == (1, 12, 6, 6)


def test_odd_target_channels_use_floor_half():
    shapes = {"conv4_3": (7, 5, 5), "conv7": (4, 3, 3)}
    block = build_fusion(FusionSpec("conv4_3", ("conv7",)), shapes, np.random.default_rng(0))
    assert block.out_channels == 7 + 3


@pytest.mark.parametrize("ts,cs", [((6, 6), (3, 3)), ((19, 19), (5, 5)), ((38, 38), (1, 1)), ((10, 10), (10, 10))])
def test_output_matches_target_size_for_any_pairing(ts, cs):
    shapes = {"conv4_3": (4, *ts), "conv7": (2, *cs)}
    block = build_fusion(FusionSpec("conv4_3", ("conv7",)), shapes, np.random.default_rng(1))
    assert fuse(block, random_pyramid(shapes)).shape[2:] == ts


def test_zero_context_branch_is_relu_of_bn_shift():
    shapes = {"conv4_3": (4, 6, 6), "conv7": (4, 3, 3)}
    block = build_fusion(FusionSpec("conv4_3", ("conv7",)), shapes, np.random.default_rng(0))
    block.branches[0].bn.beta.data[:] = [0.5, -0.5]
    pyr = random_pyramid(shapes)
    pyr["conv7"] = Tensor(np.zeros((1, 4, 3, 3), np.float32))
    ctx = block.branch_outputs(pyr)[1].data
    expected = np.maximum(block.branches[0].bn.beta.data, 0)[None, :, None, None]
    np.testing.assert_allclose(ctx, np.broadcast_to(expected, ctx.shape), atol=1e-6)


def test_gradient_reaches_every_deconv():
    block = build_fusion(FusionSpec("conv4_3", ("conv7", "conv8_2")), SSD_SHAPES, np.random.default_rng(0))
    pyr = random_pyramid({k: v for k, v in SSD_SHAPES.items() if k in ("conv4_3", "conv7", "conv8_2")}, batch=2)
    out = fuse(block, pyr)
    probe = np.random.default_rng(5).standard_normal(out.shape).astype(np.float32)
    (out * Tensor(probe)).sum().backward()
    for br in block.branches:
        assert np.linalg.norm(br.deconv.weight.grad) > 0
    assert np.linalg.norm(block.target_conv.weight.grad) > 0


def test_external_target_skips_conv():
    shapes = {"conv4_3": (4, 6, 6), "conv7": (4, 3, 3)}
    block = build_fusion(FusionSpec("conv4_3", ("conv7",), include_target_conv=False), shapes, np.random.default_rng(0))
    assert block.target_conv is None
    pyr = random_pyramid(shapes)
    other = Tensor(np.random.default_rng(9).standard_normal((1, 4, 6, 6)).astype(np.float32))
    first = block.branch_outputs(pyr, other)[0].data
    np.testing.assert_allclose(first, F.relu(block.target_bn(other)).data, atol=0)


def test_errors():
    with pytest.raises(ValueError, match="context"):
        build_fusion(FusionSpec("conv4_3", ()), SSD_SHAPES)
    with pytest.raises(ValueError, match="shallower"):
        build_fusion(FusionSpec("conv7", ("conv4_3",)), SSD_SHAPES)
    with pytest.raises(KeyError):
        build_fusion(FusionSpec("conv4_3", ("nope",)), SSD_SHAPES)
    block = build_fusion(FusionSpec("conv4_3", ("conv7",)), SSD_SHAPES)
    with pytest.raises(KeyError):
        fuse(block, {"conv4_3": Tensor(np.zeros((1, 512, 38, 38), np.float32))})
