import numpy as np
import pytest

from ctxssd.backbones import (
    BACKBONE_KINDS, PYRAMID_CHANNELS, PYRAMID_NAMES, PYRAMID_SIZES, BackboneSpec, build_backbone,
    normalize_images,
)
from ctxssd.nn.tensor import Tensor, no_grad


def _pyramid(kind, x, width=1.0, seed=0):
    bb = build_backbone(BackboneSpec(kind, width=width), np.random.default_rng(seed)).eval()
    with no_grad():
        return bb(Tensor(x))


def test_kinds_cover_vgg_and_three_resnets():
    assert set(BACKBONE_KINDS) == {"vgg16", "resnet18", "resnet34", "resnet50"}


@pytest.mark.parametrize("kind", ["vgg16", "resnet18", "resnet34", "resnet50"])
def test_full_width_pyramid_contract(kind):
    x = np.random.default_rng(0).standard_normal((1, 3, 300, 300)).astype(np.float32)
    pyr = _pyramid(kind, x)
    assert tuple(pyr) == PYRAMID_NAMES
    assert [f.shape[2] for f in pyr.values()] == [38, 19, 10, 5, 3, 1] == list(PYRAMID_SIZES)
    assert [f.shape[1] for f in pyr.values()] == [512, 1024, 512, 256, 256, 256] == list(PYRAMID_CHANNELS)
    assert all(np.isfinite(f.data).all() for f in pyr.values())


def test_resnet_first_level_is_stage_two_output():
    bb = build_backbone(BackboneSpec("resnet18", width=0.125), np.random.default_rng(0)).eval()
    with no_grad():
        feats = bb.stage_outputs(Tensor(np.zeros((1, 3, 300, 300), np.float32)))
    assert feats[2].shape[2:] == (38, 38)  # stride-8 stage feeds conv4_3
    assert feats[3].shape[2:] == (19, 19)


def test_width_multiplier_scales_channels():
    spec = BackboneSpec("vgg16", width=0.25)
    assert spec.pyramid_channels() == (128, 256, 128, 64, 64, 64)


def test_zero_image_gives_finite_pyramid():
    pyr = _pyramid("vgg16", np.zeros((1, 3, 300, 300), np.float32), width=0.125)
    assert all(np.isfinite(f.data).all() for f in pyr.values())


@pytest.mark.parametrize("kind", ["vgg16", "resnet34"])
def test_identical_images_give_identical_features_and_repeat_runs_are_bit_identical(kind):
    img = np.random.default_rng(1).standard_normal((1, 3, 300, 300)).astype(np.float32)
    bb = build_backbone(BackboneSpec(kind, width=0.125), np.random.default_rng(0)).eval()
    with no_grad():
        a = bb(Tensor(np.concatenate([img, img])))
        b = bb(Tensor(img))
    for name in PYRAMID_NAMES:
        assert np.array_equal(a[name].data[0], a[name].data[1])
        assert np.array_equal(a[name].data[:1], b[name].data)


@pytest.mark.parametrize("kind", ["vgg16", "resnet18", "resnet50"])
def test_every_backbone_parameter_receives_gradient(kind):
    bb = build_backbone(BackboneSpec(kind, width=0.125), np.random.default_rng(2))
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 300, 300)).astype(np.float32))
    pyr = bb(x)
    total = None
    for i, f in enumerate(pyr.values()):
        probe = np.random.default_rng(i).standard_normal(f.shape).astype(np.float32)
        term = (f * Tensor(probe)).sum()
        total = term if total is None else total + term
    total.backward()
    dead = [n for n, p in bb.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_errors():
    with pytest.raises(ValueError, match="kind"):
        build_backbone(BackboneSpec("alexnet"))
    with pytest.raises(ValueError, match="300"):
        build_backbone(BackboneSpec("vgg16", input_size=512))
    bb = build_backbone(BackboneSpec("resnet18", width=0.125))
    with pytest.raises(ValueError):
        bb(Tensor(np.zeros((1, 3, 200, 200), np.float32)))


def test_normalize_images_subtracts_channel_means():
    img = np.full((2, 4, 4, 3), 200, np.uint8)
    out = normalize_images(img)
    assert out.shape == (2, 3, 4, 4)
    np.testing.assert_allclose(out[0, :, 0, 0], [77.0, 83.0, 96.0])
