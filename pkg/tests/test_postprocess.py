import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxssd.backbones import BackboneSpec
from ctxssd.boxes import center_to_corner, decode
from ctxssd.detector import VariantSpec, build_variant, generate_priors
from ctxssd.postprocess import PostprocessParams, TimingReport, nms, nms_indices, postprocess, profile
from ctxssd.structures import Detection
from oracles import brute_nms, random_nms_instance


def test_nms_matches_brute_force_on_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        boxes, scores = random_nms_instance(rng, n)
        thr = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
        assert nms_indices(boxes, scores, thr).tolist() == brute_nms(boxes.tolist(), scores.tolist(), thr)


def test_nms_examples():
    d = Detection(0, 0.9, (0.1, 0.1, 0.4, 0.4))
    assert nms([d]) == [d]
    assert nms([]) == []
    e = Detection(0, 0.8, d.box)
    assert nms([e, d], 0.45) == [d]


def test_nms_tie_keeps_lower_index():
    boxes = np.array([[0, 0, 1, 1], [0, 0, 1, 1.0]])
    assert nms_indices(boxes, np.array([0.5, 0.5]), 0.45).tolist() == [0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 20), st.floats(0.1, 0.9))
def test_nms_idempotent_and_score_ordered(seed, n, thr):
    boxes, scores = random_nms_instance(np.random.default_rng(seed), n)
    dets = [Detection(0, float(s), tuple(b)) for b, s in zip(boxes, scores)]
    once = nms(dets, thr)
    assert nms(once, thr) == once
    assert all(a.score >= b.score for a, b in zip(once, once[1:]))


def test_decode_zero_offsets_gives_priors_and_clips():
    pri = generate_priors().boxes
    np.testing.assert_allclose(decode(np.zeros_like(pri), pri), np.clip(center_to_corner(pri), 0, 1))
    far = decode(np.full((5, 4), 40.0), pri[:5])
    assert np.all((far >= 0) & (far <= 1))


def _logits(num_priors, num_classes, hot=None):
    conf = np.zeros((1, num_priors, num_classes))
    conf[..., 0] = 20.0
    if hot is not None:
        k, c = hot
        conf[0, k] = 0.0
        conf[0, k, c] = 20.0
    return conf


def test_postprocess_background_only_is_empty():
    pri = generate_priors()
    assert postprocess(np.zeros((1, pri.total, 4)), _logits(pri.total, 5), pri) == [[]]


def test_postprocess_one_strong_prior_gives_one_detection():
    pri = generate_priors()
    dets = postprocess(np.zeros((1, pri.total, 4)), _logits(pri.total, 5, hot=(6000, 3)), pri)[0]
    assert len(dets) == 1 and dets[0].class_id == 2
    np.testing.assert_allclose(dets[0].box, np.clip(center_to_corner(pri.boxes[6000]), 0, 1))


def test_postprocess_respects_max_per_image():
    pri = generate_priors()
    rng = np.random.default_rng(0)
    loc, conf = rng.standard_normal((2, pri.total, 4)), rng.standard_normal((2, pri.total, 21))
    for cap in (1, 7, 200):
        out = postprocess(loc, conf, pri, PostprocessParams(max_per_image=cap))
        assert all(len(d) <= cap for d in out)
        for d in out:
            assert all(a.score >= b.score for a, b in zip(d, d[1:]))


@pytest.fixture(scope="module")
def tiny_model():
    return build_variant(VariantSpec("ssd", BackboneSpec("resnet18", width=0.0625), 4), np.random.default_rng(0))


def test_profile_report(tiny_model):
    imgs = np.zeros((1, 3, 300, 300), np.float32)
    rep = profile(tiny_model, imgs, warmup=1, runs=3)
    assert rep.fps == pytest.approx(1000.0 / rep.total_ms)
    assert abs(rep.overhead_ms) <= 0.5
    assert (rep.warmup, rep.runs, rep.batch_size) == (1, 3, 1)
    header = rep.to_table().splitlines()[1]
    for col in ("Total time (ms)", "Forward time (ms)", "Post processing time (ms)", "FPS"):
        assert col in header
    assert tiny_model.training  # mode restored


def test_profile_is_stable(tiny_model):
    imgs = np.zeros((1, 3, 300, 300), np.float32)
    a = profile(tiny_model, imgs, warmup=1, runs=5).total_ms
    b = profile(tiny_model, imgs, warmup=1, runs=5).total_ms
    assert abs(a - b) / min(a, b) < 0.3


def test_profile_zero_runs(tiny_model):
    with pytest.raises(ValueError):
        profile(tiny_model, np.zeros((1, 3, 300, 300), np.float32), runs=0)


def test_timing_report_records():
    rep = TimingReport(10.0, 2.0, 12.1, 1000 / 12.1, 2, 5, 4, "fa_ssd")
    assert rep.overhead_ms == pytest.approx(0.1)
    assert "forward_ms=10.0000" in rep.to_records()
