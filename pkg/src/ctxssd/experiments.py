"""Desk-scale experiments: overfitting a tiny set, and the small-object trend between variants."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbones import BackboneSpec, normalize_images
from .data import Dataset, generate_synthetic_dataset, resize_sample
from .detector.model import VariantSpec, build_variant
from .evaluation import EvalReport, evaluate
from .nn.tensor import Tensor, no_grad
from .postprocess import PostprocessParams, postprocess
from .training import TrainSettings, train

# smallest configuration that overfits reliably within the time budget (see the decisions log)
SMOKE_BACKBONE = BackboneSpec("resnet18", width=0.125)
SMOKE_SETTINGS = TrainSettings(steps=2000, batch_size=2, lr=1e-3, optimizer="adam", weight_decay=0.0, bn_freeze=0.8)
SMOKE_MIX = (0.4, 0.4, 0.2)


def detect(model, dataset: Dataset, params: PostprocessParams | None = None, batch: int = 4) -> dict:
    """Run ``model`` over every image; returns ``{image_id: [Detection]}``."""
    size = model.spec.backbone.input_size
    was_training = model.training
    model.eval()
    dets = {}
    try:
        with no_grad():
            for i in range(0, len(dataset), batch):
                chunk = dataset.samples[i : i + batch]
                x = Tensor(normalize_images(np.stack([resize_sample(s, size)[0] for s in chunk])))
                loc, conf = model(x)
                for s, d in zip(chunk, postprocess(loc, conf, model.priors, params)):
                    dets[s.image_id] = d
    finally:
        model.train(was_training)
    return dets


def score(model, dataset: Dataset, params: PostprocessParams | None = None) -> EvalReport:
    gts = {s.image_id: s.objects for s in dataset.samples}
    return evaluate(detect(model, dataset, params), gts, dataset.class_names)


@dataclass
class OverfitResult:
    kind: str
    initial_loss: float
    final_loss: float
    report: EvalReport
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss


def overfit_smoke(kind: str, steps: int | None = None, images: int = 10, seed: int = 0,
                  backbone: BackboneSpec = SMOKE_BACKBONE, callback=None) -> OverfitResult:
    """Train ``kind`` on a fixed synthetic set and score it on the same images.

    The final loss is the mean over the last 20 steps, so a single lucky batch
    cannot pass for convergence.
    """
    ds = generate_synthetic_dataset(seed, images, SMOKE_MIX)
    model = build_variant(VariantSpec(kind, backbone, num_classes=len(ds.class_names) + 1),
                          np.random.default_rng(seed))
    settings = SMOKE_SETTINGS if steps is None else _with_steps(SMOKE_SETTINGS, steps)
    t0 = time.perf_counter()
    history = train(model, ds, settings, callback=callback)
    report = score(model, ds)
    seconds = time.perf_counter() - t0
    totals = [h[3] for h in history]
    return OverfitResult(kind, totals[0], float(np.mean(totals[-20:])), report, seconds)


def _with_steps(s: TrainSettings, steps: int) -> TrainSettings:
    from dataclasses import replace

    return replace(s, steps=steps)


def small_object_trend(seed: int, kinds=("ssd", "fa_ssd"), steps: int = 5000, train_count: int = 1000,
                       test_count: int = 200, size_mix=(0.6, 0.3, 0.1), backbone: BackboneSpec = SMOKE_BACKBONE,
                       callback=None) -> dict:
    """Identical training for each variant; returns ``{kind: EvalReport}`` on a held-out set."""
    train_ds = generate_synthetic_dataset(seed, train_count, size_mix)
    test_ds = generate_synthetic_dataset(seed + 10_000, test_count, size_mix)
    settings = TrainSettings(steps=steps, batch_size=4, lr=1e-3, optimizer="adam", weight_decay=0.0,
                             augment=True, seed=seed)
    out = {}
    for kind in kinds:
        model = build_variant(VariantSpec(kind, backbone, num_classes=len(train_ds.class_names) + 1),
                              np.random.default_rng(seed))
        train(model, train_ds, settings, callback=None if callback is None else (lambda s, t, k=kind: callback(k, s, t)))
        out[kind] = score(model, test_ds)
    return out
