"""Mini-batch training of a detector on an in-memory dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbones import normalize_images
from .data import Dataset, Sample, augment, resize_sample
from .detector.loss import multibox_loss
from .detector.matching import match_and_encode
from .detector.model import DetectorModel
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import BatchNorm2d
from .nn.optim import SGD, Adam, step_lr
from .nn.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.6, 0.8)
    neg_pos_ratio: int = 3
    iou_threshold: float = 0.5
    augment: bool = False
    bn_freeze: float = 1.0  # fraction of the run after which BN uses its running statistics
    checkpoint_every: int = 500
    seed: int = 0


def make_optimizer(model, s: TrainSettings):
    if s.optimizer == "sgd":
        return SGD(model.parameters(), s.lr, s.momentum, s.weight_decay)
    if s.optimizer == "adam":
        return Adam(model.parameters(), s.lr, weight_decay=s.weight_decay)
    raise ValueError(f"unknown optimizer {s.optimizer!r}")


class Batcher:
    """Deterministic epoch-shuffled batches with cached match targets."""

    def __init__(self, model: DetectorModel, dataset: Dataset, s: TrainSettings):
        self.model, self.dataset, self.s = model, dataset, s
        size = model.spec.backbone.input_size
        self.prepared = [resize_sample(sample, size) for sample in dataset.samples]
        self._cache = {}

    def _targets(self, boxes, labels):
        m = match_and_encode(boxes, labels, self.model.priors, self.s.iou_threshold)
        return m.loc_targets, m.conf_targets

    def indices(self, step: int) -> np.ndarray:
        n, bs = len(self.prepared), self.s.batch_size
        per_epoch = max(1, n // bs) if n >= bs else 1
        epoch, k = divmod(step, per_epoch)
        perm = np.random.default_rng((self.s.seed, epoch)).permutation(n)
        if n < bs:
            return np.resize(perm, bs)
        return perm[k * bs : (k + 1) * bs]

    def batch(self, step: int):
        size = self.model.spec.backbone.input_size
        imgs, locs, confs = [], [], []
        rng = np.random.default_rng((self.s.seed, step, 1))
        for i in self.indices(step):
            img, boxes, labels = self.prepared[i]
            if self.s.augment:
                img, boxes, keep = augment(img, boxes, rng)
                labels = labels[keep]
                boxes = boxes[keep]
                img, _, _ = resize_sample(Sample("", img, []), size)
                lt, ct = self._targets(boxes, labels)
            else:
                if i not in self._cache:
                    self._cache[i] = self._targets(boxes, labels)
                lt, ct = self._cache[i]
            imgs.append(img)
            locs.append(lt)
            confs.append(ct)
        x = normalize_images(np.stack(imgs))
        return Tensor(x), np.stack(locs), np.stack(confs)


def freeze_batchnorm(model) -> int:
    """Switch every BatchNorm2d to running statistics (affine params keep training); returns the count."""
    layers = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    for m in layers:
        m.training = False
    return len(layers)


def train_step(model, optimizer, x, loc_t, conf_t, neg_pos_ratio=3):
    optimizer.zero_grad()
    loc, conf = model(x)
    total, l_loss, c_loss = multibox_loss(loc, conf, loc_t, conf_t, neg_pos_ratio)
    if total.requires_grad:
        total.backward()
    optimizer.step()
    return float(total.data), float(l_loss.data), float(c_loss.data)


def save_training_state(path, model, optimizer, step: int) -> None:
    state = {f"model.{k}": v for k, v in model.state_dict().items()}
    state.update({f"optim.{k}": v for k, v in optimizer.state().items()})
    state["meta.step"] = np.array([step], dtype=np.int64)
    save_checkpoint(path, state)


def load_training_state(path, model, optimizer=None) -> int:
    state = load_checkpoint(path)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    if optimizer is not None:
        optimizer.load_state({k[6:]: v for k, v in state.items() if k.startswith("optim.")})
    return int(state["meta.step"][0]) if "meta.step" in state else 0


def train(model: DetectorModel, dataset: Dataset, s: TrainSettings, out_dir=None, resume=None,
          callback=None) -> list:
    """Run ``s.steps`` optimisation steps; returns [(step, loc, conf, total), ...] for this call.

    With ``out_dir`` the loss log (``loss_log.txt``, append-only) and periodic
    checkpoints (``checkpoint.bin``) are written there.  ``resume`` names a
    checkpoint to continue from.

    From step ``int(s.bn_freeze * s.steps)`` on, batch-norm layers normalise
    with their running statistics, so the last steps fit the weights to the
    statistics used at inference.  With small batches the running averages
    otherwise drift from every individual batch the model was fitted to.
    """
    optimizer = make_optimizer(model, s)
    start = 0
    if resume is not None:
        start = load_training_state(resume, model, optimizer)
        log.info("resumed from %s at step %d", resume, start)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    batcher = Batcher(model, dataset, s)
    model.train()
    freeze_at = int(s.bn_freeze * s.steps)
    history = []
    for step in range(start, s.steps):
        optimizer.lr = step_lr(s.lr, step, s.steps, s.milestones)
        if step == max(freeze_at, start) and freeze_at < s.steps:
            freeze_batchnorm(model)
        x, lt, ct = batcher.batch(step)
        total, l_loss, c_loss = train_step(model, optimizer, x, lt, ct, s.neg_pos_ratio)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        history.append((step, l_loss, c_loss, total))
        if out is not None:
            with open(out / "loss_log.txt", "a") as fh:
                fh.write(f"{step} {l_loss:.6f} {c_loss:.6f} {total:.6f}\n")
            if (step + 1) % s.checkpoint_every == 0 or step + 1 == s.steps:
                save_training_state(out / "checkpoint.bin", model, optimizer, step + 1)
        if callback is not None:
            callback(step, total)
    return history
