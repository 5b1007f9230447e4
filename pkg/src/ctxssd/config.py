"""Run configuration stored as a flat ``key=value`` text file."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbones import BackboneSpec
from .detector.model import VariantSpec
from .postprocess import PostprocessParams
from .training import TrainSettings

OUTPUT_ROOT_ENV = "CTXSSD_OUTPUT_ROOT"


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _bool(text):
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


@dataclass
class RunConfig:
    variant: str = "ssd"
    backbone: str = "vgg16"
    width: float = 1.0
    backbone_bn: bool = False
    residual_form: bool = False
    num_classes: int = 0  # 0: derived from the dataset's class list
    seed: int = 0
    data_dir: str = ""
    split: str = "trainval"
    output_dir: str = "runs"
    synth_seed: int = 7
    synth_count: int = 200
    synth_size_mix: tuple = (0.6, 0.3, 0.1)
    train_steps: int = 2000
    train_batch_size: int = 4
    train_lr: float = 1e-3
    train_optimizer: str = "sgd"
    train_momentum: float = 0.9
    train_weight_decay: float = 5e-4
    train_milestones: tuple = (0.6, 0.8)
    train_checkpoint_every: int = 500
    train_augment: bool = False
    train_bn_freeze: float = 1.0
    post_conf_threshold: float = 0.01
    post_nms_iou: float = 0.45
    post_top_k: int = 200
    post_max_per_image: int = 200
    eval_iou_threshold: float = 0.5
    eval_ap_mode: str = "voc07_11point"
    profile_warmup: int = 2
    profile_runs: int = 5
    profile_batch: int = 1
    extra: dict = field(default_factory=dict)

    # -- conversion ------------------------------------------------------
    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls) if f.name != "extra"]

    def set(self, key: str, value) -> None:
        key = key.strip().replace(".", "_").replace("-", "_")
        if key not in self.keys():
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(self, key)
        if isinstance(value, str):
            if isinstance(current, bool):
                value = _bool(value)
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            elif isinstance(current, tuple):
                value = _floats(value)
        setattr(self, key, value)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in self.keys())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            k, v = line.split("=", 1)
            cfg.set(k, v.strip())
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    # -- derived objects -------------------------------------------------
    def variant_spec(self, num_classes: int | None = None) -> VariantSpec:
        n = self.num_classes or num_classes or 21
        bb = BackboneSpec(self.backbone, width=self.width, batch_norm=self.backbone_bn)
        return VariantSpec(self.variant, bb, num_classes=n, residual_form=self.residual_form)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.train_steps, batch_size=self.train_batch_size, lr=self.train_lr,
            optimizer=self.train_optimizer, momentum=self.train_momentum,
            weight_decay=self.train_weight_decay, milestones=self.train_milestones,
            augment=self.train_augment, bn_freeze=self.train_bn_freeze,
            checkpoint_every=self.train_checkpoint_every, seed=self.seed,
        )

    def postprocess_params(self) -> PostprocessParams:
        return PostprocessParams(self.post_conf_threshold, self.post_nms_iou, self.post_top_k, self.post_max_per_image)

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out
