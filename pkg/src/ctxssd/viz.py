"""Attention-mask heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .backbones import normalize_images
from .nn.tensor import Tensor, no_grad


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    """Map mask values in (0, 1) linearly onto 0..255."""
    return np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def attention_heatmaps(model, image: np.ndarray, channels=(0,)) -> dict:
    """Run one image and collect per-channel masks.

    Returns ``{(layer, stage, channel): (raw_map, heatmap_uint8)}`` where the
    raw map keeps the attention resolution and the heatmap is upsampled
    (nearest) to the network input size.
    """
    from PIL import Image

    if not model.spec.uses_attention:
        raise ValueError(f"variant {model.spec.kind!r} has no attention modules")
    size = model.spec.backbone.input_size
    img = np.asarray(image)
    if img.shape[:2] != (size, size):
        img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model(Tensor(normalize_images(img[None])))
    finally:
        model.train(was_training)
    out = {}
    for layer, masks in model.attention_masks().items():
        for s, mask in enumerate(masks, start=1):
            n_ch = mask.shape[1]
            bad = [c for c in channels if not 0 <= c < n_ch]
            if bad:
                raise IndexError(f"channel(s) {bad} out of range for {layer}; valid range is 0..{n_ch - 1}")
            for c in channels:
                raw = mask[0, c]
                up = Image.fromarray(mask_to_uint8(raw)).resize((size, size), Image.NEAREST)
                out[(layer, s, c)] = (raw, np.asarray(up))
    return out


def heatmap_filename(layer: str, stage: int, channel: int, raw_hw) -> str:
    return f"attn_{layer}_stage{stage}_ch{channel:04d}_{raw_hw[0]}x{raw_hw[1]}.png"


def write_heatmaps(maps: dict, out_dir) -> list:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (layer, stage, channel), (raw, up) in sorted(maps.items()):
        path = out_dir / heatmap_filename(layer, stage, channel, raw.shape)
        Image.fromarray(up).save(path)
        paths.append(path)
    return paths
