"""VOC annotation I/O and the synthetic shapes dataset."""
from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .structures import GroundTruth

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
SHAPE_CLASSES = ("circle", "square", "triangle")

# side-length ranges (pixels) whose products stay inside each area bucket
_SIDE_RANGES = {"small": (10, 30), "medium": (34, 90), "large": (100, 190)}


class AnnotationError(ValueError):
    pass


def parse_voc_annotation(xml_text: str, class_names=VOC_CLASSES, image_size=None) -> list:
    """One :class:`GroundTruth` per ``<object>``; coordinates are taken verbatim."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed annotation XML: {exc}") from exc
    size = root.find("size")
    if size is not None:
        image_size = (int(float(size.findtext("width"))), int(float(size.findtext("height"))))
    lookup = {name: i for i, name in enumerate(class_names)}
    out = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name not in lookup:
            raise AnnotationError(f"unknown class name {name!r}")
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError(f"object {name!r} has no bndbox")
        try:
            box = tuple(float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"object {name!r} has a bad bndbox") from exc
        if image_size is None:
            raise AnnotationError("annotation lacks <size> and no image_size was given")
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        try:
            out.append(GroundTruth(lookup[name], box, image_size, difficult))
        except ValueError as exc:
            raise AnnotationError(str(exc)) from exc
    return out


def to_voc_xml(filename: str, image_size, objects, class_names) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(image_size[0])
    ET.SubElement(size, "height").text = str(image_size[1])
    ET.SubElement(size, "depth").text = "3"
    for gt in objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[gt.class_id]
        ET.SubElement(obj, "difficult").text = "1" if gt.difficult else "0"
        bb = ET.SubElement(obj, "bndbox")
        for key, v in zip(("xmin", "ymin", "xmax", "ymax"), gt.box):
            ET.SubElement(bb, key).text = str(int(v)) if float(v).is_integer() else repr(float(v))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (H, W, 3) uint8
    objects: list


@dataclass
class Dataset:
    samples: list
    class_names: tuple = SHAPE_CLASSES
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def image_ids(self):
        return [s.image_id for s in self.samples]


def _draw(image, cls, box, color):
    x1, y1, x2, y2 = box
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    if cls == 0:  # ellipse inscribed in the box
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask = ((yy - cy) / max(h / 2, 1)) ** 2 + ((xx - cx) / max(w / 2, 1)) ** 2 <= 1.0
    elif cls == 1:
        mask = np.ones((h, w), bool)
    else:  # apex at top centre, base on the bottom edge
        frac = (yy + 1) / h
        half = frac * w / 2
        mask = np.abs(xx - (w - 1) / 2) <= half
    region = image[y1:y2, x1:x2]
    region[mask] = color


def generate_synthetic_dataset(seed: int, count: int, size_mix=(1 / 3, 1 / 3, 1 / 3),
                               image_size: int = 300, max_objects: int = 6) -> Dataset:
    """Colored circles, squares and triangles on noisy backgrounds.

    ``size_mix`` gives the probability of drawing a small / medium / large
    object.  Boxes are exact: each shape touches the edges of its box.
    """
    mix = np.asarray(size_mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0, atol=1e-6):
        raise ValueError(f"size_mix must be 3 non-negative fractions summing to 1, got {tuple(size_mix)}")
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    buckets = ("small", "medium", "large")
    samples = []
    for idx in range(count):
        base = rng.integers(40, 200)
        img = np.clip(base + rng.normal(0, 18, (image_size, image_size, 3)), 0, 255).astype(np.uint8)
        n_obj = int(rng.integers(1, max_objects + 1))
        objects, boxes = [], []
        for _ in range(n_obj):
            bucket = buckets[rng.choice(3, p=mix)]
            lo, hi = _SIDE_RANGES[bucket]
            for _attempt in range(20):
                w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
                x1 = int(rng.integers(0, image_size - w + 1))
                y1 = int(rng.integers(0, image_size - h + 1))
                box = (x1, y1, x1 + w, y1 + h)
                if all(_overlap_frac(box, b) < 0.1 for b in boxes):
                    break
            else:
                continue
            cls = int(rng.integers(0, len(SHAPE_CLASSES)))
            color = _contrasting_color(rng, base)
            _draw(img, cls, box, color)
            boxes.append(box)
            objects.append(GroundTruth(cls, box, (image_size, image_size)))
        samples.append(Sample(f"{seed:04d}_{idx:06d}", img, objects))
    return Dataset(samples, SHAPE_CLASSES, {"seed": seed, "size_mix": tuple(float(m) for m in mix)})


def _overlap_frac(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def _contrasting_color(rng, base):
    while True:
        color = rng.integers(0, 256, size=3)
        if np.abs(color.astype(int) - int(base)).max() > 80:
            return color.astype(np.uint8)


# ---------------------------------------------------------------------------
# VOC directory layout
# ---------------------------------------------------------------------------

def write_voc_dataset(root, dataset: Dataset, split: str = "trainval") -> Path:
    from PIL import Image

    root = Path(root)
    for sub in ("JPEGImages", "Annotations", "ImageSets/Main"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        fname = f"{s.image_id}.png"
        Image.fromarray(s.image).save(root / "JPEGImages" / fname, optimize=False)
        h, w = s.image.shape[:2]
        xml = to_voc_xml(fname, (w, h), s.objects, dataset.class_names)
        (root / "Annotations" / f"{s.image_id}.xml").write_text(xml)
    (root / "ImageSets" / "Main" / f"{split}.txt").write_text("".join(f"{i}\n" for i in dataset.image_ids))
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in dataset.class_names))
    return root


def read_voc_dataset(root, split: str = "trainval", class_names=None) -> Dataset:
    from PIL import Image

    root = Path(root)
    if class_names is None:
        cfile = root / "classes.txt"
        class_names = tuple(cfile.read_text().split()) if cfile.exists() else VOC_CLASSES
    ids_file = root / "ImageSets" / "Main" / f"{split}.txt"
    if not ids_file.exists():
        raise FileNotFoundError(f"missing split file {ids_file}")
    samples = []
    for image_id in ids_file.read_text().split():
        xml = (root / "Annotations" / f"{image_id}.xml").read_text()
        img_path = _find_image(root / "JPEGImages", image_id)
        image = np.asarray(Image.open(img_path).convert("RGB"))
        objects = parse_voc_annotation(xml, class_names, (image.shape[1], image.shape[0]))
        samples.append(Sample(image_id, image, objects))
    return Dataset(samples, tuple(class_names), {"root": os.fspath(root), "split": split})


def _find_image(folder: Path, image_id: str) -> Path:
    for ext in (".png", ".jpg", ".jpeg"):
        p = folder / f"{image_id}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image for {image_id} in {folder}")


def resize_sample(sample: Sample, size: int = 300) -> tuple:
    """Resize to ``size`` x ``size``; returns (image, normalised gt boxes, labels)."""
    from PIL import Image

    img = sample.image
    if img.shape[:2] != (size, size):
        img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    boxes = np.array([g.normalized for g in sample.objects], dtype=np.float64).reshape(-1, 4)
    labels = np.array([g.class_id for g in sample.objects], dtype=np.int64)
    return img, boxes, labels


def augment(image: np.ndarray, boxes: np.ndarray, rng: np.random.Generator, crop_prob: float = 0.5):
    """Random horizontal flip and random crop (keeping box centres inside the crop).

    Boxes are normalised corner form; returns the (unresized) image and boxes.
    """
    h, w = image.shape[:2]
    boxes = boxes.copy()
    if rng.random() < 0.5:
        image = image[:, ::-1]
        boxes[:, [0, 2]] = 1.0 - boxes[:, [2, 0]]
    if len(boxes) and rng.random() < crop_prob:
        scale = rng.uniform(0.6, 1.0)
        cw, ch = int(w * scale), int(h * scale)
        x0, y0 = int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))
        centers = (boxes[:, :2] + boxes[:, 2:]) / 2 * [w, h]
        keep = (
            (centers[:, 0] > x0) & (centers[:, 0] < x0 + cw) & (centers[:, 1] > y0) & (centers[:, 1] < y0 + ch)
        )
        if keep.any():
            image = image[y0 : y0 + ch, x0 : x0 + cw]
            px = boxes * [w, h, w, h] - [x0, y0, x0, y0]
            px = np.clip(px, 0, [cw, ch, cw, ch])
            boxes = px / [cw, ch, cw, ch]
            return np.ascontiguousarray(image), boxes, keep
    return np.ascontiguousarray(image), boxes, np.ones(len(boxes), bool)
