"""Synthetic dense-ellipse scenes, controlled annotation dropping, and the
on-disk formats (COCO-lite JSON, binary PGM images).

Scenes are grayscale: ellipses of varying intensity, some brighter and some
darker than the mid-gray background, painted with 4x supersampled coverage
and finished with Gaussian noise. Intensity contrast is the only object
cue, which keeps flakes distinguishable from background but mutually
similar — the regime where dropped annotations look just like kept ones.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box

BACKGROUND = 0.5
SUPERSAMPLE = 4


@dataclass(frozen=True)
class EllipseSpec:
    cy: float
    cx: float
    ay: float          # semi-axis along y before rotation
    ax: float          # semi-axis along x before rotation
    theta: float       # rotation, radians
    intensity: float   # absolute paint value in [0, 1]


@dataclass
class SceneSpec:
    height: int
    width: int
    objects: list[EllipseSpec]
    noise_sigma: float
    seed: int


def ellipse_bounds(e: EllipseSpec) -> Box:
    """Tight axis-aligned bounds of a rotated ellipse, in closed form."""
    c, s = math.cos(e.theta), math.sin(e.theta)
    half_x = math.sqrt((e.ax * c) ** 2 + (e.ay * s) ** 2)
    half_y = math.sqrt((e.ax * s) ** 2 + (e.ay * c) ** 2)
    return Box(e.cx - half_x, e.cy - half_y, e.cx + half_x, e.cy + half_y)


def _coverage(e: EllipseSpec, height: int, width: int) -> np.ndarray:
    """Per-pixel area fraction covered by the ellipse (supersampled)."""
    ss = SUPERSAMPLE
    b = ellipse_bounds(e)
    y0, y1 = max(0, int(b.y1) - 1), min(height, int(b.y2) + 2)
    x0, x1 = max(0, int(b.x1) - 1), min(width, int(b.x2) + 2)
    cov = np.zeros((height, width))
    if y0 >= y1 or x0 >= x1:
        return cov
    ys = (np.arange(y0 * ss, y1 * ss) + 0.5) / ss
    xs = (np.arange(x0 * ss, x1 * ss) + 0.5) / ss
    yy, xx = np.meshgrid(ys - e.cy, xs - e.cx, indexing="ij")
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = (xx * c + yy * s) / e.ax
    v = (-xx * s + yy * c) / e.ay
    inside = (u * u + v * v <= 1.0).astype(np.float64)
    cov[y0:y1, x0:x1] = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return cov


def render_noiseless(spec: SceneSpec) -> np.ndarray:
    """Paint ellipses over the background in list order; overlaps are opaque."""
    img = np.full((spec.height, spec.width), BACKGROUND)
    for e in spec.objects:
        cov = _coverage(e, spec.height, spec.width)
        img = img * (1.0 - cov) + e.intensity * cov
    return img


def synthesize_scene(spec: SceneSpec) -> tuple[np.ndarray, list[Box]]:
    """Render a scene and return (image (H, W, 1) float64 in [0, 1], tight
    boxes in object order). Deterministic per spec.seed."""
    if spec.height % 8 or spec.width % 8:
        raise ValueError("scene extents must be divisible by 8")
    rng = np.random.default_rng(spec.seed)
    img = render_noiseless(spec)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    boxes = [ellipse_bounds(e) for e in spec.objects]
    return img[..., None], boxes


def random_scene(height: int, width: int, seed: int,
                 n_objects_range: tuple[int, int] = (6, 14),
                 axes_range: tuple[float, float] = (5.0, 9.0),
                 contrast_range: tuple[float, float] = (0.18, 0.38),
                 noise_sigma: float = 0.04) -> SceneSpec:
    """Draw a random dense scene: each ellipse is randomly brighter or
    darker than the background by a contrast drawn from contrast_range."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_objects_range[0], n_objects_range[1] + 1))
    objects = []
    for _ in range(n):
        a1 = float(rng.uniform(*axes_range))
        a2 = float(rng.uniform(*axes_range))
        margin = max(a1, a2) + 1.0
        contrast = float(rng.uniform(*contrast_range))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        objects.append(EllipseSpec(
            cy=float(rng.uniform(margin, height - margin)),
            cx=float(rng.uniform(margin, width - margin)),
            ay=a1, ax=a2,
            theta=float(rng.uniform(0.0, math.pi)),
            intensity=float(np.clip(BACKGROUND + sign * contrast, 0.02, 0.98)),
        ))
    return SceneSpec(height=height, width=width, objects=objects,
                     noise_sigma=noise_sigma, seed=seed)


def drop_annotations(boxes: Sequence[Box], drop_rate: float, rng_seed: int
                     ) -> tuple[list[Box], list[Box]]:
    """Withhold each box independently with probability drop_rate,
    re-sampling until at least one box survives (training needs positives)."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    boxes = list(boxes)
    if not boxes:
        return [], []
    rng = np.random.default_rng(rng_seed)
    while True:
        mask = rng.random(len(boxes)) >= drop_rate
        if mask.any():
            break
    kept = [b for b, m in zip(boxes, mask) if m]
    dropped = [b for b, m in zip(boxes, mask) if not m]
    return kept, dropped


# -- benchmark datasets ---------------------------------------------------------

@dataclass
class ImageRecord:
    """One benchmark image with its split annotations. ``kept`` is what
    training sees; ``dropped`` is the withheld ground truth (sidecar only);
    the full set is their union."""
    image_id: int
    file_name: str
    image: np.ndarray          # (H, W, 1) float64 in [0, 1]
    kept: list[Box]
    dropped: list[Box]

    @property
    def full(self) -> list[Box]:
        return self.kept + self.dropped


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def generate_benchmark(n_images: int, image_size: int, drop_rate: float,
                       seed: int, **scene_kwargs) -> list[ImageRecord]:
    """Deterministic synthetic benchmark. Images go through the on-disk
    quantization grid so in-memory and reloaded datasets are identical."""
    records = []
    for i in range(n_images):
        spec = random_scene(image_size, image_size,
                            seed=_derived_seed(seed, i, 0), **scene_kwargs)
        img, boxes = synthesize_scene(spec)
        img = dequantize_image(quantize_image(img[..., 0]))[..., None]
        kept, dropped = drop_annotations(boxes, drop_rate,
                                         rng_seed=_derived_seed(seed, i, 1))
        records.append(ImageRecord(image_id=i, file_name=f"img_{i:06d}.pgm",
                                   image=img, kept=kept, dropped=dropped))
    return records


def _records_to_coco(records: Sequence[ImageRecord], which: str) -> CocoDataset:
    ds = CocoDataset()
    ann_id = 1
    for rec in records:
        h, w = rec.image.shape[0], rec.image.shape[1]
        ds.images.append(CocoImage(id=rec.image_id, file_name=rec.file_name,
                                   height=h, width=w))
        groups = {"train": [(rec.kept, False)],
                  "full": [(rec.kept, False), (rec.dropped, False)],
                  "dropped": [(rec.dropped, True)]}[which]
        for boxes, mark in groups:
            for b in boxes:
                ds.annotations.append(CocoAnnotation(
                    id=ann_id, image_id=rec.image_id, bbox=box_to_bbox(b),
                    dropped=mark))
                ann_id += 1
    return ds


def save_dataset(directory, records: Sequence[ImageRecord]):
    """Write PGM images plus three COCO-lite files: train.json (kept boxes
    only), full.json (complete ground truth for evaluation), and the
    dropped.json sidecar marking every withheld box."""
    import os
    directory = str(directory)
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    for rec in records:
        write_pgm(os.path.join(directory, "images", rec.file_name), rec.image)
    for name, which in (("train", "train"), ("full", "full"), ("dropped", "dropped")):
        write_cocolite(os.path.join(directory, f"{name}.json"),
                       _records_to_coco(records, which))


def load_dataset(directory) -> list[ImageRecord]:
    import os
    directory = str(directory)
    train = read_cocolite(os.path.join(directory, "train.json"))
    sidecar = read_cocolite(os.path.join(directory, "dropped.json"))
    records = []
    for im in train.images:
        img = dequantize_image(read_pgm(os.path.join(directory, "images", im.file_name)))
        records.append(ImageRecord(
            image_id=im.id, file_name=im.file_name, image=img[..., None],
            kept=train.boxes_for(im.id), dropped=sidecar.boxes_for(im.id)))
    return records


# -- PGM ---------------------------------------------------------------------

PGM_MAXVAL = 65535


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Map float [0, 1] grayscale to uint16 grid used on disk."""
    return np.round(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(np.uint16)


def dequantize_image(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / PGM_MAXVAL


def write_pgm(path, img: np.ndarray):
    """Binary P5 graymap, 16-bit big-endian samples."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 0]
    q = img.astype(np.uint16) if img.dtype == np.uint16 else quantize_image(img)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii"))
        f.write(q.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 graymap back as uint16 (H, W)."""
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    payload = raw[m.end():]
    if maxval != PGM_MAXVAL:
        raise ValueError(f"{path}: expected maxval {PGM_MAXVAL}, got {maxval}")
    img = np.frombuffer(payload, dtype=">u2", count=h * w).reshape(h, w)
    return img.astype(np.uint16)


# -- COCO-lite ----------------------------------------------------------------

class CocoFormatError(Exception):
    pass


@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    height: int
    width: int


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    bbox: tuple[float, float, float, float]  # x, y, width, height
    category_id: int = 1
    dropped: bool = False


@dataclass
class CocoDataset:
    images: list[CocoImage] = field(default_factory=list)
    annotations: list[CocoAnnotation] = field(default_factory=list)
    categories: list[dict] = field(default_factory=lambda: [{"id": 1, "name": "flake"}])

    def boxes_for(self, image_id: int) -> list[Box]:
        return [bbox_to_box(a.bbox) for a in self.annotations if a.image_id == image_id]


def box_to_bbox(b: Box) -> tuple[float, float, float, float]:
    return (b.x1, b.y1, b.width, b.height)


def bbox_to_box(bbox: Sequence[float]) -> Box:
    x, y, w, h = bbox
    return Box(x, y, x + w, y + h)


def write_cocolite(path, dataset: CocoDataset):
    doc = {
        "images": [{"id": im.id, "file_name": im.file_name,
                    "height": im.height, "width": im.width}
                   for im in dataset.images],
        "annotations": [
            {**{"id": a.id, "image_id": a.image_id, "bbox": list(a.bbox),
                "category_id": a.category_id},
             **({"dropped": True} if a.dropped else {})}
            for a in dataset.annotations],
        "categories": dataset.categories,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def read_cocolite(path) -> CocoDataset:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}: malformed JSON ({e})") from e
    images = []
    for rec in doc.get("images", []):
        images.append(CocoImage(id=int(rec["id"]), file_name=str(rec["file_name"]),
                                height=int(rec["height"]), width=int(rec["width"])))
    image_ids = {im.id for im in images}
    annotations = []
    for rec in doc.get("annotations", []):
        ann_id = rec.get("id")
        if int(rec["image_id"]) not in image_ids:
            raise CocoFormatError(
                f"annotation {ann_id}: dangling image_id {rec['image_id']}")
        bbox = rec["bbox"]
        if len(bbox) != 4 or bbox[2] < 0 or bbox[3] < 0:
            raise CocoFormatError(f"annotation {ann_id}: invalid bbox {bbox}")
        annotations.append(CocoAnnotation(
            id=int(ann_id), image_id=int(rec["image_id"]),
            bbox=tuple(float(v) for v in bbox),
            category_id=int(rec.get("category_id", 1)),
            dropped=bool(rec.get("dropped", False))))
    return CocoDataset(images=images, annotations=annotations,
                       categories=doc.get("categories",
                                          [{"id": 1, "name": "flake"}]))
