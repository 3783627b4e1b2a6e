"""Procedural shapes dataset, its on-disk manifest format, and training-time augmentation.

Every sample is a pure function of ``(spec, index)``: sample ``i`` draws from
its own random substream, so any subset can be regenerated independently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .multibox import GroundTruth, iou_matrix
from .rng import substream

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
MANIFEST_FORMAT = "faenet-shapes"
MANIFEST_VERSION = 1

# (mean, std) of the fill per shape kind; the background is N(0.45, 0.1)
FILL = {"rectangle": (0.85, 0.04), "ellipse": (0.12, 0.04), "triangle": (0.6, 0.18)}
BACKGROUND = (0.45, 0.1)
# per-channel multipliers when rendering colour images
TINT = {"rectangle": (1.0, 0.55, 0.55), "ellipse": (0.55, 1.0, 0.55), "triangle": (0.55, 0.55, 1.0)}


class AnnotationError(ValueError):
    """A manifest record that cannot be loaded; the message names the line."""


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_images: int = 100
    image_size: int = 96
    classes: tuple[str, ...] = SHAPE_KINDS
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.15, 0.45)
    overlap_limit: float = 0.1
    channels: int = 1
    max_attempts: int = 100

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "objects_per_image", tuple(self.objects_per_image))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        lo, hi = self.size_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"size range must lie within (0, 1), got {self.size_range}")
        if not 0 <= self.overlap_limit < 1:
            raise ValueError(f"overlap limit must lie in [0, 1), got {self.overlap_limit}")
        a, b = self.objects_per_image
        if not 1 <= a <= b:
            raise ValueError(f"objects per image must be a range with 1 <= min <= max, got {self.objects_per_image}")
        if not self.classes or len(set(self.classes)) != len(self.classes) or not set(self.classes) <= set(SHAPE_KINDS):
            raise ValueError(f"classes must be distinct shape kinds from {SHAPE_KINDS}, got {self.classes}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.num_images < 0 or self.image_size < 8:
            raise ValueError(f"need num_images >= 0 and image_size >= 8, got {self.num_images}, {self.image_size}")

    @property
    def num_classes(self) -> int:
        """Foreground classes plus background."""
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Sample:
    image: np.ndarray  # (channels, H, W) float64 in [0, 1], multiples of 1/255
    annotations: list[GroundTruth]
    image_id: str = ""
    masks: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# rendering


def shape_mask(kind: str, height: int, width: int, box: tuple[int, int, int, int]) -> np.ndarray:
    """Boolean mask of a shape inscribed in the pixel box (x0, y0, x1, y1), sampled at pixel centres."""
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    if kind == "rectangle":
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    cx, cy, a, b = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
    if kind == "ellipse":
        return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    if kind == "triangle":
        # apex at the top centre, base along the bottom edge
        t = (ys - y0) / (y1 - y0)
        return (ys >= y0) & (ys < y1) & (np.abs(xs - cx) <= a * t)
    raise ValueError(f"unknown shape kind {kind!r}")


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel extent (x0, y0, x1, y1) of a non-empty mask; x1, y1 are exclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not len(rows):
        raise ValueError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _place(spec: SynthSpec, rng: np.random.Generator, kind: str, taken: np.ndarray, boxes: list):
    """Try to place one shape; returns (mask, pixel box) or None after ``max_attempts`` rejections.

    A placement is rejected if its mask touches an earlier shape (so every
    shape stays fully visible) or if its box IoU with any earlier box
    exceeds the overlap limit.
    """
    s = spec.image_size
    lo, hi = spec.size_range
    for _ in range(spec.max_attempts):
        w = int(round(rng.uniform(lo, hi) * s))
        h = int(round(rng.uniform(lo, hi) * s))
        w, h = max(w, 3), max(h, 3)
        x0 = int(rng.integers(0, s - w + 1))
        y0 = int(rng.integers(0, s - h + 1))
        mask = shape_mask(kind, s, s, (x0, y0, x0 + w, y0 + h))
        if not mask.any() or (mask & taken).any():
            continue
        box = tight_box(mask)
        if boxes and iou_matrix(np.array(box, dtype=np.float64), np.array(boxes, dtype=np.float64)).max() > spec.overlap_limit:
            continue
        return mask, box
    return None


def generate_sample(spec: SynthSpec, index: int) -> Sample:
    rng = substream(spec.seed, "sample", index)
    s = spec.image_size
    gray = rng.normal(BACKGROUND[0], BACKGROUND[1], (s, s))
    image = np.repeat(gray[None], spec.channels, axis=0)
    taken = np.zeros((s, s), dtype=bool)
    boxes, kinds, masks = [], [], []
    n = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    for _ in range(n):
        cls = int(rng.integers(len(spec.classes)))
        kind = spec.classes[cls]
        placed = _place(spec, rng, kind, taken, boxes)
        if placed is None:
            continue
        mask, box = placed
        mean, std = FILL[kind]
        fill = rng.normal(mean, std, (s, s))
        tint = TINT[kind] if spec.channels == 3 else (1.0,)
        for c, t in enumerate(tint):
            image[c][mask] = fill[mask] * t
        taken |= mask
        boxes.append(box)
        kinds.append(cls)
        masks.append(mask)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    anns = [GroundTruth(c + 1, (b[0] / s, b[1] / s, b[2] / s, b[3] / s)) for c, b in zip(kinds, boxes)]
    return Sample(image, anns, f"{index:06d}", masks)


def generate(spec: SynthSpec, start: int = 0, count: int | None = None) -> list[Sample]:
    """Samples ``start .. start + count - 1`` (default: the first ``num_images``)."""
    count = spec.num_images if count is None else count
    return [generate_sample(spec, i) for i in range(start, start + count)]


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


# ---------------------------------------------------------------------------
# manifest format


def _image_suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def write_dataset(samples: Sequence[Sample], root, class_names: Sequence[str]) -> Path:
    """Write images and ``manifest.jsonl`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "classes": list(class_names)})]
    for i, s in enumerate(samples):
        c, h, w = s.image.shape
        rel = f"images/{s.image_id or f'{i:06d}'}{_image_suffix(c)}"
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels[0] if c == 1 else np.moveaxis(pixels, 0, -1)).save(root / rel)
        objects = []
        for g in s.annotations:
            x0, y0, x1, y1 = g.box
            objects.append({
                "class": class_names[g.class_id - 1],
                "xmin": round(x0 * w, 6), "ymin": round(y0 * h, 6),
                "xmax": round(x1 * w, 6), "ymax": round(y1 * h, 6),
                "difficult": bool(g.difficult),
            })
        lines.append(json.dumps({"image": rel, "width": w, "height": h, "channels": c, "objects": objects}))
    path = root / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass(frozen=True)
class Record:
    """One manifest entry: where the image is and what it contains."""

    image_path: Path
    width: int
    height: int
    channels: int
    annotations: tuple[GroundTruth, ...]
    line: int

    @property
    def image_id(self) -> str:
        return self.image_path.stem


def _field(obj: dict, key: str, where: str, kind=(int, float)):
    if key not in obj:
        raise AnnotationError(f"{where}: missing field {key!r}")
    v = obj[key]
    if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise AnnotationError(f"{where}: field {key!r} has the wrong type ({type(v).__name__})")
    return v


def load_annotations(path) -> tuple[list[str], list[Record]]:
    """Parse a manifest into ``(class_names, records)`` with boxes normalised to [0, 1].

    Problems are reported as :class:`AnnotationError` naming the manifest line
    (and object index): malformed JSON, missing or mistyped fields, a missing
    image file, an unknown class name, or a box that is inverted or leaves
    the image.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise AnnotationError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}:1: malformed header: {e.msg}") from None
    if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
        raise AnnotationError(f"{path}:1: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} manifest")
    classes = list(header.get("classes", []))
    ids = {name: i + 1 for i, name in enumerate(classes)}
    records = []
    for n, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        where = f"{path}:{n}"
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"{where}: malformed record: {e.msg}") from None
        rel = _field(rec, "image", where, str)
        w = _field(rec, "width", where, int)
        h = _field(rec, "height", where, int)
        c = rec.get("channels", 1)
        image_path = path.parent / rel
        if not image_path.is_file():
            raise AnnotationError(f"{where}: image file {rel!r} not found")
        anns = []
        for j, obj in enumerate(_field(rec, "objects", where, list)):
            at = f"{where} object {j}"
            name = _field(obj, "class", at, str)
            if name not in ids:
                raise AnnotationError(f"{at}: unknown class {name!r} (known: {classes})")
            x0, y0, x1, y1 = (float(_field(obj, k, at)) for k in ("xmin", "ymin", "xmax", "ymax"))
            if not (x0 < x1 and y0 < y1):
                raise AnnotationError(f"{at}: inverted box xmin={x0} ymin={y0} xmax={x1} ymax={y1}")
            if not (0 <= x0 and 0 <= y0 and x1 <= w and y1 <= h):
                raise AnnotationError(f"{at}: box ({x0}, {y0}, {x1}, {y1}) outside the {w}x{h} image")
            anns.append(GroundTruth(ids[name], (x0 / w, y0 / h, x1 / w, y1 / h), bool(obj.get("difficult", False))))
        records.append(Record(image_path, w, h, c, tuple(anns), n))
    return classes, records


def load_image(record: Record) -> np.ndarray:
    """(channels, H, W) float64 in [0, 1]."""
    with Image.open(record.image_path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    if arr.shape != (record.channels, record.height, record.width):
        raise AnnotationError(
            f"line {record.line}: image is {arr.shape}, manifest says {(record.channels, record.height, record.width)}"
        )
    return arr


def load_dataset(path) -> tuple[list[str], list[Sample]]:
    classes, records = load_annotations(path)
    return classes, [Sample(load_image(r), list(r.annotations), r.image_id) for r in records]


# ---------------------------------------------------------------------------
# augmentation


def hflip(sample: Sample) -> Sample:
    anns = [replace(g, box=(1.0 - g.box[2], g.box[1], 1.0 - g.box[0], g.box[3])) for g in sample.annotations]
    masks = None if sample.masks is None else [m[:, ::-1].copy() for m in sample.masks]
    return Sample(sample.image[:, :, ::-1].copy(), anns, sample.image_id, masks)


def expand_crop(sample: Sample, rng: np.random.Generator, max_expand: float = 1.5, attempts: int = 20) -> Sample:
    """Paste the image at a random offset on a mean-filled canvas up to ``max_expand`` times
    larger, then crop a window of the original size.

    The net effect is an integer translation without resizing.  Objects whose
    box centre leaves the window are dropped, the rest are clipped; a window
    that would keep no object is redrawn, and after ``attempts`` failures the
    sample is returned unchanged.
    """
    c, h, w = sample.image.shape
    ratio = rng.uniform(1.0, max_expand)
    eh, ew = int(h * ratio), int(w * ratio)
    for _ in range(attempts):
        oy, ox = int(rng.integers(0, eh - h + 1)), int(rng.integers(0, ew - w + 1))
        cy, cx = int(rng.integers(0, eh - h + 1)), int(rng.integers(0, ew - w + 1))
        dy, dx = oy - cy, ox - cx  # shift of the original image inside the output window
        kept = []
        for g in sample.annotations:
            x0, y0, x1, y1 = g.box[0] * w + dx, g.box[1] * h + dy, g.box[2] * w + dx, g.box[3] * h + dy
            mx, my = (x0 + x1) / 2, (y0 + y1) / 2
            if 0 <= mx < w and 0 <= my < h:
                box = (max(x0, 0.0) / w, max(y0, 0.0) / h, min(x1, w) / w, min(y1, h) / h)
                kept.append(replace(g, box=box))
        if not kept:
            continue
        canvas = np.broadcast_to(sample.image.mean(axis=(1, 2), keepdims=True), (c, eh, ew)).copy()
        canvas[:, oy:oy + h, ox:ox + w] = sample.image
        return Sample(canvas[:, cy:cy + h, cx:cx + w].copy(), kept, sample.image_id)
    return sample


def photometric(sample: Sample, rng: np.random.Generator, brightness: float = 0.1,
                contrast: tuple[float, float] = (0.8, 1.2)) -> Sample:
    """Random contrast about the image mean plus a brightness shift, clipped to [0, 1]."""
    img = sample.image
    mean = img.mean()
    out = (img - mean) * rng.uniform(*contrast) + mean + rng.uniform(-brightness, brightness)
    return Sample(np.clip(out, 0.0, 1.0), list(sample.annotations), sample.image_id, sample.masks)


def augment(sample: Sample, seed, flip_p: float = 0.5, expand_p: float = 0.5, jitter: bool = True) -> Sample:
    """Flip, expand-and-crop, then photometric jitter.

    ``seed`` is an int or a Generator; the result is a pure function of the
    sample and the seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "augment")
    out = sample
    if rng.random() < flip_p:
        out = hflip(out)
    if rng.random() < expand_p:
        out = expand_crop(out, rng)
    if jitter:
        out = photometric(out, rng)
    return out
