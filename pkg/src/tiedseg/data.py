"""Datasets: synthetic shapes, PNM image/mask files, labels, augmentation.

Images are 8-bit on disk and float64 in [0, 1] in memory; masks hold a class
index per pixel with 0 as background. Training code only ever touches
``Sample.image`` and ``Sample.label`` (see ``training_arrays``).
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tiedseg.errors import ConfigError, ImageFormatError, InputError
from tiedseg.tensor import DTYPE, make_rng

SHAPES = ("disk", "square", "triangle", "ring")


@dataclass
class Sample:
    image: np.ndarray  # (1, c, h, w) in [0, 1]
    label: np.ndarray  # (K,) of 0/1
    mask: np.ndarray | None = None  # (h, w) class indices, evaluation only
    id: str = ""


def make_label_vector(present_classes, task: str, num_classes: int) -> np.ndarray:
    """Image-level target; multi-label targets always carry the background bit."""
    present = sorted({int(c) for c in present_classes})
    for c in present:
        if not 0 <= c < num_classes:
            raise InputError(f"class index {c} outside 0..{num_classes - 1}")
    t = np.zeros(num_classes, dtype=DTYPE)
    if task == "binary":
        if not present:
            raise InputError("binary task needs exactly one class")
        if len(present) > 1:
            raise InputError(f"binary task takes one class, got {present}")
        t[present[0]] = 1.0
        return t
    if task != "multi-label":
        raise InputError(f"unknown task {task!r}")
    t[0] = 1.0
    t[present] = 1.0
    return t


def training_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack images and labels; the only data path into training."""
    images = np.concatenate([s.image for s in samples], axis=0)
    labels = np.stack([s.label for s in samples])
    return images, labels


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------


@dataclass
class SynthSpec:
    image_size: int = 96
    channels: int = 1
    shapes: list[str] = field(default_factory=lambda: ["disk", "square", "triangle"])
    task: str = "multi-label"
    objects_per_class: tuple[int, int] = (1, 2)
    scale: tuple[float, float] = (9.0, 18.0)
    p_present: float = 0.5
    background: float = 0.2
    intensity: tuple[float, float] = (0.6, 0.95)
    class_intensity: list[tuple[float, float]] | None = None
    noise: float = 0.05
    # centre distance as a fraction of the no-touch distance; below 1 shapes may overlap
    separation: float = 1.0
    count: int = 100
    seed: int = 0

    def __post_init__(self):
        self.objects_per_class = tuple(self.objects_per_class)
        self.scale = tuple(float(v) for v in self.scale)
        self.intensity = tuple(float(v) for v in self.intensity)
        if self.class_intensity is not None:
            self.class_intensity = [tuple(float(v) for v in band) for band in self.class_intensity]
            if len(self.class_intensity) != len(self.shapes):
                raise ConfigError("class_intensity needs one (lo, hi) band per shape")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}; choose from {SHAPES}")
        if self.task == "binary" and len(self.shapes) != 1:
            raise ConfigError("binary synthetic data uses exactly one (abnormal) shape")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if 2 * self.scale[1] + 2 > self.image_size:
            raise ConfigError(f"shape scale {self.scale[1]} too large for {self.image_size}px images")
        if not 0 < self.separation <= 1:
            raise ConfigError("separation must be in (0, 1]")
        if self.objects_per_class[0] < 1 or self.objects_per_class[1] < self.objects_per_class[0]:
            raise ConfigError("objects_per_class must be an increasing pair >= 1")

    @property
    def num_classes(self) -> int:
        return 2 if self.task == "binary" else len(self.shapes) + 1

    @classmethod
    def from_dict(cls, d) -> "SynthSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed synthetic spec: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def rasterize(shape: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Boolean footprint of a shape, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # upward equilateral triangle inscribed in the circle of radius r
        half = r * np.sqrt(3) / 2
        top, base = cy - r, cy + r / 2
        inside_y = (yy >= top) & (yy <= base)
        width = (yy - top) / (base - top) * half
        return inside_y & (np.abs(dx) <= width)
    raise ConfigError(f"unknown shape {shape!r}")


def shape_area(shape: str, r: float) -> float:
    """Continuous area of a shape of scale ``r``."""
    if shape == "disk":
        return np.pi * r * r
    if shape == "ring":
        return np.pi * r * r * (1 - 0.55**2)
    if shape == "square":
        return (2 * r) ** 2
    if shape == "triangle":
        return 3 * np.sqrt(3) / 4 * r * r
    raise ConfigError(f"unknown shape {shape!r}")


def _place(rng, placed, r, size, separation=1.0, tries=200):
    for _ in range(tries):
        cy = rng.uniform(r + 1, size - r - 2)
        cx = rng.uniform(r + 1, size - r - 2)
        if all((cy - py) ** 2 + (cx - px) ** 2 > (separation * (r + pr + 2)) ** 2 for py, px, pr in placed):
            return cy, cx
    return None


def _generate_one(spec: SynthSpec, rng: np.random.Generator, idx: int) -> Sample:
    size = spec.image_size
    n_shapes = len(spec.shapes)
    for _ in range(1000):
        if spec.task == "binary":
            present = [1] if rng.random() < spec.p_present else []
        else:
            present = [c + 1 for c in range(n_shapes) if rng.random() < spec.p_present]
        objects = []
        placed = []
        ok = True
        for cls in present:
            for _ in range(int(rng.integers(spec.objects_per_class[0], spec.objects_per_class[1] + 1))):
                r = rng.uniform(*spec.scale)
                pos = _place(rng, placed, r, size, spec.separation)
                if pos is None:
                    ok = False
                    break
                placed.append((pos[0], pos[1], r))
                objects.append((cls, pos[0], pos[1], r))
            if not ok:
                break
        if ok:
            break
    else:
        raise ConfigError(f"cannot place objects of radius {spec.scale} in a {size}px image; lower scale or separation")
    img = np.full((spec.channels, size, size), spec.background, dtype=DTYPE)
    mask = np.zeros((size, size), dtype=np.uint8)
    for cls, cy, cx, r in objects:
        shape = spec.shapes[cls - 1] if spec.task != "binary" else spec.shapes[0]
        fp = rasterize(shape, cy, cx, r, size)
        band = spec.intensity if spec.class_intensity is None else spec.class_intensity[cls - 1]
        value = rng.uniform(*band, size=(spec.channels, 1, 1)) if spec.channels == 3 else rng.uniform(*band)
        img = np.where(fp[None], value, img)
        mask[fp] = cls
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    # a class only counts as present if it survived rasterization
    drawn = sorted(set(np.unique(mask).tolist()) - {0})
    if spec.task == "binary":
        label = make_label_vector([1 if drawn else 0], "binary", 2)
    else:
        label = make_label_vector(drawn, "multi-label", spec.num_classes)
    return Sample(img[None], label, mask, f"img{idx:05d}")


def generate_synthetic(spec: SynthSpec) -> list[Sample]:
    """Deterministic dataset of shapes on a noisy background."""
    rng = make_rng(spec.seed)
    return [_generate_one(spec, rng, i) for i in range(spec.count)]


# --------------------------------------------------------------------------
# PNM files
# --------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file as uint8, shape (h, w) or (h, w, 3)."""
    buf = Path(path).read_bytes()
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM (magic {buf[:2]!r})", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    off = 2
    values = []
    for what in ("width", "height", "maxval"):
        m = _TOKEN.match(buf, off)
        if m is None or not m.group(1).isdigit():
            raise ImageFormatError(f"{path}: malformed header field {what}", off)
        values.append(int(m.group(1)))
        off = m.end()
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}", off)
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit images are supported (maxval {maxval})", off)
    if off >= len(buf) or not buf[off: off + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header", off)
    off += 1
    need = width * height * channels
    if len(buf) - off < need:
        raise ImageFormatError(f"{path}: truncated payload, {len(buf) - off} of {need} bytes", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return data.reshape(shape).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise InputError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise InputError(f"cannot write pixels of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Image as float64 in [0, 1] with shape (1, c, h, w)."""
    px = read_pnm(path).astype(DTYPE) / 255.0
    if px.ndim == 2:
        return px[None, None]
    return px.transpose(2, 0, 1)[None]


def save_image(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    write_pnm(path, to_uint8(img))


def load_mask(path) -> np.ndarray:
    px = read_pnm(path)
    if px.ndim != 2:
        raise ImageFormatError(f"{path}: masks must be P5 graymaps", 0)
    return px


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise InputError("mask class indices must fit in 8 bits")
    write_pnm(path, mask.astype(np.uint8))


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------


def write_dataset(root, samples: Sequence[Sample], spec: dict | None = None) -> None:
    """Layout: images/<id>.pgm|ppm, masks/<id>.pgm, labels.csv, spec.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "classes"])
        for s in samples:
            ext = "pgm" if s.image.shape[1] == 1 else "ppm"
            save_image(root / "images" / f"{s.id}.{ext}", s.image)
            if s.mask is not None:
                save_mask(root / "masks" / f"{s.id}.pgm", s.mask)
            w.writerow([s.id, ",".join(str(c) for c in np.flatnonzero(s.label))])
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec, indent=2) + "\n")


def read_dataset(root, task: str | None = None, num_classes: int | None = None, with_masks: bool = True) -> list[Sample]:
    """Load a dataset directory; ``labels.csv`` lists present class indices."""
    root = Path(root)
    spec = {}
    if (root / "spec.json").exists():
        spec = json.loads((root / "spec.json").read_text())
    if task is None:
        task = spec.get("task", "multi-label")
    if num_classes is None:
        if "shapes" in spec:
            num_classes = SynthSpec.from_dict(spec).num_classes
        else:
            raise ConfigError(f"{root}: num_classes unknown (no spec.json)")
    samples = []
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            classes = [int(c) for c in row["classes"].split(",") if c.strip()]
            if task == "multi-label":
                classes = [c for c in classes if c != 0]
            img_path = root / "images" / f"{sid}.pgm"
            if not img_path.exists():
                img_path = root / "images" / f"{sid}.ppm"
            mask = None
            mask_path = root / "masks" / f"{sid}.pgm"
            if with_masks and mask_path.exists():
                mask = load_mask(mask_path)
            samples.append(Sample(load_image(img_path), make_label_vector(classes, task, num_classes), mask, sid))
    return samples


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def crop(sample: Sample, top: int, left: int, h: int, w: int) -> Sample:
    img = sample.image[:, :, top: top + h, left: left + w]
    mask = None if sample.mask is None else sample.mask[top: top + h, left: left + w]
    return Sample(np.ascontiguousarray(img), sample.label.copy(), mask, sample.id)


def center_crop(sample: Sample, h: int, w: int) -> Sample:
    H, W = sample.image.shape[2:]
    if h > H or w > W:
        raise InputError(f"{sample.id}: crop {h}x{w} larger than image {H}x{W}")
    return crop(sample, (H - h) // 2, (W - w) // 2, h, w)


def mirror(sample: Sample) -> Sample:
    img = np.ascontiguousarray(sample.image[:, :, :, ::-1])
    mask = None if sample.mask is None else np.ascontiguousarray(sample.mask[:, ::-1])
    return Sample(img, sample.label.copy(), mask, sample.id)


def augment(
    sample: Sample,
    rng: np.random.Generator,
    crop_margin: int = 0,
    allow_mirror: bool = False,
    force_mirror: bool | None = None,
) -> Sample:
    """Random crop shrinking each side by ``crop_margin``, then optional mirror."""
    H, W = sample.image.shape[2:]
    if crop_margin < 0 or crop_margin >= min(H, W):
        raise InputError(f"{sample.id}: crop margin {crop_margin} invalid for {H}x{W} image")
    out = sample
    if crop_margin:
        top = int(rng.integers(0, crop_margin + 1))
        left = int(rng.integers(0, crop_margin + 1))
        out = crop(sample, top, left, H - crop_margin, W - crop_margin)
    flip = force_mirror if force_mirror is not None else (allow_mirror and rng.random() < 0.5)
    if flip:
        out = mirror(out)
    return out
