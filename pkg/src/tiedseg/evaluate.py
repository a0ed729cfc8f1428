"""Pixel-level inference, IoU scoring, activation profiles and heat maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tiedseg import layers as L
from tiedseg.data import Sample, center_crop, to_uint8, write_pnm
from tiedseg.errors import InputError
from tiedseg.model import StageNet
from tiedseg.trainer import label_accuracy


def _minmax(a: np.ndarray, axis) -> np.ndarray:
    lo = a.min(axis=axis, keepdims=True)
    rng = a.max(axis=axis, keepdims=True) - lo
    return np.where(rng > 0, (a - lo) / np.where(rng > 0, rng, 1.0), 0.0)


def masks_from_maps(maps: np.ndarray, task: str, tau: float = 0.5) -> np.ndarray:
    """Per-pixel class grid (n, h, w) from class maps at their own resolution."""
    if task == "binary":
        abnormal = _minmax(maps[:, 1], axis=(1, 2))
        return (abnormal > tau).astype(np.int64)
    return maps.argmax(axis=1)


def upscale(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour upscale of (n, ...) planes to (n, ..., h, w)."""
    rh, rw = L.expand_ratio(grid.shape[-2], grid.shape[-1], h, w)
    return np.repeat(np.repeat(grid, rh, axis=-2), rw, axis=-1)


def predict_mask(net: StageNet, images: np.ndarray, tau: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (class grid (n, H, W), heat maps (n, K, H, W), pooled scores)."""
    cfg = net.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.in_channels, *cfg.input_size):
        raise InputError(f"image shape {images.shape[1:]} does not match network input {(cfg.in_channels, *cfg.input_size)}")
    y, maps = net.forward(images)
    net.clear_cache()
    H, W = cfg.input_size
    grid = masks_from_maps(maps, cfg.task, tau)
    return upscale(grid, H, W), upscale(maps, H, W), y


# --------------------------------------------------------------------------
# IoU
# --------------------------------------------------------------------------


@dataclass
class SegResult:
    num_classes: int
    intersection: np.ndarray
    union: np.ndarray
    per_sample: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def per_class(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both grids."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def evaluated(self) -> np.ndarray:
        return self.union > 0

    @property
    def mean_iou(self) -> float:
        pc = self.per_class
        return float(np.nanmean(pc)) if np.any(self.evaluated) else float("nan")

    @property
    def mean_foreground_iou(self) -> float:
        pc = self.per_class[1:]
        return float(np.nanmean(pc)) if np.any(self.evaluated[1:]) else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "class", "intersection", "union", "iou"])
            for sid, inter, uni in self.per_sample:
                for c in range(self.num_classes):
                    if uni[c] > 0:
                        w.writerow([sid, c, int(inter[c]), int(uni[c]), f"{inter[c] / uni[c]:.6f}"])
            pc = self.per_class
            for c in range(self.num_classes):
                iou = "" if np.isnan(pc[c]) else f"{pc[c]:.6f}"
                w.writerow(["ALL", c, int(self.intersection[c]), int(self.union[c]), iou])
            w.writerow(["ALL", "mean", "", "", f"{self.mean_iou:.6f}"])
            w.writerow(["ALL", "mean_fg", "", "", f"{self.mean_foreground_iou:.6f}"])


def confusion_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != truth.shape:
        raise InputError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    pc = np.bincount(pred, minlength=num_classes)[:num_classes]
    tc = np.bincount(truth, minlength=num_classes)[:num_classes]
    inter = np.bincount(truth[pred == truth], minlength=num_classes)[:num_classes]
    return inter, pc + tc - inter


def iou(pred: np.ndarray, truth: np.ndarray, num_classes: int, sample_id: str = "") -> SegResult:
    inter, uni = confusion_counts(pred, truth, num_classes)
    return SegResult(num_classes, inter, uni, [(sample_id, inter, uni)])


class IoUAccumulator:
    """Dataset-wide counts, summed in sample order."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.rows: list[tuple[str, np.ndarray, np.ndarray]] = []

    def add(self, pred: np.ndarray, truth: np.ndarray, sample_id: str = "") -> None:
        inter, uni = confusion_counts(pred, truth, self.num_classes)
        self.inter += inter
        self.union += uni
        self.rows.append((sample_id, inter, uni))

    def result(self) -> SegResult:
        return SegResult(self.num_classes, self.inter.copy(), self.union.copy(), list(self.rows))


@dataclass
class EvalReport:
    seg: SegResult
    accuracy: float


def evaluate_dataset(net: StageNet, samples: Sequence[Sample], batch_size: int = 32, tau: float = 0.5) -> EvalReport:
    cfg = net.config
    H, W = cfg.input_size
    acc = IoUAccumulator(cfg.num_classes)
    correct = 0.0
    for start in range(0, len(samples), batch_size):
        batch = [s if s.image.shape[2:] == (H, W) else center_crop(s, H, W) for s in samples[start: start + batch_size]]
        images = np.concatenate([s.image for s in batch])
        grid, _, y = predict_mask(net, images, tau)
        t = np.stack([s.label for s in batch])
        correct += label_accuracy(y, t, cfg) * len(batch)
        for s, g in zip(batch, grid):
            if s.mask is None:
                raise InputError(f"sample {s.id} has no mask to evaluate against")
            acc.add(g, s.mask.astype(np.int64), s.id)
    return EvalReport(acc.result(), correct / max(len(samples), 1))


# --------------------------------------------------------------------------
# activation profiles
# --------------------------------------------------------------------------


@dataclass
class ActivationProfile:
    layer: str
    values: np.ndarray  # non-increasing, in [0, 1]
    k: int


def profile_from_activations(a: np.ndarray, layer: str, k: int) -> ActivationProfile:
    flat = np.sort(np.asarray(a, dtype=np.float64).ravel())[::-1][:k]
    lo, hi = flat[-1], flat[0]
    if hi > lo:
        vals = (flat - lo) / (hi - lo)
    else:
        vals = np.ones_like(flat)
    return ActivationProfile(layer, vals, k)


def topk_activation_profile(net: StageNet, image: np.ndarray, layer: str, k: int) -> ActivationProfile:
    """Top-``k`` activations of one layer's output, min-max normalized."""
    if k < 1:
        raise InputError("k must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    net.forward(image)
    net.clear_cache()
    if layer not in net.outputs:
        raise InputError(f"unknown layer {layer!r}; available: {sorted(net.outputs)}")
    return profile_from_activations(net.outputs[layer], layer, k)


def write_profiles_csv(path, profiles: Sequence[ActivationProfile]) -> None:
    n = max(len(p.values) for p in profiles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank"] + [p.layer for p in profiles])
        for r in range(n):
            w.writerow([r] + [f"{p.values[r]:.8f}" if r < len(p.values) else "" for p in profiles])


# --------------------------------------------------------------------------
# heat maps
# --------------------------------------------------------------------------


def heat_ramp(m: np.ndarray) -> np.ndarray:
    """Linear black -> red -> yellow ramp, (..., 3) in [0, 1]."""
    m = np.clip(m, 0.0, 1.0)
    r = np.clip(2 * m, 0.0, 1.0)
    g = np.clip(2 * m - 1, 0.0, 1.0)
    return np.stack([r, g, np.zeros_like(m)], axis=-1)


def blend_heatmap(heat: np.ndarray, gray: np.ndarray) -> np.ndarray:
    """Overlay; opacity is 0.5 * map value so a zero map leaves the image."""
    if heat.shape != gray.shape:
        raise InputError(f"heat map {heat.shape} and image {gray.shape} differ")
    alpha = 0.5 * np.clip(heat, 0.0, 1.0)[..., None]
    base = np.repeat(np.clip(gray, 0.0, 1.0)[..., None], 3, axis=-1)
    return (1 - alpha) * base + alpha * heat_ramp(heat)


def export_heatmap(heat: np.ndarray, image: np.ndarray, path) -> None:
    """Write a P6 overlay of a [0, 1] map on a grayscale (h, w) image."""
    write_pnm(path, to_uint8(blend_heatmap(np.asarray(heat), np.asarray(image))))


def normalize_heat(m: np.ndarray) -> np.ndarray:
    return _minmax(m, axis=None)

