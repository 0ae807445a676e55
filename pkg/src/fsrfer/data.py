"""Dataset ingestion and HR/LR pairing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .resample import bicubic_resample, output_size

log = logging.getLogger(__name__)

NUM_CLASSES = 7
SCALES = (2, 3, 4, 5, 6, 7, 8)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    """Raised for malformed dataset layouts or unreadable images."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # [H, W, C] float64 in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"{self.id}: expected [H, W, 1|3] pixels, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"{self.id}: image smaller than 8x8 ({px.shape[:2]})")
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"{self.id}: label {self.label} out of range")
        if not np.isfinite(px).all():
            raise ValueError(f"{self.id}: non-finite pixel values")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class PairedSample:
    hr: LabeledImage
    lr: LabeledImage
    scale: int


def check_scale(s: int) -> int:
    if isinstance(s, bool) or int(s) != s or s not in SCALES:
        raise ValueError(f"scale factor must be an integer in 2..8, got {s!r}")
    return int(s)


def class_names(root: str | Path, split: str = "train") -> list[str]:
    """Sorted class directory names of ``root/split``; index = label id."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory: {split_dir}")
    names = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if len(names) != NUM_CLASSES:
        raise DatasetError(
            f"{split_dir} has {len(names)} class directories, expected {NUM_CLASSES}")
    return names


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to float64 ``[H, W, 3]`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    q = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    Image.fromarray(q).save(path, format="PNG")


def to_canonical(pixels: np.ndarray, canonical: int) -> np.ndarray:
    """Center-crop to square, then bicubic-resize to ``canonical``."""
    h, w = pixels.shape[:2]
    if h != w:
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        pixels = pixels[top:top + side, left:left + side]
    if pixels.shape[0] != canonical:
        pixels = bicubic_resample(pixels, canonical, canonical)
    return pixels


def load_dataset(root: str | Path, split: str, canonical: int = 100) -> list[LabeledImage]:
    """Load ``root/split/<class>/*.{png,jpg}`` in lexicographic path order."""
    names = class_names(root, split)
    split_dir = Path(root) / split
    out = []
    for label, name in enumerate(names):
        files = sorted(p for p in (split_dir / name).iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            pixels = to_canonical(read_image(path), canonical)
            out.append(LabeledImage(pixels, label, f"{split}/{name}/{path.name}"))
    return out


def downsample(img: LabeledImage, scale: int) -> LabeledImage:
    h, w = img.size
    s = check_scale(scale)
    lr = bicubic_resample(img.pixels, output_size(h, s), output_size(w, s))
    return LabeledImage(lr, img.label, f"{img.id}@x{s}")


def make_pairs(dataset: Sequence[LabeledImage], scales: Iterable[int]) -> list[PairedSample]:
    """One PairedSample per (image, scale), image-major order."""
    scales = sorted({check_scale(s) for s in scales})
    if not scales:
        raise ValueError("make_pairs needs at least one scale")
    if dataset:
        sizes = {img.size for img in dataset}
        if len(sizes) != 1:
            raise ValueError(f"images are not all at one canonical size: {sorted(sizes)}")
    return [PairedSample(img, downsample(img, s), s) for img in dataset for s in scales]


def upsample_to_canonical(lr: LabeledImage, canonical: tuple[int, int]) -> LabeledImage:
    """Plain bicubic upscaling (no kernel widening) back to the canonical size."""
    h, w = canonical
    if lr.size[0] > h or lr.size[1] > w:
        raise ValueError(f"{lr.id}: {lr.size} is larger than canonical {canonical}")
    px = bicubic_resample(lr.pixels, h, w, antialias=False)
    return LabeledImage(px, lr.label, lr.id)


def write_classes(path: str | Path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def read_classes(path: str | Path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
