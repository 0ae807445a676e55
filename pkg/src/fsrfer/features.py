"""Precomputed HR/LR feature banks for a frozen FER model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .backbone import FerModel, extract_features
from .data import LabeledImage, check_scale, downsample, upsample_to_canonical


@dataclass
class FeatureBank:
    """Features of one split: ``hr[i]`` and ``lr[s][i]`` belong to image ``i``."""

    hr: torch.Tensor
    labels: torch.Tensor
    lr: dict[int, torch.Tensor] = field(default_factory=dict)
    restored: dict[int, torch.Tensor] = field(default_factory=dict)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def scales(self) -> list[int]:
        return sorted(self.lr)

    def stream(self, scales: Sequence[int] | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """All scales pooled into one training stream: ``(lr, hr, labels)``."""
        scales = self.scales if scales is None else sorted(scales)
        lr = torch.cat([self.lr[s] for s in scales])
        idx = torch.arange(len(self)).repeat(len(scales))
        return lr, self.hr[idx], self.labels[idx]


def degrade(image: LabeledImage, scale: int) -> LabeledImage:
    """Bicubic x``scale`` downsample, then bicubic upsample back to the original size."""
    return upsample_to_canonical(downsample(image, scale), image.size)


def build_bank(fer: FerModel, images: Sequence[LabeledImage], scales: Sequence[int],
               batch_size: int = 64) -> FeatureBank:
    scales = sorted({check_scale(s) for s in scales})
    bank = FeatureBank(
        hr=extract_features(fer, images, batch_size),
        labels=torch.tensor([img.label for img in images], dtype=torch.long),
        ids=[img.id for img in images],
    )
    for s in scales:
        bank.lr[s] = extract_features(fer, [degrade(img, s) for img in images], batch_size)
    return bank


def add_restored(bank: FeatureBank, fer: FerModel, scale: int, images: Sequence[LabeledImage],
                 batch_size: int = 64) -> None:
    """Attach features of externally restored images (same order as ``bank.ids``)."""
    if len(images) != len(bank):
        raise ValueError(f"restored set has {len(images)} images, bank has {len(bank)}")
    bank.restored[check_scale(scale)] = extract_features(fer, images, batch_size)
