"""Fixed second-order FER model: conv extractor, covariance pooling, SPD layers, head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import NUM_CLASSES, LabeledImage
from .spd import FeatureTensor, bimap, covariance_pool, halfvec, logm_spd, qr_retract, reeig, sym

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite during training."""


@dataclass
class FerArch:
    in_channels: int = 3
    canonical: int = 100
    conv_channels: int = 64
    spd_dim: int = 32
    spd_layers: int = 1
    embed_dim: int = 128
    num_classes: int = NUM_CLASSES
    reeig_eps: float = 1e-4
    cov_reg: float = 1e-3
    cov_floor: float = 1e-5

    @property
    def vec_dim(self) -> int:
        return self.spd_dim * (self.spd_dim + 1) // 2

    def bimap_dims(self) -> list[int]:
        c, d, n = self.conv_channels, self.spd_dim, self.spd_layers
        return [round(c + (d - c) * i / n) for i in range(n + 1)]


class FerModel(nn.Module):
    """CovPool-style expression classifier.

    ``conv_extract`` -> ``covariance_pool`` -> (BiMap -> ReEig) x L -> LogEig
    gives the second-order feature; ``embed`` is the 128-d head and
    ``logits`` the 7-way classifier on top of it.
    """

    def __init__(self, arch: FerArch | None = None):
        super().__init__()
        self.arch = arch = arch or FerArch()
        c = arch.conv_channels
        half = max(c // 2, 1)
        # 100 -> 50 -> 25 -> 12 -> 12, two convs per stage
        def stage(cin, cout, stride, pad):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=pad, bias=False),
                nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            )
        self.stages = nn.Sequential(
            stage(arch.in_channels, half, 2, 1),
            stage(half, half, 2, 1),
            stage(half, c, 2, 0),
        )
        self.last = nn.Conv2d(c, c, 3, padding=1)
        dims = arch.bimap_dims()
        self.bimaps = nn.ParameterList([
            nn.Parameter(qr_retract(torch.randn(dims[i], dims[i + 1])))
            for i in range(arch.spd_layers)
        ])
        self.embedding = nn.Linear(arch.vec_dim, arch.embed_dim)
        self.classifier = nn.Linear(arch.embed_dim, arch.num_classes)
        self.frozen = False

    def conv_extract(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, C, H, W]`` canonical images -> ``[B, h, w, c]`` feature maps."""
        size = self.arch.canonical
        if images.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(images.shape[-2:])}")
        x = self.last(self.stages(images - 0.5))
        return x.permute(0, 2, 3, 1)

    def spd_features(self, images: torch.Tensor) -> torch.Tensor:
        """Post-LogEig feature matrices ``[B, d', d']``."""
        a = self.arch
        x = covariance_pool(self.conv_extract(images), a.cov_reg, a.cov_floor)
        for w in self.bimaps:
            x = reeig(sym(bimap(x, w)), a.reeig_eps)
        return sym(logm_spd(x))

    def embed(self, mats: torch.Tensor) -> torch.Tensor:
        vec = halfvec(mats)
        if vec.shape[-1] != self.arch.vec_dim:
            raise ValueError(f"feature length {vec.shape[-1]} != model's {self.arch.vec_dim}")
        return F.relu(self.embedding(vec))

    def logits(self, mats: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(mats))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.logits(self.spd_features(images))

    def freeze(self) -> "FerModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    @torch.no_grad()
    def retract(self) -> None:
        for w in self.bimaps:
            w.copy_(qr_retract(w))

    def orthonormality_error(self) -> float:
        errs = [torch.linalg.norm(w.T @ w - torch.eye(w.shape[1], dtype=w.dtype)).item()
                for w in self.bimaps]
        return max(errs, default=0.0)


def images_to_tensor(images: Sequence[LabeledImage]) -> torch.Tensor:
    arr = np.stack([img.pixels for img in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _one(image: LabeledImage) -> torch.Tensor:
    return images_to_tensor([image])


def conv_extract(model: FerModel, image: LabeledImage) -> torch.Tensor:
    """Feature map ``[h, w, c]`` of one canonical-size image."""
    with torch.no_grad():
        return model.conv_extract(_one(image))[0]


def extract_feature(model: FerModel, image: LabeledImage, provenance: str = "hr") -> FeatureTensor:
    with torch.no_grad():
        return FeatureTensor(model.spd_features(_one(image))[0], provenance)


@torch.no_grad()
def extract_features(model: FerModel, images: Sequence[LabeledImage], batch_size: int = 64) -> torch.Tensor:
    """Batched ``extract_feature``; returns ``[N, d', d']``."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.spd_features(images_to_tensor(images[i:i + batch_size])))
    if not out:
        d = model.arch.spd_dim
        return torch.zeros(0, d, d)
    return torch.cat(out)


def _mat(f: FeatureTensor | torch.Tensor) -> torch.Tensor:
    return f.mat if isinstance(f, FeatureTensor) else f


def head_embed(model: FerModel, f: FeatureTensor | torch.Tensor) -> torch.Tensor:
    """The 128-d embedding used by the perceptual loss."""
    return model.embed(_mat(f))


def classify(model: FerModel, f: FeatureTensor | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    logits = model.logits(_mat(f))
    return logits, torch.softmax(logits, dim=-1)


@dataclass
class FerTrainConfig:
    epochs: int = 30
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999
    batch_size: int = 32
    patience: int = 5
    augment: bool = True
    seed: int = 0


def augment_batch(x: torch.Tensor, gen: torch.Generator, shift: int = 6) -> torch.Tensor:
    """Random horizontal flips and integer translations (replicate padding)."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    padded = F.pad(x, (shift, shift, shift, shift), mode="replicate")
    offs = torch.randint(0, 2 * shift + 1, (n, 2), generator=gen)
    return torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs.tolist())])


@torch.no_grad()
def accuracy(model: FerModel, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 128) -> float:
    if len(labels) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(labels), batch_size):
        pred = model(images[i:i + batch_size]).argmax(-1)
        correct += (pred == labels[i:i + batch_size]).sum().item()
    return correct / len(labels)


def train_fer(train: Sequence[LabeledImage], val: Sequence[LabeledImage],
              arch: FerArch | None = None, cfg: FerTrainConfig | None = None,
              checkpoint: str | Path | None = None, history: list | None = None) -> FerModel:
    """Cross-entropy training on HR images with early stopping on val accuracy.

    BiMap weights are QR-retracted after every optimizer step. The best
    model (by val accuracy) is returned frozen and optionally saved.
    """
    cfg = cfg or FerTrainConfig()
    torch.manual_seed(cfg.seed)
    model = FerModel(arch)
    x_tr = images_to_tensor(train)
    y_tr = torch.tensor([img.label for img in train])
    x_va = images_to_tensor(val)
    y_va = torch.tensor([img.label for img in val])

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    gen = torch.Generator().manual_seed(cfg.seed)
    best, best_state, stale = -1.0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(y_tr), generator=gen)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = augment_batch(x_tr[idx], gen) if cfg.augment else x_tr[idx]
            loss = F.cross_entropy(model(xb), y_tr[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"FER loss became {loss.item()} at epoch {epoch}, batch {i // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.retract()
            total += loss.item() * len(idx)
        model.eval()
        acc = accuracy(model, x_va, y_va)
        record = {"epoch": epoch, "train_loss": total / max(len(y_tr), 1), "val_acc": acc}
        log.info("fer epoch %d loss %.4f val_acc %.4f", epoch, record["train_loss"], acc)
        if history is not None:
            history.append(record)
        if acc > best:
            best, stale = acc, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.freeze()
    if checkpoint is not None:
        save_fer(checkpoint, model, extra={"train": asdict(cfg), "val_acc": best})
    return model


def save_fer(path: str | Path, model: FerModel, extra: dict | None = None) -> None:
    meta = {"kind": "fer", "arch": asdict(model.arch)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_fer(path: str | Path) -> FerModel:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "fer":
        raise ValueError(f"{path} is not a FER checkpoint (kind={meta.get('kind')!r})")
    model = FerModel(FerArch(**meta["arch"]))
    model.load_state_dict(tensors)
    return model.freeze()

