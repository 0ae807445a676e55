"""Feature super-resolution GAN.

The generator maps LR features to SR features on the ``d x d`` LogEig
grid; the critic scores features with an unbounded scalar. Adversarial
terms follow the Wasserstein-divergence objective with the sign pairing::

    L_gan(G) = E[D(sr)]
    L_gan(D) = E[D(hr)] - E[D(sr)] + k * E[ ||grad D(x_hat)||_2 ** p ]

(``flip_sign`` swaps the first two to the more common convention). The
generator objective adds a perceptual term on the frozen FER head and a
feature-wise L2 term; every per-sample term can be scaled by
``w_i = (sigma - p_i) ** r`` where ``p_i`` is the FER's probability of the
true class for the current SR feature.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FerModel, TrainingError
from .checkpoint import load_checkpoint, save_checkpoint
from .features import FeatureBank
from .spd import FeatureTensor, halfvec, sym

log = logging.getLogger(__name__)


@dataclass
class FsrArch:
    feature_dim: int = 32
    channels: int = 32
    growth: int = 16
    blocks: int = 6
    res_scale: float = 0.2
    critic_channels: int = 32


@dataclass
class GanConfig:
    k: float = 2.0
    p: float = 6.0
    sigma: float = 1.5
    r: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    lr_halving_iters: list[int] = field(default_factory=lambda: [20000, 50000, 100000, 200000])
    batch_size: int = 32
    critic_steps: int = 1
    w_gan: float = 1.0
    w_perceptual: float = 1.0
    w_l2: float = 1.0
    reweight: bool = True
    flip_sign: bool = False
    iters: int = 400000
    val_every: int = 1000
    log_every: int = 10
    seed: int = 0

    def validate(self) -> "GanConfig":
        problems = []
        if not self.sigma > 1:
            problems.append(f"sigma must be > 1 (got {self.sigma})")
        if not self.r >= 1:
            problems.append(f"r must be >= 1 (got {self.r})")
        if not self.k > 0:
            problems.append(f"k must be > 0 (got {self.k})")
        if not self.p >= 1:
            problems.append(f"p must be >= 1 (got {self.p})")
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if self.batch_size < 1 or self.critic_steps < 1:
            problems.append("batch_size and critic_steps must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self


def lr_at(iteration: int, cfg: GanConfig) -> float:
    """Base lr halved once for every milestone already reached."""
    return cfg.lr * 0.5 ** sum(iteration >= m for m in cfg.lr_halving_iters)


class DenseUnit(nn.Module):
    """ESRGAN residual dense block (5 convs), no normalization."""

    def __init__(self, nf: int, gc: int, res_scale: float):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv2d(nf + i * gc, gc, 3, padding=1) for i in range(4)]
            + [nn.Conv2d(nf + 4 * gc, nf, 3, padding=1)])
        self.res_scale = res_scale

    def forward(self, x):
        feats = [x]
        for conv in self.convs[:-1]:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), 0.2))
        return x + self.res_scale * self.convs[-1](torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf: int, gc: int, res_scale: float):
        super().__init__()
        self.units = nn.Sequential(*[DenseUnit(nf, gc, res_scale) for _ in range(3)])
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.units(x)


class Generator(nn.Module):
    def __init__(self, arch: FsrArch):
        super().__init__()
        nf = arch.channels
        self.head = nn.Conv2d(1, nf, 3, padding=1)
        self.body = nn.Sequential(*[RRDB(nf, arch.growth, arch.res_scale) for _ in range(arch.blocks)])
        self.trunk = nn.Conv2d(nf, nf, 3, padding=1)
        self.hidden = nn.Conv2d(nf, nf, 3, padding=1)
        self.out = nn.Conv2d(nf, 1, 3, padding=1)
        # zero output projection: the untrained generator is the identity on features
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.head(x.unsqueeze(1))
        h = h + self.trunk(self.body(h))
        delta = self.out(F.leaky_relu(self.hidden(h), 0.2)).squeeze(1)
        return sym(x + delta)


class Critic(nn.Module):
    """ESRGAN-style discriminator without batch norm; unbounded scalar output."""

    def __init__(self, arch: FsrArch):
        super().__init__()
        nf = arch.critic_channels
        self.convs = nn.Sequential(
            nn.Conv2d(1, nf, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(nf, nf, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(nf, 2 * nf, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * nf, 2 * nf, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        side = arch.feature_dim // 2 // 2
        if side < 1:
            raise ValueError(f"critic needs feature_dim >= 4, got {arch.feature_dim}")
        self.fc = nn.Sequential(nn.Linear(2 * nf * side * side, 100), nn.LeakyReLU(0.2), nn.Linear(100, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.convs(x.unsqueeze(1)).flatten(1)).squeeze(-1)


class FsrModel(nn.Module):
    """Generator + critic, their Adam states and the iteration counter."""

    def __init__(self, arch: FsrArch | None = None, cfg: GanConfig | None = None):
        super().__init__()
        self.arch = arch or FsrArch()
        self.cfg = (cfg or GanConfig()).validate()
        self.generator = Generator(self.arch)
        self.critic = Critic(self.arch)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=self.cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=self.cfg.lr, betas=betas)
        self.iteration = 0
        self.rng = torch.Generator().manual_seed(self.cfg.seed)

    def check_shape(self, x: torch.Tensor) -> None:
        d = self.arch.feature_dim
        if x.shape[-2:] != (d, d):
            raise ValueError(f"feature shape {tuple(x.shape[-2:])} does not match model ({d}, {d})")


def _mat(f):
    return f.mat if isinstance(f, FeatureTensor) else f


def generator_forward(model: FsrModel, f_lr: FeatureTensor | torch.Tensor):
    """``F_sr = G(F_lr)``; accepts one FeatureTensor or a ``[B, d, d]`` batch."""
    x = _mat(f_lr)
    model.check_shape(x)
    if x.ndim == 2:
        return FeatureTensor(model.generator(x.unsqueeze(0))[0], "sr")
    return model.generator(x)


def critic_forward(model: FsrModel, f: FeatureTensor | torch.Tensor) -> torch.Tensor:
    x = _mat(f)
    model.check_shape(x)
    if x.ndim == 2:
        return model.critic(x.unsqueeze(0))[0]
    return model.critic(x)


def interpolate(f_hr, f_sr, alpha):
    """``alpha * hr + (1 - alpha) * sr``; ``alpha`` is a scalar or per-sample ``[B]``."""
    a, b = _mat(f_hr), _mat(f_sr)
    if a.shape != b.shape:
        raise ValueError(f"cannot interpolate {tuple(a.shape)} with {tuple(b.shape)}")
    alpha = torch.as_tensor(alpha, dtype=a.dtype)
    if alpha.ndim == 1:
        alpha = alpha[:, None, None]
    out = alpha * a + (1 - alpha) * b
    if isinstance(f_hr, FeatureTensor):
        return FeatureTensor(out, "sr")
    return out


def gradient_penalty(critic, x_hat: torch.Tensor, k: float, p: float) -> torch.Tensor:
    """``k * mean_i ||dD/dx_hat_i||_2 ** p``, kept differentiable for the critic step."""
    x_hat = x_hat.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(critic(x_hat).sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return k * norms.pow(p).mean()


def critic_loss(critic, f_hr: torch.Tensor, f_sr: torch.Tensor, cfg: GanConfig,
                alpha: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Critic objective (minimized) and its penalty term."""
    if f_hr.shape != f_sr.shape:
        raise ValueError("critic_loss needs equally sized hr and sr batches")
    sign = -1.0 if cfg.flip_sign else 1.0
    f_sr = f_sr.detach()
    penalty = gradient_penalty(critic, interpolate(f_hr, f_sr, alpha), cfg.k, cfg.p)
    loss = sign * (critic(f_hr).mean() - critic(f_sr).mean()) + penalty
    if not torch.isfinite(loss):
        raise TrainingError(f"critic loss is {loss.item()} (penalty {penalty.item()})")
    return loss, penalty


def generator_gan_terms(critic, f_sr: torch.Tensor, cfg: GanConfig) -> torch.Tensor:
    """Per-sample adversarial term of the generator."""
    sign = -1.0 if cfg.flip_sign else 1.0
    return sign * critic(f_sr)


def generator_gan_loss(critic, f_sr: torch.Tensor, cfg: GanConfig | None = None) -> torch.Tensor:
    if len(f_sr) == 0:
        raise ValueError("empty batch")
    return generator_gan_terms(critic, f_sr, cfg or GanConfig()).mean()


def perceptual_terms(fer: FerModel, f_sr: torch.Tensor, f_hr: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        target = fer.embed(f_hr)
    return (fer.embed(f_sr) - target).pow(2).sum(-1)


def perceptual_loss(fer: FerModel, f_sr: torch.Tensor, f_hr: torch.Tensor) -> torch.Tensor:
    return perceptual_terms(fer, f_sr, f_hr).mean()


def feature_l2_terms(f_sr: torch.Tensor, f_hr: torch.Tensor) -> torch.Tensor:
    return (halfvec(f_sr) - halfvec(f_hr)).pow(2).sum(-1)


def feature_l2_loss(f_sr: torch.Tensor, f_hr: torch.Tensor) -> torch.Tensor:
    return feature_l2_terms(f_sr, f_hr).mean()


@torch.no_grad()
def compute_reweights(fer: FerModel, f_sr: torch.Tensor, labels: torch.Tensor,
                      cfg: GanConfig) -> torch.Tensor:
    """``(sigma - p_i) ** r`` with ``p_i`` the FER probability of the true class."""
    probs = torch.softmax(fer.logits(f_sr.detach()), dim=-1)
    p = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if (p < 0).any() or (p > 1).any():
        raise RuntimeError("class probability outside [0, 1]")
    return (cfg.sigma - p).pow(cfg.r)


def total_generator_loss(terms: dict[str, torch.Tensor], weights: torch.Tensor,
                         cfg: GanConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted means of the per-sample ``gan``/``perceptual``/``l2`` terms, summed.

    Returns the total and the three weighted means it is made of.
    """
    w = weights.detach()
    means = {name: (w * terms[name]).mean() for name in ("gan", "perceptual", "l2")}
    total = cfg.w_gan * means["gan"] + cfg.w_perceptual * means["perceptual"] + cfg.w_l2 * means["l2"]
    return total, means


@dataclass
class LossBreakdown:
    iteration: int
    lr: float
    l_gan_g: float
    l_perceptual: float
    l_feat_l2: float
    l_total_g: float
    l_critic: float
    penalty: float
    per_sample_weights: list[float]

    def to_record(self) -> dict:
        return asdict(self)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def critic_step(fsr: FsrModel, f_lr: torch.Tensor, f_hr: torch.Tensor) -> tuple[float, float]:
    """One critic update against the current generator."""
    with torch.no_grad():
        f_sr = fsr.generator(f_lr)
    alpha = torch.rand(len(f_hr), generator=fsr.rng)
    loss, penalty = critic_loss(fsr.critic, f_hr, f_sr, fsr.cfg, alpha)
    fsr.opt_d.zero_grad()
    loss.backward()
    fsr.opt_d.step()
    return loss.item(), penalty.item()


def train_step(fsr: FsrModel, fer: FerModel, batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> LossBreakdown:
    """``critic_steps`` critic updates, then one generator update."""
    f_lr, f_hr, labels = batch
    cfg = fsr.cfg
    lr = lr_at(fsr.iteration, cfg)
    _set_lr(fsr.opt_g, lr)
    _set_lr(fsr.opt_d, lr)
    fsr.generator.train()
    fsr.critic.train()

    for _ in range(cfg.critic_steps):
        l_critic, penalty = critic_step(fsr, f_lr, f_hr)

    fsr.critic.requires_grad_(False)
    try:
        f_sr = fsr.generator(f_lr)
        terms = {
            "gan": generator_gan_terms(fsr.critic, f_sr, cfg),
            "perceptual": perceptual_terms(fer, f_sr, f_hr),
            "l2": feature_l2_terms(f_sr, f_hr),
        }
        if cfg.reweight:
            weights = compute_reweights(fer, f_sr, labels, cfg)
        else:
            weights = torch.ones(len(f_sr))
        total, means = total_generator_loss(terms, weights, cfg)
        if not torch.isfinite(total):
            raise TrainingError(f"generator loss is {total.item()} at iteration {fsr.iteration}")
        fsr.opt_g.zero_grad()
        total.backward()
        fsr.opt_g.step()
    finally:
        fsr.critic.requires_grad_(True)

    out = LossBreakdown(
        iteration=fsr.iteration, lr=lr,
        l_gan_g=means["gan"].item(), l_perceptual=means["perceptual"].item(),
        l_feat_l2=means["l2"].item(), l_total_g=total.item(),
        l_critic=l_critic, penalty=penalty,
        per_sample_weights=weights.tolist(),
    )
    fsr.iteration += 1
    return out


@torch.no_grad()
def scale_accuracies(fer: FerModel, bank: FeatureBank, fsr: FsrModel | None = None,
                     batch_size: int = 256) -> dict[int, float]:
    """Per-scale accuracy of LR features, optionally passed through the generator."""
    if fsr is not None:
        fsr.generator.eval()
    out = {}
    for s in bank.scales:
        correct = 0
        for i in range(0, len(bank), batch_size):
            x = bank.lr[s][i:i + batch_size]
            if fsr is not None:
                x = fsr.generator(x)
            correct += (fer.logits(x).argmax(-1) == bank.labels[i:i + batch_size]).sum().item()
        out[s] = correct / len(bank) if len(bank) else float("nan")
    return out


def train_fsr(fer: FerModel, train: FeatureBank, val: FeatureBank, arch: FsrArch | None = None,
              cfg: GanConfig | None = None, out_dir: str | Path | None = None,
              config_echo: dict | None = None) -> FsrModel:
    """Train a single generator on all scales pooled together.

    Validates every ``cfg.val_every`` iterations; the best model by mean
    per-scale val accuracy is written to ``out_dir/fsr.ckpt`` and returned.
    The JSON-lines training log goes to ``out_dir/train_log.jsonl``.
    """
    cfg = (cfg or GanConfig()).validate()
    if not fer.frozen:
        raise ValueError("the FER model must be frozen before FSR training")
    arch = arch or FsrArch(feature_dim=fer.arch.spd_dim)
    torch.manual_seed(cfg.seed)
    fsr = FsrModel(arch, cfg)
    f_lr, f_hr, labels = train.stream()
    pick = torch.Generator().manual_seed(cfg.seed + 1)

    out_dir = Path(out_dir) if out_dir is not None else None
    logf = open(out_dir / "train_log.jsonl", "a", encoding="utf-8") if out_dir else None
    t0 = time.time()
    best, best_state = -math.inf, None

    def emit(record):
        if logf:
            logf.write(json.dumps(record, sort_keys=True) + "\n")

    def validate():
        nonlocal best, best_state
        accs = scale_accuracies(fer, val, fsr)
        mean = sum(accs.values()) / len(accs)
        emit({"event": "val", "iteration": fsr.iteration, "val_acc": mean,
              "val_acc_by_scale": {str(s): a for s, a in accs.items()},
              "time": round(time.time() - t0, 3)})
        log.info("fsr iter %d val_acc %.4f", fsr.iteration, mean)
        if mean > best:
            best = mean
            best_state = {k: v.detach().clone() for k, v in fsr.state_dict().items()}

    try:
        validate()
        for _ in range(cfg.iters):
            idx = torch.randint(0, len(labels), (cfg.batch_size,), generator=pick)
            rec = train_step(fsr, fer, (f_lr[idx], f_hr[idx], labels[idx]))
            if rec.iteration % cfg.log_every == 0:
                emit({"event": "train", **rec.to_record(), "time": round(time.time() - t0, 3)})
            if fsr.iteration % cfg.val_every == 0:
                validate()
        if fsr.iteration % cfg.val_every:
            validate()
    finally:
        if logf:
            logf.close()

    last_iter = fsr.iteration
    if out_dir:
        save_fsr(out_dir / "fsr_last.ckpt", fsr, config_echo)
    fsr.load_state_dict(best_state)
    fsr.best_val_acc = best
    if out_dir:
        save_fsr(out_dir / "fsr.ckpt", fsr, {**(config_echo or {}), "best_val_acc": best,
                                             "trained_iters": last_iter})
    return fsr


def save_fsr(path: str | Path, fsr: FsrModel, extra: dict | None = None) -> None:
    tensors = {f"generator.{k}": v for k, v in fsr.generator.state_dict().items()}
    tensors.update({f"critic.{k}": v for k, v in fsr.critic.state_dict().items()})
    for prefix, opt in (("opt_g", fsr.opt_g), ("opt_d", fsr.opt_d)):
        for pid, state in opt.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"{prefix}.{pid}.{key}"] = torch.as_tensor(value)
    meta = {"kind": "fsr", "arch": asdict(fsr.arch), "gan": asdict(fsr.cfg), "iteration": fsr.iteration}
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, tensors, meta)


def load_fsr(path: str | Path) -> FsrModel:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "fsr":
        raise ValueError(f"{path} is not an FSR checkpoint (kind={meta.get('kind')!r})")
    known = {f.name for f in fields(GanConfig)}
    fsr = FsrModel(FsrArch(**meta["arch"]), GanConfig(**{k: v for k, v in meta["gan"].items() if k in known}))
    fsr.generator.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("generator.")})
    fsr.critic.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("critic.")})
    for prefix, opt in (("opt_g", fsr.opt_g), ("opt_d", fsr.opt_d)):
        state: dict = {}
        for name, value in tensors.items():
            if name.startswith(prefix + "."):
                _, pid, key = name.split(".", 2)
                state.setdefault(int(pid), {})[key] = value
        if state:
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
    fsr.iteration = int(meta["iteration"])
    fsr.eval()
    return fsr
