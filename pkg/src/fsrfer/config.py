"""Run configuration: profile defaults < TOML file < command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SCALES


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataSection:
    root: str = ""  # empty: generate the synthetic dataset
    n_per_class: int = 50
    scales: list[int] = field(default_factory=lambda: list(SCALES))
    canonical: int = 100


@dataclass
class FerSection:
    conv_channels: int = 64
    spd_dim: int = 32
    spd_layers: int = 1
    embed_dim: int = 128
    reeig_eps: float = 1e-4
    cov_reg: float = 1e-3
    cov_floor: float = 1e-5
    epochs: int = 30
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999
    batch_size: int = 32
    patience: int = 5
    augment: bool = True


@dataclass
class FsrSection:
    channels: int = 32
    growth: int = 16
    blocks: int = 6
    res_scale: float = 0.2
    critic_channels: int = 32
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


@dataclass
class EvalSection:
    methods: list[str] = field(default_factory=lambda: ["hr", "bicubic", "fsr-fer"])
    restored_dir: str = ""


@dataclass
class RunConfig:
    profile: str = "paper"
    seed: int = 42
    data: DataSection = field(default_factory=DataSection)
    fer: FerSection = field(default_factory=FerSection)
    fsr: FsrSection = field(default_factory=FsrSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# reduced dims and iteration counts that run on a desktop CPU
PROFILES = {
    "paper": {},
    "smoke": {
        "fer.conv_channels": 32,
        "fer.spd_dim": 16,
        "fer.epochs": 40,
        "fer.lr": 1e-3,
        "fer.patience": 100,
        "fsr.channels": 16,
        "fsr.growth": 8,
        "fsr.blocks": 2,
        "fsr.critic_channels": 16,
        "fsr.iters": 2000,
        "fsr.val_every": 100,
        "fsr.log_every": 10,
        "fsr.lr_halving_iters": [1000, 1500],
    },
}

_METHODS = ("hr", "bicubic", "restored-images", "fsr-fer")


def _coerce(key: str, value, tp):
    origin = typing.get_origin(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        if isinstance(value, str):
            value = _parse_list(key, value)
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        return [_coerce(key, v, item) for v in value]
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("on", "true", "yes", "1", "off", "false", "no", "0"):
            return value.lower() in ("on", "true", "yes", "1")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(key, f"expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(key, f"expected a string, got {value!r}")
    raise ConfigError(key, f"unsupported field type {tp}")


def _parse_list(key: str, text: str) -> list[str]:
    """``"2,3,4"`` or a ``"2..8"`` range."""
    text = text.strip().strip("[]")
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            return [str(v) for v in range(int(lo), int(hi) + 1)]
        except ValueError:
            raise ConfigError(key, f"bad range {text!r}") from None
    return [t.strip() for t in text.split(",") if t.strip()]


def _set(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
        if name in ("data", "fer", "fsr", "eval"):
            raise ConfigError(key, "is a section, not a value")
    elif len(parts) == 2 and parts[0] in ("data", "fer", "fsr", "eval"):
        target, name = getattr(cfg, parts[0]), parts[1]
    else:
        raise ConfigError(key, "unknown key")
    hints = typing.get_type_hints(type(target))
    if name not in hints or not any(f.name == name for f in dataclasses.fields(target)):
        raise ConfigError(key, "unknown key")
    setattr(target, name, _coerce(key, value, hints[name]))


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {sorted(PROFILES)}")
    if not cfg.data.scales or any(s not in SCALES for s in cfg.data.scales):
        raise ConfigError("data.scales", "scales must be a non-empty subset of 2..8")
    if cfg.data.n_per_class < 1:
        raise ConfigError("data.n_per_class", "must be >= 1")
    if cfg.data.canonical < 8:
        raise ConfigError("data.canonical", "must be >= 8")
    f = cfg.fsr
    checks = [
        ("fsr.sigma", f.sigma > 1, "must be > 1"),
        ("fsr.r", f.r >= 1, "must be >= 1"),
        ("fsr.k", f.k > 0, "must be > 0"),
        ("fsr.p", f.p >= 1, "must be >= 1"),
        ("fsr.lr", f.lr > 0, "must be > 0"),
        ("fer.lr", cfg.fer.lr > 0, "must be > 0"),
        ("fsr.iters", f.iters >= 0, "must be >= 0"),
        ("fsr.batch_size", f.batch_size >= 1, "must be >= 1"),
        ("fsr.critic_steps", f.critic_steps >= 1, "must be >= 1"),
        ("fsr.val_every", f.val_every >= 1, "must be >= 1"),
        ("fer.spd_dim", 1 <= cfg.fer.spd_dim <= cfg.fer.conv_channels, "must be in 1..conv_channels"),
        ("fer.reeig_eps", cfg.fer.reeig_eps > 0, "must be > 0"),
        ("fer.cov_reg", cfg.fer.cov_reg > 0, "must be > 0"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(key, msg)
    bad = [m for m in cfg.eval.methods if m not in _METHODS]
    if bad:
        raise ConfigError("eval.methods", f"unknown method(s) {bad}; choose from {list(_METHODS)}")
    return cfg


def parse_config(file: str | Path | None = None,
                 overrides: typing.Iterable[tuple[str, object]] = (),
                 profile: str | None = None) -> RunConfig:
    """Resolve a RunConfig. ``overrides`` are ``(dotted.key, value)`` pairs."""
    doc: dict = {}
    if file is not None:
        try:
            doc = tomllib.loads(Path(file).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(file), f"invalid TOML: {exc}") from None
    overrides = list(overrides)
    chosen = profile or dict(overrides).get("profile") or doc.get("profile") or "paper"
    if chosen not in PROFILES:
        raise ConfigError("profile", f"must be one of {sorted(PROFILES)}")

    cfg = RunConfig(profile=chosen)
    for key, value in PROFILES[chosen].items():
        _set(cfg, key, value)
    for key, value in _flatten(doc):
        if key != "profile":
            _set(cfg, key, value)
    for key, value in overrides:
        if key != "profile":
            _set(cfg, key, value)
    return validate(cfg)


def _flatten(doc: dict, prefix: str = ""):
    for k, v in doc.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v
