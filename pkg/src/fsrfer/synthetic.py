"""Procedural face-like expression dataset.

Each of the seven classes gets its own brow/eye/mouth geometry; per-sample
jitter (pose, scale, skin tone, lighting, pixel noise) keeps the classes
from being trivially separable once the image is downsampled.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "neutral", "sadness", "surprise")

# brow_tilt: inner-end drop (+ = frowning V); brow_raise: lift above rest;
# eye_open: eye height ratio; curve: + smile / - frown; mouth_open: gap height;
# width: mouth half-width ratio; skew: mouth corner asymmetry
_PROTOTYPES = {
    "anger":     dict(brow_tilt=6.0, brow_raise=-2.0, eye_open=0.45, curve=-0.15, mouth_open=0.0, width=0.75, skew=0.0),
    "disgust":   dict(brow_tilt=3.0, brow_raise=-1.0, eye_open=0.60, curve=-0.35, mouth_open=0.0, width=0.85, skew=0.45),
    "fear":      dict(brow_tilt=-4.0, brow_raise=4.0, eye_open=1.25, curve=-0.25, mouth_open=0.45, width=1.05, skew=0.0),
    "happiness": dict(brow_tilt=0.0, brow_raise=0.5, eye_open=0.75, curve=1.0, mouth_open=0.30, width=1.15, skew=0.0),
    "neutral":   dict(brow_tilt=0.0, brow_raise=0.0, eye_open=0.90, curve=0.0, mouth_open=0.0, width=0.95, skew=0.0),
    "sadness":   dict(brow_tilt=-4.5, brow_raise=1.5, eye_open=0.70, curve=-0.85, mouth_open=0.0, width=0.85, skew=0.0),
    "surprise":  dict(brow_tilt=0.0, brow_raise=6.0, eye_open=1.35, curve=0.0, mouth_open=1.10, width=0.55, skew=0.0),
}
_JITTER = dict(brow_tilt=1.5, brow_raise=1.2, eye_open=0.12, curve=0.18, mouth_open=0.10, width=0.08, skew=0.10)

_SUPERSAMPLE = 4
_SIZE = 100


def _render(params: dict, rng: np.random.Generator) -> Image.Image:
    S = _SUPERSAMPLE
    n = _SIZE * S
    bg = tuple(int(v) for v in rng.integers(40, 200, size=3))
    img = Image.new("RGB", (n, n), bg)
    d = ImageDraw.Draw(img)

    cx = (50 + rng.uniform(-3, 3)) * S
    cy = (50 + rng.uniform(-3, 3)) * S
    r = rng.uniform(40, 46) * S
    tone = rng.uniform(0.55, 1.0)
    skin = (int(235 * tone), int(190 * tone), int(160 * tone))
    d.ellipse([cx - 0.85 * r, cy - r, cx + 0.85 * r, cy + r], fill=skin)
    ink = tuple(int(v * rng.uniform(0.1, 0.35)) for v in skin)
    u = r / 38.0  # face-local unit, ~1 px at 100x100

    # eyes
    ey = cy - 10 * u
    ew = 6.5 * u
    eh = max(1.0, 4.5 * u * params["eye_open"])
    for side in (-1, 1):
        ex = cx + side * 13 * u
        d.ellipse([ex - ew, ey - eh, ex + ew, ey + eh], fill=(245, 245, 245), outline=ink, width=int(S))
        pr = min(2.6 * u, eh)
        d.ellipse([ex - pr, ey - pr, ex + pr, ey + pr], fill=ink)

    # brows
    by = ey - (9 + params["brow_raise"]) * u
    for side in (-1, 1):
        inner = (cx + side * 5 * u, by + params["brow_tilt"] * u)
        outer = (cx + side * 20 * u, by - 0.4 * params["brow_tilt"] * u)
        if params["skew"] and side > 0:
            inner = (inner[0], inner[1] + 2.5 * u)
        d.line([inner, outer], fill=ink, width=int(3.6 * u))

    # nose, with wrinkles for disgust-like skew
    d.line([(cx, cy - 4 * u), (cx - 2 * u, cy + 6 * u), (cx + 2 * u, cy + 6 * u)], fill=ink, width=int(1.5 * u))
    if params["skew"] > 0.2:
        for k in (-1, 1):
            d.line([(cx + k * 3 * u, cy - 2 * u), (cx + k * 7 * u, cy + 1 * u)], fill=ink, width=int(1.2 * u))

    # mouth: parabola (+ skew) with an optional filled opening underneath
    mw = 11 * u * params["width"]
    my = cy + 17 * u
    xs = np.linspace(-1.0, 1.0, 33)
    bend = params["curve"] * 5 * u * (1 - xs ** 2)
    upper = my + bend - params["skew"] * 4 * u * xs
    gap = params["mouth_open"] * 7 * u * (1 - xs ** 2)
    top = [(cx + x * mw, y) for x, y in zip(xs, upper)]
    if params["mouth_open"] > 0.05:
        bottom = [(cx + x * mw, y + g) for x, y, g in zip(xs, upper, gap)]
        d.polygon(top + bottom[::-1], fill=(90, 20, 30), outline=ink)
    d.line(top, fill=ink, width=int(3.2 * u), joint="curve")

    # illumination gradient
    grad = np.linspace(rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), n)
    arr = np.asarray(img, dtype=np.float64) * (grad[None, :, None] if rng.random() < 0.5 else grad[:, None, None])
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))

    img = img.rotate(rng.uniform(-10, 10), resample=Image.BICUBIC, fillcolor=bg)
    return img.resize((_SIZE, _SIZE), Image.LANCZOS)


def render_face(expression: str, rng: np.random.Generator) -> np.ndarray:
    """One jittered sample as float64 ``[100, 100, 3]`` in [0, 1]."""
    proto = _PROTOTYPES[expression]
    params = {k: v + rng.normal(0.0, _JITTER[k]) for k, v in proto.items()}
    params["eye_open"] = max(params["eye_open"], 0.2)
    params["width"] = max(params["width"], 0.3)
    params["skew"] = max(params["skew"], 0.0) if proto["skew"] else 0.0
    params["mouth_open"] = max(params["mouth_open"], 0.0)
    arr = np.asarray(_render(params, rng), dtype=np.float64) / 255.0
    arr = arr + rng.normal(0.0, 0.01, size=arr.shape)
    return np.clip(arr, 0.0, 1.0)


def generate_synthetic_dataset(n_per_class: int, seed: int, out: str | Path,
                               splits: tuple[str, ...] = ("train", "val")) -> None:
    """Write ``out/<split>/<expression>/NNNN.png``, ``n_per_class`` images per class and split."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    out = Path(out)
    for si, split in enumerate(splits):
        for ci, name in enumerate(EXPRESSIONS):
            cls_dir = out / split / name
            cls_dir.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng([seed, si, ci])
            for i in range(n_per_class):
                px = render_face(name, rng)
                q = np.rint(px * 255.0).astype(np.uint8)
                Image.fromarray(q).save(cls_dir / f"{i:04d}.png", format="PNG")
