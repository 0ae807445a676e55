"""Per-scale accuracy evaluation, report tables and convergence comparison."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .backbone import FerModel
from .features import FeatureBank
from .gan import FsrModel

log = logging.getLogger(__name__)

METHODS = ("hr", "bicubic", "restored-images", "fsr-fer")
DISPLAY = {"hr": "HR", "bicubic": "Bicubic", "restored-images": "Restored", "fsr-fer": "FSR-FER"}


@dataclass
class EvalMethod:
    """One report row. ``fsr`` is required for fsr-fer rows."""

    name: str
    fsr: FsrModel | None = None
    label: str | None = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; choose from {METHODS}")
        if self.name == "fsr-fer" and self.fsr is None:
            raise ValueError("fsr-fer needs a trained FSR model")
        if self.label is None:
            self.label = self.name


@torch.no_grad()
def _correct(fer: FerModel, feats: torch.Tensor, labels: torch.Tensor,
             fsr: FsrModel | None = None, batch_size: int = 256) -> int:
    if fsr is not None:
        fsr.generator.eval()
    n = 0
    for i in range(0, len(labels), batch_size):
        x = feats[i:i + batch_size]
        if fsr is not None:
            x = fsr.generator(x)
        n += (fer.logits(x).argmax(-1) == labels[i:i + batch_size]).sum().item()
    return n


def evaluate(method: EvalMethod, bank: FeatureBank, scale: int, fer: FerModel) -> tuple[float, int]:
    """Total accuracy ``correct / total`` of one method at one scale."""
    if method.name == "restored-images":
        if scale not in bank.restored:
            raise KeyError(f"no restored images for x{scale}")
        feats = bank.restored[scale]
    else:
        if scale not in bank.lr:
            raise KeyError(f"scale x{scale} is not in the evaluation pairs")
        feats = bank.hr if method.name == "hr" else bank.lr[scale]
    n = len(bank)
    if n == 0:
        raise ValueError("empty evaluation set")
    fsr = method.fsr if method.name == "fsr-fer" else None
    return _correct(fer, feats, bank.labels, fsr) / n, n


@dataclass
class ScaleReport:
    rows: dict[str, dict[int, float]] = field(default_factory=dict)
    counts: dict[str, dict[int, int]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def methods(self) -> list[str]:
        return list(self.rows)

    @property
    def scales(self) -> list[int]:
        return sorted({s for cells in self.rows.values() for s in cells})

    def mean(self, method: str, scales: Iterable[int] | None = None) -> float:
        cells = self.rows[method]
        keys = [s for s in (scales if scales is not None else cells) if s in cells]
        return sum(cells[s] for s in keys) / len(keys) if keys else math.nan

    def to_dict(self) -> dict:
        return {
            "methods": self.methods,  # JSON objects are written key-sorted; keep row order here
            "rows": {m: {str(s): a for s, a in c.items()} for m, c in self.rows.items()},
            "counts": {m: {str(s): n for s, n in c.items()} for m, c in self.counts.items()},
            "mean": {m: self.mean(m) for m in self.rows},
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleReport":
        order = d.get("methods") or list(d["rows"])
        return cls(
            rows={m: {int(s): a for s, a in d["rows"][m].items()} for m in order},
            counts={m: {int(s): n for s, n in c.items()} for m, c in d.get("counts", {}).items()},
            config=d.get("config", {}), seed=d.get("seed"),
        )


def build_report(methods: Sequence[EvalMethod], scales: Iterable[int], bank: FeatureBank,
                 fer: FerModel, config: dict | None = None, seed: int | None = None) -> ScaleReport:
    if not methods:
        raise ValueError("build_report needs at least one method")
    report = ScaleReport(config=config or {}, seed=seed)
    for m in methods:
        cells, counts = {}, {}
        for s in sorted(scales):
            try:
                cells[s], counts[s] = evaluate(m, bank, s, fer)
            except KeyError as exc:
                log.warning("%s: skipping x%d (%s)", m.label, s, exc.args[0])
        if not cells:
            log.warning("%s produced no cells; row omitted", m.label)
            continue
        report.rows[m.label] = cells
        report.counts[m.label] = counts
    return report


def write_csv(report: ScaleReport, path: str | Path) -> None:
    lines = ["method,scale,accuracy,n"]
    for m, cells in report.rows.items():
        for s in sorted(cells):
            lines.append(f"{m},{s},{cells[s]:.6f},{report.counts.get(m, {}).get(s, 0)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: str | Path) -> ScaleReport:
    report = ScaleReport()
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        m, s, acc, n = line.split(",")
        report.rows.setdefault(m, {})[int(s)] = float(acc)
        report.counts.setdefault(m, {})[int(s)] = int(n)
    return report


def _fmt(acc: float | None) -> str:
    return "-" if acc is None or math.isnan(acc) else f"{100 * acc:.3f}"


def render_table(report: ScaleReport, scales: Sequence[int] | None = None, avg: bool = True) -> str:
    """Fixed-width text table, one row per method, accuracies in percent.

    Layout::

        Method  |     x2 | ... |    avg
        --------+--------+-----+-------
        Bicubic | 84.518 | ... | 65.181

    The first column is as wide as the longest label (at least "Method");
    value columns are 7 wide and right-aligned; missing cells print "-".
    ``avg`` is the mean of the row's present cells.
    """
    scales = list(scales) if scales is not None else report.scales
    labels = [DISPLAY.get(m, m) for m in report.rows]
    w0 = max([len("Method")] + [len(lb) for lb in labels])
    heads = [f"x{s}" for s in scales] + (["avg"] if avg else [])
    widths = [max(7, len(h)) for h in heads]

    def line(first, cells):
        return " | ".join([first.ljust(w0)] + [c.rjust(w) for c, w in zip(cells, widths)])

    out = [line("Method", heads), "-+-".join(["-" * w0] + ["-" * w for w in widths])]
    for (m, cells), lb in zip(report.rows.items(), labels):
        vals = [_fmt(cells.get(s)) for s in scales]
        if avg:
            vals.append(_fmt(report.mean(m, scales)))
        out.append(line(lb, vals))
    return "\n".join(out) + "\n"


def write_report(report: ScaleReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    write_csv(report, out_dir / "report.csv")
    (out_dir / "report.txt").write_text(render_table(report), encoding="utf-8")
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


# ---------------------------------------------------------------------------
# convergence comparison over training logs


def read_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def smoothed_val(records: Sequence[dict], window: int = 5) -> list[tuple[int, float]]:
    """Trailing moving average of the validation accuracy records."""
    vals = [(r["iteration"], r["val_acc"]) for r in records if r.get("event") == "val"]
    out = []
    for i, (it, _) in enumerate(vals):
        chunk = [v for _, v in vals[max(0, i - window + 1):i + 1]]
        out.append((it, sum(chunk) / len(chunk)))
    return out


def iterations_to_target(records: Sequence[dict], target: float, window: int = 5) -> int | None:
    for it, v in smoothed_val(records, window):
        if v >= target - 1e-12:
            return it
    return None


@dataclass
class Convergence:
    iters_a: int | None
    iters_b: int | None
    ratio: float | None
    target: float

    def describe(self) -> str:
        a = "not reached" if self.iters_a is None else str(self.iters_a)
        b = "not reached" if self.iters_b is None else str(self.iters_b)
        r = "n/a" if self.ratio is None else f"{self.ratio:.3f}"
        return f"target {100 * self.target:.3f}: run A {a} iters, run B {b} iters, ratio A/B {r}"


def convergence_compare(log_a, log_b, target: float, window: int = 5) -> Convergence:
    """First iteration at which each run's smoothed val accuracy reaches ``target``.

    ``ratio = iters_a / iters_b``; a ratio above 1 means run B got there sooner.
    Logs may be paths or already-parsed record lists.
    """
    recs_a = read_log(log_a) if isinstance(log_a, (str, Path)) else list(log_a)
    recs_b = read_log(log_b) if isinstance(log_b, (str, Path)) else list(log_b)
    for name, recs in (("A", recs_a), ("B", recs_b)):
        if not any(r.get("event") == "val" for r in recs):
            raise ValueError(f"log {name} has no validation records")
    ia = iterations_to_target(recs_a, target, window)
    ib = iterations_to_target(recs_b, target, window)
    if ia is None or ib is None:
        ratio = None
    elif ib == 0:
        ratio = 1.0 if ia == 0 else math.inf
    else:
        ratio = ia / ib
    return Convergence(ia, ib, ratio, target)


def final_smoothed(log, window: int = 5) -> float:
    recs = read_log(log) if isinstance(log, (str, Path)) else list(log)
    return smoothed_val(recs, window)[-1][1]
