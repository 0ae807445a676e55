import numpy as np
import pytest
import torch

from fsrfer.backbone import FerArch, FerModel
from fsrfer.synthetic import generate_synthetic_dataset

TINY_ARCH = dict(conv_channels=8, spd_dim=4, embed_dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    generate_synthetic_dataset(3, seed=7, out=root)
    return root


@pytest.fixture
def tiny_fer():
    torch.manual_seed(0)
    return FerModel(FerArch(**TINY_ARCH)).freeze()


def random_spd(gen: torch.Generator, d: int, lo: float = 0.2, hi: float = 3.0,
               min_gap: float = 1e-3, dtype=torch.float64) -> torch.Tensor:
    """Random SPD matrix with eigenvalues in [lo, hi] separated by at least ``min_gap``."""
    while True:
        lam = lo + (hi - lo) * torch.rand(d, generator=gen, dtype=dtype)
        if torch.diff(lam.sort().values).min() >= min_gap:
            break
    q, _ = torch.linalg.qr(torch.randn(d, d, generator=gen, dtype=dtype))
    return q @ torch.diag(lam) @ q.T


# -- acceptance reporting: one line per criterion at the end of the session

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and not rep.failed and not rep.skipped
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = f"  [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{detail}")
