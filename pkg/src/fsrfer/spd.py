"""Second-order pooling and SPD-manifold layers (BiMap, ReEig, LogEig).

All eigen-based layers share one backward rule for spectral functions
``Y = U f(L) U^T``::

    dX = U (K * sym(U^T dY U)) U^T,  K_ij = (f(l_i) - f(l_j)) / (l_i - l_j),  K_ii = f'(l_i)

Eigendecompositions run in float64 regardless of input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.autograd import Function

SYM_TOL = 1e-6
GAP_EPS = 1e-6


def sym(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (x + x.transpose(-1, -2))


def check_symmetric(x: torch.Tensor, tol: float = SYM_TOL) -> None:
    err = (x - x.transpose(-1, -2)).abs().max().item() if x.numel() else 0.0
    if err > tol * max(1.0, x.abs().max().item()):
        raise ValueError(f"matrix is not symmetric (max asymmetry {err:.3g})")


def _spectral_backward(u, lam, f_lam, df_lam, grad_out):
    diff = lam.unsqueeze(-1) - lam.unsqueeze(-2)
    fdiff = f_lam.unsqueeze(-1) - f_lam.unsqueeze(-2)
    near = diff.abs() < GAP_EPS
    # near-degenerate pairs fall back to the derivative mean (the limit of the quotient)
    dmean = 0.5 * (df_lam.unsqueeze(-1) + df_lam.unsqueeze(-2))
    k = torch.where(near, dmean, fdiff / torch.where(near, torch.ones_like(diff), diff))
    g = sym(grad_out)
    inner = k * (u.transpose(-1, -2) @ g @ u)
    return u @ inner @ u.transpose(-1, -2)


class _ReEig(Function):
    @staticmethod
    def forward(ctx, x, eps):
        dtype = x.dtype
        lam, u = torch.linalg.eigh(sym(x.double()))
        f = lam.clamp(min=eps)
        ctx.save_for_backward(u, lam, f)
        ctx.eps = eps
        return (u @ torch.diag_embed(f) @ u.transpose(-1, -2)).to(dtype)

    @staticmethod
    def backward(ctx, grad):
        u, lam, f = ctx.saved_tensors
        df = (lam > ctx.eps).to(lam.dtype)
        dx = _spectral_backward(u, lam, f, df, grad.double())
        return dx.to(grad.dtype), None


class _LogEig(Function):
    @staticmethod
    def forward(ctx, x):
        dtype = x.dtype
        lam, u = torch.linalg.eigh(sym(x.double()))
        lo = lam.min().item()
        if lo <= 0:
            raise ValueError(f"logeig input is not positive definite (min eigenvalue {lo:.3g})")
        f = lam.log()
        ctx.save_for_backward(u, lam, f)
        return (u @ torch.diag_embed(f) @ u.transpose(-1, -2)).to(dtype)

    @staticmethod
    def backward(ctx, grad):
        u, lam, f = ctx.saved_tensors
        dx = _spectral_backward(u, lam, f, 1.0 / lam, grad.double())
        return dx.to(grad.dtype)


def reeig(x: torch.Tensor, eps: float) -> torch.Tensor:
    """Eigenvalue rectification ``U max(L, eps) U^T``."""
    if eps <= 0:
        raise ValueError(f"reeig eps must be positive, got {eps}")
    check_symmetric(x.detach())
    return _ReEig.apply(x, float(eps))


def logm_spd(x: torch.Tensor) -> torch.Tensor:
    """Matrix logarithm of an SPD matrix (or batch)."""
    check_symmetric(x.detach())
    return _LogEig.apply(x)


def expm_sym(x: torch.Tensor) -> torch.Tensor:
    lam, u = torch.linalg.eigh(sym(x))
    return u @ torch.diag_embed(lam.exp()) @ u.transpose(-1, -2)


def bimap(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``W^T X W`` for ``X`` of shape ``[..., d, d]`` and ``W`` of shape ``[d, d']``."""
    if x.shape[-1] != w.shape[0] or x.shape[-2] != w.shape[0]:
        raise ValueError(f"bimap shape mismatch: X {tuple(x.shape)}, W {tuple(w.shape)}")
    if w.shape[1] > w.shape[0]:
        raise ValueError(f"bimap cannot expand dimension ({w.shape[0]} -> {w.shape[1]})")
    return w.transpose(-1, -2) @ x @ w


def covariance(fm: torch.Tensor) -> torch.Tensor:
    """Unbiased channel covariance of ``[..., h, w, c]`` feature maps."""
    c = fm.shape[-1]
    x = fm.reshape(*fm.shape[:-3], -1, c)
    n = x.shape[-2]
    if n < 2:
        raise ValueError("covariance pooling needs at least 2 spatial positions")
    xc = x - x.mean(dim=-2, keepdim=True)
    return xc.transpose(-1, -2) @ xc / (n - 1)


def covariance_pool(fm: torch.Tensor, reg: float = 1e-3, floor: float = 1e-5) -> torch.Tensor:
    """Covariance plus trace-scaled ridge ``reg * tr(S) / c`` and an absolute ``floor``."""
    if reg <= 0:
        raise ValueError(f"covariance regularization must be positive, got {reg}")
    s = covariance(fm)
    c = s.shape[-1]
    tr = s.diagonal(dim1=-2, dim2=-1).sum(-1)
    ridge = (reg * tr / c + floor)[..., None, None]
    return s + ridge * torch.eye(c, dtype=s.dtype, device=s.device)


def halfvec(mat: torch.Tensor) -> torch.Tensor:
    """Upper-triangle vectorization with off-diagonals scaled by sqrt(2)."""
    d = mat.shape[-1]
    iu = torch.triu_indices(d, d, device=mat.device)
    scale = torch.full((iu.shape[1],), math.sqrt(2.0), dtype=mat.dtype, device=mat.device)
    scale[iu[0] == iu[1]] = 1.0
    return mat[..., iu[0], iu[1]] * scale


def unhalfvec(vec: torch.Tensor, d: int) -> torch.Tensor:
    iu = torch.triu_indices(d, d, device=vec.device)
    scale = torch.full((iu.shape[1],), 1.0 / math.sqrt(2.0), dtype=vec.dtype, device=vec.device)
    scale[iu[0] == iu[1]] = 1.0
    mat = vec.new_zeros(*vec.shape[:-1], d, d)
    mat[..., iu[0], iu[1]] = vec * scale
    return mat + mat.transpose(-1, -2) - torch.diag_embed(mat.diagonal(dim1=-2, dim2=-1))


def qr_retract(w: torch.Tensor) -> torch.Tensor:
    """Retract onto the Stiefel manifold: Q of a sign-fixed thin QR."""
    q, r = torch.linalg.qr(w)
    sign = torch.sign(torch.diagonal(r))
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return q * sign


@dataclass
class FeatureTensor:
    """A post-LogEig feature: symmetric ``[d, d]`` matrix plus its half-vectorized view."""

    mat: torch.Tensor
    provenance: str = "hr"

    def __post_init__(self):
        if self.provenance not in ("hr", "lr", "sr"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.mat.ndim != 2 or self.mat.shape[0] != self.mat.shape[1]:
            raise ValueError(f"feature matrix must be square, got {tuple(self.mat.shape)}")
        check_symmetric(self.mat.detach())

    @property
    def vec(self) -> torch.Tensor:
        return halfvec(self.mat)

    @property
    def dim(self) -> int:
        return self.mat.shape[-1]


def logeig_flatten(x: torch.Tensor, provenance: str = "hr") -> FeatureTensor:
    """LogEig of a single SPD matrix, wrapped as a FeatureTensor."""
    return FeatureTensor(sym(logm_spd(x)), provenance)
