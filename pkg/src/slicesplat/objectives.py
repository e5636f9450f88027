"""Image losses with exact per-pixel gradients, plus evaluation metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and a
dynamic range of 1. The window is applied as a zero-padded "same" filter, so
the SSIM map has the image's shape and is defined for any image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "LOSS_KINDS",
    "LossSpec",
    "loss",
    "ssim",
    "ssim_with_grad",
    "ssim_map",
    "psnr",
    "ncc",
    "metrics",
    "METRIC_NAMES",
    "ConstantImageError",
]

LOSS_KINDS = ("L1", "L2", "SSIM", "PSNR", "NCC", "HybridL1", "HybridSSIM")
METRIC_NAMES = ("MAE", "MSE", "PSNR", "SSIM", "NCC")

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0
C1 = (K1 * DATA_RANGE) ** 2
C2 = (K2 * DATA_RANGE) ** 2


class ConstantImageError(ValueError):
    """NCC is undefined when either image has zero variance."""


def _gauss1d(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


_G1 = _gauss1d()


def _filter(img):
    # separable and symmetric, so this operator is its own adjoint
    out = correlate1d(img, _G1, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _G1, axis=1, mode="constant", cval=0.0)


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim != 2:
        raise ValueError("images must be 2-D")
    return pred, target


def ssim_with_grad(pred, target):
    """Mean SSIM and its gradient with respect to ``pred``."""
    x, y = _check_pair(pred, target)
    mx, my = _filter(x), _filter(y)
    exx, eyy, exy = _filter(x * x), _filter(y * y), _filter(x * y)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    a1 = 2.0 * mx * my + C1
    a2 = 2.0 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    smap = (a1 * a2) / (b1 * b2)
    n = x.size
    # grouped so that every term cancels exactly when pred == target
    d_mx = smap * ((2.0 * my / a1 - 2.0 * mx / b1) + (2.0 * mx / b2 - 2.0 * my / a2))
    d_exx = smap / b2
    d_exy = smap / a2
    grad = (_filter(d_mx) + (2.0 * y * _filter(d_exy) - 2.0 * x * _filter(d_exx))) / n
    return float(np.mean(smap)), grad


def ssim(pred, target):
    return ssim_with_grad(pred, target)[0]


def ssim_map(pred, target):
    """Per-pixel SSIM values (same shape as the inputs)."""
    x, y = _check_pair(pred, target)
    mx, my = _filter(x), _filter(y)
    sxx = _filter(x * x) - mx * mx
    syy = _filter(y * y) - my * my
    sxy = _filter(x * y) - mx * my
    return ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))


def psnr(pred, target):
    pred, target = _check_pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def _ncc_parts(pred, target):
    pc = pred - pred.mean()
    tc = target - target.mean()
    np_, nt = math.sqrt(float(np.sum(pc * pc))), math.sqrt(float(np.sum(tc * tc)))
    return pc, tc, np_, nt


def ncc(pred, target):
    """Zero-normalized cross-correlation; 0 if either image is constant."""
    pred, target = _check_pair(pred, target)
    pc, tc, np_, nt = _ncc_parts(pred, target)
    if np_ == 0.0 or nt == 0.0:
        return 0.0
    return float(np.sum(pc * tc) / (np_ * nt))


def metrics(pred, target):
    pred, target = _check_pair(pred, target)
    diff = pred - target
    return {
        "MAE": float(np.mean(np.abs(diff))),
        "MSE": float(np.mean(diff**2)),
        "PSNR": psnr(pred, target),
        "SSIM": ssim(pred, target),
        "NCC": ncc(pred, target),
    }


@dataclass(frozen=True)
class LossSpec:
    """Loss selection. ``weights`` is ``(w_l1, w_ssim)`` for the hybrids."""

    kind: str = "HybridL1"
    weights: tuple = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        if self.weights is None:
            default = {"HybridL1": (0.8, 0.2), "HybridSSIM": (0.2, 0.8)}.get(self.kind)
            object.__setattr__(self, "weights", default)
        elif self.kind in ("HybridL1", "HybridSSIM"):
            w = tuple(float(v) for v in self.weights)
            if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
                raise ValueError("hybrid weights must be two nonnegative numbers summing to 1")
            object.__setattr__(self, "weights", w)


def _l1(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _l2(pred, target):
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _ssim_term(pred, target):
    value, grad = ssim_with_grad(pred, target)
    return 1.0 - value, -grad


def _psnr_term(pred, target):
    diff = pred - target
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return -math.inf, np.zeros_like(diff)
    value = -10.0 * math.log10(DATA_RANGE**2 / mse)
    grad = (10.0 / math.log(10.0)) * (2.0 * diff / diff.size) / mse
    return value, grad


def _ncc_term(pred, target):
    pc, tc, np_, nt = _ncc_parts(pred, target)
    if np_ == 0.0 or nt == 0.0:
        raise ConstantImageError("NCC loss undefined for a constant image")
    r = float(np.sum(pc * tc)) / (np_ * nt)
    grad = (tc / nt - r * pc / np_) / np_
    return 1.0 - r, -grad


_TERMS = {"L1": _l1, "L2": _l2, "SSIM": _ssim_term, "PSNR": _psnr_term, "NCC": _ncc_term}


def loss(pred, target, spec=LossSpec()):
    """Scalar loss and ``dL/dpred`` for one image pair."""
    pred, target = _check_pair(pred, target)
    if spec.kind in _TERMS:
        return _TERMS[spec.kind](pred, target)
    w_l1, w_ssim = spec.weights
    v1, g1 = _l1(pred, target)
    v2, g2 = _ssim_term(pred, target)
    return w_l1 * v1 + w_ssim * v2, w_l1 * g1 + w_ssim * g2
