"""Closed-form backward pass of the slice rasterizer.

The per-pixel work happens in :meth:`RenderPlan.accumulate`; this module
chains those sums through the parameterization:

* intensity and opacity directly from ``alpha = o exp(e)``, the opacity then
  through the sigmoid to its logit;
* mean from ``de/dd = -Sigma^-1 d``;
* covariance from ``de/dSigma = 0.5 Sigma^-1 d d^T Sigma^-1``, then through
  ``Sigma = M^T M`` with ``M = S R`` into the scales (and their logs) and the
  rotation matrix;
* rotation to quaternion via the analytic Jacobian of ``R(q)``, projected
  through quaternion normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GaussianCloud, quat_to_rotmat
from .rasterizer import EXACT, prepare, render_slices

__all__ = [
    "GradientSet",
    "backward",
    "param_gradients",
    "covariance_to_params",
    "quat_rotation_jacobian",
    "finite_difference_gradients",
]


@dataclass(frozen=True)
class GradientSet:
    d_means: np.ndarray
    d_log_scales: np.ndarray
    d_quats: np.ndarray
    d_opacity_logits: np.ndarray
    d_intensities: np.ndarray
    d_cov6: np.ndarray = None
    d_pixels: np.ndarray = None

    GROUPS = ("means", "log_scales", "quats", "opacity_logits", "intensities")

    def __getitem__(self, group):
        return getattr(self, "d_" + group)

    def as_dict(self):
        return {g: self[g] for g in self.GROUPS}

    def flat(self):
        return np.concatenate(
            [self.d_means, self.d_log_scales, self.d_quats, self.d_opacity_logits[:, None],
             self.d_intensities[:, None]],
            axis=1,
        )

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros(n))

    def __add__(self, other):
        return GradientSet(*(self[g] + other[g] for g in self.GROUPS))

    def scaled(self, a):
        return GradientSet(*(a * self[g] for g in self.GROUPS))

    def all_finite(self):
        return all(np.all(np.isfinite(self[g])) for g in self.GROUPS)


def quat_rotation_jacobian(q):
    """``dR/dq`` for unit quaternions ``(N, 4)``, shape ``(N, 4, 3, 3)``."""
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    w, x, y, z = q.T
    o = np.zeros_like(w)
    jw = np.stack([o, -2 * z, 2 * y, 2 * z, o, -2 * x, -2 * y, 2 * x, o], axis=1)
    jx = np.stack([o, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1)
    jy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, o, 2 * z, -2 * w, 2 * z, -4 * y], axis=1)
    jz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, o], axis=1)
    return np.stack([jw, jx, jy, jz], axis=1).reshape(-1, 4, 3, 3)


def covariance_to_params(d_cov, log_scales, quats):
    """Propagate full-matrix covariance gradients ``(N, 3, 3)`` to log-scales and raw quaternions.

    With ``Sigma = M^T M`` and ``M = S R``: ``dL/dM = 2 M G`` for symmetric
    ``G``, ``dL/dS = diag(dL/dM R^T)`` and ``dL/dR = S dL/dM``.
    """
    log_scales = np.asarray(log_scales, dtype=float).reshape(-1, 3)
    q_raw = np.asarray(quats, dtype=float).reshape(-1, 4)
    qn = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / qn
    r = quat_to_rotmat(q)
    s = np.exp(log_scales)
    m = s[:, :, None] * r
    d_m = 2.0 * m @ d_cov
    d_s = np.einsum("nij,nij->ni", d_m, r)
    d_r = s[:, :, None] * d_m
    d_q = np.einsum("nuv,nmuv->nm", d_r, quat_rotation_jacobian(q))
    d_q_raw = (d_q - q * np.sum(q * d_q, axis=1, keepdims=True)) / qn
    return d_s * s, d_q_raw


def param_gradients(plan, upstream, pixel_grad=False):
    """Build a :class:`GradientSet` from a prepared plan and ``dL/dI_p``."""
    acc_k, acc_v, acc_vv = plan.accumulate(upstream)
    o = plan.opac
    inten = plan.inten
    d_int = o * acc_k
    d_op = inten * acc_k
    d_logit = d_op * o * (1.0 - o)
    io = inten * o
    d_mean = io[:, None] * acc_v
    d_cov6 = 0.5 * io[:, None] * acc_vv
    g = np.empty((len(o), 3, 3))
    for k, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
        g[:, a, b] = d_cov6[:, k]
        g[:, b, a] = d_cov6[:, k]
    cloud = plan.cloud
    d_ls, d_q = covariance_to_params(g, cloud.log_scales, cloud.quats)
    d_pix = plan.pixel_gradient(upstream) if pixel_grad else None
    return GradientSet(d_mean, d_ls, d_q, d_logit, d_int, d_cov6, d_pix)


def backward(cloud, stack, upstream, opts=EXACT, pixel_grad=False):
    """Gradients of a loss with respect to every Gaussian parameter.

    ``upstream`` holds ``dL/dI_p`` with shape ``(M, H, W)`` matching the
    stack's images. ``pixel_grad=True`` also returns ``dL/dc_p`` per pixel.
    """
    upstream = np.asarray(upstream, dtype=float)
    expected = (len(stack),) + stack.grid.shape
    if upstream.shape != expected:
        raise ValueError(f"upstream shape {upstream.shape} does not match stack {expected}")
    plan = prepare(cloud, stack.poses, stack.grid, opts)
    return param_gradients(plan, upstream, pixel_grad)


def finite_difference_gradients(cloud, stack, loss_fn, h=1e-4, opts=EXACT):
    """Central-difference oracle over all 12N parameters.

    ``loss_fn(images, stack)`` maps rendered ``(M, H, W)`` images to a scalar.
    Quaternions are perturbed in their raw (unnormalized) coordinates, so the
    result is the gradient with respect to the stored parameters.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    base = cloud.astype(np.float64)

    def total(c):
        return float(loss_fn(render_slices(c, stack.poses, stack.grid, opts), stack))

    out = {}
    for name in GaussianCloud.PARAMS:
        arr = getattr(base, name)
        grad = np.zeros_like(arr)
        flat = grad.reshape(-1)
        for k in range(arr.size):
            plus = arr.copy().reshape(-1)
            minus = arr.copy().reshape(-1)
            plus[k] += h
            minus[k] -= h
            lp = total(base.replace(**{name: plus.reshape(arr.shape)}))
            lm = total(base.replace(**{name: minus.reshape(arr.shape)}))
            flat[k] = (lp - lm) / (2.0 * h)
        out[name] = grad
    return GradientSet(out["means"], out["log_scales"], out["quats"], out["opacity_logits"], out["intensities"])
