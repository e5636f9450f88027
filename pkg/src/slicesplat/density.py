"""Density control: prune inactive Gaussians and respawn them near active ones.

A Gaussian's activity is ``m_g = |I_g * sigmoid(opacity_logit_g)|``. At each
control step the inactive ones (``m_g < threshold``) that are not in a grace
period are replaced in place: the slot keeps its index, the new mean is drawn
uniformly in the bounding box of the active means and all other parameters
return to the seeding defaults. Slot reuse keeps the total count fixed and
leaves every survivor at its old index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import sigmoid
from .seeding import InitConfig, default_params

log = logging.getLogger(__name__)

__all__ = ["DensityConfig", "DensityEvent", "activity", "prune_and_respawn", "control_epochs"]


@dataclass(frozen=True)
class DensityConfig:
    threshold: float = 0.05
    period: int = 10
    first_epoch: int = 10
    last_epoch: int = 40
    grace_periods: int = 1

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.first_epoch > self.last_epoch:
            raise ValueError("first_epoch must not exceed last_epoch")
        if self.grace_periods < 0:
            raise ValueError("grace_periods must be >= 0")

    def fires_at(self, epoch):
        """True if control runs after ``epoch`` (1-based) completes."""
        return self.first_epoch <= epoch <= self.last_epoch and (epoch - self.first_epoch) % self.period == 0


def control_epochs(cfg, epochs):
    return [e for e in range(1, epochs + 1) if cfg.fires_at(e)]


@dataclass
class DensityEvent:
    epoch: int
    removed: list
    inserted: list
    bbox: tuple
    n_active: int
    exempt: int
    warning: str = None
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "epoch": self.epoch,
            "removed": [int(i) for i in self.removed],
            "inserted": [int(i) for i in self.inserted],
            "bbox": [list(map(float, v)) for v in self.bbox] if self.bbox is not None else None,
            "n_active": int(self.n_active),
            "exempt": int(self.exempt),
            "warning": self.warning,
        }


def activity(cloud):
    return np.abs(np.asarray(cloud.intensities, dtype=float) * sigmoid(cloud.opacity_logits))


def prune_and_respawn(cloud, cfg=DensityConfig(), grace=None, rng=None, fallback_bbox=None,
                      init=InitConfig(), epoch=0):
    """One control step.

    Returns ``(new_cloud, new_grace, event)``. ``grace`` holds the remaining
    exempt control steps per Gaussian; ``fallback_bbox`` is used when no
    Gaussian is active (the previous step's box, typically).
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("density control needs a nonempty cloud")
    grace = np.zeros(n, dtype=np.int64) if grace is None else np.asarray(grace, dtype=np.int64).copy()
    rng = np.random.default_rng(0) if rng is None else rng
    m = activity(cloud)
    active = m >= cfg.threshold
    exempt = (~active) & (grace > 0)
    prune = (~active) & (grace <= 0)
    grace[grace > 0] -= 1
    idx = np.flatnonzero(prune)

    warning = None
    if active.any():
        means = np.asarray(cloud.means, dtype=float)[active]
        bbox = (means.min(axis=0), means.max(axis=0))
    else:
        if fallback_bbox is None:
            means = np.asarray(cloud.means, dtype=float)
            fallback_bbox = (means.min(axis=0), means.max(axis=0))
        bbox = tuple(np.asarray(v, dtype=float) for v in fallback_bbox)
        warning = "no active Gaussians; respawning inside the previous bounding box"
        log.warning(warning)

    event = DensityEvent(epoch, idx.tolist(), idx.tolist(), bbox, int(active.sum()), int(exempt.sum()), warning)
    if idx.size == 0:
        return cloud, grace, event

    lo, hi = bbox
    new_means = lo + (hi - lo) * rng.uniform(0.0, 1.0, size=(idx.size, 3))
    new_means = np.clip(new_means, lo, hi)
    dtype = cloud.dtype
    defaults = default_params(idx.size, init, dtype)
    arrays = {k: v.copy() for k, v in cloud.arrays().items()}
    arrays["means"][idx] = new_means.astype(dtype)
    for k, v in defaults.items():
        arrays[k][idx] = v
    grace[idx] = cfg.grace_periods
    return cloud.replace(**arrays), grace, event
