"""Initial Gaussian placement: regular grids on known slices or a uniform box."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GaussianCloud

__all__ = ["InitConfig", "init_on_slice", "init_uniform", "default_params", "subgrid_shape", "initialize"]

STRATEGIES = ("OnSlice", "UniformBox")


@dataclass(frozen=True)
class InitConfig:
    strategy: str = "OnSlice"
    per_slice_count: int = 120
    box: tuple = None  # ((ax, ay, az), (bx, by, bz)) for UniformBox
    opacity_logit: float = 1.0
    intensity: float = 0.5
    log_scale: tuple = (0.5, 0.5, 0.5)
    quat: tuple = (1.0, 0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown init strategy {self.strategy!r}; choose from {STRATEGIES}")
        if int(self.per_slice_count) < 1:
            raise ValueError("per_slice_count must be >= 1")
        if self.box is not None:
            a, b = (np.asarray(v, dtype=float).reshape(3) for v in self.box)
            if np.any(b < a):
                raise ValueError("box lower corner must not exceed the upper corner")
            object.__setattr__(self, "box", (tuple(a), tuple(b)))


def default_params(n, cfg=InitConfig(), dtype=np.float64):
    """Seeding defaults for everything except the means."""
    return dict(
        log_scales=np.tile(np.asarray(cfg.log_scale, dtype=dtype), (n, 1)),
        quats=np.tile(np.asarray(cfg.quat, dtype=dtype), (n, 1)),
        opacity_logits=np.full(n, cfg.opacity_logit, dtype=dtype),
        intensities=np.full(n, cfg.intensity, dtype=dtype),
    )


def subgrid_shape(count, width, height):
    """``(columns, rows)`` for ``count`` points on a width x height plane.

    Picks the factor pair of ``count`` whose aspect ratio is closest to the
    plane's. When no exact pair is within a factor 1.5 of that ratio, uses the
    best-covering near-aspect grid and drops the remainder.
    """
    aspect = width / height

    def err(nx, ny):
        return abs(math.log((nx / ny) / aspect))

    exact = [(nx, count // nx) for nx in range(1, count + 1) if count % nx == 0]
    best = min(exact, key=lambda p: (err(*p), -p[0] if width >= height else p[0]))
    if err(*best) <= math.log(1.5):
        return best
    pairs = [(nx, count // nx) for nx in range(1, count + 1)]
    pairs = [p for p in pairs if err(*p) <= math.log(1.5)] or pairs
    return max(pairs, key=lambda p: (p[0] * p[1], -err(*p)))


def init_on_slice(poses, grid, cfg=InitConfig(), dtype=np.float64):
    """Regular sub-grid of Gaussians centred in the cells of every slice."""
    poses = list(poses)
    if not poses:
        raise ValueError("on-slice seeding needs at least one pose")
    nx, ny = subgrid_shape(int(cfg.per_slice_count), grid.width, grid.height)
    ax, bx, ay, by = grid.extent
    xs = ax + (np.arange(nx) + 0.5) * (bx - ax) / nx
    ys = ay + (np.arange(ny) + 0.5) * (by - ay) / ny
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    plane = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    means = [(plane + p.translation) @ p.rotation.T for p in poses]
    means = np.concatenate(means)
    n = means.shape[0]
    cloud = GaussianCloud(means.astype(dtype), **default_params(n, cfg, dtype))
    cloud.meta.update(
        strategy="OnSlice",
        subgrid=(nx, ny),
        requested_per_slice=int(cfg.per_slice_count),
        dropped_per_slice=int(cfg.per_slice_count) - nx * ny,
    )
    return cloud


def init_uniform(box, n, cfg=InitConfig(), rng=None, dtype=np.float64):
    """``n`` Gaussians with means drawn uniformly in ``box = (a, b)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    a, b = (np.asarray(v, dtype=float).reshape(3) for v in box)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    xi = rng.uniform(0.0, 1.0, size=(n, 3))
    means = np.clip(a + (b - a) * xi, a, b)
    cloud = GaussianCloud(means.astype(dtype), **default_params(n, cfg, dtype))
    cloud.meta.update(strategy="UniformBox", box=(tuple(a), tuple(b)))
    return cloud


def stack_bounds(poses, grid):
    """Axis-aligned box around every slice's corners."""
    ax, bx, ay, by = grid.extent
    corners = np.array([[ax, ay, 0], [bx, ay, 0], [ax, by, 0], [bx, by, 0]], dtype=float)
    pts = np.concatenate([(corners + p.translation) @ p.rotation.T for p in poses])
    return pts.min(axis=0), pts.max(axis=0)


def initialize(poses, grid, cfg=InitConfig(), dtype=np.float64):
    """Dispatch on ``cfg.strategy``; UniformBox matches the OnSlice count.

    Without an explicit box, UniformBox samples inside the bounds of the slices.
    """
    if cfg.strategy == "OnSlice":
        return init_on_slice(poses, grid, cfg, dtype)
    nx, ny = subgrid_shape(int(cfg.per_slice_count), grid.width, grid.height)
    box = cfg.box if cfg.box is not None else stack_bounds(poses, grid)
    return init_uniform(box, len(poses) * nx * ny, cfg, dtype=dtype)
