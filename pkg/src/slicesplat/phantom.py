"""Synthetic ground truth: a labelled ellipsoidal shell and fan-shaped sweeps.

World frame: the volume is a cube of side ``side`` centred on the origin and
``z`` is depth. A slice image has its column axis lateral and its row axis
along depth; row 0 sits at the probe. At angle 0 the sagittal plane is the
``x-z`` plane and the transversal plane is the ``y-z`` plane, so the two share
the depth line through the pivot. A sweep tilts the plane about its own
lateral axis through the pivot, so the planes fan out from the apex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .model import PixelGridSpec, SlicePose, SliceStack, grid_points, pose_from_6d, pose_to_6d

__all__ = [
    "EXTERIOR",
    "INTERIOR",
    "BORDER",
    "LabelVolume",
    "SweepSpec",
    "make_phantom",
    "sample_volume",
    "sweep_angles",
    "sweep_poses",
    "sample_sweep",
]

EXTERIOR, INTERIOR, BORDER = 0.0, 0.5, 1.0

DEFAULT_SIDE = 64.0


@dataclass(frozen=True)
class LabelVolume:
    """Scalar labels on a regular grid; ``labels[i, j, k]`` sits at ``origin + spacing * (i, j, k)``."""

    labels: np.ndarray
    spacing: float
    origin: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.float32)
        if labels.ndim != 3:
            raise ValueError("labels must be a 3-D array")
        if not np.all(np.isin(labels, (EXTERIOR, INTERIOR, BORDER))):
            raise ValueError("labels must be 0, 0.5 or 1")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self):
        return self.labels.shape

    def voxel_centers(self):
        axes = [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.shape)]
        return axes

    def bounds(self):
        lo = np.asarray(self.origin)
        return lo, lo + self.spacing * (np.asarray(self.shape) - 1)


def make_phantom(semi_axes=(0.4, 0.3, 0.2), thickness=0.05, size=128, side=DEFAULT_SIDE,
                 center=(0.0, 0.0, 0.0), rotation=None):
    """Ellipsoidal shell: 0.5 inside the inner surface, 1 in the wall, 0 outside.

    ``semi_axes``, ``thickness`` and ``center`` are fractions of ``side``;
    ``rotation`` is an optional 3x3 matrix orienting the ellipsoid.
    """
    semi = np.asarray(semi_axes, dtype=float).reshape(3)
    if not thickness > 0 or np.any(semi <= thickness):
        raise ValueError("need semi-axes > thickness > 0")
    size = int(size)
    if size < 1:
        raise ValueError("size must be >= 1")
    spacing = side / size
    origin = (-0.5 * side + 0.5 * spacing,) * 3
    c = np.asarray(origin[0] + spacing * np.arange(size))
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([x, y, z], axis=-1) - np.asarray(center, dtype=float) * side
    if rotation is not None:
        pts = pts @ np.asarray(rotation, dtype=float)
    outer = np.sum((pts / (semi * side)) ** 2, axis=-1)
    inner = np.sum((pts / ((semi - thickness) * side)) ** 2, axis=-1)
    labels = np.full(outer.shape, EXTERIOR, dtype=np.float32)
    labels[outer <= 1.0] = BORDER
    labels[inner <= 1.0] = INTERIOR
    return LabelVolume(labels, spacing, origin)


def sample_volume(vol, points, order=1):
    """Trilinear (``order=1``) or nearest (``order=0``) samples; 0 outside the grid."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = (points - np.asarray(vol.origin)) / vol.spacing
    n = np.asarray(vol.shape)
    inside = np.all((idx >= -1e-9) & (idx <= n - 1 + 1e-9), axis=1)
    out = np.zeros(points.shape[0], dtype=np.float64)
    if inside.any():
        coords = np.clip(idx[inside], 0, n - 1).T
        out[inside] = map_coordinates(vol.labels.astype(np.float64), coords, order=order, mode="nearest")
    return out


@dataclass(frozen=True)
class SweepSpec:
    """Fan sweep: ``n_slices`` planes at equally spaced angles (degrees).

    ``grid=None`` gives a 96x96 image spanning the volume laterally and in
    depth; ``pivot=None`` puts the apex at the centre of the top face.
    """

    axis: str = "sagittal"
    angle_range: tuple = (-60.0, 60.0)
    n_slices: int = 100
    grid: PixelGridSpec = None
    pivot: tuple = None
    side: float = DEFAULT_SIDE

    def __post_init__(self):
        if self.axis not in ("sagittal", "transversal"):
            raise ValueError("axis must be 'sagittal' or 'transversal'")
        if int(self.n_slices) < 1:
            raise ValueError("n_slices must be >= 1")
        lo, hi = (float(v) for v in self.angle_range)
        if lo > hi:
            raise ValueError("angle_range must be ordered")
        object.__setattr__(self, "angle_range", (lo, hi))
        if self.grid is None:
            h = 0.5 * self.side
            object.__setattr__(self, "grid", PixelGridSpec(96, 96, (-h, h, 0.0, self.side)))
        if self.pivot is None:
            object.__setattr__(self, "pivot", (0.0, 0.0, -0.5 * self.side))


def sweep_angles(spec):
    """Equally spaced angles in radians, endpoints included; one slice sits at the midpoint."""
    lo, hi = spec.angle_range
    if spec.n_slices == 1:
        return np.radians([0.5 * (lo + hi)])
    return np.radians(np.linspace(lo, hi, spec.n_slices))


def _base_rotation(axis):
    # columns: world directions of image x (lateral), image y (depth), plane normal
    if axis == "sagittal":
        return pose_from_6d([np.pi / 2, 0, 0, 0, 0, 0]).rotation
    return pose_from_6d([np.pi / 2, 0, np.pi / 2, 0, 0, 0]).rotation


def sweep_poses(spec):
    """``(SlicePose list, Pose6D list)`` for every angle of the sweep."""
    base = _base_rotation(spec.axis)
    lateral = base[:, 0]
    pivot = np.asarray(spec.pivot, dtype=float)
    ax, bx, ay, by = spec.grid.extent
    apex = np.array([0.5 * (ax + bx), ay, 0.0])
    poses, vectors = [], []
    for theta in sweep_angles(spec):
        tilt = _axis_angle(lateral, theta)
        r = tilt @ base
        # world = pivot + R (p - apex) = R (p + t)
        t = r.T @ pivot - apex
        pose = SlicePose(r, t)
        poses.append(pose)
        vectors.append(pose_to_6d(pose))
    return poses, vectors


def _axis_angle(axis, theta):
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * kx @ kx


def sample_sweep(vol, spec=SweepSpec(), order=1):
    """Slice the volume along the sweep; images are float32 in [0, 1]."""
    poses, vectors = sweep_poses(spec)
    grid = spec.grid
    plane = grid_points(grid)
    images = np.empty((len(poses),) + grid.shape, dtype=np.float32)
    for k, pose in enumerate(poses):
        pts = (plane + pose.translation) @ pose.rotation.T
        images[k] = sample_volume(vol, pts, order).reshape(grid.shape)
    meta = {
        "axis": spec.axis,
        "angles_deg": [float(a) for a in np.degrees(sweep_angles(spec))],
        "pivot": list(map(float, spec.pivot)),
    }
    return SliceStack(images, poses, grid, np.arange(len(poses)), vectors, meta)
