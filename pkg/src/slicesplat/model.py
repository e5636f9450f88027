"""Scene representation, slice poses and pixel-to-world geometry.

Conventions used throughout the package:

* quaternions are Hamilton, scalar first ``(w, x, y, z)``;
* Euler angles are fixed-axis X-then-Y-then-Z, so ``R = Rz @ Ry @ Rx``;
* a pixel at in-plane position ``p = (x, y, 0)`` lies at ``R @ (p + t)`` in the
  world, i.e. the slice translation is applied *before* the rotation;
* a Gaussian's covariance is ``(S R)^T (S R) = R^T S^2 R`` with
  ``S = diag(exp(log_scale))``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaussianCloud",
    "SlicePose",
    "Pose6D",
    "PixelGridSpec",
    "SliceStack",
    "pose_from_6d",
    "pose_to_6d",
    "pixel_to_world",
    "grid_points",
    "slice_points",
    "quat_to_rotmat",
    "rotmat_to_quat",
    "quat_multiply",
    "covariance_from_params",
    "covariances",
    "sym6_to_mat",
    "mat_to_sym6",
    "sigmoid",
    "logit",
]

# Upper-triangular layout of a symmetric 3x3 matrix:
# [[s0, s1, s2], [s1, s3, s4], [s2, s4, s5]]
SYM6_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _check_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr!r}")
    return arr


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_to_rotmat(q):
    """Rotation matrices for quaternions ``(..., 4)`` in ``(w, x, y, z)`` order.

    The input is normalized first; a zero quaternion raises ``ValueError``.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("quaternion must be nonzero")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def rotmat_to_quat(r):
    """Unit quaternion (w >= 0) for a single rotation matrix."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (broadcasting over leading axes)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Poses and grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlicePose:
    """Rigid pose of an image plane: world point = ``rotation @ (p + translation)``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.allclose(r.T @ r, np.eye(3), atol=1e-9) and abs(np.linalg.det(r) - 1.0) < 1e-9):
            raise ValueError("rotation must be orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def premultiply(self, r):
        """Pose whose world points are ``r @ (old world points)``."""
        return SlicePose(np.asarray(r, dtype=float) @ self.rotation, self.translation)


@dataclass(frozen=True)
class Pose6D:
    """Euler angles ``r = (rx, ry, rz)`` in radians plus a translation ``t``."""

    r: tuple
    t: tuple

    def __post_init__(self):
        r = tuple(float(v) for v in _check_finite("angles", self.r).reshape(3))
        t = tuple(float(v) for v in _check_finite("translation", self.t).reshape(3))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_vector(cls, y):
        y = np.asarray(y, dtype=float).reshape(6)
        return cls(tuple(y[:3]), tuple(y[3:]))

    def as_vector(self):
        return np.array(self.r + self.t)


def pose_from_6d(y):
    """Build a :class:`SlicePose` from a :class:`Pose6D` or a 6-vector."""
    if not isinstance(y, Pose6D):
        y = Pose6D.from_vector(_check_finite("pose vector", y))
    rx, ry, rz = y.r
    return SlicePose(_rz(rz) @ _ry(ry) @ _rx(rx), np.array(y.t))


def pose_to_6d(pose):
    """Inverse of :func:`pose_from_6d`; unique for ``|ry| < pi/2``."""
    r = pose.rotation
    ry = np.arctan2(-r[2, 0], np.hypot(r[2, 1], r[2, 2]))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return Pose6D((rx, ry, rz), tuple(pose.translation))


@dataclass(frozen=True)
class PixelGridSpec:
    """Pixel counts plus the in-plane physical extent ``[ax, bx] x [ay, by]``.

    The default extent is a unit square centred on the origin.
    """

    width: int
    height: int
    extent: tuple = (-0.5, 0.5, -0.5, 0.5)

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("grid width and height must be >= 1")
        ext = tuple(float(v) for v in self.extent)
        if len(ext) != 4 or not ext[1] > ext[0] or not ext[3] > ext[2]:
            raise ValueError(f"extent must be (ax, bx, ay, by) with bx > ax, by > ay; got {ext}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "extent", ext)

    @classmethod
    def pixel_units(cls, width, height=None, pitch=1.0):
        """Grid centred on the origin with ``pitch`` scene units between pixels."""
        height = width if height is None else height
        hx = 0.5 * pitch * max(width - 1, 1)
        hy = 0.5 * pitch * max(height - 1, 1)
        return cls(width, height, (-hx, hx, -hy, hy))

    @property
    def shape(self):
        return (self.height, self.width)

    def xs(self):
        return _axis_coords(self.extent[0], self.extent[1], self.width)

    def ys(self):
        return _axis_coords(self.extent[2], self.extent[3], self.height)


def _axis_coords(a, b, n):
    if n == 1:
        return np.array([0.5 * (a + b)])
    return a + np.arange(n) * ((b - a) / (n - 1))


def pixel_to_world(pose, grid, i, j):
    """World coordinate of pixel ``(row i, col j)`` on a posed slice."""
    if not (0 <= i < grid.height and 0 <= j < grid.width):
        raise ValueError(f"pixel ({i}, {j}) outside a {grid.height}x{grid.width} grid")
    p = np.array([grid.xs()[j], grid.ys()[i], 0.0])
    return pose.rotation @ (p + pose.translation)


def grid_points(grid):
    """In-plane coordinates ``(H*W, 3)`` in row-major pixel order."""
    yy, xx = np.meshgrid(grid.ys(), grid.xs(), indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)


def slice_points(pose, grid):
    """World coordinates ``(H*W, 3)`` for every pixel of a slice, row-major."""
    p = grid_points(grid) + pose.translation
    return p @ pose.rotation.T


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------


def sym6_to_mat(s):
    s = np.asarray(s, dtype=float)
    m = np.empty(s.shape[:-1] + (3, 3))
    for k, (a, b) in enumerate(SYM6_INDEX):
        m[..., a, b] = s[..., k]
        m[..., b, a] = s[..., k]
    return m


def mat_to_sym6(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., a, b] for a, b in SYM6_INDEX], axis=-1)


def covariances(log_scales, quats):
    """Compact covariances and inverse covariances, each ``(N, 6)``.

    Both come from the factorization directly: ``Sigma = R^T S^2 R`` and
    ``Sigma^-1 = R^T S^-2 R``, so no numerical inversion is involved.
    """
    log_scales = np.asarray(log_scales, dtype=float).reshape(-1, 3)
    r = quat_to_rotmat(np.asarray(quats, dtype=float).reshape(-1, 4))
    s2 = np.exp(2.0 * log_scales)
    cov = np.einsum("nki,nk,nkj->nij", r, s2, r)
    inv = np.einsum("nki,nk,nkj->nij", r, 1.0 / s2, r)
    return mat_to_sym6(cov), mat_to_sym6(inv)


def covariance_from_params(log_scale, quat):
    """Full ``(Sigma, Sigma^-1)`` for one Gaussian."""
    cov, inv = covariances(np.reshape(log_scale, (1, 3)), np.reshape(quat, (1, 4)))
    return sym6_to_mat(cov[0]), sym6_to_mat(inv[0])


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianCloud:
    """Structure-of-arrays set of anisotropic Gaussians.

    ``opacity_logits`` and ``intensities`` are 1-D arrays of length N. Arrays
    keep the dtype they were built with (float64 for analysis, float32 for
    training storage and checkpoints).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    intensities: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    PARAMS = ("means", "log_scales", "quats", "opacity_logits", "intensities")
    WIDTHS = (3, 3, 4, 1, 1)

    def __post_init__(self):
        n = None
        for name, width in zip(self.PARAMS, self.WIDTHS):
            arr = np.asarray(getattr(self, name))
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(float)
            arr = arr.reshape(-1) if width == 1 else arr.reshape(-1, width)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.means.shape[0]

    @property
    def n(self):
        return len(self)

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @classmethod
    def empty(cls, dtype=np.float64):
        z = lambda w: np.zeros((0, w), dtype=dtype)
        return cls(z(3), z(3), z(4), np.zeros(0, dtype), np.zeros(0, dtype))

    @classmethod
    def from_flat(cls, flat, dtype=None):
        """Inverse of :meth:`flat` (an ``(N, 12)`` array in declared order)."""
        flat = np.asarray(flat) if dtype is None else np.asarray(flat, dtype=dtype)
        flat = flat.reshape(-1, 12)
        cuts = np.cumsum((0,) + cls.WIDTHS)
        parts = [flat[:, a:b].copy() for a, b in zip(cuts[:-1], cuts[1:])]
        return cls(*parts)

    def flat(self):
        return np.concatenate(
            [self.means, self.log_scales, self.quats, self.opacity_logits[:, None], self.intensities[:, None]],
            axis=1,
        )

    def arrays(self):
        return {name: getattr(self, name) for name in self.PARAMS}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def astype(self, dtype):
        return self.replace(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self):
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()}, meta=dict(self.meta))

    def subset(self, idx):
        return self.replace(**{k: v[idx] for k, v in self.arrays().items()})

    def concat(self, other):
        return self.replace(**{k: np.concatenate([v, getattr(other, k)]) for k, v in self.arrays().items()})

    def normalized(self):
        """Copy with unit quaternions."""
        q = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)
        return self.replace(quats=q.astype(self.quats.dtype))

    def covariances(self):
        return covariances(self.log_scales, self.quats)


@dataclass(frozen=True)
class SliceStack:
    """Ordered slice images sharing one pixel grid, each with a known pose."""

    images: np.ndarray
    poses: tuple
    grid: PixelGridSpec
    order: np.ndarray = None
    pose6d: tuple = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h, w = self.grid.shape
        images = np.asarray(self.images)
        if images.size == 0:
            images = images.reshape(0, h, w)
        if images.ndim != 3 or images.shape[1:] != (h, w):
            raise ValueError(f"images must be (M, {h}, {w}), got {images.shape}")
        poses = tuple(self.poses)
        if len(poses) != images.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {len(poses)} poses")
        order = np.arange(len(poses)) if self.order is None else np.asarray(self.order, dtype=np.int64)
        if order.shape != (len(poses),):
            raise ValueError("order must have one entry per slice")
        if self.pose6d is not None and len(self.pose6d) != len(poses):
            raise ValueError("pose6d must have one entry per slice")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "order", order)
        if self.pose6d is not None:
            object.__setattr__(self, "pose6d", tuple(self.pose6d))

    def __len__(self):
        return len(self.poses)

    def subset(self, idx):
        idx = [int(i) for i in np.atleast_1d(idx)]
        return SliceStack(
            self.images[idx],
            [self.poses[i] for i in idx],
            self.grid,
            self.order[idx],
            None if self.pose6d is None else [self.pose6d[i] for i in idx],
            dict(self.meta),
        )
