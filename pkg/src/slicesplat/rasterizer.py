"""Forward splatting of Gaussians onto slice planes.

Each pixel value is the plain weighted sum ``I_p = sum_g o_g exp(e_gp) I_g``
with ``e_gp = -0.5 d^T Sigma_g^-1 d`` and ``d = c_p - mu_g``. There is no
ordering or over-compositing.

Work is organised in pixel blocks. For every block a list of candidate
Gaussians is built (every Gaussian in exact mode; only those whose
``cutoff_chi2`` ellipsoid can reach the block otherwise). Each pixel then sums
its candidates in ascending Gaussian index, so results do not depend on the
block layout, the Gaussian tile size or the thread count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .model import GaussianCloud, slice_points

__all__ = [
    "RenderOptions",
    "RenderPlan",
    "prepare",
    "prepare_points",
    "splat_pixel",
    "render_points",
    "render_slice",
    "render_slices",
    "render_sweep",
    "set_num_threads",
]

THREADS_ENV = "SLICESPLAT_NUM_THREADS"

# skip the TBB probe (it warns on older TBB builds)
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def set_num_threads(n=None):
    """Cap kernel parallelism; ``None`` reads ``SLICESPLAT_NUM_THREADS``."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


set_num_threads()


@dataclass(frozen=True)
class RenderOptions:
    """Rasterizer knobs.

    ``cutoff_chi2 = inf`` is exact mode. ``tile_size`` is the number of
    Gaussians processed per inner block; ``pixel_block`` is the side length of
    the square pixel blocks used for candidate culling.
    """

    cutoff_chi2: float = math.inf
    tile_size: int = 64
    pixel_block: int = 16

    def __post_init__(self):
        if not self.cutoff_chi2 > 0:
            raise ValueError("cutoff_chi2 must be > 0")
        if int(self.tile_size) < 1 or int(self.pixel_block) < 1:
            raise ValueError("tile_size and pixel_block must be >= 1")

    @property
    def exact(self):
        return math.isinf(self.cutoff_chi2)


EXACT = RenderOptions()


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _quad(inv, g, dx, dy, dz):
    # returns (q, v) with v = Sigma^-1 d, q = d . v
    vx = inv[g, 0] * dx + inv[g, 1] * dy + inv[g, 2] * dz
    vy = inv[g, 1] * dx + inv[g, 3] * dy + inv[g, 4] * dz
    vz = inv[g, 2] * dx + inv[g, 4] * dy + inv[g, 5] * dz
    return dx * vx + dy * vy + dz * vz, vx, vy, vz


@njit(parallel=True, cache=True)
def _forward_kernel(points, pix, block_off, cstart, cend, cidx, means, inv, opac, inten, cutoff, tile, out):
    nb = block_off.shape[0] - 1
    for b in prange(nb):
        s, e = cstart[b], cend[b]
        for k in range(block_off[b], block_off[b + 1]):
            p = pix[k]
            px, py, pz = points[p, 0], points[p, 1], points[p, 2]
            acc = 0.0
            for t0 in range(s, e, tile):
                for c in range(t0, min(t0 + tile, e)):
                    g = cidx[c]
                    q, vx, vy, vz = _quad(inv, g, px - means[g, 0], py - means[g, 1], pz - means[g, 2])
                    if q <= cutoff:
                        alpha = opac[g] * math.exp(-0.5 * q)
                        acc += alpha * inten[g]
            out[p] = acc


@njit(parallel=True, cache=True)
def _backward_kernel(points, pix, block_off, gstart, gend, gblk, means, inv, upstream, cutoff, acc_k, acc_v, acc_vv):
    n = means.shape[0]
    for g in prange(n):
        sk = 0.0
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        w0 = 0.0
        w1 = 0.0
        w2 = 0.0
        w3 = 0.0
        w4 = 0.0
        w5 = 0.0
        mx, my, mz = means[g, 0], means[g, 1], means[g, 2]
        for j in range(gstart[g], gend[g]):
            b = gblk[j]
            for k in range(block_off[b], block_off[b + 1]):
                p = pix[k]
                u = upstream[p]
                if u == 0.0:
                    continue
                q, vx, vy, vz = _quad(inv, g, points[p, 0] - mx, points[p, 1] - my, points[p, 2] - mz)
                if q <= cutoff:
                    kk = u * math.exp(-0.5 * q)
                    sk += kk
                    s0 += kk * vx
                    s1 += kk * vy
                    s2 += kk * vz
                    w0 += kk * vx * vx
                    w1 += kk * vx * vy
                    w2 += kk * vx * vz
                    w3 += kk * vy * vy
                    w4 += kk * vy * vz
                    w5 += kk * vz * vz
        acc_k[g] = sk
        acc_v[g, 0] = s0
        acc_v[g, 1] = s1
        acc_v[g, 2] = s2
        acc_vv[g, 0] = w0
        acc_vv[g, 1] = w1
        acc_vv[g, 2] = w2
        acc_vv[g, 3] = w3
        acc_vv[g, 4] = w4
        acc_vv[g, 5] = w5


@njit(parallel=True, cache=True)
def _pixel_grad_kernel(points, pix, block_off, cstart, cend, cidx, means, inv, opac, inten, upstream, cutoff, out):
    nb = block_off.shape[0] - 1
    for b in prange(nb):
        for k in range(block_off[b], block_off[b + 1]):
            p = pix[k]
            u = upstream[p]
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(cstart[b], cend[b]):
                g = cidx[c]
                q, vx, vy, vz = _quad(inv, g, points[p, 0] - means[g, 0], points[p, 1] - means[g, 1],
                                      points[p, 2] - means[g, 2])
                if q <= cutoff:
                    f = -inten[g] * u * opac[g] * math.exp(-0.5 * q)
                    gx += f * vx
                    gy += f * vy
                    gz += f * vz
            out[p, 0] = gx
            out[p, 1] = gy
            out[p, 2] = gz


@njit(parallel=True, cache=True)
def _count_candidates(frame_of_block, lo, hi, lmeans, half):
    nb = frame_of_block.shape[0]
    n = lmeans.shape[1]
    counts = np.zeros(nb, dtype=np.int64)
    for b in prange(nb):
        f = frame_of_block[b]
        c = 0
        for g in range(n):
            if (abs(lmeans[f, g, 0] - 0.5 * (lo[b, 0] + hi[b, 0])) <= half[f, g, 0] + 0.5 * (hi[b, 0] - lo[b, 0])
                    and abs(lmeans[f, g, 1] - 0.5 * (lo[b, 1] + hi[b, 1])) <= half[f, g, 1] + 0.5 * (hi[b, 1] - lo[b, 1])
                    and abs(lmeans[f, g, 2] - 0.5 * (lo[b, 2] + hi[b, 2])) <= half[f, g, 2] + 0.5 * (hi[b, 2] - lo[b, 2])):
                c += 1
        counts[b] = c
    return counts


@njit(parallel=True, cache=True)
def _fill_candidates(frame_of_block, lo, hi, lmeans, half, offsets, out):
    nb = frame_of_block.shape[0]
    n = lmeans.shape[1]
    for b in prange(nb):
        f = frame_of_block[b]
        c = offsets[b]
        for g in range(n):
            if (abs(lmeans[f, g, 0] - 0.5 * (lo[b, 0] + hi[b, 0])) <= half[f, g, 0] + 0.5 * (hi[b, 0] - lo[b, 0])
                    and abs(lmeans[f, g, 1] - 0.5 * (lo[b, 1] + hi[b, 1])) <= half[f, g, 1] + 0.5 * (hi[b, 1] - lo[b, 1])
                    and abs(lmeans[f, g, 2] - 0.5 * (lo[b, 2] + hi[b, 2])) <= half[f, g, 2] + 0.5 * (hi[b, 2] - lo[b, 2])):
                out[c] = g
                c += 1


# ---------------------------------------------------------------------------
# Layout of query points
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    """Query points grouped into blocks; each block lives in one local frame.

    ``local = x @ frame_rot - frame_shift`` maps world points into the frame,
    and ``lo``/``hi`` bound each block's points in that frame.
    """

    points: np.ndarray
    pix: np.ndarray
    block_off: np.ndarray
    frame_of_block: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    frame_rot: np.ndarray
    frame_shift: np.ndarray

    @property
    def n_blocks(self):
        return self.block_off.shape[0] - 1


def _slice_layout(poses, grid, block):
    h, w = grid.shape
    xs, ys = grid.xs(), grid.ys()
    pix_one = []
    offs = [0]
    lo_one = []
    hi_one = []
    for r0 in range(0, h, block):
        r1 = min(r0 + block, h)
        for c0 in range(0, w, block):
            c1 = min(c0 + block, w)
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            pix_one.append((rr * w + cc).ravel())
            offs.append(offs[-1] + pix_one[-1].size)
            lo_one.append((xs[c0], ys[r0], 0.0))
            hi_one.append((xs[c1 - 1], ys[r1 - 1], 0.0))
    pix_one = np.concatenate(pix_one)
    offs = np.asarray(offs, dtype=np.int64)
    nb1 = offs.size - 1
    m = len(poses)
    npix = h * w
    points = np.concatenate([slice_points(p, grid) for p in poses]) if m else np.zeros((0, 3))
    pix = (pix_one[None, :] + npix * np.arange(m)[:, None]).ravel().astype(np.int64)
    block_off = np.concatenate([[0], (offs[1:][None, :] + npix * np.arange(m)[:, None]).ravel()]).astype(np.int64)
    frame_rot = np.array([p.rotation for p in poses]).reshape(m, 3, 3)
    frame_shift = np.array([p.translation for p in poses]).reshape(m, 3)
    return _Layout(
        points=np.ascontiguousarray(points, dtype=np.float64),
        pix=pix,
        block_off=block_off,
        frame_of_block=np.repeat(np.arange(m), nb1).astype(np.int64),
        lo=np.tile(np.asarray(lo_one), (m, 1)).reshape(-1, 3),
        hi=np.tile(np.asarray(hi_one), (m, 1)).reshape(-1, 3),
        frame_rot=frame_rot,
        frame_shift=frame_shift,
    )


def _point_layout(points, block):
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    p = points.shape[0]
    size = block * block
    offs = np.arange(0, p + size, size)
    offs[-1] = p
    offs = np.unique(offs).astype(np.int64)
    if offs.size == 1:
        offs = np.array([0, 0], dtype=np.int64)
    lo = np.array([points[a:b].min(axis=0) if b > a else np.zeros(3) for a, b in zip(offs[:-1], offs[1:])])
    hi = np.array([points[a:b].max(axis=0) if b > a else np.zeros(3) for a, b in zip(offs[:-1], offs[1:])])
    return _Layout(
        points=points,
        pix=np.arange(p, dtype=np.int64),
        block_off=offs,
        frame_of_block=np.zeros(offs.size - 1, dtype=np.int64),
        lo=lo.reshape(-1, 3),
        hi=hi.reshape(-1, 3),
        frame_rot=np.eye(3)[None],
        frame_shift=np.zeros((1, 3)),
    )


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


class RenderPlan:
    """Precomputed per-call state shared by the forward and backward passes.

    Holds the inverse covariances (six coefficients per Gaussian), the block
    layout of the query points and the block/Gaussian candidate lists in both
    directions. Build a new plan whenever the cloud changes.
    """

    def __init__(self, cloud, layout, opts=EXACT):
        self.cloud = cloud
        self.layout = layout
        self.opts = opts
        c64 = cloud.astype(np.float64)
        self.means = np.ascontiguousarray(c64.means)
        self.scales = c64.scales
        self.quats = c64.quats
        self.cov6, self.inv6 = c64.covariances()
        self.inv6 = np.ascontiguousarray(self.inv6)
        self.opac = np.ascontiguousarray(c64.opacities)
        self.inten = np.ascontiguousarray(c64.intensities)
        self.cutoff = math.inf if opts.exact else float(opts.cutoff_chi2)
        self._build_candidates()

    @property
    def n_points(self):
        return self.layout.points.shape[0]

    def _build_candidates(self):
        lay = self.layout
        n = self.means.shape[0]
        nb = lay.n_blocks
        if self.opts.exact or n == 0:
            self.cidx = np.arange(n, dtype=np.int64)
            self.cstart = np.zeros(nb, dtype=np.int64)
            self.cend = np.full(nb, n, dtype=np.int64)
            self.gblk = np.arange(nb, dtype=np.int64)
            self.gstart = np.zeros(n, dtype=np.int64)
            self.gend = np.full(n, nb, dtype=np.int64)
            return
        rot, shift = lay.frame_rot, lay.frame_shift
        lmeans = np.einsum("gi,fik->fgk", self.means, rot) - shift[:, None, :]
        cov = np.empty((n, 3, 3))
        for k, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
            cov[:, a, b] = self.cov6[:, k]
            cov[:, b, a] = self.cov6[:, k]
        diag = np.einsum("fik,gij,fjk->fgk", rot, cov, rot)
        half = np.sqrt(self.cutoff * np.maximum(diag, 0.0)) * (1.0 + 1e-9) + 1e-12
        lmeans = np.ascontiguousarray(lmeans)
        half = np.ascontiguousarray(half)
        counts = _count_candidates(lay.frame_of_block, lay.lo, lay.hi, lmeans, half)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        cidx = np.empty(offsets[-1], dtype=np.int64)
        _fill_candidates(lay.frame_of_block, lay.lo, lay.hi, lmeans, half, offsets, cidx)
        self.cidx = cidx
        self.cstart = offsets[:-1].copy()
        self.cend = offsets[1:].copy()
        # transpose: blocks per Gaussian, ascending block order
        blk_of_pair = np.repeat(np.arange(nb, dtype=np.int64), counts)
        order = np.argsort(cidx, kind="stable")
        self.gblk = blk_of_pair[order]
        goff = np.concatenate([[0], np.cumsum(np.bincount(cidx, minlength=n))]).astype(np.int64)
        self.gstart = goff[:-1].copy()
        self.gend = goff[1:].copy()

    @property
    def n_pairs(self):
        """Number of (block, Gaussian) candidate pairs."""
        return int(np.sum(self.cend - self.cstart))

    def forward(self):
        lay = self.layout
        out = np.zeros(self.n_points)
        if self.means.shape[0] and lay.n_blocks:
            _forward_kernel(lay.points, lay.pix, lay.block_off, self.cstart, self.cend, self.cidx,
                            self.means, self.inv6, self.opac, self.inten, self.cutoff,
                            int(self.opts.tile_size), out)
        return out

    def accumulate(self, upstream):
        """Per-Gaussian sums over pixels of ``u E``, ``u E v`` and ``u E v v^T``.

        ``E = exp(e_gp)`` and ``v = Sigma^-1 d``; these are the only
        pixel-dependent quantities the parameter gradients need.
        """
        upstream = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(-1))
        if upstream.shape[0] != self.n_points:
            raise ValueError(f"upstream has {upstream.shape[0]} entries, expected {self.n_points}")
        n = self.means.shape[0]
        acc_k = np.zeros(n)
        acc_v = np.zeros((n, 3))
        acc_vv = np.zeros((n, 6))
        lay = self.layout
        if n and lay.n_blocks:
            _backward_kernel(lay.points, lay.pix, lay.block_off, self.gstart, self.gend, self.gblk,
                             self.means, self.inv6, upstream, self.cutoff, acc_k, acc_v, acc_vv)
        return acc_k, acc_v, acc_vv

    def pixel_gradient(self, upstream):
        """``dL/dc_p`` for every query point, ``(P, 3)``."""
        upstream = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(-1))
        out = np.zeros((self.n_points, 3))
        lay = self.layout
        if self.means.shape[0] and lay.n_blocks:
            _pixel_grad_kernel(lay.points, lay.pix, lay.block_off, self.cstart, self.cend, self.cidx,
                               self.means, self.inv6, self.opac, self.inten, upstream, self.cutoff, out)
        return out


def prepare(cloud, poses, grid, opts=EXACT):
    """Plan for rendering ``cloud`` on every slice in ``poses``."""
    return RenderPlan(cloud, _slice_layout(list(poses), grid, int(opts.pixel_block)), opts)


def prepare_points(cloud, points, opts=EXACT):
    """Plan for evaluating ``cloud`` at arbitrary world points ``(P, 3)``."""
    return RenderPlan(cloud, _point_layout(points, int(opts.pixel_block)), opts)


# ---------------------------------------------------------------------------
# Public rendering API
# ---------------------------------------------------------------------------


def render_points(cloud, points, opts=EXACT):
    return prepare_points(cloud, points, opts).forward()


def splat_pixel(cloud: GaussianCloud, c_p, opts: RenderOptions = EXACT) -> float:
    c_p = np.asarray(c_p, dtype=float).reshape(3)
    if not np.all(np.isfinite(c_p)):
        raise ValueError("pixel coordinate must be finite")
    return float(render_points(cloud, c_p[None], opts)[0])


def render_slices(cloud, poses, grid, opts=EXACT):
    """Images ``(M, H, W)`` for every pose."""
    poses = list(poses)
    h, w = grid.shape
    if not poses:
        return np.zeros((0, h, w))
    return prepare(cloud, poses, grid, opts).forward().reshape(len(poses), h, w)


def render_slice(cloud, pose, grid, opts=EXACT):
    return render_slices(cloud, [pose], grid, opts)[0]


def render_sweep(cloud, poses, grid, opts=EXACT):
    return list(render_slices(cloud, poses, grid, opts))
