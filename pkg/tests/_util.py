import numpy as np

from slicesplat.model import GaussianCloud, PixelGridSpec, SliceStack, pose_from_6d


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, spread=1.0, log_scale=(-1.0, 0.0), dtype=np.float64):
    """Gaussians scattered around the origin with moderate, anisotropic extent."""
    return GaussianCloud(
        means=rng.uniform(-spread, spread, size=(n, 3)),
        log_scales=rng.uniform(*log_scale, size=(n, 3)),
        quats=random_quats(rng, n),
        opacity_logits=rng.normal(size=n),
        intensities=rng.uniform(-0.5, 1.0, size=n),
    ).astype(dtype)


def random_pose(rng, angle=np.pi, shift=0.3):
    y = np.concatenate([rng.uniform(-angle, angle, 3) * [1, 0.45, 1], rng.uniform(-shift, shift, 3)])
    return pose_from_6d(y)


def random_stack(rng, m=2, w=8, h=8, extent=(-1.2, 1.2, -1.2, 1.2)):
    grid = PixelGridSpec(w, h, extent)
    poses = [random_pose(rng) for _ in range(m)]
    return SliceStack(np.zeros((m, h, w)), poses, grid)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def direct_splat(cloud, points):
    """Straight-line reference: sum over Gaussians with a full matrix inverse."""
    from slicesplat.model import quat_to_rotmat, sigmoid

    points = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros(points.shape[0])
    r = quat_to_rotmat(np.asarray(cloud.quats, dtype=float))
    s = np.exp(np.asarray(cloud.log_scales, dtype=float))
    for g in range(len(cloud)):
        m = np.diag(s[g]) @ r[g]
        cov = m.T @ m
        inv = np.linalg.inv(cov)
        d = points - cloud.means[g]
        e = -0.5 * np.einsum("pi,ij,pj->p", d, inv, d)
        out += sigmoid(float(cloud.opacity_logits[g])) * np.exp(e) * float(cloud.intensities[g])
    return out


def naive_ssim(x, y, size=11, sigma=1.5):
    """Window sums written out pixel by pixel over a zero-padded image."""
    r = size // 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    xp, yp = np.pad(x, r), np.pad(y, r)
    c1, c2 = 0.01**2, 0.03**2
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a = xp[i:i + size, j:j + size]
            b = yp[i:i + size, j:j + size]
            mx, my = np.sum(w * a), np.sum(w * b)
            vx = np.sum(w * a * a) - mx**2
            vy = np.sum(w * b * b) - my**2
            cxy = np.sum(w * a * b) - mx * my
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return out
