"""Compare the analytic backward pass with central finite differences.

Draws random small scenes (a handful of anisotropic Gaussians, one or two
tilted slices) and reports the worst relative error per parameter group.
This is the check the whole optimizer rests on; run it after touching the
rasterizer or the backward kernels.

    python demos/gradient_check.py --instances 20
"""

import argparse

import numpy as np

from slicesplat.autodiff import GradientSet, backward, finite_difference_gradients
from slicesplat.model import GaussianCloud, PixelGridSpec, SliceStack, pose_from_6d
from slicesplat.rasterizer import render_slices


def scene(rng):
    n = int(rng.integers(1, 21))
    q = rng.normal(size=(n, 4))
    cloud = GaussianCloud(rng.uniform(-1, 1, (n, 3)), rng.uniform(-1, 0, (n, 3)),
                          q / np.linalg.norm(q, axis=1, keepdims=True), rng.normal(size=n),
                          rng.uniform(-0.5, 1.0, n))
    w, h = (int(v) for v in rng.integers(8, 17, 2))
    m = int(rng.integers(1, 3))
    poses = [pose_from_6d(np.concatenate([rng.uniform(-1, 1, 3), rng.uniform(-0.3, 0.3, 3)])) for _ in range(m)]
    stack = SliceStack(rng.uniform(0, 1, (m, h, w)), poses, PixelGridSpec(w, h, (-1.2, 1.2, -1.2, 1.2)))
    return cloud, stack


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    worst = dict.fromkeys(GradientSet.GROUPS, 0.0)
    for _ in range(args.instances):
        cloud, stack = scene(rng)
        target = np.asarray(stack.images)

        def mse(images, _stack):
            return np.mean((images - target) ** 2)

        images = render_slices(cloud, stack.poses, stack.grid)
        analytic = backward(cloud, stack, 2.0 * (images - target) / images.size)
        numeric = finite_difference_gradients(cloud, stack, mse, h=1e-5)
        for g in GradientSet.GROUPS:
            a, b = analytic[g], numeric[g]
            err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
            worst[g] = max(worst[g], float(err.max()))

    for g, e in worst.items():
        print(f"{g:15s} worst relative error {e:.2e}")
    print("all groups within 1e-4" if max(worst.values()) < 1e-4 else "MISMATCH above 1e-4")


if __name__ == "__main__":
    main()
