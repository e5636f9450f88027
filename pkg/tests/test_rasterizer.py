import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicesplat.model import GaussianCloud, PixelGridSpec, SlicePose, quat_multiply, quat_to_rotmat, slice_points
from slicesplat.rasterizer import (
    EXACT,
    RenderOptions,
    prepare,
    render_points,
    render_slice,
    render_slices,
    render_sweep,
    set_num_threads,
    splat_pixel,
)

from _util import direct_splat, random_cloud, random_pose, random_quats

GRID = PixelGridSpec(12, 10, (-1.5, 1.5, -1.2, 1.2))


def _scene(seed, n=15, m=2):
    rng = np.random.default_rng(seed)
    return rng, random_cloud(rng, n), [random_pose(rng) for _ in range(m)]


@pytest.mark.parametrize("seed", range(4))
def test_matches_direct_sum(seed):
    rng, cloud, poses = _scene(seed)
    images = render_slices(cloud, poses, GRID)
    for k, pose in enumerate(poses):
        ref = direct_splat(cloud, slice_points(pose, GRID)).reshape(GRID.shape)
        assert np.allclose(images[k], ref, rtol=1e-11, atol=1e-13)


def test_single_isotropic_gaussian_value():
    cloud = GaussianCloud([[0.0, 0.0, 0.5]], [[0.0, 0.0, 0.0]], [[1, 0, 0, 0]], [0.0], [2.0])
    v = splat_pixel(cloud, [0.0, 0.0, 0.0])
    assert v == pytest.approx(0.5 * 2.0 * np.exp(-0.5 * 0.25), rel=1e-14)


def test_empty_cloud_renders_zero():
    img = render_slice(GaussianCloud.empty(), SlicePose.identity(), GRID)
    assert img.shape == GRID.shape and not img.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(-6, 6))
def test_linear_in_intensities_power_of_two(seed, e):
    _, cloud, poses = _scene(seed)
    c = 2.0**e
    base = render_slices(cloud, poses, GRID)
    scaled = render_slices(cloud.replace(intensities=cloud.intensities * c), poses, GRID)
    assert np.array_equal(scaled, c * base)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_linear_in_intensities(seed, c):
    _, cloud, poses = _scene(seed)
    base = render_slices(cloud, poses, GRID)
    scaled = render_slices(cloud.replace(intensities=cloud.intensities * c), poses, GRID)
    assert np.allclose(scaled, c * base, rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_additive_over_disjoint_sets(seed):
    rng, a, poses = _scene(seed)
    b = random_cloud(rng, 9)
    both = render_slices(a.concat(b), poses, GRID)
    assert np.max(np.abs(both - render_slices(a, poses, GRID) - render_slices(b, poses, GRID))) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_rigid_equivariance(seed):
    rng, cloud, poses = _scene(seed)
    r = random_quats(rng, 1)[0]
    rot = quat_to_rotmat(r)
    moved = cloud.replace(
        means=cloud.means @ rot.T,
        quats=quat_multiply(cloud.quats, r * [1, -1, -1, -1]),
    )
    a = render_slices(cloud, poses, GRID)
    b = render_slices(moved, [p.premultiply(rot) for p in poses], GRID)
    assert np.max(np.abs(a - b)) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_cutoff_error_within_analytic_bound(seed):
    rng = np.random.default_rng(100 + seed)
    cloud = random_cloud(rng, 300, spread=4.0, log_scale=(-1.0, 0.5))
    poses = [random_pose(rng) for _ in range(3)]
    grid = PixelGridSpec(40, 40, (-4, 4, -4, 4))
    cutoff = 25.0
    exact = render_slices(cloud, poses, grid, EXACT)
    cut = render_slices(cloud, poses, grid, RenderOptions(cutoff_chi2=cutoff))
    bound = np.sum(np.abs(cloud.intensities) * cloud.opacities) * np.exp(-0.5 * cutoff)
    assert np.max(np.abs(exact - cut)) <= bound


@pytest.mark.parametrize("seed", range(5))
def test_cutoff_deviation_default_scale(seed):
    # seven default-scale Gaussians: the analytic bound is 7 * 0.731 * 0.5 * exp(-12.5) < 1e-5
    rng = np.random.default_rng(seed)
    n = 7
    cloud = GaussianCloud(rng.uniform(-6, 6, (n, 3)), np.full((n, 3), 0.5), [[1, 0, 0, 0]] * n,
                          np.ones(n), np.full(n, 0.5))
    grid = PixelGridSpec(48, 48, (-12, 12, -12, 12))
    poses = [random_pose(rng, shift=2.0) for _ in range(3)]
    exact = render_slices(cloud, poses, grid, EXACT)
    cut = render_slices(cloud, poses, grid, RenderOptions(cutoff_chi2=25.0))
    assert np.max(np.abs(exact - cut)) < 1e-5


def test_cutoff_deviation_dense_default_cloud_is_bounded():
    # heavy overlap near a sweep apex: the tail sum can exceed 1e-5 but never the bound
    from slicesplat.phantom import SweepSpec, sweep_poses
    from slicesplat.seeding import InitConfig, init_on_slice

    spec = SweepSpec(n_slices=12, grid=PixelGridSpec(48, 48, (-32, 32, 0, 64)))
    poses, _ = sweep_poses(spec)
    cloud = init_on_slice(poses, spec.grid, InitConfig(per_slice_count=120))
    exact = render_slices(cloud, poses, spec.grid, EXACT)
    cut = render_slices(cloud, poses, spec.grid, RenderOptions(cutoff_chi2=25.0))
    dev = np.max(np.abs(exact - cut))
    assert dev <= np.sum(np.abs(cloud.intensities) * cloud.opacities) * np.exp(-12.5)
    assert dev < 1e-4


def test_cutoff_skips_far_gaussian():
    cloud = GaussianCloud([[0.0, 0.0, 10.0]], [[0.0] * 3], [[1, 0, 0, 0]], [5.0], [1.0])
    opts = RenderOptions(cutoff_chi2=25.0)
    assert not render_slice(cloud, SlicePose.identity(), GRID, opts).any()
    assert render_slice(cloud, SlicePose.identity(), GRID, EXACT).max() > 0


@pytest.mark.parametrize("opts", [EXACT, RenderOptions(cutoff_chi2=25.0)])
def test_bitwise_independent_of_tiling_and_threads(opts):
    _, cloud, poses = _scene(7, n=200, m=3)
    grid = PixelGridSpec(33, 21, (-1.5, 1.5, -1.2, 1.2))
    ref = render_slices(cloud, poses, grid, opts)
    for tile, block in [(1, 1), (7, 5), (64, 16), (512, 64)]:
        o = RenderOptions(opts.cutoff_chi2, tile, block)
        assert np.array_equal(render_slices(cloud, poses, grid, o), ref)
    before = set_num_threads()
    try:
        set_num_threads(1)
        assert np.array_equal(render_slices(cloud, poses, grid, opts), ref)
    finally:
        set_num_threads(before)


def test_sweep_edge_cases():
    _, cloud, poses = _scene(2)
    assert render_sweep(cloud, [], GRID) == []
    assert render_slices(cloud, [], GRID).shape == (0,) + GRID.shape


def test_isotropic_gaussian_peaks_at_nearest_pixel():
    grid = PixelGridSpec(9, 9, (-4, 4, -4, 4))
    cloud = GaussianCloud([[1.2, -0.9, 0.0]], [[0.3] * 3], [[1, 0, 0, 0]], [1.0], [0.5])
    img = render_slice(cloud, SlicePose.identity(), grid)
    i, j = np.unravel_index(np.argmax(img), img.shape)
    assert (grid.ys()[i], grid.xs()[j]) == (-1.0, 1.0)
    for i in range(9):
        for j in range(9):
            c = [grid.xs()[j], grid.ys()[i], 0.0]
            assert img[i, j] == pytest.approx(splat_pixel(cloud, c), rel=1e-13)


def test_two_gaussian_closed_form():
    cloud = GaussianCloud([[1.0, 0, 0], [2.0, 0, 0]], np.zeros((2, 3)), [[1, 0, 0, 0]] * 2, [1.0, 1.0], [0.5, 0.5])
    o = 1.0 / (1.0 + np.exp(-1.0))
    assert splat_pixel(cloud, [0, 0, 0]) == pytest.approx(o * 0.5 * (np.exp(-0.5) + np.exp(-2.0)), rel=1e-14)


def test_invisible_scene():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 10)
    cloud = cloud.replace(opacity_logits=np.full(10, -800.0))
    assert np.max(np.abs(render_slice(cloud, SlicePose.identity(), GRID))) < 1e-300


def test_render_entry_points_agree():
    _, cloud, poses = _scene(11)
    stack = render_slices(cloud, poses, GRID)
    sweep = render_sweep(cloud, poses, GRID)
    assert len(sweep) == len(poses)
    for k, pose in enumerate(poses):
        assert np.array_equal(render_slice(cloud, pose, GRID), stack[k])
        assert np.array_equal(sweep[k], stack[k])
    pts = slice_points(poses[0], GRID)
    assert np.allclose(render_points(cloud, pts), stack[0].ravel(), rtol=1e-13, atol=1e-15)
    assert splat_pixel(cloud, pts[5]) == pytest.approx(stack[0].ravel()[5], rel=1e-12, abs=1e-15)


def test_plan_reuse_and_pair_count():
    _, cloud, poses = _scene(5)
    plan = prepare(cloud, poses, GRID, EXACT)
    blocks = len(poses) * int(np.ceil(GRID.width / 16)) * int(np.ceil(GRID.height / 16))
    assert plan.n_pairs == len(cloud) * blocks
    assert np.array_equal(plan.forward(), plan.forward())


def test_render_options_validation():
    with pytest.raises(ValueError):
        RenderOptions(cutoff_chi2=0.0)
    with pytest.raises(ValueError):
        RenderOptions(tile_size=0)
    assert EXACT.exact and not RenderOptions(cutoff_chi2=9.0).exact
