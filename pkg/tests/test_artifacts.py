import json

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from slicesplat.artifacts_io import (
    CountMismatchError,
    FormatError,
    TruncatedPayloadError,
    VersionError,
    export_volume,
    import_grayscale,
    load_cloud,
    load_report,
    load_stack,
    load_volume,
    save_cloud,
    save_report,
    save_stack,
    save_volume,
)
from slicesplat.model import GaussianCloud, PixelGridSpec, SlicePose, SliceStack, pose_from_6d
from slicesplat.phantom import SweepSpec, make_phantom, sample_sweep
from slicesplat.rasterizer import render_slice
from slicesplat.trainer import TrainReport

from _util import random_cloud


@pytest.fixture
def stack3():
    return sample_sweep(make_phantom(size=32), SweepSpec(n_slices=3, grid=PixelGridSpec(12, 10, (-32, 32, 0, 64))))


def _same_stack(a, b):
    assert np.array_equal(a.images, b.images) and a.images.dtype == np.float32
    assert a.grid == b.grid
    assert np.array_equal(a.order, b.order)
    for p, q in zip(a.poses, b.poses):
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.translation, q.translation)


def test_stack_roundtrip_bitwise(tmp_path, stack3):
    save_stack(tmp_path / "s", stack3)
    back = load_stack(tmp_path / "s")
    _same_stack(stack3, back)
    assert back.meta["axis"] == "sagittal"
    for p, q in zip(stack3.pose6d, back.pose6d):
        assert np.array_equal(p.as_vector(), q.as_vector())
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest["count"] == 3 and manifest["width"] == 12 and manifest["height"] == 10


def test_empty_stack_roundtrip(tmp_path):
    grid = PixelGridSpec(5, 4)
    empty = SliceStack(np.zeros((0, 4, 5), np.float32), [], grid)
    save_stack(tmp_path / "e", empty)
    back = load_stack(tmp_path / "e")
    assert back.images.shape == (0, 4, 5) and len(back.poses) == 0


def test_truncated_and_mismatched_stack(tmp_path, stack3):
    save_stack(tmp_path / "s", stack3)
    img = tmp_path / "s" / "images.bin"
    raw = img.read_bytes()
    img.write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError) as info:
        load_stack(tmp_path / "s")
    assert info.value.path == img and info.value.offset == len(raw) - 4
    img.write_bytes(raw + b"\0" * 4)
    with pytest.raises(CountMismatchError):
        load_stack(tmp_path / "s")
    img.write_bytes(raw)
    man = tmp_path / "s" / "manifest.json"
    doc = json.loads(man.read_text())
    doc["count"] = 4
    man.write_text(json.dumps(doc))
    with pytest.raises(TruncatedPayloadError):
        load_stack(tmp_path / "s")


def test_version_and_magic_errors(tmp_path, stack3):
    save_stack(tmp_path / "s", stack3)
    img = tmp_path / "s" / "images.bin"
    raw = bytearray(img.read_bytes())
    raw[8] = 9
    img.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_stack(tmp_path / "s")
    raw[0:8] = b"NOTMAGIC"
    img.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_stack(tmp_path / "s")
    with pytest.raises(FormatError):
        load_stack(tmp_path / "missing")


def test_cloud_roundtrip_12k_bitwise(tmp_path):
    cloud = random_cloud(np.random.default_rng(0), 12_000, spread=20.0, dtype=np.float32)
    state = {"step": np.array(7), "m_means": np.ones((12_000, 3), np.float32)}
    save_cloud(tmp_path / "c.ckpt", cloud, state, {"seed": 3})
    ck = load_cloud(tmp_path / "c.ckpt")
    assert np.array_equal(ck.cloud.flat(), cloud.flat())
    assert ck.config == {"seed": 3}
    assert int(ck.state["step"]) == 7 and np.array_equal(ck.state["m_means"], state["m_means"])


def test_cloud_quaternions_not_renormalized(tmp_path):
    cloud = random_cloud(np.random.default_rng(1), 4, dtype=np.float32)
    cloud = cloud.replace(quats=(cloud.quats * np.float32(3.0)).astype(np.float32))
    save_cloud(tmp_path / "q.ckpt", cloud)
    back = load_cloud(tmp_path / "q.ckpt").cloud
    assert np.array_equal(back.quats, cloud.quats)
    assert np.allclose(np.linalg.norm(back.quats, axis=1), 3.0, rtol=1e-6)


def test_empty_cloud_roundtrip(tmp_path):
    save_cloud(tmp_path / "z.ckpt", GaussianCloud.empty())
    ck = load_cloud(tmp_path / "z.ckpt")
    assert len(ck.cloud) == 0 and ck.state is None


def test_cloud_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_cloud(path, random_cloud(np.random.default_rng(2), 5, dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(TruncatedPayloadError):
        load_cloud(path)
    path.write_bytes(raw + b"x")
    with pytest.raises(CountMismatchError):
        load_cloud(path)
    path.write_bytes(b"garbage")
    with pytest.raises(TruncatedPayloadError):
        load_cloud(path)
    path.write_bytes(b"garbage-garbage-garbage")
    with pytest.raises(FormatError):
        load_cloud(path)


def test_report_roundtrip(tmp_path):
    report = TrainReport([0.5, 0.25], [{"MAE": 0.1}], [0.1, 0.1], GaussianCloud.empty(), [{"epoch": 10}],
                         {"epochs": 2}, 4, 0, 0.2)
    save_report(tmp_path / "r.json", report, {"final_metrics": {"PSNR": float("inf")}})
    doc = load_report(tmp_path / "r.json")
    assert doc["loss_curve"] == [0.5, 0.25] and doc["events"] == [{"epoch": 10}]
    assert doc["final_metrics"]["PSNR"] == "inf"
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(FormatError):
        load_report(tmp_path / "bad.json")


def test_import_grayscale():
    imgs = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    stack = import_grayscale(imgs, [SlicePose.identity()], PixelGridSpec(2, 2))
    assert stack.images.dtype == np.float32
    assert np.allclose(stack.images[0], [[0, 1], [0.2, 0.4]])
    with pytest.raises(ValueError):
        import_grayscale(imgs.astype(float), [SlicePose.identity()], PixelGridSpec(2, 2))


BOX = ((-4.0, -4.0, -4.0), (4.0, 4.0, 4.0))


def test_export_empty_cloud_is_zero():
    values, meta = export_volume(GaussianCloud.empty(), BOX, 8)
    assert values.shape == (8, 8, 8) and not values.any()
    assert meta["spacing"] == [1.0, 1.0, 1.0] and meta["origin"] == [-3.5, -3.5, -3.5]


def test_export_single_gaussian_peaks_at_nearest_voxel():
    cloud = GaussianCloud([[0.6, -1.2, 2.1]], np.zeros((1, 3)), [[1, 0, 0, 0]], [3.0], [0.7])
    values, meta = export_volume(cloud, BOX, 16)
    peak = np.unravel_index(np.argmax(values), values.shape)
    centre = np.asarray(meta["origin"]) + np.asarray(meta["spacing"]) * np.array(peak)
    assert np.all(np.abs(centre - cloud.means[0]) <= 0.25 + 1e-12)


def test_export_is_linear_in_intensity():
    cloud = random_cloud(np.random.default_rng(3), 6)
    a, _ = export_volume(cloud, BOX, 10)
    b, _ = export_volume(cloud.replace(intensities=cloud.intensities * 4.0), BOX, 10)
    assert np.array_equal(b, 4.0 * a)


def test_volume_plane_matches_render_slice(tmp_path):
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 8, spread=2.0, log_scale=(0.8, 1.2))
    values, meta = export_volume(cloud, BOX, 64)
    save_volume(tmp_path / "vol", values, meta)
    values, meta = load_volume(tmp_path / "vol")
    origin, spacing = np.asarray(meta["origin"]), np.asarray(meta["spacing"])

    # a z-plane through voxel centres: pixel centres coincide with voxels
    k = 37
    z = origin[2] + k * spacing[2]
    c = 4.0 - spacing[0] / 2
    grid = PixelGridSpec(64, 64, (-c, c, -c, c))
    img = render_slice(cloud, SlicePose(np.eye(3), [0, 0, z]), grid)
    assert np.max(np.abs(img - values[:, :, k].T)) < 1e-6

    # a tilted plane, resampled trilinearly
    pose = pose_from_6d([0.4, -0.3, 0.2, 0.1, 0.2, -0.1])
    grid = PixelGridSpec(12, 12, (-2.5, 2.5, -2.5, 2.5))
    img = render_slice(cloud, pose, grid)
    gx, gy = np.meshgrid(grid.xs(), grid.ys())
    local = np.stack([gx, gy, np.zeros_like(gx)], -1) + pose.translation
    world = local @ pose.rotation.T
    idx = ((world - origin) / spacing).reshape(-1, 3).T
    resampled = map_coordinates(values.astype(np.float64), idx, order=1).reshape(img.shape)
    assert np.max(np.abs(resampled - img)) < 1e-3


def test_volume_errors(tmp_path):
    values, meta = export_volume(GaussianCloud.empty(), BOX, 4)
    path = save_volume(tmp_path / "v", values, meta)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_volume(tmp_path / "v")
    with pytest.raises(ValueError):
        export_volume(GaussianCloud.empty(), BOX, 0)
