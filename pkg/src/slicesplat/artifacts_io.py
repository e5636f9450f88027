"""Bit-exact persistence for slice stacks, cloud checkpoints and volumes.

Every binary file starts with a 16-byte header: an 8-byte magic, a
little-endian uint32 format version and a uint32 of reserved zeros. Payload
values are raw little-endian floats; text floats appear only in the JSON
manifests, never in payloads.

* **Stack**: a directory holding ``manifest.json`` (human-readable: counts,
  grid, encoding, per-slice 6D poses, sweep metadata), ``images.bin``
  (``M*H*W`` float32, row-major, slice after slice) and ``poses.bin``
  (``M*12`` float64: rotation rows then translation, per slice).
* **Cloud checkpoint**: a single file. After the header come uint64 ``N``,
  uint64 config length, uint64 state length, the UTF-8 JSON config echo, the
  ``N*12`` float32 parameters (means, log-scales, quaternions, opacity logits,
  intensities; one row per Gaussian) and an optional optimizer-state blob in
  ``.npz`` layout.
* **Volume**: ``<name>.json`` metadata (shape, spacing, origin, box) next to
  ``<name>.bin`` holding the float32 values in C order.
* **Train report**: a JSON document (curves, events, effective config,
  final metrics). Reports are summaries, so text floats are fine there.

Writes go through a temporary file and an exclusive lock on ``<path>.lock``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from .model import GaussianCloud, Pose6D, PixelGridSpec, SlicePose, SliceStack

__all__ = [
    "ArtifactError",
    "VersionError",
    "TruncatedPayloadError",
    "CountMismatchError",
    "FormatError",
    "Checkpoint",
    "save_stack",
    "load_stack",
    "save_cloud",
    "load_cloud",
    "export_volume",
    "save_volume",
    "load_volume",
    "import_grayscale",
    "save_report",
    "load_report",
]

STACK_MAGIC = b"SSSTACK\x00"
POSES_MAGIC = b"SSPOSES\x00"
CLOUD_MAGIC = b"SSCLOUD\x00"
VOLUME_MAGIC = b"SSVOLUM\x00"
VERSION = 1
HEADER = struct.Struct("<8sII")
CLOUD_SIZES = struct.Struct("<QQQ")


class ArtifactError(Exception):
    """Base class; ``offset`` is the byte offset where reading failed, if known."""

    def __init__(self, message, path=None, offset=None):
        where = f" ({path}" + (f" @ byte {offset}" if offset is not None else "") + ")" if path else ""
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class FormatError(ArtifactError):
    pass


class VersionError(ArtifactError):
    pass


class TruncatedPayloadError(ArtifactError):
    pass


class CountMismatchError(ArtifactError):
    pass


# ---------------------------------------------------------------------------
# low-level helpers
# ---------------------------------------------------------------------------


@contextmanager
def _locked_write(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            yield fh
        os.replace(tmp, path)


def _header(magic):
    return HEADER.pack(magic, VERSION, 0)


def _check_header(buf, magic, path):
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError("file shorter than its header", path, len(buf))
    got, version, _ = HEADER.unpack_from(buf, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", path, 0)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (this build reads {VERSION})", path, 8)
    return HEADER.size


def _read_floats(buf, offset, count, dtype, path):
    need = count * np.dtype(dtype).itemsize
    if len(buf) - offset < need:
        raise TruncatedPayloadError(
            f"payload needs {need} bytes, {len(buf) - offset} available", path, len(buf)
        )
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy(), offset + need


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------


def save_stack(path, stack):
    """Write a stack directory; images are stored as float32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = len(stack)
    h, w = stack.grid.shape
    images = np.ascontiguousarray(stack.images, dtype="<f4")
    poses = np.array([np.concatenate([p.rotation.ravel(), p.translation]) for p in stack.poses], dtype="<f8")
    pose6d = stack.pose6d
    manifest = {
        "format": "slicesplat-stack",
        "version": VERSION,
        "count": m,
        "width": w,
        "height": h,
        "extent": list(stack.grid.extent),
        "encoding": {"images": "float32-le row-major, concatenated", "poses": "float64-le R(row-major)+t"},
        "order": [int(v) for v in stack.order],
        "pose6d": None if pose6d is None else [list(p.r) + list(p.t) for p in pose6d],
        "sweep": stack.meta or {},
    }
    with _locked_write(path / "images.bin") as fh:
        fh.write(_header(STACK_MAGIC))
        fh.write(images.tobytes())
    with _locked_write(path / "poses.bin") as fh:
        fh.write(_header(POSES_MAGIC))
        fh.write(poses.tobytes())
    with _locked_write(path / "manifest.json") as fh:
        fh.write(json.dumps(manifest, indent=2).encode())
    return path


def load_stack(path):
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError("missing manifest.json", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", mpath, exc.pos) from None
    if manifest.get("format") != "slicesplat-stack":
        raise FormatError("not a slice-stack manifest", mpath)
    if manifest.get("version") != VERSION:
        raise VersionError(f"unsupported manifest version {manifest.get('version')}", mpath)
    m, h, w = int(manifest["count"]), int(manifest["height"]), int(manifest["width"])
    grid = PixelGridSpec(w, h, tuple(manifest["extent"]))

    ipath = path / "images.bin"
    buf = ipath.read_bytes()
    off = _check_header(buf, STACK_MAGIC, ipath)
    images, end = _read_floats(buf, off, m * h * w, "<f4", ipath)
    if end != len(buf):
        raise CountMismatchError(f"images.bin holds {len(buf) - off} payload bytes, manifest implies {end - off}",
                                 ipath, end)
    ppath = path / "poses.bin"
    pbuf = ppath.read_bytes()
    off = _check_header(pbuf, POSES_MAGIC, ppath)
    praw, end = _read_floats(pbuf, off, m * 12, "<f8", ppath)
    if end != len(pbuf):
        raise CountMismatchError(f"poses.bin holds {len(pbuf) - off} payload bytes, manifest implies {end - off}",
                                 ppath, end)
    praw = praw.reshape(m, 12)
    poses = [SlicePose(r[:9].reshape(3, 3), r[9:]) for r in praw]
    pose6d = manifest.get("pose6d")
    if pose6d is not None:
        if len(pose6d) != m:
            raise CountMismatchError(f"{len(pose6d)} 6D poses for {m} slices", mpath)
        pose6d = [Pose6D.from_vector(v) for v in pose6d]
    order = manifest.get("order")
    if order is not None and len(order) != m:
        raise CountMismatchError(f"{len(order)} order entries for {m} slices", mpath)
    return SliceStack(images.astype(np.float32).reshape(m, h, w), poses, grid, order, pose6d,
                      manifest.get("sweep") or {})


def import_grayscale(images_u8, poses, grid, pose6d=None):
    """Build a stack from 8-bit images, mapping values to [0, 1] by /255."""
    arr = np.asarray(images_u8)
    if arr.dtype != np.uint8:
        raise ValueError("expected uint8 images")
    return SliceStack((arr.astype(np.float32) / np.float32(255.0)), poses, grid, None, pose6d)


# ---------------------------------------------------------------------------
# cloud checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    config: dict
    state: dict = None


def save_cloud(path, cloud, state=None, config=None):
    """Write a checkpoint. Parameters are stored as float32 without renormalization."""
    flat = np.ascontiguousarray(cloud.flat(), dtype="<f4")
    cfg_bytes = json.dumps(config or {}, sort_keys=True).encode()
    state_bytes = b""
    if state:
        bio = io.BytesIO()
        np.savez(bio, **{k: np.asarray(v) for k, v in state.items()})
        state_bytes = bio.getvalue()
    with _locked_write(path) as fh:
        fh.write(_header(CLOUD_MAGIC))
        fh.write(CLOUD_SIZES.pack(len(cloud), len(cfg_bytes), len(state_bytes)))
        fh.write(cfg_bytes)
        fh.write(flat.tobytes())
        fh.write(state_bytes)
    return Path(path)


def load_cloud(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError("checkpoint not found", path) from None
    off = _check_header(buf, CLOUD_MAGIC, path)
    if len(buf) - off < CLOUD_SIZES.size:
        raise TruncatedPayloadError("checkpoint header truncated", path, len(buf))
    n, cfg_len, state_len = CLOUD_SIZES.unpack_from(buf, off)
    off += CLOUD_SIZES.size
    expected = off + cfg_len + 12 * 4 * n + state_len
    if len(buf) < expected:
        raise TruncatedPayloadError(f"checkpoint needs {expected} bytes, file has {len(buf)}", path, len(buf))
    if len(buf) > expected:
        raise CountMismatchError(f"{len(buf) - expected} trailing bytes after the declared payload", path, expected)
    try:
        config = json.loads(buf[off:off + cfg_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config echo is not valid JSON: {exc}", path, off) from None
    off += cfg_len
    flat, off = _read_floats(buf, off, 12 * n, "<f4", path)
    state = None
    if state_len:
        try:
            with np.load(io.BytesIO(buf[off:off + state_len]), allow_pickle=False) as z:
                state = {k: z[k] for k in z.files}
        except Exception as exc:
            raise FormatError(f"optimizer state unreadable: {exc}", path, off) from None
    cloud = GaussianCloud.from_flat(flat.astype(np.float32))
    return Checkpoint(cloud, config, state)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def volume_grid(box, resolution):
    """Voxel-centre coordinates for an axis-aligned box split into ``resolution`` cells."""
    a, b = (np.asarray(v, dtype=float).reshape(3) for v in box)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 1):
        raise ValueError("resolution must be >= 1 per axis")
    spacing = (b - a) / res
    axes = [a[k] + (np.arange(res[k]) + 0.5) * spacing[k] for k in range(3)]
    return axes, spacing


def export_volume(cloud, box, resolution, opts=None):
    """Dense grid of splat values at voxel centres plus ``(spacing, origin)``.

    Returns ``(values, meta)`` where ``values[i, j, k]`` is the rendered
    intensity at ``origin + spacing * (i, j, k)``.
    """
    from .rasterizer import EXACT, render_points

    opts = EXACT if opts is None else opts
    axes, spacing = volume_grid(box, resolution)
    x, y, z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    values = render_points(cloud, pts, opts).reshape(x.shape) if pts.size else np.zeros(x.shape)
    meta = {
        "shape": list(x.shape),
        "spacing": [float(s) for s in spacing],
        "origin": [float(ax[0]) for ax in axes],
        "box": [list(map(float, v)) for v in box],
    }
    return values, meta


def save_volume(path, values, meta):
    path = Path(path)
    values = np.ascontiguousarray(values, dtype="<f4")
    meta = dict(meta, format="slicesplat-volume", version=VERSION, encoding="float32-le C-order")
    with _locked_write(path.with_suffix(".bin")) as fh:
        fh.write(_header(VOLUME_MAGIC))
        fh.write(values.tobytes())
    with _locked_write(path.with_suffix(".json")) as fh:
        fh.write(json.dumps(meta, indent=2).encode())
    return path.with_suffix(".bin")


def load_volume(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != VERSION:
        raise VersionError(f"unsupported volume version {meta.get('version')}", path)
    bpath = path.with_suffix(".bin")
    buf = bpath.read_bytes()
    off = _check_header(buf, VOLUME_MAGIC, bpath)
    shape = tuple(meta["shape"])
    values, end = _read_floats(buf, off, int(np.prod(shape)), "<f4", bpath)
    if end != len(buf):
        raise CountMismatchError("volume payload size does not match its shape", bpath, end)
    return values.reshape(shape), meta


# ---------------------------------------------------------------------------
# train reports
# ---------------------------------------------------------------------------

REPORT_FORMAT = "slicesplat-report"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def save_report(path, report, extra=None):
    """Write a :class:`~slicesplat.trainer.TrainReport` (without its cloud) as JSON."""
    doc = {
        "format": REPORT_FORMAT,
        "version": VERSION,
        "loss_curve": report.loss_curve,
        "metric_curve": report.metric_curve,
        "epoch_times": report.epoch_times,
        "events": report.events,
        "config": report.config,
        "steps": report.steps,
        "start_epoch": report.start_epoch,
        "wall_time": report.wall_time,
        "n_gaussians": len(report.cloud),
    }
    doc.update(extra or {})
    with _locked_write(path) as fh:
        fh.write(json.dumps(_jsonable(doc), indent=2).encode())
    return Path(path)


def load_report(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError("report not found", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}", path, exc.pos) from None
    if doc.get("format") != REPORT_FORMAT:
        raise FormatError("not a train report", path)
    if doc.get("version") != VERSION:
        raise VersionError(f"unsupported report version {doc.get('version')}", path)
    return doc
