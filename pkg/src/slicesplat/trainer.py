"""Fit a Gaussian cloud to a slice stack.

Every step renders a batch of whole slices, averages the per-slice losses,
backpropagates analytically and applies one Adam update per parameter group,
each with its own learning rate. Parameters are stored in float32 and all
arithmetic runs in float64. Every epoch's slice order and every respawn draw
comes from a generator seeded by ``(seed, epoch)``, so a run resumed from a
checkpoint follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import param_gradients
from .density import DensityConfig, prune_and_respawn
from .model import GaussianCloud
from .objectives import LossSpec, loss, metrics
from .rasterizer import RenderOptions, prepare, render_slices
from .seeding import InitConfig

log = logging.getLogger(__name__)

__all__ = [
    "GROUPS",
    "DEFAULT_LRS",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "Adam",
    "train",
    "evaluate",
]

GROUPS = GaussianCloud.PARAMS
DEFAULT_LRS = {"means": 0.20, "log_scales": 0.01, "quats": 0.01, "opacity_logits": 0.03, "intensities": 0.008}
TRAIN_RENDER = RenderOptions(cutoff_chi2=25.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, group, message=""):
        super().__init__(f"non-finite {group} at step {step}{': ' + message if message else ''}")
        self.step = step
        self.group = group


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    loss: LossSpec = LossSpec()
    lr_means: float = 0.20
    lr_opacity: float = 0.03
    lr_scale: float = 0.01
    lr_intensity: float = 0.008
    lr_quat: float = 0.01
    seed: int = 0
    density: DensityConfig = None
    freeze_non_positional_epochs: int = 0
    render: RenderOptions = TRAIN_RENDER
    init: InitConfig = InitConfig()
    max_grad_norm: float = None
    checkpoint_every: int = 0
    checkpoint_dir: str = None
    shuffle: bool = True

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        for name, lr in self.lrs().items():
            if not lr >= 0 or not math.isfinite(lr):
                raise ValueError(f"learning rate for {name} must be finite and >= 0")
        if self.freeze_non_positional_epochs < 0:
            raise ValueError("freeze_non_positional_epochs must be >= 0")

    def lrs(self):
        return {
            "means": self.lr_means,
            "log_scales": self.lr_scale,
            "quats": self.lr_quat,
            "opacity_logits": self.lr_opacity,
            "intensities": self.lr_intensity,
        }

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["render"]["cutoff_chi2"] = float(self.render.cutoff_chi2)
        return d


@dataclass
class TrainReport:
    loss_curve: list
    metric_curve: list
    epoch_times: list
    cloud: GaussianCloud
    events: list
    config: dict
    steps: int
    start_epoch: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


class Adam:
    """Adam with one learning rate and one step counter per parameter group."""

    def __init__(self, lrs, betas=(0.9, 0.999), eps=1e-8):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {g: 0 for g in self.lrs}

    def init_state(self, cloud):
        for g in self.lrs:
            shape = getattr(cloud, g).shape
            self.m[g] = np.zeros(shape)
            self.v[g] = np.zeros(shape)

    def step(self, group, param, grad):
        """Return the updated float64 parameter array for one group."""
        self.t[group] += 1
        t = self.t[group]
        m = self.m[group] = self.b1 * self.m[group] + (1.0 - self.b1) * grad
        v = self.v[group] = self.b2 * self.v[group] + (1.0 - self.b2) * grad * grad
        mhat = m / (1.0 - self.b1**t)
        vhat = v / (1.0 - self.b2**t)
        return param - self.lrs[group] * mhat / (np.sqrt(vhat) + self.eps)

    def reset_slots(self, idx):
        for g in self.m:
            self.m[g][idx] = 0.0
            self.v[g][idx] = 0.0

    def state_arrays(self):
        out = {}
        for g in self.lrs:
            out[f"m.{g}"] = self.m[g]
            out[f"v.{g}"] = self.v[g]
            out[f"t.{g}"] = np.array(self.t[g], dtype=np.int64)
        return out

    def load_state(self, arrays):
        for g in self.lrs:
            self.m[g] = np.array(arrays[f"m.{g}"], dtype=np.float64)
            self.v[g] = np.array(arrays[f"v.{g}"], dtype=np.float64)
            self.t[g] = int(arrays[f"t.{g}"])


def _batch_loss(images, targets, spec):
    """Mean per-slice loss and the matching upstream gradient."""
    b = images.shape[0]
    total = 0.0
    up = np.empty_like(images)
    for k in range(b):
        value, grad = loss(images[k], targets[k], spec)
        total += value
        up[k] = grad / b
    return total / b, up


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([int(seed), int(epoch), stream])


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(grads[g] ** 2)) for g in GROUPS))
    if norm > max_norm:
        scale = max_norm / norm
        return {g: grads[g] * scale for g in GROUPS}
    return grads


def train(stack, init_cloud, cfg=TrainConfig(), resume=None, callback=None):
    """Run the optimization; returns a :class:`TrainReport`.

    ``resume`` is a checkpoint path written by an earlier run with the same
    stack and config; training continues after its last completed epoch.
    ``callback(epoch, cloud)`` is called after every epoch.
    """
    from . import artifacts_io

    if len(stack) == 0:
        raise ValueError("cannot train on an empty stack")
    if len(init_cloud) == 0:
        raise ValueError("cannot train an empty cloud")

    lrs = cfg.lrs()
    opt = Adam(lrs)
    cloud = init_cloud.astype(np.float32).normalized()
    opt.init_state(cloud)
    grace = np.zeros(len(cloud), dtype=np.int64)
    prev_bbox = None
    start_epoch = 0
    step = 0
    history = {"loss_curve": [], "metric_curve": [], "epoch_times": [], "events": []}

    if resume is not None:
        ckpt = artifacts_io.load_cloud(resume)
        cloud = ckpt.cloud
        state = ckpt.state or {}
        opt.init_state(cloud)
        opt.load_state(state)
        grace = np.array(state.get("grace", grace), dtype=np.int64)
        if "bbox_lo" in state:
            prev_bbox = (np.asarray(state["bbox_lo"]), np.asarray(state["bbox_hi"]))
        info = ckpt.config.get("trainer", {})
        start_epoch = int(info.get("epoch", 0))
        step = int(info.get("step", 0))
        history = {k: list(info.get(k, [])) for k in history}

    targets = np.asarray(stack.images, dtype=np.float64)
    m = len(stack)
    t_start = time.perf_counter()

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = _epoch_rng(cfg.seed, epoch, 0).permutation(m) if cfg.shuffle else np.arange(m)
        frozen = epoch <= cfg.freeze_non_positional_epochs
        epoch_loss = 0.0
        epoch_metrics = {}
        for b0 in range(0, m, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            c64 = cloud.astype(np.float64)
            plan = prepare(c64, [stack.poses[i] for i in idx], stack.grid, cfg.render)
            images = plan.forward().reshape((len(idx),) + stack.grid.shape)
            value, upstream = _batch_loss(images, targets[idx], cfg.loss)
            if not math.isfinite(value):
                raise TrainingDiverged(step, "loss", f"loss = {value}")
            gs = param_gradients(plan, upstream)
            grads = gs.as_dict()
            for g in GROUPS:
                if not np.all(np.isfinite(grads[g])):
                    raise TrainingDiverged(step, g, "gradient")
            if cfg.max_grad_norm is not None:
                grads = _clip(grads, cfg.max_grad_norm)
            new = {}
            for g in GROUPS:
                if lrs[g] == 0.0 or (frozen and g != "means"):
                    continue
                p = opt.step(g, getattr(c64, g), grads[g])
                if g == "quats":
                    p = p / np.linalg.norm(p, axis=1, keepdims=True)
                if not np.all(np.isfinite(p)):
                    raise TrainingDiverged(step, g, "parameter")
                new[g] = p.astype(np.float32)
            cloud = cloud.replace(**new)
            step += 1
            epoch_loss += value * len(idx)
            for k in range(len(idx)):
                for key, val in metrics(images[k], targets[idx[k]]).items():
                    epoch_metrics[key] = epoch_metrics.get(key, 0.0) + val / m

        if cfg.density is not None and cfg.density.fires_at(epoch):
            rng = _epoch_rng(cfg.seed, epoch, 1)
            cloud, grace, event = prune_and_respawn(cloud, cfg.density, grace, rng, prev_bbox, cfg.init, epoch)
            prev_bbox = event.bbox
            if event.removed:
                opt.reset_slots(np.asarray(event.removed))
            history["events"].append(event.as_dict())
            log.info("epoch %d: density control replaced %d Gaussians", epoch, len(event.removed))

        history["loss_curve"].append(epoch_loss / m)
        history["metric_curve"].append(epoch_metrics)
        history["epoch_times"].append(time.perf_counter() - t0)
        log.info("epoch %d loss %.6f", epoch, epoch_loss / m)

        if callback is not None:
            callback(epoch, cloud)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            _write_checkpoint(cfg, cloud, opt, grace, prev_bbox, epoch, step, history)

    return TrainReport(
        loss_curve=history["loss_curve"],
        metric_curve=history["metric_curve"],
        epoch_times=history["epoch_times"],
        cloud=cloud,
        events=history["events"],
        config=cfg.to_dict(),
        steps=step,
        start_epoch=start_epoch,
        wall_time=time.perf_counter() - t_start,
    )


def checkpoint_path(cfg, epoch):
    from pathlib import Path

    return Path(cfg.checkpoint_dir) / f"epoch{epoch:04d}.ckpt"


def _write_checkpoint(cfg, cloud, opt, grace, bbox, epoch, step, history):
    from . import artifacts_io

    state = opt.state_arrays()
    state["grace"] = grace
    if bbox is not None:
        state["bbox_lo"], state["bbox_hi"] = (np.asarray(v, dtype=np.float64) for v in bbox)
    config = {"train_config": cfg.to_dict(), "trainer": {"epoch": epoch, "step": step, **history}}
    artifacts_io.save_cloud(checkpoint_path(cfg, epoch), cloud, state=state, config=config)


def evaluate(cloud, stack, opts=TRAIN_RENDER):
    """Per-slice and mean metrics of the cloud's renders against the stack."""
    images = render_slices(cloud, stack.poses, stack.grid, opts)
    per_slice = []
    for k in range(len(stack)):
        row = metrics(images[k], np.asarray(stack.images[k], dtype=np.float64))
        row["slice_index"] = int(stack.order[k])
        per_slice.append(row)
    mean = {}
    if per_slice:
        for key in per_slice[0]:
            if key != "slice_index":
                mean[key] = float(np.mean([r[key] for r in per_slice]))
    return {"per_slice": per_slice, "mean": mean, "images": images}
