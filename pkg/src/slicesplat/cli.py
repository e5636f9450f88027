"""Command-line interface.

Subcommands: ``phantom``, ``train``, ``render``, ``eval``, ``export-volume`` and
``bench``. Each one reads an optional YAML or JSON config document
(``--config``), applies ``--set section.key=value`` overrides and rejects
unknown keys. ``SLICESPLAT_NUM_THREADS`` gives the default thread count;
``--threads`` overrides it.

Exit codes: 0 success, 1 unexpected failure, 2 bad usage or config, 3
unreadable or malformed artifact, 4 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import artifacts_io
from .density import DensityConfig
from .model import PixelGridSpec, SliceStack
from .objectives import LossSpec, METRIC_NAMES
from .phantom import SweepSpec, make_phantom, sample_sweep
from .rasterizer import EXACT, RenderOptions, render_slices, set_num_threads
from .seeding import InitConfig, init_uniform, initialize, stack_bounds
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("slicesplat")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 1, 2, 3, 4

METRIC_COLUMNS = ("slice_index",) + METRIC_NAMES

DEFAULTS = {
    "seed": None,
    "threads": None,
    "phantom": {
        "size": 128,
        "side": 64.0,
        "semi_axes": [0.4, 0.3, 0.2],
        "thickness": 0.05,
        "center": [0.0, 0.0, 0.0],
    },
    "sweep": {
        "axis": "sagittal",
        "n_slices": 100,
        "angle_range": [-60.0, 60.0],
        "width": 96,
        "height": 96,
    },
    "init": {
        "strategy": "OnSlice",
        "per_slice_count": 120,
        "box": None,
        "opacity_logit": 1.0,
        "intensity": 0.5,
        "log_scale": [0.5, 0.5, 0.5],
        "quat": [1.0, 0.0, 0.0, 0.0],
    },
    "train": {
        "epochs": 60,
        "batch_size": 32,
        "loss": "HybridL1",
        "loss_weights": None,
        "lr_means": 0.20,
        "lr_opacity": 0.03,
        "lr_scale": 0.01,
        "lr_intensity": 0.008,
        "lr_quat": 0.01,
        "freeze_non_positional_epochs": 0,
        "cutoff_chi2": 25.0,
        "max_grad_norm": None,
        "checkpoint_every": 0,
        "shuffle": True,
    },
    "density": {
        "enabled": False,
        "threshold": 0.05,
        "period": 10,
        "first_epoch": 10,
        "last_epoch": 40,
        "grace_periods": 1,
    },
    "render": {
        "cutoff_chi2": None,
    },
    "export": {
        "resolution": 64,
        "box": None,
    },
    "bench": {
        "counts": [11216, 48032],
        "iterations": 10,
        "warmup": 1,
        "n_slices": 8,
        "width": 96,
        "height": 96,
        "modes": ["exact", "cutoff"],
        "cutoff_chi2": 25.0,
    },
}


class ConfigError(ValueError):
    """Bad config document, override or flag combination."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _merge(base, doc, where=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    for key, value in doc.items():
        name = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, name)
        else:
            base[key] = value
    return base


def _override(cfg, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts):
        name = ".".join(parts[: i + 1])
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {name!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"{name!r} is a section; set one of its fields")
            node[part] = value
        else:
            node = node[part]


def load_config(path=None, overrides=()):
    """Defaults, then the document at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from None
        if doc is not None:
            _merge(cfg, doc)
    for item in overrides:
        _override(cfg, item)
    return cfg


def _build(factory, what, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} config: {exc}") from None


def sweep_spec(cfg, axis=None):
    s = cfg["sweep"]
    side = float(cfg["phantom"]["side"])
    h = 0.5 * side
    grid = _build(PixelGridSpec, "sweep", width=int(s["width"]), height=int(s["height"]), extent=(-h, h, 0.0, side))
    return _build(SweepSpec, "sweep", axis=axis or s["axis"], angle_range=tuple(s["angle_range"]),
                  n_slices=int(s["n_slices"]), grid=grid, side=side)


def init_config(cfg, seed=0):
    i = cfg["init"]
    box = i["box"]
    return _build(InitConfig, "init", strategy=i["strategy"], per_slice_count=int(i["per_slice_count"]),
                  box=None if box is None else tuple(tuple(v) for v in box),
                  opacity_logit=float(i["opacity_logit"]), intensity=float(i["intensity"]),
                  log_scale=tuple(i["log_scale"]), quat=tuple(i["quat"]), seed=int(seed))


def density_config(cfg):
    d = dict(cfg["density"])
    if not d.pop("enabled"):
        return None
    return _build(DensityConfig, "density", **d)


def train_config(cfg, seed, checkpoint_dir=None):
    t = cfg["train"]
    weights = t["loss_weights"]
    loss = _build(LossSpec, "loss", kind=t["loss"], weights=None if weights is None else tuple(weights))
    cutoff = t["cutoff_chi2"]
    render = _build(RenderOptions, "train", cutoff_chi2=math.inf if cutoff is None else float(cutoff))
    return _build(
        TrainConfig, "train",
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), loss=loss,
        lr_means=float(t["lr_means"]), lr_opacity=float(t["lr_opacity"]), lr_scale=float(t["lr_scale"]),
        lr_intensity=float(t["lr_intensity"]), lr_quat=float(t["lr_quat"]), seed=int(seed),
        density=density_config(cfg), freeze_non_positional_epochs=int(t["freeze_non_positional_epochs"]),
        render=render, init=init_config(cfg, seed),
        max_grad_norm=None if t["max_grad_norm"] is None else float(t["max_grad_norm"]),
        checkpoint_every=int(t["checkpoint_every"]),
        checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir),
        shuffle=bool(t["shuffle"]),
    )


def render_options(cfg):
    cutoff = cfg["render"]["cutoff_chi2"]
    if cutoff is None:
        return EXACT
    return _build(RenderOptions, "render", cutoff_chi2=float(cutoff))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    # repr is locale-independent and round-trips
    return repr(float(v))


def write_table(rows, columns, out):
    """CSV with a fixed column order; ``out`` is a path or a text stream."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row[c] if isinstance(row[c], str) else _fmt(row[c]) for c in columns])
    text = buf.getvalue()
    if hasattr(out, "write"):
        out.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    return text


def metric_rows(result):
    rows = [dict(r) for r in result["per_slice"]]
    if rows:
        rows.append({"slice_index": "mean", **result["mean"]})
    return rows


def histogram_tables(cloud, directory, bins=50):
    """Write intensity, opacity and scale distributions as ``bin_lo,bin_hi,count`` tables."""
    directory = Path(directory)
    scales = np.asarray(cloud.scales, dtype=float)
    series = {
        "intensity": np.asarray(cloud.intensities, dtype=float),
        "opacity": np.asarray(cloud.opacities, dtype=float),
        "scale": scales.ravel(),
    }
    paths = {}
    for name, values in series.items():
        counts, edges = np.histogram(values, bins=bins)
        rows = [{"bin_lo": edges[k], "bin_hi": edges[k + 1], "count": int(counts[k])} for k in range(bins)]
        paths[name] = directory / f"hist_{name}.csv"
        write_table(rows, ("bin_lo", "bin_hi", "count"), paths[name])
    return paths


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def cmd_phantom(cfg, out):
    """Generate the phantom and its sweep(s); returns ``{axis: stack_dir}``."""
    out = Path(_require(out, "--out"))
    p = cfg["phantom"]
    try:
        vol = make_phantom(tuple(p["semi_axes"]), float(p["thickness"]), int(p["size"]), float(p["side"]),
                           tuple(p["center"]))
    except ValueError as exc:
        raise ConfigError(f"invalid phantom config: {exc}") from None
    axis = cfg["sweep"]["axis"]
    axes = ("sagittal", "transversal") if axis == "both" else (axis,)
    written = {}
    for a in axes:
        stack = sample_sweep(vol, sweep_spec(cfg, a))
        written[a] = artifacts_io.save_stack(out / a, stack)
        log.info("wrote %d-slice %s stack to %s", len(stack), a, written[a])
    (out / "config.json").write_text(json.dumps(cfg, indent=2))
    return written


def cmd_train(cfg, stack_dir, out, resume=None, histograms=False, eval_stack=None):
    """Seed, train and write ``final.ckpt``, ``report.json`` and metric tables."""
    if cfg["seed"] is None:
        raise ConfigError("train needs a seed (--seed or 'seed' in the config)")
    seed = int(cfg["seed"])
    out = Path(_require(out, "--out"))
    stack = artifacts_io.load_stack(_require(stack_dir, "--stack"))
    if len(stack) == 0:
        raise ConfigError("training stack is empty")
    tcfg = train_config(cfg, seed, out / "checkpoints")
    cloud = initialize(stack.poses, stack.grid, tcfg.init)
    report = train(stack, cloud, tcfg, resume=resume)
    artifacts_io.save_cloud(out / "final.ckpt", report.cloud, config={"run_config": cfg, "train_config": tcfg.to_dict()})
    result = evaluate(report.cloud, stack, tcfg.render)
    write_table(metric_rows(result), METRIC_COLUMNS, out / "train_metrics.csv")
    curve = [{"epoch": report.start_epoch + k + 1, "loss": v, "seconds": t}
             for k, (v, t) in enumerate(zip(report.loss_curve[report.start_epoch:],
                                            report.epoch_times[report.start_epoch:]))]
    write_table(curve, ("epoch", "loss", "seconds"), out / "loss_curve.csv")
    extra = {"run_config": cfg, "final_metrics": result["mean"]}
    if eval_stack is not None:
        other = artifacts_io.load_stack(eval_stack)
        cross = evaluate(report.cloud, other, tcfg.render)
        write_table(metric_rows(cross), METRIC_COLUMNS, out / "eval_metrics.csv")
        extra["eval_metrics"] = cross["mean"]
    if histograms:
        histogram_tables(report.cloud, out)
    artifacts_io.save_report(out / "report.json", report, extra)
    return report, result


def _load_checkpoint(path):
    return artifacts_io.load_cloud(_require(path, "--checkpoint")).cloud


def cmd_render(cfg, checkpoint, stack_dir, out):
    """Render the checkpoint at every pose of a stack; writes a stack of renders."""
    cloud = _load_checkpoint(checkpoint)
    stack = artifacts_io.load_stack(_require(stack_dir, "--stack"))
    images = render_slices(cloud, stack.poses, stack.grid, render_options(cfg)).astype(np.float32)
    rendered = SliceStack(images, stack.poses, stack.grid, stack.order, stack.pose6d,
                          dict(stack.meta, rendered_from=str(checkpoint)))
    return artifacts_io.save_stack(_require(out, "--out"), rendered)


def cmd_eval(cfg, checkpoint, stack_dir, out=None, histograms=None):
    """Per-slice metric table plus a trailing ``mean`` row."""
    cloud = _load_checkpoint(checkpoint)
    stack = artifacts_io.load_stack(_require(stack_dir, "--stack"))
    result = evaluate(cloud, stack, render_options(cfg))
    write_table(metric_rows(result), METRIC_COLUMNS, sys.stdout if out is None else out)
    if histograms:
        histogram_tables(cloud, histograms)
    return result


def cmd_export_volume(cfg, checkpoint, out):
    cloud = _load_checkpoint(checkpoint)
    e = cfg["export"]
    box = e["box"]
    if box is None:
        h = 0.5 * float(cfg["phantom"]["side"])
        box = ((-h, -h, -h), (h, h, h))
    try:
        values, meta = artifacts_io.export_volume(cloud, box, e["resolution"], render_options(cfg))
    except ValueError as exc:
        raise ConfigError(f"invalid export config: {exc}") from None
    return artifacts_io.save_volume(_require(out, "--out"), values, meta)


def bench_rows(counts, iterations, warmup=1, n_slices=8, width=96, height=96, modes=("exact", "cutoff"),
               cutoff_chi2=25.0, seed=0, side=64.0):
    """Time sweep renders for each Gaussian count; one row per (count, mode)."""
    if int(iterations) < 1:
        raise ConfigError("bench iterations must be >= 1")
    if not counts:
        raise ConfigError("bench needs at least one Gaussian count")
    h = 0.5 * side
    spec = SweepSpec(n_slices=int(n_slices), grid=PixelGridSpec(int(width), int(height), (-h, h, 0.0, side)),
                     side=side)
    stack = sample_sweep(make_phantom(size=32, side=side), spec)
    box = stack_bounds(stack.poses, stack.grid)
    options = {"exact": EXACT, "cutoff": RenderOptions(cutoff_chi2=float(cutoff_chi2))}
    for m in modes:
        if m not in options:
            raise ConfigError(f"unknown bench mode {m!r}; choose from {tuple(options)}")
    rows = []
    for count in counts:
        cloud = init_uniform(box, int(count), InitConfig(seed=seed), rng=np.random.default_rng(seed))
        for m in modes:
            opts = options[m]
            for _ in range(int(warmup)):
                render_slices(cloud, stack.poses, stack.grid, opts)
            per_frame = []
            for _ in range(int(iterations)):
                t0 = time.perf_counter()
                render_slices(cloud, stack.poses, stack.grid, opts)
                per_frame.append((time.perf_counter() - t0) * 1e3 / len(stack))
            ms = np.asarray(per_frame)
            rows.append({
                "count": int(count),
                "mode": m,
                "mean_ms": float(ms.mean()),
                "std_ms": float(ms.std()),
                "fps": float(1e3 / ms.mean()),
                "iterations": int(iterations),
            })
    return rows


BENCH_COLUMNS = ("count", "mode", "mean_ms", "std_ms", "fps", "iterations")


def cmd_bench(cfg, out=None):
    b = cfg["bench"]
    seed = 0 if cfg["seed"] is None else int(cfg["seed"])
    rows = bench_rows(b["counts"], b["iterations"], b["warmup"], b["n_slices"], b["width"], b["height"],
                      b["modes"], b["cutoff_chi2"], seed, float(cfg["phantom"]["side"]))
    write_table(rows, BENCH_COLUMNS, sys.stdout if out is None else out)
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config document")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field, e.g. train.epochs=20 (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (required for train unless set in the config)")
    common.add_argument("--threads", type=int, help="kernel thread count (default: $SLICESPLAT_NUM_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slicesplat", description="Reconstruct a volume from posed 2-D slices with 3-D Gaussians.",
                                     epilog="exit codes: 0 ok, 1 unexpected failure, 2 usage or config, 3 bad artifact, 4 diverged")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate the phantom and its sweep stacks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--axis", choices=("sagittal", "transversal", "both"))
    p.add_argument("--n-slices", type=int)

    p = sub.add_parser("train", parents=[common], help="fit a Gaussian cloud to a stack")
    p.add_argument("--stack", required=True, help="training stack directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", help="loss kind")
    p.add_argument("--init", dest="strategy", choices=("OnSlice", "UniformBox"))
    p.add_argument("--density", action="store_true", help="enable density control")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="continue from a checkpoint written by this run")
    p.add_argument("--eval-stack", help="also evaluate on this stack (cross-view)")
    p.add_argument("--histograms", action="store_true", help="write parameter-distribution tables")

    p = sub.add_parser("render", parents=[common], help="render a checkpoint at a stack's poses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True, help="output stack directory")

    p = sub.add_parser("eval", parents=[common], help="per-slice metric table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--histograms", metavar="DIR", help="write parameter-distribution tables to DIR")

    p = sub.add_parser("export-volume", parents=[common], help="sample a checkpoint on a dense grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output path; writes <out>.bin and <out>.json")
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("bench", parents=[common], help="rendering speed table")
    p.add_argument("--counts", help="comma-separated Gaussian counts")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def _flag_overrides(args):
    flags = {
        "axis": "sweep.axis",
        "n_slices": "sweep.n_slices",
        "epochs": "train.epochs",
        "loss": "train.loss",
        "strategy": "init.strategy",
        "checkpoint_every": "train.checkpoint_every",
        "resolution": "export.resolution",
        "iterations": "bench.iterations",
    }
    out = {}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "density", False):
        out["density.enabled"] = True
    if getattr(args, "counts", None):
        try:
            out["bench.counts"] = [int(c) for c in args.counts.split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"--counts must be comma-separated integers, got {args.counts!r}") from None
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    return out


def run(args):
    cfg = load_config(args.config, args.overrides)
    for key, value in _flag_overrides(args).items():
        node = cfg
        *head, last = key.split(".")
        for part in head:
            node = node[part]
        node[last] = value
    if cfg["threads"] is not None:
        if int(cfg["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        set_num_threads(int(cfg["threads"]))

    if args.command == "phantom":
        cmd_phantom(cfg, args.out)
    elif args.command == "train":
        report, result = cmd_train(cfg, args.stack, args.out, args.resume, args.histograms, args.eval_stack)
        m = result["mean"]
        print(f"final SSIM {m['SSIM']:.4f}  L1 {m['MAE']:.5f}  ({len(report.cloud)} Gaussians, {report.steps} steps)")
    elif args.command == "render":
        cmd_render(cfg, args.checkpoint, args.stack, args.out)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.stack, args.out, args.histograms)
    elif args.command == "export-volume":
        cmd_export_volume(cfg, args.checkpoint, args.out)
    elif args.command == "bench":
        cmd_bench(cfg, args.out)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except artifacts_io.ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
