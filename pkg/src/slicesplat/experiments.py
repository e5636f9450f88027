"""Scripted ablations at desk scale.

A suite is a base config plus named experiments, each a set of dotted-key
deltas (``{"train.loss": "L2"}``). :func:`run_ablation` runs every
experiment through the same primitives as the CLI, writes its artifacts
under ``<out_dir>/<name>/`` and collects the final metrics into one table
(also written to ``<out_dir>/results.csv``). Reference values from the
published runs ride along as ``ref_*`` columns for comparison only; nothing
here checks against them. A failing experiment yields a row with
``status = "failed"`` and the error, and the suite carries on.
"""

from __future__ import annotations

import copy
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cli
from .artifacts_io import load_report

log = logging.getLogger(__name__)

__all__ = [
    "Experiment",
    "AblationSuite",
    "run_ablation",
    "write_results",
    "desk_base",
    "loss_suite",
    "init_suite",
    "slice_density_suite",
    "gaussian_count_suite",
    "density_suite",
    "speed_suite",
    "non_increasing",
]

RESULT_COLUMNS = ("experiment", "kind", "status", "error", "n_gaussians", "steps", "wall_time",
                  "L1", "MSE", "PSNR", "SSIM", "NCC",
                  "eval_L1", "eval_SSIM", "opacity_std", "intensity_std", "scale_std")


@dataclass(frozen=True)
class Experiment:
    """``kind`` is ``"train"`` (train, then score) or ``"bench"`` (timing rows)."""

    name: str
    deltas: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    kind: str = "train"
    eval_axis: str = None


@dataclass
class AblationSuite:
    name: str
    base: dict
    experiments: list
    out_dir: str
    parallel: bool = False

    def __post_init__(self):
        names = [e.name for e in self.experiments]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"experiment names must be unique; repeated: {dup}")
        for e in self.experiments:
            if e.kind not in ("train", "bench"):
                raise ValueError(f"experiment {e.name!r}: kind must be 'train' or 'bench'")
        # validates every key of the base config
        self.base = cli._merge(copy.deepcopy(cli.DEFAULTS), self.base)
        for e in self.experiments:
            _apply(self.base, e.deltas)


def _apply(base, deltas):
    cfg = copy.deepcopy(base)
    for key, value in deltas.items():
        cli._override(cfg, f"{key}={json.dumps(value)}")
    return cfg


def _cloud_spread(cloud):
    return {
        "opacity_std": float(np.std(cloud.opacities)),
        "intensity_std": float(np.std(cloud.intensities)),
        "scale_std": float(np.std(cloud.scales)),
    }


def _run_one(base, exp, out_dir):
    out = Path(out_dir) / exp.name
    cfg = _apply(base, exp.deltas)
    if exp.kind == "bench":
        b = cfg["bench"]
        seed = 0 if cfg["seed"] is None else int(cfg["seed"])
        rows = cli.bench_rows(b["counts"], b["iterations"], b["warmup"], b["n_slices"], b["width"], b["height"],
                              b["modes"], b["cutoff_chi2"], seed, float(cfg["phantom"]["side"]))
        cli.write_table(rows, cli.BENCH_COLUMNS, out / "bench.csv")
        return [{"experiment": f"{exp.name}/{r['count']}/{r['mode']}", "kind": "bench", "status": "ok",
                 "n_gaussians": r["count"], "wall_time": r["mean_ms"] * 1e-3, **r} for r in rows]

    train_axis = cfg["sweep"]["axis"]
    train_dir = cli.cmd_phantom(cfg, out / "data")[train_axis]
    eval_dir = None
    if exp.eval_axis:
        # the scoring sweep keeps the base slice count whatever the training deltas are
        cfg_eval = copy.deepcopy(base)
        cfg_eval["phantom"] = cfg["phantom"]
        cfg_eval["sweep"]["axis"] = exp.eval_axis
        eval_dir = cli.cmd_phantom(cfg_eval, out / "eval_data")[exp.eval_axis]
    report, result = cli.cmd_train(cfg, train_dir, out / "run", eval_stack=eval_dir)
    m = result["mean"]
    row = {
        "experiment": exp.name,
        "kind": "train",
        "status": "ok",
        "n_gaussians": len(report.cloud),
        "steps": report.steps,
        "wall_time": report.wall_time,
        "L1": m["MAE"],
        "MSE": m["MSE"],
        "PSNR": m["PSNR"],
        "SSIM": m["SSIM"],
        "NCC": m["NCC"],
        **_cloud_spread(report.cloud),
    }
    if eval_dir is not None:
        ev = load_report(out / "run" / "report.json")["eval_metrics"]
        row["eval_L1"] = ev["MAE"]
        row["eval_SSIM"] = ev["SSIM"]
    return [row]


def _safe_run(base, exp, out_dir):
    try:
        rows = _run_one(base, exp, out_dir)
    except Exception as exc:  # one broken experiment must not sink the suite
        log.error("experiment %s failed: %s", exp.name, exc)
        rows = [{"experiment": exp.name, "kind": exp.kind, "status": "failed",
                 "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}]
    for r in rows:
        for key, value in exp.reference.items():
            r[f"ref_{key}"] = value
    return rows


def run_ablation(suite):
    """Run every experiment; returns the list of result rows (one per train experiment)."""
    if not suite.experiments:
        write_results([], Path(suite.out_dir) / "results.csv")
        return []
    timed = any(e.kind == "bench" for e in suite.experiments)
    if suite.parallel and not timed:
        with ProcessPoolExecutor() as pool:
            futures = [pool.submit(_safe_run, suite.base, e, suite.out_dir) for e in suite.experiments]
            batches = [f.result() for f in futures]
    else:
        batches = [_safe_run(suite.base, e, suite.out_dir) for e in suite.experiments]
    rows = [r for batch in batches for r in batch]
    write_results(rows, Path(suite.out_dir) / "results.csv")
    return rows


def write_results(rows, path):
    refs = sorted({k for r in rows for k in r if k.startswith("ref_")})
    extra = sorted({k for r in rows for k in r} - set(RESULT_COLUMNS) - set(refs) - {"traceback"})
    columns = list(RESULT_COLUMNS) + extra + refs
    table = [{c: r.get(c, "") for c in columns} for r in rows]
    return cli.write_table(table, columns, path)


def non_increasing(values, allowed_inversions=1):
    """True if ``values`` never increases except at most ``allowed_inversions`` times."""
    ups = sum(1 for a, b in zip(values, values[1:]) if b > a)
    return ups <= allowed_inversions


# ---------------------------------------------------------------------------
# ready-made suites
# ---------------------------------------------------------------------------


def desk_base(seed=0, overrides=None):
    """96x96 slices, 40-slice sagittal sweep, 120 Gaussians per slice, 60 epochs.

    ``overrides`` maps dotted keys to values, e.g. ``{"train.epochs": 10}``.
    """
    base = copy.deepcopy(cli.DEFAULTS)
    base["seed"] = seed
    base["sweep"]["n_slices"] = 40
    return _apply(base, overrides or {})


def loss_suite(out_dir, base=None, kinds=("L1", "L2", "HybridL1", "SSIM")):
    # published full-scale numbers (L1, SSIM); every loss uses the default learning rates
    ref = {"L1": (0.0198, 0.8197), "L2": (0.0245, 0.7651), "HybridL1": (0.0188, 0.8528),
           "SSIM": (0.0198, 0.8695), "HybridSSIM": (0.0192, 0.8663), "PSNR": (0.0210, 0.8048),
           "NCC": (3.4030, 0.4314)}
    exps = [Experiment(f"loss_{k}", {"train.loss": k}, dict(zip(("L1", "SSIM"), ref.get(k, (None, None)))))
            for k in kinds]
    return AblationSuite("loss", base or desk_base(), exps, out_dir)


def init_suite(out_dir, base=None):
    exps = [
        Experiment("init_OnSlice", {"init.strategy": "OnSlice"}, {"L1": 0.0055, "SSIM": 0.9694}),
        Experiment("init_UniformBox", {"init.strategy": "UniformBox"}, {"L1": 0.0067, "SSIM": 0.9610}),
    ]
    return AblationSuite("init", base or desk_base(), exps, out_dir)


def slice_density_suite(out_dir, base=None, counts=(10, 25, 50, 100, 200), eval_axis="sagittal"):
    """Vary the training slice count; every run is also scored on the base sweep."""
    exps = [Experiment(f"slices_{n}", {"sweep.n_slices": int(n)}, eval_axis=eval_axis) for n in counts]
    return AblationSuite("slice_density", base or desk_base(), exps, out_dir)


def gaussian_count_suite(out_dir, base=None, per_slice=(30, 60, 120, 240)):
    exps = [Experiment(f"gaussians_{n}", {"init.per_slice_count": int(n)}) for n in per_slice]
    return AblationSuite("gaussian_count", base or desk_base(), exps, out_dir)


def density_suite(out_dir, base=None):
    exps = [
        Experiment("density_off", {"density.enabled": False}),
        Experiment("density_on", {"density.enabled": True}),
    ]
    return AblationSuite("density", base or desk_base(), exps, out_dir)


def speed_suite(out_dir, base=None, counts=(11216, 48032)):
    # published transversal timings: 4.358 ms @ 11,216 and 18.142 ms @ 48,032
    ref = {"ms_11216": 4.358, "ms_48032": 18.142}
    exps = [Experiment("speed", {"bench.counts": list(counts)}, ref, kind="bench")]
    return AblationSuite("speed", base or desk_base(), exps, out_dir)
