"""Gaussian splatting for 3-D reconstruction from posed 2-D slices."""

from .autodiff import GradientSet, backward, finite_difference_gradients
from .density import DensityConfig, prune_and_respawn
from .model import GaussianCloud, PixelGridSpec, Pose6D, SlicePose, SliceStack, pose_from_6d, pose_to_6d
from .objectives import LossSpec, loss, metrics, ncc, psnr, ssim
from .phantom import SweepSpec, make_phantom, sample_sweep
from .rasterizer import EXACT, RenderOptions, render_slice, render_slices, splat_pixel
from .seeding import InitConfig, initialize
from .trainer import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "GaussianCloud",
    "PixelGridSpec",
    "Pose6D",
    "SlicePose",
    "SliceStack",
    "pose_from_6d",
    "pose_to_6d",
    "RenderOptions",
    "EXACT",
    "render_slice",
    "render_slices",
    "splat_pixel",
    "GradientSet",
    "backward",
    "finite_difference_gradients",
    "LossSpec",
    "loss",
    "metrics",
    "ssim",
    "psnr",
    "ncc",
    "InitConfig",
    "initialize",
    "DensityConfig",
    "prune_and_respawn",
    "SweepSpec",
    "make_phantom",
    "sample_sweep",
    "TrainConfig",
    "TrainReport",
    "train",
    "evaluate",
]
