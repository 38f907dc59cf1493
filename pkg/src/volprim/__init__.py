"""Anisotropic kernel-mixture volumes: closed-form transmittance,
stochastic path tracing, adjoint gradients, and inverse fitting."""

from .cameras import Camera, Equirect360, Perspective, Pose, Telecentric
from .errors import (ContractViolationError, InvalidParameterError,
                     TargetDepthError, TruncatedTraceError,
                     UndefinedPointError, UnsupportedModeError, VolprimError)
from .geometry import PrimitiveFrame, Ray, make_ray, rotation_from_euler
from .kernels import KernelKind, eval_kernel, kernel_peak, support_radius
from .medium import Mixture, Primitive
from .integrators import (RenderSettings, Scene, render_transmittance,
                          render_vppt, render_vppt_moments, render_vprf)
from .sampling import SamplingMode
from .accel import Bvh, ShellMode, build_bvh
from .tracing import ray_transmittance
from .grid import DensityGrid, voxelize
from .adjoint import (GradientSet, backward_transmittance, backward_vppt,
                      backward_vprf, gradcheck)
from .optimize import (AdamState, Bounds, FitConfig, FitResult, LossConfig,
                       bounded_adam_step, composite_loss, fit, psnr,
                       spawn_primitives)
from .sceneio import (SceneFile, load_scene, parse_scene, read_pfm, read_vpg,
                      read_vpm, save_scene, serialize_scene, write_metrics_csv,
                      write_pfm, write_png, write_vpg, write_vpm)
from .cli import cli_main

__version__ = "0.1.0"

__all__ = [
    "Camera", "Equirect360", "Perspective", "Pose", "Telecentric",
    "ContractViolationError", "InvalidParameterError", "TargetDepthError",
    "TruncatedTraceError", "UndefinedPointError", "UnsupportedModeError",
    "VolprimError",
    "PrimitiveFrame", "Ray", "make_ray", "rotation_from_euler",
    "KernelKind", "eval_kernel", "kernel_peak", "support_radius",
    "Mixture", "Primitive",
    "RenderSettings", "Scene", "render_transmittance", "render_vppt",
    "render_vppt_moments", "render_vprf",
    "SamplingMode",
    "Bvh", "ShellMode", "build_bvh", "ray_transmittance",
    "DensityGrid", "voxelize",
    "GradientSet", "backward_transmittance", "backward_vppt",
    "backward_vprf", "gradcheck",
    "AdamState", "Bounds", "FitConfig", "FitResult", "LossConfig",
    "bounded_adam_step", "composite_loss", "fit", "psnr", "spawn_primitives",
    "SceneFile", "load_scene", "parse_scene", "read_pfm", "read_vpg",
    "read_vpm", "save_scene", "serialize_scene", "write_metrics_csv",
    "write_pfm", "write_png", "write_vpg", "write_vpm",
    "cli_main",
    "__version__",
]
