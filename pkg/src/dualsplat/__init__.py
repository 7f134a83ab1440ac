"""Reflective scenes as two planar-Gaussian sets plus a learned environment and shader."""

import os

# numba's TBB layer warns on older TBB builds; the work-queue layer is enough here
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .scene import Camera, Dataset, GaussianSet, NumericError, Role, SceneError, init_scene  # noqa: E402
from .rasterizer import RenderBuffers, render, render_backward  # noqa: E402
from .sphmip import SphMip  # noqa: E402
from .shader import MODES, ShaderMLP, shade_backward, shade_image  # noqa: E402
from .train import TrainConfig, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Dataset",
    "GaussianSet",
    "MODES",
    "NumericError",
    "RenderBuffers",
    "Role",
    "SceneError",
    "ShaderMLP",
    "SphMip",
    "TrainConfig",
    "init_scene",
    "render",
    "render_backward",
    "shade_backward",
    "shade_image",
    "train",
]
