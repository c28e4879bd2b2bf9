"""Differentiable volume rendering of 3D Gaussian ellipsoid kernels."""

from ._backend import ACTIVE as BACKEND
from .blender import RenderBuffers, blend, render, render_image, shade_lambert, transmittance_at
from .convert import (
    ConvertConfig,
    PointCloud,
    TriangleMesh,
    load_geometry,
    mesh_to_gaussians,
    pointcloud_to_gaussians,
)
from .fit import (
    Adam,
    FitReport,
    LossSpec,
    Target,
    fit_pose,
    fit_shape,
    fit_translation,
    loss_and_grad,
    rotation_error,
)
from .grad import GradientBundle, GradientFlags, backward, gradcheck, partial_stop
from .sampler import SampledAttributes, resynthesize, sample_attributes
from .scene import (
    Camera,
    GaussianKernel,
    GaussianScene,
    Image,
    Ray,
    ValidationError,
    load_camera,
    load_scene,
    look_at,
    orbit_camera,
    view_transform,
)
from .tracer import SelectionConfig, trace_kernel

__version__ = "0.1.0"
