"""3D Gaussian hair: cloud container, projection, tiled rendering and deformation."""
from .cloud import GaussianCloud, GaussianDelta, SplatOptions, init_from_scalp, load_ply, save_ply
from .deform import DeformField, RigidTransform, deform_cloud, transform_cloud
from .projection import project_gaussian, project_gaussians
from .render import SplatResult, render_splats, splat_backward
from .sh import eval_sh

__all__ = [
    "GaussianCloud", "GaussianDelta", "SplatOptions", "init_from_scalp", "load_ply", "save_ply",
    "DeformField", "RigidTransform", "deform_cloud", "transform_cloud",
    "project_gaussian", "project_gaussians", "SplatResult", "render_splats", "splat_backward", "eval_sh",
]
