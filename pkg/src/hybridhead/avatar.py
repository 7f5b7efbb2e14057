"""The full avatar: displaced skinned face, deformed Gaussian hair and their composite.

Every render here can keep the intermediate state needed to push image-space
gradients back into the learnable parameters.
"""
from dataclasses import dataclass, field as dc_field

import numpy as np

from .align import icp
from .blend import blend_maps, composite
from .camera import Camera
from .errors import ConfigurationError, ParameterError
from .geometry import (DisplacementMap, ExpressionParams, HeadModel, TriMesh, displacement_sampler, lbs_deform)
from .micronet import MlpParams
from .raster import RenderBuffers, rasterize
from .splat.cloud import GaussianCloud, GaussianDelta, SplatOptions
from .splat.deform import DeformField, RigidTransform, deform_cloud, transform_cloud
from .splat.render import SplatResult, render_splats
from .texture import TextureStack, decode_face


@dataclass
class DisplacementField:
    """Per-texel offsets: a base map plus basis maps weighted by [psi, phi]."""

    grid: np.ndarray  # (H, W, 3, 1 + n_cond)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 4 or self.grid.shape[2] != 3:
            raise ParameterError("displacement field grid must be (H, W, 3, 1 + n_cond)")

    @classmethod
    def zeros(cls, resolution, n_cond):
        return cls(np.zeros((resolution, resolution, 3, 1 + n_cond)))

    @property
    def resolution(self):
        return self.grid.shape[:2]

    def condition(self, params: ExpressionParams):
        c = np.concatenate([[1.0], params.psi, params.phi.ravel()])
        if len(c) != self.grid.shape[3]:
            raise ParameterError(f"displacement field expects {self.grid.shape[3] - 1} conditioning values, got {len(c) - 1}")
        return c

    def map(self, params: ExpressionParams) -> DisplacementMap:
        return DisplacementMap(self.grid @ self.condition(params))

    def copy(self):
        return DisplacementField(self.grid.copy())


@dataclass
class FrameRecord:
    """One view of one frame: camera, expression parameters and the targets."""

    camera: Camera
    params: ExpressionParams
    image: np.ndarray  # full photo
    head: np.ndarray  # head-part target
    hair: np.ndarray  # hair-part target (premultiplied over black)
    hair_mask: np.ndarray
    coverage: np.ndarray
    depth: np.ndarray | None
    frame: int = 0
    view: int = 0

    def __post_init__(self):
        shape = (self.camera.height, self.camera.width)
        for name in ("image", "head", "hair"):
            if np.shape(getattr(self, name))[:2] != shape:
                raise ParameterError(f"{name} does not match the camera size")
        self.hair_mask = np.asarray(self.hair_mask, dtype=bool)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if self.hair_mask.shape != shape or self.coverage.shape != shape:
            raise ParameterError("masks do not match the camera size")
        if self.depth is not None and np.shape(self.depth) != shape:
            raise ParameterError("depth does not match the camera size")

    @property
    def face_mask(self):
        return self.coverage & ~self.hair_mask


@dataclass
class AvatarBundle:
    head: HeadModel
    textures: TextureStack
    displacement: DisplacementField
    pix: MlpParams
    cloud: GaussianCloud | None = None
    field: DeformField | None = None
    canonical: ExpressionParams | None = None
    transforms: dict = dc_field(default_factory=dict)  # frame id -> RigidTransform
    splat: SplatOptions = dc_field(default_factory=SplatOptions)
    blur_sigma: float = 2.0
    use_displacement: bool = True
    config: dict = dc_field(default_factory=dict)

    def copy(self):
        return AvatarBundle(
            self.head, self.textures.copy(), self.displacement.copy(), self.pix.copy(),
            None if self.cloud is None else self.cloud.copy(),
            None if self.field is None else self.field.copy(),
            self.canonical, dict(self.transforms), SplatOptions(**self.splat.to_dict()),
            self.blur_sigma, self.use_displacement, dict(self.config),
        )


@dataclass
class FaceRender:
    posed: TriMesh
    refined: TriMesh
    buffers: RenderBuffers
    image: np.ndarray
    cache: object
    condition: np.ndarray


def face_mesh(avatar: AvatarBundle, params: ExpressionParams):
    """(posed mesh, refined mesh, displacement conditioning vector)."""
    posed = lbs_deform(avatar.head, params)
    cond = avatar.displacement.condition(params)
    if not avatar.use_displacement:
        return posed, posed, cond
    offsets = displacement_sampler(posed, avatar.displacement.resolution) @ (
        avatar.displacement.grid.reshape(-1, 3, len(cond)) @ cond)
    return posed, TriMesh(posed.vertices + offsets, posed.faces, posed.uv_coords), cond


def render_face(avatar: AvatarBundle, params: ExpressionParams, camera: Camera, diffuse_only=False,
                return_cache=False) -> FaceRender:
    posed, refined, cond = face_mesh(avatar, params)
    buffers = rasterize(refined, camera)
    out = decode_face(avatar.textures, buffers, camera.view_dirs(), params.psi, avatar.pix,
                      diffuse_only=diffuse_only, return_cache=return_cache)
    image, cache = out if return_cache else (out, None)
    buffers.color = image
    return FaceRender(posed, refined, buffers, image, cache, cond)


def scalp_transform(avatar: AvatarBundle, params: ExpressionParams, frame=None) -> RigidTransform:
    """Rigid motion of the scalp from the canonical frame to ``params`` (index-paired ICP)."""
    if frame is not None and frame in avatar.transforms:
        return avatar.transforms[frame]
    if avatar.canonical is None:
        return RigidTransform.identity()
    scalp = avatar.head.scalp_indices
    src = lbs_deform(avatar.head, avatar.canonical).vertices[scalp]
    dst = lbs_deform(avatar.head, params).vertices[scalp]
    if np.array_equal(src, dst):
        return RigidTransform.identity()
    return icp(src, dst, correspondence="index").transform


@dataclass
class HairRender:
    result: SplatResult
    cloud: GaussianCloud
    delta: GaussianDelta | None
    cache: object
    rigid: RigidTransform


def hair_cloud(avatar: AvatarBundle, params: ExpressionParams, frame=None, return_cache=False):
    if avatar.cloud is None:
        raise ConfigurationError("avatar has no hair cloud")
    rigid = scalp_transform(avatar, params, frame)
    if avatar.field is None:
        return transform_cloud(avatar.cloud, rigid), None, None, rigid
    out = deform_cloud(avatar.cloud, rigid, params.psi, avatar.field, return_cache=return_cache)
    if return_cache:
        return out[0], out[1], out[2], rigid
    return out[0], out[1], None, rigid


def render_hair(avatar: AvatarBundle, params, camera, mesh_depth=None, frame=None, opts=None, return_cache=False):
    opts = opts or avatar.splat
    cloud, delta, cache, rigid = hair_cloud(avatar, params, frame, return_cache)
    result = render_splats(cloud, camera, opts, mesh_depth if opts.clip_to_mesh else None)
    return HairRender(result, cloud, delta, cache, rigid)


def hair_depth(result: SplatResult, opts: SplatOptions):
    return result.nearz if opts.depth_mode == "nearz" else result.depth


@dataclass
class FrameRender:
    image: np.ndarray
    face: FaceRender
    hair: HairRender | None
    maps: object


def render_frame(avatar: AvatarBundle, params: ExpressionParams, camera: Camera, frame=None, opts=None,
                 return_cache=False) -> FrameRender:
    """Face render, hair render and their occlusion-aware composite."""
    face = render_face(avatar, params, camera, return_cache=return_cache)
    if avatar.cloud is None:
        return FrameRender(face.image, face, None, None)
    opts = opts or avatar.splat
    hair = render_hair(avatar, params, camera, face.buffers.mesh_depth, frame, opts, return_cache)
    maps = blend_maps(hair_depth(hair.result, opts), face.buffers.mesh_depth, hair.result.alpha, avatar.blur_sigma)
    face.buffers.nearz = hair.result.nearz
    face.buffers.hair_alpha = hair.result.alpha
    image = composite(hair.result.color, face.image, hair.result.alpha, maps.soft)
    return FrameRender(image, face, hair, maps)
