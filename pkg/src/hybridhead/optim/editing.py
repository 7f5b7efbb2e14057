"""Avatar editing: hairstyle transfer between avatars and painting onto the face texture."""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from ..avatar import AvatarBundle, render_face, render_hair, hair_depth
from ..align import icp
from ..blend import blend_maps, composite, composite_backward
from ..camera import Camera
from ..errors import AlignmentError, ConfigurationError, HybridHeadWarning, ParameterError, RankDeficiencyError
from ..geometry import ExpressionParams, lbs_deform
from ..micronet import named_grads
from ..sampling import bilinear_taps
from ..splat.deform import transform_cloud
from ..texture import decode_face, decode_face_backward
from .adam import OptState, adam_step
from .losses import loss_photometric


def canonical_scalp(avatar: AvatarBundle):
    params = avatar.canonical or ExpressionParams.zeros(avatar.head)
    return lbs_deform(avatar.head, params).vertices[avatar.head.scalp_indices]


def swap_hair(face_avatar: AvatarBundle, hair_avatar: AvatarBundle, with_scale=True, max_iters=50):
    """Put ``hair_avatar``'s Gaussian hair on ``face_avatar``'s head.

    B's canonical scalp is aligned to A's by similarity ICP (row-paired when the
    scalps share a topology, nearest-neighbour otherwise) and B's canonical cloud
    is moved by the result. Returns ``(avatar, IcpResult)``.
    """
    if hair_avatar.cloud is None:
        raise ConfigurationError("hair avatar has no Gaussian hair")
    src = canonical_scalp(hair_avatar)
    dst = canonical_scalp(face_avatar)
    mode = "index" if len(src) == len(dst) else "nearest"
    try:
        fit = icp(src, dst, with_scale=with_scale, max_iters=max_iters, correspondence=mode)
    except RankDeficiencyError as exc:
        raise AlignmentError(f"cannot align the two scalps: {exc}") from exc
    out = face_avatar.copy()
    out.cloud = transform_cloud(hair_avatar.cloud, fit.transform)
    out.field = None if hair_avatar.field is None else hair_avatar.field.copy()
    out.canonical = face_avatar.canonical or ExpressionParams.zeros(face_avatar.head)
    out.transforms = {}
    out.splat = hair_avatar.splat.__class__(**hair_avatar.splat.to_dict())
    return out, fit


def uv_paint_mask(buffers, paint_mask, resolution, dilate=1):
    """Texels touched by the bilinear taps of every painted, covered pixel, grown by ``dilate`` texels."""
    h, w = resolution
    sel = np.asarray(paint_mask, dtype=bool) & buffers.coverage
    out = np.zeros(h * w, dtype=bool)
    if sel.any():
        idx, wt = bilinear_taps(buffers.uv[sel], h, w)
        out[idx[wt > 0]] = True
    out = out.reshape(h, w)
    if dilate:
        out = binary_dilation(out, np.ones((3, 3), dtype=bool), iterations=dilate)
    return out


def reproject_uv_mask(buffers, uv_mask):
    """Pixels of a view whose texture lookup reads any texel of ``uv_mask``."""
    h, w = uv_mask.shape
    out = np.zeros(buffers.coverage.shape, dtype=bool)
    cov = buffers.coverage
    if cov.any():
        idx, wt = bilinear_taps(buffers.uv[cov], h, w)
        out[cov] = np.any(uv_mask.ravel()[idx] & (wt > 0), axis=1)
    return out


@dataclass
class _EditView:
    camera: Camera
    params: ExpressionParams
    buffers: object
    hair: np.ndarray
    alpha: np.ndarray
    soft: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None
    weight: float


def _edit_view(avatar, camera, params, target=None, mask=None, weight=1.0, frame=None):
    face = render_face(avatar, params, camera)
    if avatar.cloud is None:
        hair = np.zeros_like(face.image)
        alpha = np.zeros(face.image.shape[:2])
        soft = np.ones_like(alpha)
    else:
        hr = render_hair(avatar, params, camera, face.buffers.mesh_depth, frame)
        maps = blend_maps(hair_depth(hr.result, avatar.splat), face.buffers.mesh_depth, hr.result.alpha,
                          avatar.blur_sigma)
        hair, alpha, soft = hr.result.color, hr.result.alpha, maps.soft
    if target is None:
        target = composite(hair, face.image, alpha, soft)
    return _EditView(camera, params, face.buffers, hair, alpha, soft, target, mask, weight)


@dataclass
class EditResult:
    avatar: AvatarBundle
    uv_mask: np.ndarray
    log: list = field(default_factory=list)


def edit_objective(avatar, view: _EditView, grad=True):
    img, cache = decode_face(avatar.textures, view.buffers, view.camera.view_dirs(), view.params.psi, avatar.pix,
                             return_cache=True)
    full = composite(view.hair, img, view.alpha, view.soft)
    loss, g = loss_photometric(view.target, full, view.mask, grad=True)
    if not grad:
        return view.weight * loss, None, full
    _, g_head, _ = composite_backward(view.hair, img, view.alpha, view.soft, view.weight * g)
    gd = decode_face_backward(avatar.textures, avatar.pix, cache, g_head)
    grads = {"tex.diffuse": gd["diffuse"]}
    grads.update(named_grads(gd["pix"], "pix."))
    return view.weight * loss, grads, full


def edit_texture(avatar: AvatarBundle, painted, paint_mask, camera: Camera, params: ExpressionParams,
                 other_views=(), steps=500, lr_diffuse=1e-2, lr_pix=1e-4, reg_weight=1.0, frame=None,
                 progress=None) -> EditResult:
    """Paint ``painted`` (seen by ``camera`` under ``params``) into the diffuse texture.

    Only diffuse texels under the uv footprint of ``paint_mask`` move; the pixel
    decoder is finetuned. ``other_views`` is a list of ``(camera, params)``
    pairs whose current renders are held fixed outside the painted footprint.
    """
    painted = np.asarray(painted, dtype=np.float64)
    if painted.shape[:2] != (camera.height, camera.width):
        raise ParameterError("painted image does not match the camera size")
    paint_mask = np.asarray(paint_mask, dtype=bool)
    avatar = avatar.copy()
    main = _edit_view(avatar, camera, params, target=painted, frame=frame)
    uv_mask = uv_paint_mask(main.buffers, paint_mask, avatar.textures.diffuse.shape[:2])
    if not paint_mask.any() or not uv_mask.any():
        warnings.warn("empty paint mask; nothing to edit", HybridHeadWarning, stacklevel=2)
        return EditResult(avatar, uv_mask)
    views = [main]
    for cam, prm in other_views:
        v = _edit_view(avatar, cam, prm, frame=frame)
        v.mask = ~reproject_uv_mask(v.buffers, uv_mask)
        v.weight = reg_weight
        if v.mask.any():
            views.append(v)
    params_ = {"tex.diffuse": avatar.textures.diffuse}
    params_.update(avatar.pix.arrays("pix."))
    lr = {"tex.diffuse": lr_diffuse}
    lr.update({k: lr_pix for k in avatar.pix.arrays("pix.")})
    state = OptState(lr, masks={"tex.diffuse": uv_mask[..., None].astype(np.float64)})
    log = []
    for it in range(steps):
        total, acc = 0.0, {}
        for v in views:
            loss, grads, _ = edit_objective(avatar, v)
            total += loss
            for k, g in grads.items():
                acc[k] = acc[k] + g if k in acc else g
        adam_step(params_, acc, state)
        row = {"iter": it, "total": total}
        log.append(row)
        if progress:
            progress(row)
    return EditResult(avatar, uv_mask, log)
