"""The three training stages: face, canonical hair, and joint deformation + texture."""
import time
from dataclasses import dataclass, field

import numpy as np

from ..avatar import AvatarBundle, FrameRecord, face_mesh, hair_depth, render_face, render_frame, scalp_transform
from ..blend import blend_maps, composite_backward
from ..errors import ConfigurationError
from ..geometry import MeshTopology, mesh_regularizers, visible_scalp
from ..micronet import named_grads
from ..raster import depth_backward
from ..sampling import sampling_matrix
from ..splat.cloud import GaussianCloud, GaussianDelta, init_from_scalp
from ..splat.deform import DeformField, deform_backward
from ..splat.render import render_splats, splat_backward
from ..texture import decode_face, decode_face_backward
from .adam import OptState, adam_step
from .config import TrainConfig
from .losses import (knn_pairs, loss_aiap, loss_delta, loss_geometric, loss_photometric,
                     loss_shrink, loss_silhouette, loss_solid)
from .metrics import dssim, psnr, ssim
from .morphology import distance_to_mask, erode


@dataclass
class TrainResult:
    avatar: AvatarBundle
    log: list = field(default_factory=list)  # one dict per logged iteration
    summary: dict = field(default_factory=dict)


def schedule(n_records, iters, seed):
    """Round-robin over a fresh seeded permutation every epoch."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < iters:
        out.extend(rng.permutation(n_records).tolist())
    return out[:iters]


def _texture_grads(stack, pix, cache, grad_image, acc=None):
    g = decode_face_backward(stack, pix, cache, grad_image)
    out = {"tex.diffuse": g["diffuse"], "tex.view": g["view"], "tex.dynamic": g["dynamic"]}
    out.update(named_grads(g["pix"], "pix."))
    if acc is None:
        return out
    for k, v in out.items():
        acc[k] = acc[k] + v if k in acc else v
    return acc


# ---------------------------------------------------------------------------
# stage 1


def face_objective(avatar: AvatarBundle, rec: FrameRecord, cfg: TrainConfig, topology=None, grad=True):
    """Weighted face loss of one view; returns (terms, total, grads, render)."""
    w = cfg.weights
    fr = render_face(avatar, rec.params, rec.camera, return_cache=grad)
    mask = rec.coverage & fr.buffers.coverage & ~rec.hair_mask
    terms, grads = {}, {}
    pho, g_pho = loss_photometric(rec.head, fr.image, mask, grad=True)
    if mask.any():
        ss, g_ss = dssim(rec.head, fr.image, mask, grad=True)
    else:
        ss, g_ss = 0.0, np.zeros_like(fr.image)
    diff_img, diff_cache = decode_face(avatar.textures, fr.buffers, rec.camera.view_dirs(), rec.params.psi,
                                      avatar.pix, diffuse_only=True, return_cache=True)
    di, g_di = loss_photometric(rec.head, diff_img, mask, grad=True)
    terms.update(photometric=pho, ssim=ss, diffuse=di)
    geo, g_geo = loss_geometric(rec.depth, fr.buffers.mesh_depth, rec.camera, cfg.depth_threshold, grad=True,
                                region=rec.face_mask)
    terms.update(depth=geo["depth"], normal=geo["normal"])
    scalp = avatar.head.scalp_indices
    vis = visible_scalp(fr.refined, scalp, rec.hair_mask, rec.camera, buffers=fr.buffers)
    shr, g_shr = loss_shrink(fr.refined.vertices, vis, scalp, fr.posed.vertices, grad=True)
    terms["shrink"] = shr
    topo = topology or MeshTopology.build(fr.refined.n_vertices, fr.refined.faces)
    reg, g_reg = mesh_regularizers(fr.refined, fr.posed, topo, grad=True)
    terms.update(laplacian=reg["lap"], normal_consistency=reg["nc"], edge_length=reg["el"])
    total = (w.photometric * pho + w.diffuse_photometric * di + w.ssim * ss + w.depth * geo["depth"]
             + w.normal * geo["normal"] + w.shrink * shr + w.laplacian * reg["lap"]
             + w.normal_consistency * reg["nc"] + w.edge_length * reg["el"])
    if not grad:
        return terms, total, None, fr
    g_img = w.photometric * g_pho + w.ssim * g_ss
    grads = _texture_grads(avatar.textures, avatar.pix, fr.cache, g_img)
    grads = _texture_grads(avatar.textures, avatar.pix, diff_cache, w.diffuse_photometric * g_di, grads)
    if avatar.use_displacement:
        g_depth = w.depth * g_geo["depth"] + w.normal * g_geo["normal"]
        g_v = depth_backward(g_depth, fr.buffers, fr.refined, rec.camera)
        g_v += w.shrink * g_shr + w.laplacian * g_reg["lap"] + w.normal_consistency * g_reg["nc"]
        g_v += w.edge_length * g_reg["el"]
        s = sampling_matrix(fr.posed.uv_coords, *avatar.displacement.resolution)
        g_tex = np.asarray(s.T @ g_v)  # (H*W, 3)
        grads["disp"] = (g_tex[:, :, None] * fr.condition[None, None, :]).reshape(avatar.displacement.grid.shape)
    return terms, total, grads, fr


def _face_params(avatar):
    p = dict(avatar.textures.arrays("tex."))
    p.update(avatar.pix.arrays("pix."))
    p["disp"] = avatar.displacement.grid
    return p


def _face_lr(cfg, avatar):
    lr = {"tex.diffuse": cfg.face_lr["diffuse"], "tex.view": cfg.face_lr["view"],
          "tex.dynamic": cfg.face_lr["dynamic"]}
    for name in avatar.pix.arrays("pix."):
        lr[name] = cfg.face_lr["pix"]
    if avatar.use_displacement:
        lr["disp"] = cfg.face_lr["displacement"]
    return lr


def evaluate_face(avatar, records):
    rows = []
    for rec in records:
        fr = render_face(avatar, rec.params, rec.camera)
        mask = rec.coverage & fr.buffers.coverage & ~rec.hair_mask
        if not mask.any():
            continue
        err = np.abs(rec.depth[mask] - fr.buffers.mesh_depth[mask])
        rows.append({"frame": rec.frame, "view": rec.view, "psnr": psnr(rec.head, fr.image, mask),
                     "ssim": ssim(rec.head, fr.image, mask), "depth_mae": float(np.mean(err))})
    return rows


def _mean_rows(rows, keys):
    return {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}


def train_face(records, avatar: AvatarBundle, cfg: TrainConfig, iters=None, progress=None) -> TrainResult:
    """Stage 1: fit textures, displacement and pixel decoder; hair is left untouched."""
    if not records:
        raise ConfigurationError("no training frames")
    if any(r.depth is None for r in records):
        raise ConfigurationError("face stage needs a depth target for every frame")
    avatar = avatar.copy()
    avatar.use_displacement = cfg.use_displacement
    iters = cfg.face_iters if iters is None else iters
    topo = MeshTopology.build(avatar.head.n_vertices, avatar.head.faces)
    params = _face_params(avatar)
    state = OptState(_face_lr(cfg, avatar))
    log = []
    t0 = time.perf_counter()
    for it, k in enumerate(schedule(len(records), iters, cfg.seed)):
        rec = records[k]
        terms, total, grads, fr = face_objective(avatar, rec, cfg, topo)
        adam_step(params, grads, state)
        if it % cfg.log_every == 0 or it == iters - 1:
            mask = rec.coverage & fr.buffers.coverage & ~rec.hair_mask
            row = {"iter": it, "frame": rec.frame, "view": rec.view, **terms, "total": total,
                   "psnr": psnr(rec.head, fr.image, mask) if mask.any() else float("nan")}
            log.append(row)
            if progress:
                progress(row)
    rows = evaluate_face(avatar, records)
    summary = _mean_rows(rows, ("psnr", "ssim", "depth_mae"))
    summary.update(iters=iters, seconds=time.perf_counter() - t0)
    return TrainResult(avatar, log, summary)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class _HairView:
    rec: FrameRecord
    mesh_depth: np.ndarray
    distance: np.ndarray
    eroded: np.ndarray


def _hair_views(avatar, records, cfg):
    views = []
    for rec in records:
        fr = render_face(avatar, rec.params, rec.camera)
        views.append(_HairView(rec, fr.buffers.mesh_depth, distance_to_mask(rec.hair_mask),
                               erode(rec.hair_mask, cfg.erode_radius)))
    return views


def hair_objective(cloud: GaussianCloud, view: _HairView, avatar: AvatarBundle, cfg: TrainConfig, grad=True):
    """Weighted hair loss of one view against the hair-only target; returns (terms, total, grads, result)."""
    w = cfg.weights
    rec = view.rec
    opts = avatar.splat
    res = render_splats(cloud, rec.camera, opts, view.mesh_depth if opts.clip_to_mesh else None)
    maps = blend_maps(hair_depth(res, opts), view.mesh_depth, res.alpha, avatar.blur_sigma)
    m = rec.hair_mask
    pho, g_pho = loss_photometric(rec.hair, res.color, m, grad=True)
    ss, g_ss = dssim(rec.hair, res.color, m, grad=True) if m.any() else (0.0, np.zeros_like(res.color))
    sil, g_sil = loss_silhouette(m, maps.hair_alpha, grad=True, distance=view.distance)
    sol, g_sol = loss_solid(maps.hair_alpha, m, cfg.erode_radius, grad=True, eroded=view.eroded)
    terms = {"photometric": pho, "ssim": ss, "silhouette": sil, "solid": sol}
    total = w.photometric * pho + w.ssim * ss + w.silhouette * sil + w.solid * sol
    if not grad:
        return terms, total, None, (res, maps)
    g_color = w.photometric * g_pho + w.ssim * g_ss
    g_alpha = (w.silhouette * g_sil + w.solid * g_sol) * maps.soft
    g = splat_backward(cloud, rec.camera, opts, g_color, g_alpha, view.mesh_depth, forward=res)
    return terms, total, g.as_dict("gs."), (res, maps)


def _prune(cloud, state, threshold):
    keep = np.flatnonzero(cloud.opacity >= threshold)
    if len(keep) == len(cloud):
        return cloud, 0
    new = cloud.subset(keep)
    for store in (state.m, state.v):
        for k in list(store):
            store[k] = store[k][keep]
    return new, len(cloud) - len(keep)


def evaluate_hair(avatar, cloud, views):
    rows = []
    for view in views:
        res = render_splats(cloud, view.rec.camera, avatar.splat,
                            view.mesh_depth if avatar.splat.clip_to_mesh else None)
        m = view.rec.hair_mask
        if m.any():
            rows.append({"frame": view.rec.frame, "view": view.rec.view, "psnr": psnr(view.rec.hair, res.color, m),
                         "ssim": ssim(view.rec.hair, res.color, m)})
    return rows


def train_hair(records, avatar: AvatarBundle, cfg: TrainConfig, iters=None, n_init=200, shell=0.01,
               progress=None) -> TrainResult:
    """Stage 2: fit the canonical Gaussian cloud to every view of the canonical frame."""
    if not records or not any(r.hair_mask.any() for r in records):
        raise ConfigurationError("hair stage needs hair mask pixels")
    avatar = avatar.copy()
    iters = cfg.hair_iters if iters is None else iters
    if avatar.canonical is None:
        avatar.canonical = records[0].params
    if avatar.cloud is None:
        _, refined, _ = face_mesh(avatar, avatar.canonical)
        avatar.cloud = init_from_scalp(refined, avatar.head.scalp_indices, n_init, shell, cfg.seed)
    cloud = avatar.cloud.copy()
    views = _hair_views(avatar, records, cfg)
    extent = max(cloud.extent(), 1e-6)
    lr = {f"gs.{k}": v for k, v in cfg.hair_lr.items()}
    lr["gs.x"] = cfg.hair_lr["x"] * extent
    state = OptState(lr)
    log = []
    t0 = time.perf_counter()
    pruned = 0
    for it, k in enumerate(schedule(len(views), iters, cfg.seed)):
        terms, total, grads, (res, _) = hair_objective(cloud, views[k], avatar, cfg)
        adam_step(cloud.arrays("gs."), grads, state)
        cloud.renormalize()
        if cfg.prune_every and (it + 1) % cfg.prune_every == 0 and it + 1 < iters:
            cloud, n = _prune(cloud, state, cfg.prune_threshold)
            pruned += n
        if it % cfg.log_every == 0 or it == iters - 1:
            m = views[k].rec.hair_mask
            row = {"iter": it, "frame": views[k].rec.frame, "view": views[k].rec.view, **terms, "total": total,
                   "psnr": psnr(views[k].rec.hair, res.color, m) if m.any() else float("nan"),
                   "n_gaussians": len(cloud)}
            log.append(row)
            if progress:
                progress(row)
    avatar.cloud = cloud
    rows = evaluate_hair(avatar, cloud, views)
    summary = _mean_rows(rows, ("psnr", "ssim"))
    summary.update(iters=iters, seconds=time.perf_counter() - t0, n_gaussians=len(cloud), pruned=pruned)
    return TrainResult(avatar, log, summary)


# ---------------------------------------------------------------------------
# stage 3


def joint_objective(avatar: AvatarBundle, rec: FrameRecord, cfg: TrainConfig, pairs, eroded=None, grad=True):
    """Full-image loss with deformation regularizers; returns (terms, total, grads, render)."""
    w = cfg.weights
    fr = render_frame(avatar, rec.params, rec.camera, frame=rec.frame, return_cache=grad)
    hair = fr.hair
    pho, g_pho = loss_photometric(rec.image, fr.image, None, grad=True)
    ss, g_ss = dssim(rec.image, fr.image, None, grad=True)
    fmask = rec.face_mask & fr.face.buffers.coverage
    diff_img, diff_cache = decode_face(avatar.textures, fr.face.buffers, rec.camera.view_dirs(), rec.params.psi,
                                      avatar.pix, diffuse_only=True, return_cache=True)
    di, g_di = loss_photometric(rec.head, diff_img, fmask, grad=True)
    ahat = fr.maps.hair_alpha
    sol, g_sol = loss_solid(ahat, rec.hair_mask, cfg.erode_radius, grad=True, eroded=eroded)
    delta = hair.delta if hair.delta is not None else GaussianDelta.zeros_like(hair.cloud)
    dl, g_dl = loss_delta(delta, grad=True)
    ai, g_ai = loss_aiap(avatar.cloud.x, hair.cloud.x, cfg.aiap_k, grad=True, pairs=pairs)
    terms = {"photometric": pho, "ssim": ss, "diffuse": di, "solid": sol, "delta": dl, "aiap": ai}
    total = (w.photometric * pho + w.ssim * ss + w.diffuse_photometric * di + w.solid * sol + w.delta * dl
             + w.aiap * ai)
    if not grad:
        return terms, total, None, fr
    g_img = w.photometric * g_pho + w.ssim * g_ss
    g_hair, g_head, g_ag = composite_backward(hair.result.color, fr.face.image, hair.result.alpha, fr.maps.soft, g_img)
    g_ag = g_ag + w.solid * g_sol * fr.maps.soft
    grads = _texture_grads(avatar.textures, avatar.pix, fr.face.cache, g_head)
    grads = _texture_grads(avatar.textures, avatar.pix, diff_cache, w.diffuse_photometric * g_di, grads)
    g_cloud = splat_backward(hair.cloud, rec.camera, avatar.splat, g_hair, g_ag, fr.face.buffers.mesh_depth,
                             forward=hair.result)
    g_cloud.x = g_cloud.x + w.aiap * g_ai
    g_delta = GaussianDelta(np.zeros_like(delta.dx), *(w.delta * g for g in g_dl))
    mgrads, g_emb = deform_backward(avatar.field, hair.cache, g_cloud, g_delta)
    grads.update(named_grads(mgrads, "def."))
    grads["def.embedding"] = g_emb
    return terms, total, grads, fr


def evaluate_frames(avatar, records, mask_fn=None):
    rows = []
    for rec in records:
        fr = render_frame(avatar, rec.params, rec.camera, frame=rec.frame)
        m = None if mask_fn is None else mask_fn(rec)
        rows.append({"frame": rec.frame, "view": rec.view, "psnr": psnr(rec.image, fr.image, m),
                     "ssim": ssim(rec.image, fr.image, m)})
    return rows


def train_joint(records, avatar: AvatarBundle, cfg: TrainConfig, iters=None, progress=None) -> TrainResult:
    """Stage 3: learn the non-rigid field and refine the textures over all frames."""
    if avatar.cloud is None:
        raise ConfigurationError("joint stage needs a trained canonical hair cloud")
    if not records:
        raise ConfigurationError("no training frames")
    avatar = avatar.copy()
    iters = cfg.joint_iters if iters is None else iters
    if avatar.field is None:
        avatar.field = DeformField.init(len(avatar.cloud), avatar.cloud.sh.shape[1], cfg.seed)
    for f in sorted({r.frame for r in records}):
        if f not in avatar.transforms:
            params = next(r.params for r in records if r.frame == f)
            avatar.transforms[f] = scalp_transform(avatar, params)
    pairs = knn_pairs(avatar.cloud.x, cfg.aiap_k)
    eroded = [erode(r.hair_mask, cfg.erode_radius) for r in records]
    params = dict(avatar.textures.arrays("tex."))
    params.update(avatar.field.mlp.arrays("def."))
    params["def.embedding"] = avatar.field.embedding
    lr = {"tex.diffuse": cfg.joint_lr["diffuse"], "tex.view": cfg.joint_lr["view"],
          "tex.dynamic": cfg.joint_lr["dynamic"], "def.embedding": cfg.joint_lr["embedding"]}
    for name in avatar.field.mlp.arrays("def."):
        lr[name] = cfg.joint_lr["field"]
    state = OptState(lr)
    log = []
    t0 = time.perf_counter()
    for it, k in enumerate(schedule(len(records), iters, cfg.seed)):
        rec = records[k]
        terms, total, grads, fr = joint_objective(avatar, rec, cfg, pairs, eroded[k])
        adam_step(params, grads, state)
        if it % cfg.log_every == 0 or it == iters - 1:
            row = {"iter": it, "frame": rec.frame, "view": rec.view, **terms, "total": total,
                   "psnr": psnr(rec.image, fr.image)}
            log.append(row)
            if progress:
                progress(row)
    rows = evaluate_frames(avatar, records)
    summary = _mean_rows(rows, ("psnr", "ssim"))
    summary.update(iters=iters, seconds=time.perf_counter() - t0)
    return TrainResult(avatar, log, summary)
