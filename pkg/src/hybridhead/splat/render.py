"""Depth-sorted alpha blending of projected Gaussians, forward and backward.

Gaussians are sorted once by camera z (index tie-break) and binned into square
tiles; every pixel walks its tile list front to back. A Gaussian's screen
footprint is exactly the ellipse where its weight can reach ``alpha_cutoff``, so
the binning never drops a contribution the dense formula would keep.
"""
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import ContractViolation, ParameterError
from .cloud import GaussianCloud, SplatOptions, sigmoid
from .projection import Projection, project_gaussians, projection_backward
from .sh import colors_backward, colors_with_grad


@dataclass
class SplatResult:
    color: np.ndarray  # (H, W, 3), premultiplied over black
    alpha: np.ndarray  # (H, W)
    nearz: np.ndarray  # (H, W), +inf where no qualifying Gaussian
    depth: np.ndarray  # (H, W) alpha-normalized accumulated depth, +inf where alpha == 0
    n_contrib: np.ndarray  # (H, W)
    state: object = None


@dataclass
class _Prepared:
    proj: Projection
    opac: np.ndarray
    colors: np.ndarray
    color_cache: tuple
    order: np.ndarray
    bbox: np.ndarray
    key: tuple


@numba.njit(cache=True)
def _bin(order, bbox, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for g in order:
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists, ntx


@numba.njit(cache=True)
def _forward_kernel(means, conic, opac, colors, depth, offsets, lists, ntx, width, height, tile,
                    cutoff, nz_thr, early_stop, gap, tmin, clip, mesh_depth,
                    out_color, out_alpha, out_nearz, out_depth, out_n):
    for py in range(height):
        for px in range(width):
            t = (py // tile) * ntx + (px // tile)
            sx = px + 0.5
            sy = py + 0.5
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            dsum = 0.0
            nz = np.inf
            started = False
            last = 0.0
            n = 0
            limit = mesh_depth[py, px] if clip else np.inf
            for k in range(offsets[t], offsets[t + 1]):
                g = lists[k]
                if depth[g] > limit:
                    break
                dx = sx - means[g, 0]
                dy = sy - means[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                a = opac[g] * np.exp(-0.5 * q)
                if a < cutoff:
                    continue
                if early_stop and started and depth[g] - last > gap:
                    break
                if nz == np.inf and a >= nz_thr:
                    nz = depth[g]
                w = a * T
                cr += w * colors[g, 0]
                cg += w * colors[g, 1]
                cb += w * colors[g, 2]
                dsum += w * depth[g]
                T *= 1.0 - a
                last = depth[g]
                started = True
                n += 1
                if T < tmin:
                    break
            out_color[py, px, 0] = cr
            out_color[py, px, 1] = cg
            out_color[py, px, 2] = cb
            out_alpha[py, px] = 1.0 - T
            out_nearz[py, px] = nz
            out_depth[py, px] = dsum / max(1.0 - T, 1e-6) if started else np.inf
            out_n[py, px] = n


@numba.njit(cache=True)
def _backward_kernel(means, conic, opac, colors, depth, offsets, lists, ntx, width, height, tile,
                     cutoff, early_stop, gap, tmin, clip, mesh_depth, grad_color, grad_alpha,
                     g_mean, g_conic, g_opac, g_col):
    maxlen = 0
    for t in range(offsets.shape[0] - 1):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    s_idx = np.empty(maxlen, dtype=np.int64)
    s_a = np.empty(maxlen)
    s_T = np.empty(maxlen)
    s_dx = np.empty(maxlen)
    s_dy = np.empty(maxlen)
    for py in range(height):
        for px in range(width):
            gr = grad_color[py, px, 0]
            gg = grad_color[py, px, 1]
            gb = grad_color[py, px, 2]
            ga = grad_alpha[py, px]
            if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0:
                continue
            t = (py // tile) * ntx + (px // tile)
            sx = px + 0.5
            sy = py + 0.5
            T = 1.0
            started = False
            last = 0.0
            n = 0
            limit = mesh_depth[py, px] if clip else np.inf
            for k in range(offsets[t], offsets[t + 1]):
                g = lists[k]
                if depth[g] > limit:
                    break
                dx = sx - means[g, 0]
                dy = sy - means[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                a = opac[g] * np.exp(-0.5 * q)
                if a < cutoff:
                    continue
                if early_stop and started and depth[g] - last > gap:
                    break
                s_idx[n] = g
                s_a[n] = a
                s_T[n] = T
                s_dx[n] = dx
                s_dy[n] = dy
                n += 1
                T *= 1.0 - a
                last = depth[g]
                started = True
                if T < tmin:
                    break
            br = 0.0
            bg = 0.0
            bb = 0.0
            ab = 0.0
            for m in range(n - 1, -1, -1):
                g = s_idx[m]
                a = s_a[m]
                T = s_T[m]
                w = a * T
                g_col[g, 0] += gr * w
                g_col[g, 1] += gg * w
                g_col[g, 2] += gb * w
                c0 = colors[g, 0]
                c1 = colors[g, 1]
                c2 = colors[g, 2]
                dla = T * (gr * (c0 - br) + gg * (c1 - bg) + gb * (c2 - bb) + ga * (1.0 - ab))
                br = a * c0 + (1.0 - a) * br
                bg = a * c1 + (1.0 - a) * bg
                bb = a * c2 + (1.0 - a) * bb
                ab = a + (1.0 - a) * ab
                # a = opac * exp(-q/2)
                g_opac[g] += dla * a / opac[g]
                dlq = -0.5 * a * dla
                dx = s_dx[m]
                dy = s_dy[m]
                g_mean[g, 0] += -2.0 * dlq * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[g, 1] += -2.0 * dlq * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += dlq * dx * dx
                g_conic[g, 1] += dlq * 2.0 * dx * dy
                g_conic[g, 2] += dlq * dy * dy


def _prepare(cloud: GaussianCloud, camera, opts: SplatOptions):
    proj = project_gaussians(cloud.x, cloud.r, cloud.s, camera)
    opac = sigmoid(cloud.o)
    colors, ccache = colors_with_grad(cloud.sh, cloud.x, camera.center)
    # per-axis footprint of the region where opac * exp(-q/2) >= cutoff
    with np.errstate(divide="ignore", invalid="ignore"):
        qmax = 2.0 * np.log(opac / opts.alpha_cutoff)
    live = proj.valid & (qmax > 0)
    qmax = np.where(live, qmax, 0.0)
    ex = np.sqrt(qmax * proj.cov2d[:, 0, 0])
    ey = np.sqrt(qmax * proj.cov2d[:, 1, 1])
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    x0 = np.ceil(mx - ex - 0.5) - 1
    x1 = np.floor(mx + ex - 0.5) + 1
    y0 = np.ceil(my - ey - 0.5) - 1
    y1 = np.floor(my + ey - 0.5) + 1
    live &= (x1 >= 0) & (x0 <= camera.width - 1) & (y1 >= 0) & (y0 <= camera.height - 1)
    live &= np.isfinite(x0) & np.isfinite(x1) & np.isfinite(y0) & np.isfinite(y1)
    bbox = np.zeros((len(cloud), 4), dtype=np.int64)
    if live.any():
        bbox[live, 0] = np.clip(x0[live], 0, camera.width - 1)
        bbox[live, 1] = np.clip(x1[live], 0, camera.width - 1)
        bbox[live, 2] = np.clip(y0[live], 0, camera.height - 1)
        bbox[live, 3] = np.clip(y1[live], 0, camera.height - 1)
    idx = np.flatnonzero(live)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    key = (tuple(sorted(opts.to_dict().items())), camera.width, camera.height)
    return _Prepared(proj, opac, colors, ccache, order, bbox, key)


def _mesh_depth_arg(opts, mesh_depth, camera):
    if opts.clip_to_mesh:
        if mesh_depth is None:
            raise ParameterError("clip_to_mesh needs a mesh depth map")
        return np.ascontiguousarray(mesh_depth, dtype=np.float64)
    return np.zeros((1, 1))


def render_splats(cloud: GaussianCloud, camera, opts: SplatOptions | None = None, mesh_depth=None) -> SplatResult:
    opts = opts or SplatOptions()
    h, w = camera.height, camera.width
    prep = _prepare(cloud, camera, opts)
    md = _mesh_depth_arg(opts, mesh_depth, camera)
    offsets, lists, ntx = _bin(prep.order, prep.bbox, w, h, opts.tile_size)
    color = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    nearz = np.full((h, w), np.inf)
    depth = np.full((h, w), np.inf)
    ncon = np.zeros((h, w), dtype=np.int64)
    _forward_kernel(prep.proj.mean2d, prep.proj.conic, prep.opac, prep.colors, prep.proj.depth,
                    offsets, lists, ntx, w, h, opts.tile_size, opts.alpha_cutoff, opts.nearz_opacity_threshold,
                    opts.early_stop, opts.early_stop_gap, opts.transmittance_floor, opts.clip_to_mesh, md,
                    color, alpha, nearz, depth, ncon)
    state = (prep, offsets, lists, ntx, md)
    return SplatResult(color, alpha, nearz, depth, ncon, state)


@dataclass
class CloudGrads:
    x: np.ndarray
    r: np.ndarray
    s: np.ndarray
    o: np.ndarray
    sh: np.ndarray

    def as_dict(self, prefix="gs."):
        return {f"{prefix}x": self.x, f"{prefix}r": self.r, f"{prefix}s": self.s, f"{prefix}o": self.o, f"{prefix}sh": self.sh}


def splat_backward(cloud: GaussianCloud, camera, opts: SplatOptions | None, grad_color, grad_alpha,
                   mesh_depth=None, forward: SplatResult | None = None) -> CloudGrads:
    """Exact gradients of the blended color/alpha w.r.t. every cloud parameter.

    The per-pixel termination structure (cutoff skips, early stop, transmittance
    floor) is treated as fixed. Passing ``forward`` reuses its preprocessing; its
    options must match ``opts``.
    """
    opts = opts or SplatOptions()
    h, w = camera.height, camera.width
    if forward is not None and forward.state is not None:
        prep, offsets, lists, ntx, md = forward.state
        if prep.key != (tuple(sorted(opts.to_dict().items())), w, h) or len(prep.opac) != len(cloud):
            raise ContractViolation("backward called with options or cloud different from the forward pass")
    else:
        prep = _prepare(cloud, camera, opts)
        md = _mesh_depth_arg(opts, mesh_depth, camera)
        offsets, lists, ntx = _bin(prep.order, prep.bbox, w, h, opts.tile_size)
    n = len(cloud)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, 3))
    gc = np.ascontiguousarray(np.broadcast_to(grad_color, (h, w, 3)), dtype=np.float64)
    ga = np.ascontiguousarray(np.broadcast_to(grad_alpha, (h, w)), dtype=np.float64)
    _backward_kernel(prep.proj.mean2d, prep.proj.conic, prep.opac, prep.colors, prep.proj.depth,
                     offsets, lists, ntx, w, h, opts.tile_size, opts.alpha_cutoff, opts.early_stop,
                     opts.early_stop_gap, opts.transmittance_floor, opts.clip_to_mesh, md, gc, ga,
                     g_mean, g_conic, g_opac, g_col)
    g_sh, g_pos_color = colors_backward(cloud.sh, prep.color_cache, g_col)
    g_x, g_r, g_s = projection_backward(prep.proj, cloud.r, camera, g_mean, g_conic)
    g_o = g_opac * prep.opac * (1.0 - prep.opac)
    return CloudGrads(g_x + g_pos_color, g_r, g_s, g_o, g_sh)
