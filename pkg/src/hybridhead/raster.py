"""Z-buffer triangle rasterization, depth gradients w.r.t. vertices, screen-space normals."""
from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .geometry import TriMesh

__all__ = ["Camera", "RenderBuffers", "rasterize", "depth_backward", "screen_normals", "screen_normals_backward"]


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3)
    mesh_depth: np.ndarray  # (H, W), +inf where empty
    nearz: np.ndarray  # (H, W), +inf where empty
    hair_alpha: np.ndarray  # (H, W)
    coverage: np.ndarray  # (H, W) bool
    uv: np.ndarray  # (H, W, 2)
    bary: np.ndarray  # (H, W, 3) perspective-correct
    face_id: np.ndarray  # (H, W) int, -1 where empty

    @property
    def shape(self):
        return self.coverage.shape


@numba.njit(cache=True)
def _is_top_left(ax, ay, bx, by):
    # edge a->b of a triangle with positive signed area in y-down pixel space
    dy = by - ay
    dx = bx - ax
    return (dy < 0.0) or (dy == 0.0 and dx > 0.0)


@numba.njit(cache=True)
def _raster_kernel(vc, faces, fx, fy, cx, cy, width, height, near, depth, fid, bary):
    nf = faces.shape[0]
    for f in range(nf):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        z0 = vc[i0, 2]
        z1 = vc[i1, 2]
        z2 = vc[i2, 2]
        if z0 < near or z1 < near or z2 < near:
            continue
        x0 = fx * vc[i0, 0] / z0 + cx
        y0 = fy * vc[i0, 1] / z0 + cy
        x1 = fx * vc[i1, 0] / z1 + cx
        y1 = fy * vc[i1, 1] / z1 + cy
        x2 = fx * vc[i2, 0] / z2 + cx
        y2 = fy * vc[i2, 1] / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-12:
            continue
        # orient counter-clockwise in (x, y-down) so all edge functions are positive inside
        flip = area < 0.0
        if flip:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            z1, z2 = z2, z1
            area = -area
        tl0 = _is_top_left(x1, y1, x2, y2)
        tl1 = _is_top_left(x2, y2, x0, y0)
        tl2 = _is_top_left(x0, y0, x1, y1)
        xmin = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        for py in range(ymin, ymax + 1):
            sy = py + 0.5
            for px in range(xmin, xmax + 1):
                sx = px + 0.5
                w0 = (x2 - x1) * (sy - y1) - (y2 - y1) * (sx - x1)
                w1 = (x0 - x2) * (sy - y2) - (y0 - y2) * (sx - x2)
                w2 = (x1 - x0) * (sy - y0) - (y1 - y0) * (sx - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                s0 = l0 / z0
                s1 = l1 / z1
                s2 = l2 / z2
                inv = s0 + s1 + s2
                z = 1.0 / inv
                if z < depth[py, px]:
                    depth[py, px] = z
                    fid[py, px] = f
                    bary[py, px, 0] = s0 * z
                    if flip:
                        bary[py, px, 1] = s2 * z
                        bary[py, px, 2] = s1 * z
                    else:
                        bary[py, px, 1] = s1 * z
                        bary[py, px, 2] = s2 * z


def rasterize(mesh: TriMesh, camera: Camera) -> RenderBuffers:
    """Nearest-triangle z-buffer pass.

    Triangles with a vertex in front of the near plane are skipped; nearest depth
    wins with ties going to the lower face index. Barycentrics and UVs are
    perspective-correct; ``mesh_depth`` is camera-space z.
    """
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    if len(mesh.faces):
        vc = camera.world_to_camera(mesh.vertices)
        _raster_kernel(vc, np.ascontiguousarray(mesh.faces, dtype=np.int64), float(camera.fx), float(camera.fy),
                       float(camera.cx), float(camera.cy), w, h, float(camera.near), depth, fid, bary)
    cov = fid >= 0
    uv = np.zeros((h, w, 2))
    if mesh.uv_coords is not None and cov.any():
        tri_uv = mesh.uv_coords[mesh.faces[fid[cov]]]  # (P, 3, 2)
        uv[cov] = np.einsum("pk,pkc->pc", bary[cov], tri_uv)
    return RenderBuffers(
        color=np.zeros((h, w, 3)), mesh_depth=depth, nearz=np.full((h, w), np.inf),
        hair_alpha=np.zeros((h, w)), coverage=cov, uv=uv, bary=bary, face_id=fid,
    )


def depth_backward(grad_depth, buffers: RenderBuffers, mesh: TriMesh, camera: Camera):
    """Gradient of a loss w.r.t. world vertex positions given dL/d(mesh_depth).

    Visibility (face ids) is held fixed. At a covered pixel the depth is the
    intersection of the pixel ray r (unit z) with the triangle plane,
    z = (n . v0) / (n . r) with n = (v1 - v0) x (v2 - v0).
    """
    g = np.asarray(grad_depth, dtype=np.float64)
    sel = buffers.coverage & (g != 0)
    out = np.zeros_like(mesh.vertices)
    if not sel.any():
        return out
    rays = camera.pixel_rays()[sel]
    gz = g[sel]
    fids = buffers.face_id[sel]
    tri = mesh.faces[fids]
    vc = camera.world_to_camera(mesh.vertices)
    v0, v1, v2 = vc[tri[:, 0]], vc[tri[:, 1]], vc[tri[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    n = np.cross(e1, e2)
    den = np.sum(n * rays, axis=1)
    z = np.sum(n * v0, axis=1) / den
    a = v0 - z[:, None] * rays
    s = (gz / den)[:, None]
    g1 = s * np.cross(e2, a)
    g2 = s * np.cross(a, e1)
    g0 = s * n - g1 - g2
    gc = np.zeros_like(vc)
    np.add.at(gc, tri[:, 0], g0)
    np.add.at(gc, tri[:, 1], g1)
    np.add.at(gc, tri[:, 2], g2)
    return gc @ camera.rotation  # R^T per row


def _backproject(depth, camera):
    pts = camera.pixel_rays() * depth[..., None]
    return np.where(np.isfinite(depth)[..., None], pts, 0.0)


def screen_normals(depth, camera: Camera):
    """Unit normals (H, W, 3) from central differences of back-projected depth.

    Returns ``(normals, valid)``. A pixel is valid when it and its four
    neighbours have finite depth; normals face the camera (negative z for a
    fronto-parallel plane). Invalid pixels hold zeros.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    fin = np.isfinite(depth)
    valid = np.zeros((h, w), dtype=bool)
    valid[1:-1, 1:-1] = fin[1:-1, 1:-1] & fin[1:-1, 2:] & fin[1:-1, :-2] & fin[2:, 1:-1] & fin[:-2, 1:-1]
    p = _backproject(depth, camera)
    tx = np.zeros_like(p)
    ty = np.zeros_like(p)
    tx[1:-1, 1:-1] = p[1:-1, 2:] - p[1:-1, :-2]
    ty[1:-1, 1:-1] = p[2:, 1:-1] - p[:-2, 1:-1]
    c = np.cross(ty, tx)
    norm = np.linalg.norm(c, axis=-1)
    valid &= norm > 0
    nrm = np.zeros_like(c)
    nrm[valid] = c[valid] / norm[valid][:, None]
    return nrm, valid


def screen_normals_backward(grad_normals, depth, camera: Camera):
    """dL/d(depth) given dL/d(normals); gradients on invalid pixels are ignored."""
    depth = np.asarray(depth, dtype=np.float64)
    nrm, valid = screen_normals(depth, camera)
    g = np.where(valid[..., None], grad_normals, 0.0)
    p = _backproject(depth, camera)
    tx = np.zeros_like(p)
    ty = np.zeros_like(p)
    tx[1:-1, 1:-1] = p[1:-1, 2:] - p[1:-1, :-2]
    ty[1:-1, 1:-1] = p[2:, 1:-1] - p[:-2, 1:-1]
    c = np.cross(ty, tx)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    norm = np.where(norm > 0, norm, 1.0)
    gc = (g - nrm * np.sum(g * nrm, axis=-1, keepdims=True)) / norm
    # c = ty x tx
    g_ty = np.cross(tx, gc)
    g_tx = np.cross(gc, ty)
    gp = np.zeros_like(p)
    gp[1:-1, 2:] += g_tx[1:-1, 1:-1]
    gp[1:-1, :-2] -= g_tx[1:-1, 1:-1]
    gp[2:, 1:-1] += g_ty[1:-1, 1:-1]
    gp[:-2, 1:-1] -= g_ty[1:-1, 1:-1]
    gd = np.sum(gp * camera.pixel_rays(), axis=-1)
    return np.where(np.isfinite(depth), gd, 0.0)
