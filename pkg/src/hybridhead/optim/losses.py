"""Training objectives. Every function returns the scalar loss, or ``(loss, grad)``
with ``grad=True`` where the gradient is taken w.r.t. the rendered quantity."""
import warnings

import numpy as np
from scipy.spatial import cKDTree

from ..errors import HybridHeadWarning, ParameterError
from ..raster import screen_normals, screen_normals_backward
from .morphology import distance_to_mask, erode


def _ret(value, g, grad):
    return (float(value), g) if grad else float(value)


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ParameterError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_photometric(target, render, mask=None, grad=False):
    """Mean squared error over masked pixels (all channels)."""
    target = np.asarray(target, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    _check(target, render)
    m = np.ones(target.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    g = np.zeros_like(render)
    if not m.any():
        warnings.warn("photometric loss over an empty mask", HybridHeadWarning, stacklevel=2)
        return _ret(0.0, g, grad)
    diff = render[m] - target[m]
    value = np.mean(diff * diff)
    if grad:
        g[m] = 2.0 * diff / diff.size
    return _ret(value, g, grad)


def geometric_mask(depth, depth_hat, delta):
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & np.isfinite(depth_hat) & (np.abs(depth - depth_hat) < delta)


def loss_geometric(depth, depth_hat, camera, delta=0.005, grad=False, region=None):
    """Depth L1 and normal L2 over pixels whose depth error is below ``delta``.

    Returns ``{"depth": L_d, "normal": L_n}`` (and a matching dict of dL/d depth_hat
    with ``grad``). ``region`` optionally restricts the evaluated pixels further.
    """
    depth = np.asarray(depth, dtype=np.float64)
    depth_hat = np.asarray(depth_hat, dtype=np.float64)
    _check(depth, depth_hat)
    md = geometric_mask(depth, depth_hat, delta)
    if region is not None:
        md &= np.asarray(region, dtype=bool)
    gd = np.zeros_like(depth_hat)
    gn = np.zeros_like(depth_hat)
    out = {"depth": 0.0, "normal": 0.0}
    if md.any():
        diff = depth_hat[md] - depth[md]
        out["depth"] = float(np.mean(np.abs(diff)))
        gd[md] = np.sign(diff) / diff.size
    n_t, v_t = screen_normals(depth, camera)
    n_r, v_r = screen_normals(depth_hat, camera)
    mn = md & v_t & v_r
    if mn.any():
        dn = n_r[mn] - n_t[mn]
        out["normal"] = float(np.sum(dn * dn) / mn.sum())
        if grad:
            g_nrm = np.zeros_like(n_r)
            g_nrm[mn] = 2.0 * dn / mn.sum()
            gn = screen_normals_backward(g_nrm, depth_hat, camera)
    if grad:
        return out, {"depth": gd, "normal": gn}
    return out


def loss_shrink(vertices, visible, scalp, reference_vertices, grad=False):
    """Mean squared distance of the visible scalp vertices to the reference scalp centroid."""
    v = np.asarray(vertices, dtype=np.float64)
    visible = np.asarray(visible, dtype=np.int64)
    g = np.zeros_like(v)
    if len(visible) == 0:
        return _ret(0.0, g, grad)
    center = np.asarray(reference_vertices, dtype=np.float64)[np.asarray(scalp, dtype=np.int64)].mean(axis=0)
    d = v[visible] - center
    value = np.mean(np.sum(d * d, axis=1))
    if grad:
        np.add.at(g, visible, 2.0 * d / len(visible))
    return _ret(value, g, grad)


def loss_silhouette(hair_mask, hair_alpha, grad=False, distance=None):
    """Mean of |M - A| weighted by each pixel's distance to the hair mask."""
    m = np.asarray(hair_mask, dtype=bool)
    a = np.asarray(hair_alpha, dtype=np.float64)
    _check(m, a)
    dist = distance_to_mask(m) if distance is None else distance
    dist = np.where(np.isfinite(dist), dist, 0.0)
    diff = a - m
    value = np.mean(np.abs(diff) * dist)
    g = np.sign(diff) * dist / diff.size if grad else None
    return _ret(value, g, grad)


def loss_solid(hair_alpha, hair_mask, radius=5, grad=False, eroded=None):
    """Mean of (1 - A) over the eroded hair mask."""
    a = np.asarray(hair_alpha, dtype=np.float64)
    e = erode(hair_mask, radius) if eroded is None else np.asarray(eroded, dtype=bool)
    _check(a, e)
    g = np.zeros_like(a)
    if not e.any():
        warnings.warn("eroded hair mask is empty; solidity loss is zero", HybridHeadWarning, stacklevel=2)
        return _ret(0.0, g, grad)
    value = np.mean(1.0 - a[e])
    g[e] = -1.0 / e.sum()
    return _ret(value, g, grad)


def knn_pairs(points, k=5):
    """Directed (i, j) pairs of each point to its k nearest other points."""
    pts = np.asarray(points, dtype=np.float64)
    if k < 1 or len(pts) < k + 1:
        raise ParameterError(f"need at least k+1 = {k + 1} points for the neighbour graph")
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    i = np.repeat(np.arange(len(pts)), k)
    j = idx[:, 1:].ravel()
    return np.stack([i, j], axis=1)


def loss_aiap(canonical_x, deformed_x, k=5, grad=False, pairs=None):
    """Mean squared change of canonical k-NN distances under the deformation."""
    xc = np.asarray(canonical_x, dtype=np.float64)
    xd = np.asarray(deformed_x, dtype=np.float64)
    if xc.shape != xd.shape:
        raise ParameterError("canonical and deformed clouds differ in size")
    if pairs is None:
        pairs = knn_pairs(xc, k)
    i, j = pairs[:, 0], pairs[:, 1]
    d0 = np.linalg.norm(xc[i] - xc[j], axis=1)
    vec = xd[i] - xd[j]
    d1 = np.linalg.norm(vec, axis=1)
    r = d1 - d0
    value = np.mean(r * r)
    g = None
    if grad:
        coef = (2.0 * r / len(r) / np.where(d1 > 0, d1, 1.0))[:, None] * vec
        g = np.zeros_like(xd)
        np.add.at(g, i, coef)
        np.add.at(g, j, -coef)
    return _ret(value, g, grad)


def loss_delta(delta, grad=False):
    """Sum of the mean squared rotation, scale, opacity and SH deltas (center offsets are
    left to the isometry term)."""
    parts = (delta.dr, delta.ds, delta.do, delta.dsh)
    value = sum(float(np.mean(p * p)) for p in parts)
    if not grad:
        return value
    return value, tuple(2.0 * p / p.size for p in parts)
