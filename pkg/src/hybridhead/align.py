"""Rigid and similarity ICP with closed-form (SVD) Procrustes steps."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError, RankDeficiencyError
from .splat.deform import RigidTransform


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float  # RMS over the final correspondences
    iterations: int
    history: list


def procrustes(src, dst, with_scale=False):
    """Least-squares s, R, t minimizing sum |dst - (s R src + t)|^2 for paired points (Umeyama)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = 1.0
    if with_scale:
        var = np.mean(np.sum(a * a, axis=1))
        scale = float(np.sum(sig * d) / var)
    t = mu_d - scale * rot @ mu_s
    return RigidTransform(rot, t, scale)


def _check_rank(pts, name):
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise RankDeficiencyError(f"{name} needs at least 3 points in 3D")
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise RankDeficiencyError(f"{name} points are collinear or coincident")
    return pts


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b."""
    return RigidTransform(a.rotation @ b.rotation, a.scale * a.rotation @ b.translation + a.translation, a.scale * b.scale)


def _pca_starts(src, dst, with_scale):
    """Centroid-aligned starts whose rotations map src principal axes onto dst's."""
    a = src - src.mean(axis=0)
    b = dst - dst.mean(axis=0)
    _, es = np.linalg.eigh(a.T @ a)
    _, ed = np.linalg.eigh(b.T @ b)
    scale = float(np.sqrt(np.mean(np.sum(b * b, 1)) / np.mean(np.sum(a * a, 1)))) if with_scale else 1.0
    out = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            sz = sx * sy * np.linalg.det(ed) * np.linalg.det(es)
            rot = ed @ np.diag([sx, sy, sz]) @ es.T
            out.append(RigidTransform(rot, dst.mean(axis=0) - scale * rot @ src.mean(axis=0), scale))
    return out


def icp(src, dst, with_scale=False, max_iters=50, tol=1e-9, correspondence="nearest", trim=0.0, init=None,
        restarts=True):
    """Align ``src`` onto ``dst``.

    Starts from centroid alignment (or ``init``), then alternates correspondence
    search and a closed-form Procrustes fit of the original source points. Stops
    when the RMS residual changes by less than ``tol``.
    ``correspondence="index"`` pairs points by row (same-topology vertex sets).
    With nearest-neighbour matching and ``restarts``, a run that ends with a
    residual above 1e-6 of the target spread is repeated from the four
    principal-axis alignments and the best run is kept.
    """
    src = _check_rank(src, "source")
    dst = _check_rank(dst, "target")
    best = _icp_run(src, dst, with_scale, max_iters, tol, correspondence, trim, init)
    spread = float(np.sqrt(np.mean(np.sum((dst - dst.mean(axis=0)) ** 2, axis=1))))
    if restarts and correspondence == "nearest" and best.residual > 1e-6 * spread:
        for start in _pca_starts(src, dst, with_scale):
            run = _icp_run(src, dst, with_scale, max_iters, tol, correspondence, trim, start)
            if run.residual < best.residual:
                best = run
    return best


def _icp_run(src, dst, with_scale, max_iters, tol, correspondence, trim, init):
    if correspondence not in ("nearest", "index"):
        raise ParameterError(f"unknown correspondence mode {correspondence!r}")
    if correspondence == "index" and len(src) != len(dst):
        raise ParameterError("index correspondence needs equally sized point sets")
    if not 0.0 <= trim < 1.0:
        raise ParameterError("trim fraction must be in [0, 1)")
    tree = cKDTree(dst) if correspondence == "nearest" else None
    if init is None:
        cur = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0), 1.0)
    else:
        cur = init
    history = []
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        moved = cur.apply(src)
        if tree is None:
            idx = np.arange(len(src))
            dist = np.linalg.norm(moved - dst, axis=1)
        else:
            dist, idx = tree.query(moved)
        keep = np.arange(len(src))
        if trim > 0:
            keep = np.argsort(dist, kind="stable")[: max(3, int(round(len(src) * (1 - trim))))]
        res_before = float(np.sqrt(np.mean(dist[keep] ** 2)))
        nxt = procrustes(src[keep], dst[idx[keep]], with_scale)
        res_after = float(np.sqrt(np.mean(np.sum((nxt.apply(src[keep]) - dst[idx[keep]]) ** 2, axis=1))))
        if res_after <= res_before:
            cur = nxt
        else:
            res_after = res_before
        history.append(res_after)
        if abs(prev - res_after) < tol or res_after == 0.0:
            break
        prev = res_after
    return IcpResult(cur, history[-1], it, history)
