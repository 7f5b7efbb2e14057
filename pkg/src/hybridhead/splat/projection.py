"""EWA projection of 3D Gaussians to screen-space means and covariances (with backward)."""
from dataclasses import dataclass

import numpy as np

from .cloud import normalize_backward, quat_to_rotmat, rotmat_grad_to_quat

DILATION = 0.3


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) entries a, b, c of the inverse covariance
    depth: np.ndarray  # (N,) camera z
    valid: np.ndarray  # (N,) bool
    # intermediates for the backward pass
    t: np.ndarray
    jac: np.ndarray
    sigma3d: np.ndarray
    rot: np.ndarray
    qn: np.ndarray
    scale: np.ndarray


def project_gaussians(x, r, s, camera):
    """Project N Gaussians; culled entries (behind near plane, singular) get ``valid=False``."""
    R = camera.rotation
    t = x @ R.T + camera.translation
    z = t[:, 2]
    front = z > camera.near
    zs = np.where(front, z, 1.0)
    fx, fy = camera.fx, camera.fy
    mean2d = np.stack([fx * t[:, 0] / zs + camera.cx, fy * t[:, 1] / zs + camera.cy], 1)
    n = len(x)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * t[:, 0] / zs ** 2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * t[:, 1] / zs ** 2
    qn = r / np.linalg.norm(r, axis=1, keepdims=True)
    rot = quat_to_rotmat(qn)
    scale = np.exp(s)
    m = rot * scale[:, None, :]
    sigma = m @ m.transpose(0, 2, 1)
    tw = jac @ R
    cov = tw @ sigma @ tw.transpose(0, 2, 1) + DILATION * np.eye(2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    valid = front & (det > 1e-12) & np.isfinite(det)
    dsafe = np.where(valid, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / dsafe, -cov[:, 0, 1] / dsafe, cov[:, 0, 0] / dsafe], 1)
    return Projection(mean2d, cov, conic, z, valid, t, jac, sigma, rot, qn, scale)


def project_gaussian(g, camera):
    """Single-Gaussian convenience wrapper: ``g`` has fields x (3,), r (4,), s (3,)."""
    p = project_gaussians(np.atleast_2d(g.x), np.atleast_2d(g.r), np.atleast_2d(g.s), camera)
    return {"mean2d": p.mean2d[0], "cov2d": p.cov2d[0], "depth": float(p.depth[0]), "culled": not bool(p.valid[0])}


def projection_backward(proj: Projection, r, camera, g_mean2d, g_conic):
    """Chain dL/d(mean2d) and dL/d(conic a, b, c) to dL/dx, dL/dr, dL/ds."""
    R = camera.rotation
    fx, fy = camera.fx, camera.fy
    t = proj.t
    z = np.where(proj.valid, t[:, 2], 1.0)
    v = proj.valid[:, None]
    g_mean2d = np.where(v, g_mean2d, 0.0)
    g_conic = np.where(v, g_conic, 0.0)

    # conic = inverse(cov): dL/dcov = -C G C with G the symmetric conic gradient
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], 1)
    gm = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], 1)
    g_cov = -conic_m @ gm @ conic_m

    tw = proj.jac @ R
    g_sigma = tw.transpose(0, 2, 1) @ g_cov @ tw
    g_tw = 2.0 * g_cov @ tw @ proj.sigma3d
    g_jac = g_tw @ R.T

    g_t = np.zeros_like(t)
    g_t[:, 0] = g_mean2d[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z ** 2
    g_t[:, 1] = g_mean2d[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z ** 2
    g_t[:, 2] = (
        -g_mean2d[:, 0] * fx * t[:, 0] / z ** 2 - g_mean2d[:, 1] * fy * t[:, 1] / z ** 2
        - g_jac[:, 0, 0] * fx / z ** 2 + g_jac[:, 0, 2] * 2 * fx * t[:, 0] / z ** 3
        - g_jac[:, 1, 1] * fy / z ** 2 + g_jac[:, 1, 2] * 2 * fy * t[:, 1] / z ** 3
    )
    g_x = g_t @ R

    m = proj.rot * proj.scale[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_rot = g_m * proj.scale[:, None, :]
    g_scale = np.sum(g_m * proj.rot, axis=1)
    g_s = g_scale * proj.scale
    g_qn = rotmat_grad_to_quat(proj.qn, g_rot)
    g_r = normalize_backward(r, g_qn)
    return g_x, g_r, g_s
