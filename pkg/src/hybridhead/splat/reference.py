"""Dense per-pixel reference for the splat renderer.

Evaluates every Gaussian at every pixel with plain numpy and explicit matrix
products, independent of the tiled kernels and of ``projection.py``. Meant for
small scenes in tests.
"""
import numpy as np

from .cloud import quat_to_rotmat, sigmoid
from .sh import eval_sh


def _cov2d(x, r, s, camera):
    out = []
    for xi, ri, si in zip(x, r, s):
        t = camera.rotation @ xi + camera.translation
        q = ri / np.linalg.norm(ri)
        rot = quat_to_rotmat(q[None])[0]
        sigma = rot @ np.diag(np.exp(2 * si)) @ rot.T
        j = np.array([[camera.fx / t[2], 0.0, -camera.fx * t[0] / t[2] ** 2],
                      [0.0, camera.fy / t[2], -camera.fy * t[1] / t[2] ** 2]])
        m = j @ camera.rotation
        out.append((t, m @ sigma @ m.T + 0.3 * np.eye(2)))
    return out


def render_splats_reference(cloud, camera, opts):
    h, w = camera.height, camera.width
    n = len(cloud)
    opac = sigmoid(cloud.o)
    geo = _cov2d(cloud.x, cloud.r, cloud.s, camera)
    dirs = cloud.x - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = eval_sh(cloud.sh, dirs) if n else np.zeros((0, 3))
    z = np.array([t[2] for t, _ in geo]) if n else np.zeros(0)
    keep = [i for i in range(n) if z[i] > camera.near and np.linalg.det(geo[i][1]) > 1e-12]
    keep.sort(key=lambda i: (z[i], i))
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs + 0.5, ys + 0.5], -1).reshape(-1, 2)
    alphas = np.zeros((len(pix), len(keep)))
    for k, i in enumerate(keep):
        t, cov = geo[i]
        mean = np.array([camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy])
        d = pix - mean
        q = np.einsum("pi,ij,pj->p", d, np.linalg.inv(cov), d)
        alphas[:, k] = opac[i] * np.exp(-0.5 * q)
    color = np.zeros((len(pix), 3))
    alpha = np.zeros(len(pix))
    nearz = np.full(len(pix), np.inf)
    for p in range(len(pix)):
        T = 1.0
        last = None
        for k, i in enumerate(keep):
            a = alphas[p, k]
            if a < opts.alpha_cutoff:
                continue
            if opts.early_stop and last is not None and z[i] - last > opts.early_stop_gap:
                break
            if nearz[p] == np.inf and a >= opts.nearz_opacity_threshold:
                nearz[p] = z[i]
            color[p] += colors[i] * a * T
            T *= 1 - a
            last = z[i]
            if T < opts.transmittance_floor:
                break
        alpha[p] = 1 - T
    return color.reshape(h, w, 3), alpha.reshape(h, w), nearz.reshape(h, w)
