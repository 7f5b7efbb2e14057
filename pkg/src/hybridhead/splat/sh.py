"""Real spherical harmonics up to degree 3 (3DGS sign convention) and their gradients."""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def n_coeffs(degree):
    return (degree + 1) ** 2


def degree_of(n):
    d = int(round(np.sqrt(n))) - 1
    if (d + 1) ** 2 != n or not 0 <= d <= 3:
        raise ValueError(f"{n} is not a valid SH coefficient count")
    return d


def sh_basis(d, degree=3, grad=False):
    """Basis values (N, K) at points ``d`` (N, 3); with ``grad`` also d(basis)/d(xyz) (N, K, 3).

    The polynomial form is differentiated directly; callers chain through the
    normalization of d themselves.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = len(d)
    k = n_coeffs(degree)
    b = np.zeros((n, k))
    g = np.zeros((n, k, 3)) if grad else None
    b[:, 0] = C0
    if degree >= 1:
        b[:, 1] = -C1 * y
        b[:, 2] = C1 * z
        b[:, 3] = -C1 * x
        if grad:
            g[:, 1, 1] = -C1
            g[:, 2, 2] = C1
            g[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[:, 4] = C2[0] * x * y
        b[:, 5] = C2[1] * y * z
        b[:, 6] = C2[2] * (2 * zz - xx - yy)
        b[:, 7] = C2[3] * x * z
        b[:, 8] = C2[4] * (xx - yy)
        if grad:
            g[:, 4] = C2[0] * np.stack([y, x, 0 * z], 1)
            g[:, 5] = C2[1] * np.stack([0 * x, z, y], 1)
            g[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], 1)
            g[:, 7] = C2[3] * np.stack([z, 0 * y, x], 1)
            g[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * z], 1)
    if degree >= 3:
        b[:, 9] = C3[0] * y * (3 * xx - yy)
        b[:, 10] = C3[1] * x * y * z
        b[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        b[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        b[:, 14] = C3[5] * z * (xx - yy)
        b[:, 15] = C3[6] * x * (xx - 3 * yy)
        if grad:
            g[:, 9] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * z], 1)
            g[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], 1)
            g[:, 11] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], 1)
            g[:, 12] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], 1)
            g[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], 1)
            g[:, 14] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], 1)
            g[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * z], 1)
    return (b, g) if grad else b


def eval_sh(sh, d):
    """RGB = clamp(0.5 + sum_k sh[k] * Y_k(d), 0, 1).

    ``sh`` is (K, 3) or (N, K, 3); ``d`` unit vectors (3,) or (N, 3).
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    basis = sh_basis(d, degree_of(sh.shape[1]))
    rgb = np.clip(0.5 + np.einsum("nk,nkc->nc", basis, sh), 0.0, 1.0)
    return rgb[0] if single else rgb


def colors_with_grad(sh, positions, cam_center):
    """Per-Gaussian colors viewed from ``cam_center`` plus what the backward pass needs."""
    v = positions - cam_center
    dist = np.linalg.norm(v, axis=1, keepdims=True)
    d = v / dist
    basis, dbasis = sh_basis(d, degree_of(sh.shape[1]), grad=True)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, sh)
    return np.clip(raw, 0.0, 1.0), (d, dist, basis, dbasis, raw)


def colors_backward(sh, cache, grad_rgb):
    """Returns (dL/dsh (N,K,3), dL/dposition (N,3))."""
    d, dist, basis, dbasis, raw = cache
    g = np.where((raw > 0.0) & (raw < 1.0), grad_rgb, 0.0)
    g_sh = basis[:, :, None] * g[:, None, :]
    g_basis = np.einsum("nkc,nc->nk", sh, g)
    g_d = np.einsum("nk,nkj->nj", g_basis, dbasis)
    g_pos = (g_d - d * np.sum(g_d * d, axis=1, keepdims=True)) / dist
    return g_sh, g_pos
