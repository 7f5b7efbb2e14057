"""Masked PSNR and SSIM / D-SSIM with an analytic gradient."""
import numpy as np
from scipy.ndimage import correlate1d

from ..errors import UndefinedMetricError

PSNR_CAP = 99.0
K1, K2 = 0.01, 0.03
C1, C2 = K1 ** 2, K2 ** 2


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != tuple(shape[:2]):
        raise ValueError("mask shape does not match image")
    return m


def psnr(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = _mask(mask, a.shape)
    if not m.any():
        raise UndefinedMetricError("PSNR over an empty mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def _window():
    x = np.arange(-5, 6, dtype=np.float64)
    k = np.exp(-0.5 * (x / 1.5) ** 2)
    return k / k.sum()


_WIN = _window()


def _filt(img):
    # zero padding keeps the filter self-adjoint for the backward pass
    out = correlate1d(img, _WIN, axis=0, mode="constant")
    return correlate1d(out, _WIN, axis=1, mode="constant")


def ssim_map(a, b):
    """Per-pixel SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    s = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        s += _ssim_terms(a[..., c], b[..., c])[0]
    return s / a.shape[2]


def _ssim_terms(x, y):
    mx, my = _filt(x), _filt(y)
    sxx = _filt(x * x) - mx * mx
    syy = _filt(y * y) - my * my
    sxy = _filt(x * y) - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    return a1 * a2 / (b1 * b2), (mx, my, a1, a2, b1, b2)


def ssim(a, b, mask=None):
    return 1.0 - dssim(a, b, mask)


def dssim(a, b, mask=None, grad=False):
    """1 - masked-mean SSIM. With ``grad`` returns ``(value, dL/db)`` (``b`` is the render)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = _mask(mask, a.shape)
    if not m.any():
        raise UndefinedMetricError("SSIM over an empty mask")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[..., None], b[..., None]
    nch = a.shape[2]
    w = m / (m.sum() * nch)
    total = 0.0
    g = np.zeros_like(b)
    for c in range(nch):
        x, y = b[..., c], a[..., c]  # differentiate w.r.t. the render x
        s, (mx, my, a1, a2, b1, b2) = _ssim_terms(x, y)
        total += float(s[m].mean())
        if grad:
            # partials of S = a1 a2 / (b1 b2) w.r.t. mu_x, sigma_x^2, sigma_xy
            d_mx = s * (2 * my / a1 - 2 * mx / b1)
            d_sxx = -s / b2
            d_sxy = 2 * s / a2
            # raw moments: sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
            d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
            g[..., c] = -(_filt(w * d_mx_total) + 2 * x * _filt(w * d_sxx) + y * _filt(w * d_sxy))
    value = 1.0 - total / nch
    if not grad:
        return value
    return value, (g[..., 0] if squeeze else g)
