"""Bilinear lookups into regular grids addressed by UV coordinates in [0, 1]^2.

Texel ``(row, col)`` has its center at ``uv = ((col + 0.5) / W, (row + 0.5) / H)``.
Coordinates are clamped to the texel-center range, so samples never read outside
the grid.
"""
import numpy as np
import scipy.sparse as sp


def bilinear_taps(uv, height, width):
    """Return (flat_indices (N,4), weights (N,4)) of the four taps per sample."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = np.clip(uv[:, 0] * width - 0.5, 0.0, width - 1.0)
    y = np.clip(uv[:, 1] * height - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def sampling_matrix(uv, height, width):
    """Sparse (N, H*W) matrix S with ``S @ grid.reshape(H*W, -1)`` == bilinear samples.

    The transpose scatters sample gradients back onto the grid.
    """
    idx, w = bilinear_taps(uv, height, width)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), 4)
    return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, height * width))


def sample_grid(grid, uv):
    """Bilinear sample of ``grid`` (H, W, ...) at ``uv`` (..., 2); returns (..., *grid.shape[2:])."""
    grid = np.asarray(grid, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    h, w = grid.shape[:2]
    idx, wts = bilinear_taps(uv, h, w)
    flat = grid.reshape(h * w, -1)
    out = np.einsum("nk,nkc->nc", wts, flat[idx])
    return out.reshape(uv.shape[:-1] + grid.shape[2:])
