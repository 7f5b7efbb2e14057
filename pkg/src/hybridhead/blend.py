"""Occlusion-aware compositing of hair splats over the rasterized head."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError


@dataclass
class BlendMaps:
    occlusion: np.ndarray  # M_o, bool
    soft: np.ndarray  # blurred M_o
    hair_alpha: np.ndarray  # A_g * soft


def _same_shape(*arrays):
    shapes = {np.shape(a)[:2] for a in arrays}
    if len(shapes) != 1:
        raise ParameterError(f"image dimensions differ: {sorted(shapes)}")


def occlusion_mask(nearz, mesh_depth):
    """Hair wins where its near-z depth is strictly in front of the mesh."""
    _same_shape(nearz, mesh_depth)
    return np.asarray(nearz) < np.asarray(mesh_depth)


def gaussian_kernel(sigma):
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(mask, sigma=2.0):
    """Separable normalized Gaussian blur with edge clamping; ``sigma == 0`` is the identity."""
    if sigma < 0:
        raise ParameterError("sigma must be nonnegative")
    img = np.asarray(mask, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def blend_maps(nearz, mesh_depth, hair_alpha, sigma=2.0):
    occ = occlusion_mask(nearz, mesh_depth)
    soft = gaussian_blur(occ, sigma)
    return BlendMaps(occ, soft, np.asarray(hair_alpha) * soft)


def composite(hair, head, hair_alpha, soft_mask):
    """I = A_hat * I_hair + (1 - A_hat) * I_head with A_hat = A_g * G(M_o)."""
    _same_shape(hair, head, hair_alpha, soft_mask)
    if np.shape(hair) != np.shape(head):
        raise ParameterError("hair and head images must have the same shape")
    a = (np.asarray(hair_alpha) * np.asarray(soft_mask))[..., None]
    return a * hair + (1.0 - a) * head


def composite_backward(hair, head, hair_alpha, soft_mask, grad):
    """Returns (dL/d hair, dL/d head, dL/d A_g); the soft mask is treated as constant."""
    a = (np.asarray(hair_alpha) * np.asarray(soft_mask))[..., None]
    g_alpha = np.sum(grad * (hair - head), axis=-1) * soft_mask
    return a * grad, (1.0 - a) * grad, g_alpha
