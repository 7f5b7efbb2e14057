"""Binary mask erosion and Euclidean distance transform."""
import numpy as np
from scipy import ndimage


def disk(radius):
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= radius * radius


def erode(mask, radius=5):
    """Min-filter with a disk; pixels outside the image count as inside the mask."""
    m = np.asarray(mask).astype(bool)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_erosion(m, structure=disk(radius), border_value=1)


def distance_to_mask(mask):
    """Exact Euclidean distance from every pixel to the nearest mask pixel (0 inside)."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.full(m.shape, np.inf)
    return ndimage.distance_transform_edt(~m)


def mask_morphology(mask, op, radius=5):
    if op == "erode":
        return erode(mask, radius)
    if op == "distance":
        return distance_to_mask(mask)
    raise ValueError(f"unknown morphology op {op!r}")
