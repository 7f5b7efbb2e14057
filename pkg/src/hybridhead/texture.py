"""Disentangled neural textures (diffuse + view + dynamic) and per-pixel face decoding."""
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import HybridHeadWarning, ParameterError
from .micronet import MlpParams, mlp_backward, mlp_forward
from .sampling import sample_grid, sampling_matrix


@dataclass
class TextureStack:
    """Latent grids summed per sample: diffuse + view(d) + dynamic(psi).

    diffuse: (R, R, C); view: (Rv, Rv, C, 4) degree-1 SH coefficients in d;
    dynamic: (Rd, Rd, C, K) basis maps weighted by the first K expression coefficients.
    """

    diffuse: np.ndarray
    view: np.ndarray
    dynamic: np.ndarray

    def __post_init__(self):
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        self.view = np.asarray(self.view, dtype=np.float64)
        self.dynamic = np.asarray(self.dynamic, dtype=np.float64)
        c = self.channels
        if self.view.shape[2:] != (c, 4) or self.dynamic.shape[2] != c:
            raise ParameterError("texture channel counts disagree")

    @property
    def channels(self):
        return self.diffuse.shape[2]

    @property
    def n_dynamic(self):
        return self.dynamic.shape[3]

    @classmethod
    def zeros(cls, channels=4, resolution=1024, view_resolution=256, dyn_resolution=256, n_dynamic=8):
        return cls(
            np.zeros((resolution, resolution, channels)),
            np.zeros((view_resolution, view_resolution, channels, 4)),
            np.zeros((dyn_resolution, dyn_resolution, channels, n_dynamic)),
        )

    def arrays(self, prefix="tex."):
        return {f"{prefix}diffuse": self.diffuse, f"{prefix}view": self.view, f"{prefix}dynamic": self.dynamic}

    def copy(self):
        return TextureStack(self.diffuse.copy(), self.view.copy(), self.dynamic.copy())


def sample_uv(grid, uv):
    """Bilinear latent lookup with uv clamped to the texel-center range."""
    return sample_grid(grid, uv)


def _unit(d):
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > 1e-6):
        warnings.warn("view vector not unit length; normalized", HybridHeadWarning, stacklevel=3)
        d = d / n
    return d


def view_basis(d):
    d = np.asarray(d, dtype=np.float64)
    return np.concatenate([np.ones(d.shape[:-1] + (1,)), d], axis=-1)


def eval_view_texture(view_model, d):
    """Per-texel c0 + c1*dx + c2*dy + c3*dz for a single unit view vector d."""
    d = _unit(np.asarray(d, dtype=np.float64).reshape(3))
    return view_model @ view_basis(d)


def eval_dynamic_texture(dyn_model, psi):
    k = dyn_model.shape[-1]
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if k > psi.shape[0]:
        raise ParameterError("dynamic texture has more basis maps than expression coefficients")
    return dyn_model @ psi[:k]


def psi_weights(stack, psi):
    psi = np.asarray(psi, dtype=np.float64).ravel()
    k = stack.n_dynamic
    if k > psi.shape[0]:
        raise ParameterError("dynamic texture has more basis maps than expression coefficients")
    return psi[:k]


@dataclass
class FaceDecodeCache:
    mask: np.ndarray
    uv: np.ndarray
    dirs: np.ndarray
    psi_k: np.ndarray
    s_di: object
    s_v: object
    s_dy: object
    mlp_cache: object
    latent: np.ndarray
    diffuse_only: bool


def decode_face(stack: TextureStack, buffers, d, psi, pix: MlpParams, diffuse_only=False, return_cache=False,
                use_view=True, use_dynamic=True):
    """Decode the rasterized latent textures to colors on covered pixels.

    ``d`` is the per-pixel unit view direction (H, W, 3). Uncovered pixels are black.
    """
    if pix.in_dim != stack.channels + 2:
        raise ParameterError("pixel decoder input does not match texture channels + uv")
    mask = buffers.coverage
    h, w = mask.shape
    uv = buffers.uv[mask]
    dirs = np.asarray(d, dtype=np.float64)[mask]
    psi_k = psi_weights(stack, psi)
    c = stack.channels
    s_di = sampling_matrix(uv, *stack.diffuse.shape[:2])
    latent = s_di @ stack.diffuse.reshape(-1, c)
    s_v = s_dy = None
    if not diffuse_only:
        if use_view:
            s_v = sampling_matrix(uv, *stack.view.shape[:2])
            coef = (s_v @ stack.view.reshape(-1, c * 4)).reshape(-1, c, 4)
            latent = latent + np.einsum("nck,nk->nc", coef, view_basis(dirs))
        if use_dynamic:
            s_dy = sampling_matrix(uv, *stack.dynamic.shape[:2])
            dyn = (s_dy @ stack.dynamic.reshape(-1, c * stack.n_dynamic)).reshape(-1, c, stack.n_dynamic)
            latent = latent + dyn @ psi_k
    rgb, mcache = mlp_forward(pix, np.concatenate([latent, uv], axis=1))
    image = np.zeros((h, w, 3))
    image[mask] = rgb
    if not return_cache:
        return image
    return image, FaceDecodeCache(mask, uv, dirs, psi_k, s_di, s_v, s_dy, mcache, latent, diffuse_only)


def decode_face_backward(stack: TextureStack, pix: MlpParams, cache: FaceDecodeCache, grad_image):
    """Gradients of a loss w.r.t. the texture grids and decoder given dL/d(image)."""
    c = stack.channels
    g = np.asarray(grad_image, dtype=np.float64)[cache.mask]
    mgrads, g_in = mlp_backward(pix, cache.mlp_cache, g)
    g_lat = g_in[:, :c]
    out = {"diffuse": (cache.s_di.T @ g_lat).reshape(stack.diffuse.shape)}
    if cache.s_v is not None:
        g_coef = g_lat[:, :, None] * view_basis(cache.dirs)[:, None, :]
        out["view"] = np.asarray(cache.s_v.T @ g_coef.reshape(len(g_lat), -1)).reshape(stack.view.shape)
    else:
        out["view"] = np.zeros_like(stack.view)
    if cache.s_dy is not None:
        g_dyn = g_lat[:, :, None] * cache.psi_k[None, None, :]
        out["dynamic"] = np.asarray(cache.s_dy.T @ g_dyn.reshape(len(g_lat), -1)).reshape(stack.dynamic.shape)
    else:
        out["dynamic"] = np.zeros_like(stack.dynamic)
    out["pix"] = mgrads
    return out
