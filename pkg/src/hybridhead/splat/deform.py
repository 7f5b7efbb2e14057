"""Rigid + MLP non-rigid deformation of the canonical hair cloud."""
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from ..micronet import MlpParams, mlp_backward, mlp_forward
from .cloud import GaussianCloud, GaussianDelta, normalize_backward, quat_multiply, rotmat_to_quat


@dataclass
class DeformField:
    """MLP over [psi (first ``n_psi`` coefficients, zero padded), per-Gaussian embedding]."""

    mlp: MlpParams
    embedding: np.ndarray  # (N, E)
    n_psi: int = 16

    @property
    def sh_coeffs(self):
        return (self.mlp.out_dim - 11) // 3

    def arrays(self, prefix="def."):
        out = self.mlp.arrays(prefix)
        out[f"{prefix}embedding"] = self.embedding
        return out

    def copy(self):
        return DeformField(self.mlp.copy(), self.embedding.copy(), self.n_psi)

    @classmethod
    def init(cls, n_gaussians, sh_coeffs, seed, n_psi=16, embed_dim=16, hidden=64):
        """Last layer zero, so a fresh field leaves the cloud untouched."""
        out_dim = 3 + 4 + 3 + 1 + 3 * sh_coeffs
        mlp = MlpParams.init([n_psi + embed_dim, hidden, hidden, out_dim], ["relu", "relu", "none"], seed, zero_last=True)
        rng = np.random.default_rng(None if seed is None else seed + 1)
        return cls(mlp, rng.normal(0.0, 1.0, size=(n_gaussians, embed_dim)), n_psi)


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ParameterError("scale must be positive")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, pts):
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation

    def to_list(self, with_scale=None):
        """Row-major [R | t] (12 floats), plus the scale when it differs from 1."""
        vals = np.concatenate([self.rotation, self.translation[:, None]], axis=1).ravel().tolist()
        if with_scale or (with_scale is None and self.scale != 1.0):
            vals.append(self.scale)
        return vals

    @classmethod
    def from_list(cls, vals):
        vals = list(vals)
        m = np.asarray(vals[:12], dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3], vals[12] if len(vals) == 13 else 1.0)


def transform_cloud(cloud: GaussianCloud, rigid: RigidTransform) -> GaussianCloud:
    """Similarity transform of centers, orientations and log-scales (SH left as is)."""
    if np.array_equal(rigid.rotation, np.eye(3)) and not rigid.translation.any() and rigid.scale == 1.0:
        return cloud.copy()
    qr = rotmat_to_quat(rigid.rotation[None])[0]
    r = quat_multiply(np.broadcast_to(qr, cloud.r.shape), cloud.r)
    return GaussianCloud(rigid.apply(cloud.x), r, cloud.s + np.log(rigid.scale), cloud.o.copy(), cloud.sh.copy())


def _field_input(field: DeformField, psi):
    psi = np.asarray(psi, dtype=np.float64).ravel()[: field.n_psi]
    cond = np.zeros(field.n_psi)
    cond[: len(psi)] = psi
    n = len(field.embedding)
    return np.concatenate([np.broadcast_to(cond, (n, field.n_psi)), field.embedding], axis=1)


def split_delta(raw, sh_coeffs):
    return GaussianDelta(raw[:, 0:3], raw[:, 3:7], raw[:, 7:10], raw[:, 10], raw[:, 11:].reshape(len(raw), sh_coeffs, 3))


def deform_cloud(canonical: GaussianCloud, rigid: RigidTransform, psi, field: DeformField, return_cache=False):
    """x = R x_c + t + dx, r = normalize(q(R) r_c + dr), s = s_c + ds, o = o_c + do, sh = sh_c + dsh."""
    k = canonical.sh.shape[1]
    if field.mlp.out_dim != 11 + 3 * k or len(field.embedding) != len(canonical):
        raise ParameterError("deformation field output does not match the cloud layout")
    rigid_cloud = transform_cloud(canonical, rigid)
    raw, mcache = mlp_forward(field.mlp, _field_input(field, psi))
    delta = split_delta(raw, k)
    r_sum = rigid_cloud.r + delta.dr
    out = GaussianCloud(
        rigid_cloud.x + delta.dx,
        r_sum / np.linalg.norm(r_sum, axis=1, keepdims=True),
        rigid_cloud.s + delta.ds,
        rigid_cloud.o + delta.do,
        rigid_cloud.sh + delta.dsh,
    )
    if return_cache:
        return out, delta, (mcache, r_sum)
    return out, delta


def deform_backward(field: DeformField, cache, g_cloud, g_delta=None):
    """Chain gradients on the deformed cloud (and optional direct delta gradients from
    regularizers, a GaussianDelta) to the MLP weights and embeddings."""
    mcache, r_sum = cache
    n = len(r_sum)
    g_raw = np.concatenate([
        g_cloud.x, normalize_backward(r_sum, g_cloud.r), g_cloud.s, g_cloud.o[:, None], g_cloud.sh.reshape(n, -1)
    ], axis=1)
    if g_delta is not None:
        g_raw = g_raw + np.concatenate([g_delta.dx, g_delta.dr, g_delta.ds, g_delta.do[:, None], g_delta.dsh.reshape(n, -1)], axis=1)
    mgrads, g_in = mlp_backward(field.mlp, mcache, g_raw)
    return mgrads, g_in[:, field.n_psi:]
