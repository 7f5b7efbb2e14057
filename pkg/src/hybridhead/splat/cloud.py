"""Gaussian point cloud containers, scalp initialization and PLY interchange."""
from dataclasses import dataclass, fields

import numpy as np

from ..errors import ParameterError
from .sh import n_coeffs


def quat_to_rotmat(q):
    """(N,4) unit quaternions (w, x, y, z) -> (N,3,3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def rotmat_grad_to_quat(q, g_r):
    """Chain dL/dR (N,3,3) to dL/dq for unnormalized use of ``quat_to_rotmat``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)

    def m(rows):
        return np.stack([np.stack(r, -1) for r in rows], 1)

    dw = m([[o, -z, y], [z, o, -x], [-y, x, o]])
    dx = m([[o, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = m([[-2 * y, x, w], [x, o, z], [-w, z, -2 * y]])
    dz = m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, o]])
    return 2 * np.stack([np.sum(g_r * d, axis=(1, 2)) for d in (dw, dx, dy, dz)], -1)


def rotmat_to_quat(r):
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(r).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def quat_multiply(a, b):
    """Hamilton product a*b, both (..., 4) in (w, x, y, z)."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def normalize_rows(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def normalize_backward(v, g):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (g - u * np.sum(g * u, axis=-1, keepdims=True)) / n


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Anisotropic Gaussians: centers, unit quaternions (w,x,y,z), log-scales,
    opacity logits and SH color coefficients (N, K, 3)."""

    x: np.ndarray
    r: np.ndarray
    s: np.ndarray
    o: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        n = len(self.x)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(n, 4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, 3)
        self.o = np.asarray(self.o, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh if sh.ndim == 3 and len(sh) == n else sh.reshape(n, -1, 3)

    def __len__(self):
        return len(self.x)

    @property
    def opacity(self):
        return sigmoid(self.o)

    def arrays(self, prefix="gs."):
        return {f"{prefix}{f.name}": getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return GaussianCloud(self.x.copy(), self.r.copy(), self.s.copy(), self.o.copy(), self.sh.copy())

    def subset(self, idx):
        return GaussianCloud(self.x[idx], self.r[idx], self.s[idx], self.o[idx], self.sh[idx])

    def renormalize(self):
        self.r /= np.linalg.norm(self.r, axis=1, keepdims=True)

    def extent(self):
        """Diameter of the bounding sphere around the centroid."""
        if len(self) == 0:
            return 0.0
        return 2.0 * float(np.linalg.norm(self.x - self.x.mean(axis=0), axis=1).max())


@dataclass
class GaussianDelta:
    dx: np.ndarray
    dr: np.ndarray
    ds: np.ndarray
    do: np.ndarray
    dsh: np.ndarray

    @classmethod
    def zeros_like(cls, cloud):
        return cls(np.zeros_like(cloud.x), np.zeros_like(cloud.r), np.zeros_like(cloud.s),
                   np.zeros_like(cloud.o), np.zeros_like(cloud.sh))


@dataclass
class SplatOptions:
    nearz_opacity_threshold: float = 0.05
    early_stop_gap: float = 0.1
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    early_stop: bool = True
    depth_mode: str = "nearz"  # or "accumulated" (gsdepth ablation)
    clip_to_mesh: bool = False
    tile_size: int = 16

    def __post_init__(self):
        if not 0 < self.nearz_opacity_threshold < 1:
            raise ParameterError("near-z opacity threshold must be in (0, 1)")
        if not self.early_stop_gap > 0:
            raise ParameterError("early-stop gap must be positive")
        if self.depth_mode not in ("nearz", "accumulated"):
            raise ParameterError(f"unknown depth mode {self.depth_mode!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_from_scalp(mesh, scalp, n, shell, seed, opacity=0.1):
    """Sample ``n`` Gaussians uniformly (by area) over triangles whose corners are all scalp vertices.

    Every second sample is pushed off the surface along the face normal by
    uniform(0, shell). Scales are isotropic at the mean spacing sqrt(area / n).
    """
    if n <= 0:
        raise ParameterError("need at least one Gaussian")
    scalp = np.asarray(scalp, dtype=np.int64)
    if scalp.size == 0:
        raise ParameterError("empty scalp region")
    in_scalp = np.zeros(mesh.n_vertices, dtype=bool)
    in_scalp[scalp] = True
    tri = mesh.faces[in_scalp[mesh.faces].all(axis=1)]
    if len(tri) == 0:
        raise ParameterError("scalp region contains no complete triangle")
    v = mesh.vertices[tri]
    cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    normal = cr / np.maximum(2 * area, 1e-300)[:, None]
    rng = np.random.default_rng(seed)
    f = rng.choice(len(tri), size=n, p=area / area.sum())
    a, b = rng.random(n), rng.random(n)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    x = v[f, 0] + a[:, None] * (v[f, 1] - v[f, 0]) + b[:, None] * (v[f, 2] - v[f, 0])
    off = np.zeros(n)
    off[1::2] = rng.uniform(0.0, shell, size=len(off[1::2])) if shell > 0 else 0.0
    x = x + off[:, None] * normal[f]
    spacing = np.sqrt(area.sum() / n)
    k = n_coeffs(3)
    r = np.zeros((n, 4))
    r[:, 0] = 1.0
    return GaussianCloud(x, r, np.full((n, 3), np.log(spacing)), np.full(n, logit(opacity)), np.zeros((n, k, 3)))


def scalp_triangles(mesh, scalp):
    in_scalp = np.zeros(mesh.n_vertices, dtype=bool)
    in_scalp[np.asarray(scalp, dtype=np.int64)] = True
    return mesh.faces[in_scalp[mesh.faces].all(axis=1)]


# ---------------------------------------------------------------------------
# PLY with the usual 3DGS attribute names. f_dc_* holds degree-0 coefficients,
# f_rest_* the rest in channel-major order.


def save_ply(path, cloud: GaussianCloud, dtype="f8"):
    n = len(cloud)
    k = cloud.sh.shape[1]
    names = ["x", "y", "z"] + [f"f_dc_{c}" for c in range(3)] + [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    data = np.concatenate([cloud.x, cloud.sh[:, 0, :], rest, cloud.o[:, None], cloud.s, cloud.r], axis=1)
    ply_type = {"f8": "double", "f4": "float"}[dtype]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type} {name}" for name in names]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.astype("<" + dtype).tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ParameterError("expected a binary little-endian PLY file")
    n = 0
    names, types = [], []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            types.append({"double": "<f8", "float": "<f4"}[parts[1]])
            names.append(parts[2])
    dt = np.dtype([(nm, tp) for nm, tp in zip(names, types)])
    rec = np.frombuffer(raw[end:end + n * dt.itemsize], dtype=dt)

    def col(nm):
        return rec[nm].astype(np.float64)

    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    k = 1 + n_rest // 3
    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    if n_rest:
        rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], 1).reshape(n, 3, k - 1)
        sh[:, 1:, :] = rest.transpose(0, 2, 1)
    return GaussianCloud(
        np.stack([col("x"), col("y"), col("z")], 1),
        np.stack([col(f"rot_{i}") for i in range(4)], 1),
        np.stack([col(f"scale_{i}") for i in range(3)], 1),
        col("opacity"),
        sh,
    )
