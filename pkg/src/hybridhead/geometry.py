"""Parametric head model, skinning, subdivision, UV displacement and mesh energies."""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from .errors import ParameterError, TopologyError
from .sampling import sample_grid, sampling_matrix


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv_coords is not None:
            self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64).reshape(-1, 2)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise TopologyError("face references a missing vertex")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


@dataclass
class HeadModel:
    """Linear blendshape head with joint-based linear blend skinning.

    ``shape_basis`` is (V, 3, n_shape), ``expr_basis`` is (V, 3, n_expr),
    ``skin_weights`` is (V, n_joints). ``joint_parents[0]`` must be -1.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    joint_positions: np.ndarray
    joint_parents: np.ndarray
    skin_weights: np.ndarray
    scalp_indices: np.ndarray

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.joint_positions = np.asarray(self.joint_positions, dtype=np.float64).reshape(-1, 3)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.scalp_indices = np.asarray(self.scalp_indices, dtype=np.int64)
        self.validate()

    @property
    def n_vertices(self):
        return len(self.template_vertices)

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @property
    def n_joints(self):
        return len(self.joint_positions)

    def validate(self):
        n = self.n_vertices
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ParameterError("face index out of range")
        if self.uv_coords.shape != (n, 2) or self.uv_coords.min() < 0 or self.uv_coords.max() > 1:
            raise ParameterError("uv coordinates must be (V, 2) inside [0, 1]")
        if self.shape_basis.shape[:2] != (n, 3) or self.expr_basis.shape[:2] != (n, 3):
            raise ParameterError("blendshape bases must be (V, 3, k)")
        w = self.skin_weights
        if w.shape != (n, self.n_joints):
            raise ParameterError("skin weights must be (V, n_joints)")
        if w.min() < 0 or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise ParameterError("skin weight rows must be nonnegative and sum to 1")
        parents = self.joint_parents
        if len(parents) != self.n_joints or parents[0] != -1 or any(
            not (-1 <= p < j) for j, p in enumerate(parents) if j > 0
        ):
            raise ParameterError("joint parents must precede their children, root first")
        s = self.scalp_indices
        if len(np.unique(s)) != len(s) or (len(s) and (s.min() < 0 or s.max() >= n)):
            raise ParameterError("scalp indices must be distinct and in range")

    def rest_mesh(self):
        return TriMesh(self.template_vertices.copy(), self.faces, self.uv_coords)


@dataclass
class ExpressionParams:
    beta: np.ndarray
    psi: np.ndarray
    phi: np.ndarray  # (n_joints, 3) axis-angle, radians

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.psi = np.asarray(self.psi, dtype=np.float64).ravel()
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1, 3)
        if not (np.isfinite(self.beta).all() and np.isfinite(self.psi).all() and np.isfinite(self.phi).all()):
            raise ParameterError("expression parameters must be finite")

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.n_shape), np.zeros(model.n_expr), np.zeros((model.n_joints, 3)))

    def to_dict(self):
        return {"beta": self.beta.tolist(), "psi": self.psi.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta"], d["psi"], d["phi"])


@dataclass
class DisplacementMap:
    grid: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[2] != 3:
            raise ParameterError("displacement grid must be (H, W, 3)")
        if not np.isfinite(self.grid).all():
            raise ParameterError("displacement grid must be finite")

    @property
    def resolution(self):
        return self.grid.shape[:2]


def joint_transforms(model, phi):
    """Global joint rotations (J,3,3) and offsets (J,3) so that a vertex bound to
    joint j moves by ``(R_j - I)(x - J_j) + o_j``."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1, 3)
    if phi.shape[0] != model.n_joints:
        raise ParameterError(f"pose needs {model.n_joints} joints, got {phi.shape[0]}")
    local = Rotation.from_rotvec(phi).as_matrix()
    rots = np.empty_like(local)
    offs = np.zeros((model.n_joints, 3))
    for j, p in enumerate(model.joint_parents):
        if p < 0:
            rots[j] = local[j]
        else:
            rots[j] = rots[p] @ local[j]
            offs[j] = offs[p] + (rots[p] - np.eye(3)) @ (model.joint_positions[j] - model.joint_positions[p])
    return rots, offs


def lbs_deform(model: HeadModel, params: ExpressionParams) -> TriMesh:
    if params.beta.shape[0] != model.n_shape or params.psi.shape[0] != model.n_expr:
        raise ParameterError("shape/expression coefficient count does not match the model bases")
    shaped = model.template_vertices + model.shape_basis @ params.beta + model.expr_basis @ params.psi
    rots, offs = joint_transforms(model, params.phi)
    rel = shaped[:, None, :] - model.joint_positions[None]  # (V, J, 3)
    moved = np.einsum("jab,vjb->vja", rots - np.eye(3), rel) + offs[None]
    verts = shaped + np.einsum("vj,vja->va", model.skin_weights, moved)
    return TriMesh(verts, model.faces, model.uv_coords)


def unique_edges(faces):
    """Sorted unique undirected edges (E,2) and, per face, the edge id of (a,b), (b,c), (c,a)."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    nf = len(faces)
    return edges, np.stack([inv[:nf], inv[nf:2 * nf], inv[2 * nf:]], axis=1)


def _subdivision_topology(n_verts, faces):
    edges, fe = unique_edges(faces)
    counts = np.bincount(fe.ravel(), minlength=len(edges))
    if counts.size and counts.max() > 2:
        raise TopologyError("non-manifold edge shared by more than two faces")
    m = n_verts + fe
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    new_faces = np.stack([
        np.stack([a, mab, mca], 1),
        np.stack([b, mbc, mab], 1),
        np.stack([c, mca, mbc], 1),
        np.stack([mab, mbc, mca], 1),
    ], axis=1).reshape(-1, 3)
    return edges, new_faces


def subdivide4(mesh: TriMesh) -> TriMesh:
    edges, faces = _subdivision_topology(mesh.n_vertices, mesh.faces)
    verts = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    uv = None
    if mesh.uv_coords is not None:
        uv = np.concatenate([mesh.uv_coords, 0.5 * (mesh.uv_coords[edges[:, 0]] + mesh.uv_coords[edges[:, 1]])])
    return TriMesh(verts, faces, uv)


def subdivide_head(model: HeadModel) -> HeadModel:
    """Four-way subdivision of a head model; per-vertex attributes are edge-midpoint averaged.

    A midpoint joins the scalp only when both edge endpoints are scalp vertices.
    """
    n = model.n_vertices
    edges, faces = _subdivision_topology(n, model.faces)
    i, j = edges[:, 0], edges[:, 1]

    def mid(a):
        return np.concatenate([a, 0.5 * (a[i] + a[j])])

    in_scalp = np.zeros(n, dtype=bool)
    in_scalp[model.scalp_indices] = True
    new_scalp = n + np.flatnonzero(in_scalp[i] & in_scalp[j])
    return HeadModel(
        mid(model.template_vertices), faces, mid(model.uv_coords),
        mid(model.shape_basis), mid(model.expr_basis),
        model.joint_positions, model.joint_parents, mid(model.skin_weights),
        np.concatenate([model.scalp_indices, new_scalp]),
    )


def apply_displacement(mesh: TriMesh, disp: DisplacementMap) -> TriMesh:
    if mesh.uv_coords is None:
        raise ParameterError("mesh has no uv coordinates")
    offsets = sample_grid(disp.grid, mesh.uv_coords)
    return TriMesh(mesh.vertices + offsets, mesh.faces, mesh.uv_coords)


def displacement_sampler(mesh: TriMesh, resolution):
    """Sparse matrix mapping a flattened (H*W, 3) displacement grid to per-vertex offsets."""
    return sampling_matrix(mesh.uv_coords, *resolution)


# ---------------------------------------------------------------------------
# mesh energies


@dataclass
class MeshTopology:
    """Precomputed connectivity shared by the regularizers."""

    n_vertices: int
    edges: np.ndarray
    laplacian: sp.csr_matrix  # I - D^-1 A
    face_pairs: np.ndarray  # (P, 2) faces sharing an edge

    @classmethod
    def build(cls, n_vertices, faces):
        faces = np.asarray(faces, dtype=np.int64)
        edges, fe = unique_edges(faces)
        i, j = edges[:, 0], edges[:, 1]
        adj = sp.coo_matrix((np.ones(2 * len(edges)), (np.r_[i, j], np.r_[j, i])), shape=(n_vertices, n_vertices)).tocsr()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
        lap = (sp.identity(n_vertices, format="csr") - sp.diags(inv) @ adj).tocsr()
        lap = sp.diags((deg > 0).astype(np.float64)) @ lap  # isolated vertices contribute nothing
        flat = fe.ravel()
        order = np.argsort(flat, kind="stable")
        sorted_e = flat[order]
        face_of = order // 3
        starts = np.flatnonzero(np.r_[True, sorted_e[1:] != sorted_e[:-1]])
        lengths = np.diff(np.r_[starts, len(sorted_e)])
        two = starts[lengths == 2]
        pairs = np.stack([face_of[two], face_of[two + 1]], axis=1) if len(two) else np.zeros((0, 2), np.int64)
        return cls(n_vertices, edges, lap.tocsr(), pairs)


def _face_normals_with_jacobian(verts, faces):
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    cr = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(cr, axis=1, keepdims=True)
    return cr / norm, cr, norm, (v0, v1, v2)


def mesh_regularizers(mesh: TriMesh, rest: TriMesh, topology=None, grad=False):
    """Laplacian, normal-consistency and edge-length energies of ``mesh`` against ``rest``.

    With ``grad=True`` returns ``(values, grads)`` where ``grads[name]`` is (V, 3).
    """
    if mesh.n_vertices != rest.n_vertices or mesh.faces.shape != rest.faces.shape or not np.array_equal(mesh.faces, rest.faces):
        raise ParameterError("mesh and rest mesh must share topology")
    topo = topology or MeshTopology.build(mesh.n_vertices, mesh.faces)
    v = mesh.vertices
    n = mesh.n_vertices

    lv = topo.laplacian @ v
    lap = float(np.mean(np.sum(lv * lv, axis=1))) if n else 0.0

    i, j = topo.edges[:, 0], topo.edges[:, 1]
    d = v[i] - v[j]
    length = np.linalg.norm(d, axis=1)
    rest_len = np.linalg.norm(rest.vertices[i] - rest.vertices[j], axis=1)
    diff = length - rest_len
    el = float(np.mean(diff ** 2)) if len(diff) else 0.0

    pairs = topo.face_pairs
    if len(pairs):
        nrm, cr, cn, (v0, v1, v2) = _face_normals_with_jacobian(v, mesh.faces)
        dots = np.sum(nrm[pairs[:, 0]] * nrm[pairs[:, 1]], axis=1)
        nc = float(np.mean(1.0 - dots))
    else:
        nc = 0.0
    values = {"lap": lap, "nc": nc, "el": el}
    if not grad:
        return values

    g_lap = (2.0 / n) * (topo.laplacian.T @ lv) if n else np.zeros_like(v)

    g_el = np.zeros_like(v)
    if len(diff):
        coef = (2.0 / len(diff)) * diff / np.maximum(length, 1e-300)
        ge = coef[:, None] * d
        np.add.at(g_el, i, ge)
        np.add.at(g_el, j, -ge)

    g_nc = np.zeros_like(v)
    if len(pairs):
        g_n = np.zeros_like(nrm)
        w = -1.0 / len(pairs)
        np.add.at(g_n, pairs[:, 0], w * nrm[pairs[:, 1]])
        np.add.at(g_n, pairs[:, 1], w * nrm[pairs[:, 0]])
        # through normalization n = c / |c|
        g_c = (g_n - nrm * np.sum(g_n * nrm, axis=1, keepdims=True)) / cn
        e1, e2 = v1 - v0, v2 - v0
        # c = e1 x e2: dL/de1 = e2 x g_c, dL/de2 = g_c x e1
        g_e1 = np.cross(e2, g_c)
        g_e2 = np.cross(g_c, e1)
        f = mesh.faces
        np.add.at(g_nc, f[:, 1], g_e1)
        np.add.at(g_nc, f[:, 2], g_e2)
        np.add.at(g_nc, f[:, 0], -(g_e1 + g_e2))
    return values, {"lap": g_lap, "nc": g_nc, "el": g_el}


def visible_scalp(mesh: TriMesh, scalp, hair_mask, camera, tol=1e-4, buffers=None):
    """Scalp vertices that project inside ``hair_mask`` and are not hidden by the mesh.

    Each candidate's own camera ray is intersected with the plane of the front-most
    triangle found at its pixel; the vertex is visible if it is not farther than that
    intersection by more than ``tol``. ``buffers`` may pass an existing rasterization
    of ``mesh`` from ``camera``.
    """
    from .raster import rasterize

    scalp = np.asarray(scalp, dtype=np.int64)
    hair_mask = np.asarray(hair_mask).astype(bool)
    if scalp.size == 0 or not hair_mask.any():
        return np.zeros(0, dtype=np.int64)
    buf = rasterize(mesh, camera) if buffers is None else buffers
    pix, z = camera.project(mesh.vertices[scalp])
    with np.errstate(invalid="ignore"):
        col = np.floor(np.nan_to_num(pix[:, 0], nan=-1.0, posinf=-1.0, neginf=-1.0)).astype(np.int64)
        row = np.floor(np.nan_to_num(pix[:, 1], nan=-1.0, posinf=-1.0, neginf=-1.0)).astype(np.int64)
    ok = (z > camera.near) & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    k = np.flatnonzero(ok)
    k = k[hair_mask[row[k], col[k]] & buf.coverage[row[k], col[k]]]
    if k.size == 0:
        return np.zeros(0, dtype=np.int64)
    f = buf.face_id[row[k], col[k]]
    tri = camera.world_to_camera(mesh.vertices[mesh.faces[f]].reshape(-1, 3)).reshape(-1, 3, 3)
    p = camera.world_to_camera(mesh.vertices[scalp[k]])
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    denom = np.sum(n * p, axis=1)
    flat = np.abs(denom) < 1e-300
    t = np.sum(n * tri[:, 0], axis=1) / np.where(flat, 1.0, denom)  # ray hits the plane at t * p
    vis = flat | ((1.0 - t) * p[:, 2] <= tol)
    return scalp[k[vis]]
