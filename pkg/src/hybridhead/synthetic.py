"""Procedural ground-truth avatar and multi-view frame sequence for end-to-end checks.

The head is an ellipsoidal UV sphere (y up, face toward +z, about 0.2 units tall),
subdivided twice. Everything is drawn from one seeded generator.
"""
from dataclasses import dataclass

import numpy as np

from .avatar import AvatarBundle, DisplacementField, FrameRecord, render_frame
from .camera import Camera
from .geometry import ExpressionParams, HeadModel, lbs_deform, subdivide_head
from .micronet import MlpParams, mlp_forward, pixel_decoder
from .splat.cloud import GaussianCloud, SplatOptions, init_from_scalp, logit
from .splat.deform import DeformField, RigidTransform, _field_input, deform_cloud
from .splat.sh import C0
from .texture import TextureStack

RADII = np.array([0.08, 0.1, 0.09])


@dataclass
class SyntheticScene:
    avatar: AvatarBundle
    records: list  # FrameRecord for every (frame, view)
    cameras: list
    params: list  # ExpressionParams per frame
    train_frames: list
    test_frames: list
    canonical_frame: int = 0

    def frames(self, ids, views=None):
        ids = set(ids)
        return [r for r in self.records if r.frame in ids and (views is None or r.view in views)]


def uv_sphere(n_lat=16, n_lon=24):
    """Vertices on the unit sphere, faces and uvs; single pole vertices, duplicated seam column."""
    verts, uvs = [], []
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon + 1):
            u = j / n_lon
            phi = 2 * np.pi * u - np.pi
            verts.append([np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)])
            uvs.append([u, i / n_lat])
    top = len(verts)
    verts.append([0.0, 1.0, 0.0])
    uvs.append([0.5, 0.0])
    bottom = len(verts)
    verts.append([0.0, -1.0, 0.0])
    uvs.append([0.5, 1.0])
    cols = n_lon + 1

    def vid(i, j):
        return (i - 1) * cols + j

    faces = []
    for j in range(n_lon):
        faces.append([top, vid(1, j + 1), vid(1, j)])
        faces.append([bottom, vid(n_lat - 1, j), vid(n_lat - 1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j), vid(i + 1, j + 1)
            faces.append([a, b, c])
            faces.append([b, d, c])
    return np.array(verts), np.array(faces), np.array(uvs)


def _region(d, center, width):
    """Smooth bump weight on unit directions ``d`` around ``center``."""
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    return np.exp(-np.sum((d - c) ** 2, axis=1) / (2 * width ** 2))


def make_head(subdivisions=2):
    sphere, faces, uv = uv_sphere()
    verts = sphere * RADII
    d = sphere
    n = len(verts)
    # expression basis: jaw drop, smile, brow raise (about 5 mm at unit weight)
    expr = np.zeros((n, 3, 3))
    jaw = _region(d, [0, -0.7, 0.7], 0.35)
    expr[:, 1, 0] = -0.005 * jaw
    expr[:, 2, 0] = 0.002 * jaw
    smile = _region(d, [0.5, -0.3, 0.8], 0.25) + _region(d, [-0.5, -0.3, 0.8], 0.25)
    expr[:, 0, 1] = 0.004 * smile * np.sign(d[:, 0])
    expr[:, 1, 1] = 0.003 * smile
    brow = _region(d, [0, 0.35, 0.94], 0.3)
    expr[:, 1, 2] = 0.005 * brow
    shape = np.zeros((n, 3, 2))
    shape[:, 0, 0] = 0.01 * d[:, 0]
    shape[:, 1, 1] = 0.01 * d[:, 1]
    joints = np.array([[0.0, -0.16, 0.0], [0.0, -0.08, 0.0]])
    parents = np.array([-1, 0])
    w_head = np.clip((verts[:, 1] + 0.1) / 0.04, 0.0, 1.0)
    skin = np.stack([1 - w_head, w_head], axis=1)
    scalp = np.flatnonzero((d[:, 1] > 0.55) | ((d[:, 2] < -0.4) & (d[:, 1] > -0.2)))
    model = HeadModel(verts, faces, uv, shape, expr, joints, parents, skin, scalp)
    for _ in range(subdivisions):
        model = subdivide_head(model)
    model.validate()
    return model


def ring_cameras(n_views=8, radius=0.7, height=0.12, focal=300.0, size=128, phase=0.0):
    cams = []
    for k in range(n_views):
        a = phase + 2 * np.pi * k / n_views
        eye = np.array([radius * np.sin(a), height, radius * np.cos(a)])
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), focal, focal, size, size,
                                   near=0.05, far=10.0))
    return cams


def _smooth_noise(rng, res, channels, n_waves=6, scale=1.0):
    """Sum of random low-frequency sinusoids on a res x res grid, shape (res, res, channels)."""
    t = (np.arange(res) + 0.5) / res
    u, v = np.meshgrid(t, t)
    out = np.zeros((res, res, channels))
    for c in range(channels):
        for _ in range(n_waves):
            fu, fv = rng.integers(-3, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            out[..., c] += np.cos(2 * np.pi * (fu * u + fv * v) + ph)
    return scale * out / np.sqrt(n_waves)


def make_textures(rng, resolution=128, coarse=64, n_dynamic=3):
    t = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(t, t)
    checker = np.where((np.floor(u * 8) + np.floor(v * 8)) % 2 == 0, 1.0, -1.0)
    diffuse = np.stack([checker, 2 * u - 1, 2 * v - 1, np.sin(6 * np.pi * u) * np.cos(4 * np.pi * v)], axis=-1)
    view = np.zeros((coarse, coarse, 4, 4))
    for k in range(4):
        view[..., k] = _smooth_noise(rng, coarse, 4, scale=0.15 if k else 0.05)
    dynamic = np.stack([_smooth_noise(rng, coarse, 4, scale=0.3) for _ in range(n_dynamic)], axis=-1)
    return TextureStack(diffuse, view, dynamic)


def make_decoder(seed):
    pix = MlpParams.init([6, 16, 16, 3], ["relu", "relu", "sigmoid"], seed)
    pix.layers[-1].weight *= 8.0
    return pix


def make_displacement(rng, head, resolution=64):
    """Broad bumps (at most ~3.5 mm) plus a 1 mm expression term, faded to zero at the seam."""
    n_cond = head.n_expr + 3 * head.n_joints
    t = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(t, t)
    fade = np.sin(np.pi * u) ** 2 * np.sin(np.pi * v) ** 2
    grid = np.zeros((resolution, resolution, 3, 1 + n_cond))
    for c in range(3):
        grid[:, :, c, 0] = 0.0035 * fade * _smooth_noise(rng, resolution, 1, n_waves=4)[..., 0] / 1.5
    for k in range(head.n_expr):
        for c in range(3):
            grid[:, :, c, 1 + k] = 0.001 * fade * _smooth_noise(rng, resolution, 1, n_waves=3)[..., 0] / 1.5
    return DisplacementField(grid)


def make_hair(rng, mesh, scalp, n=200, seed=0, opacity=(0.6, 0.95)):
    base = init_from_scalp(mesh, scalp, n, 0.0, seed)
    # push every center off the scalp so the hair sits in front of the skin
    normal = base.x / np.linalg.norm(base.x, axis=1, keepdims=True)
    x = base.x + rng.uniform(0.004, 0.012, size=(n, 1)) * normal
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    spacing = float(np.exp(base.s[0, 0]))
    s = np.log(spacing * np.array([1.6, 0.9, 0.6])[None] * rng.uniform(0.8, 1.25, size=(n, 3)))
    o = logit(rng.uniform(*opacity, size=n))
    sh = np.zeros((n, 16, 3))
    brown = np.array([0.36, 0.23, 0.13])
    sh[:, 0, :] = (brown[None] + rng.normal(0, 0.04, size=(n, 3)) - 0.5) / C0
    sh[:, 1:4, :] = rng.normal(0, 0.03, size=(n, 3, 3))
    return GaussianCloud(x, q, s, o, sh)


def make_field(rng, cloud, amplitude=0.006, seed=0):
    """Deformation field whose embeddings are smooth in the canonical position, scaled so the
    expression-driven center motion has roughly ``amplitude`` RMS; only centers move."""
    n = len(cloud)
    k = cloud.sh.shape[1]
    field = DeformField.init(n, k, seed)
    mlp = field.mlp
    omega = rng.normal(0, 12.0, size=(3, 16))
    phase = rng.uniform(0, 2 * np.pi, size=16)
    field.embedding = np.sin(cloud.x @ omega + phase)
    last = mlp.layers[-1]
    last.weight[:] = 0.0
    last.bias[:] = 0.0
    last.weight[:3] = rng.normal(0, 1.0, size=(3, last.weight.shape[1]))
    # measure the psi-driven motion and rescale
    probe = []
    base, _ = mlp_forward(mlp, _field_input(field, np.zeros(3)))
    for a in np.eye(3):
        out, _ = mlp_forward(mlp, _field_input(field, a))
        probe.append(out[:, :3] - base[:, :3])
    rms = float(np.sqrt(np.mean(np.square(probe))))
    last.weight[:3] *= amplitude / max(rms, 1e-12)
    return field


def sequence_params(head, n_frames=20):
    out = []
    for f in range(n_frames):
        t = f / n_frames
        psi = np.array([np.sin(2 * np.pi * t), np.sin(4 * np.pi * t + 0.0), 0.8 * np.sin(2 * np.pi * 3 * t)])
        phi = np.zeros((head.n_joints, 3))
        phi[1] = [0.08 * np.sin(2 * np.pi * t), 0.12 * np.sin(2 * np.pi * 2 * t), 0.05 * np.sin(2 * np.pi * t)]
        out.append(ExpressionParams(np.zeros(head.n_shape), psi, phi))
    return out


def make_scene(seed=0, n_views=8, n_frames=20, size=128, n_gaussians=200, test_frames=(7, 15),
               tex_resolution=128, coarse_resolution=64, deform_amplitude=0.006, camera_height=0.12,
               hair_opacity=(0.6, 0.95)):
    rng = np.random.default_rng(seed)
    head = make_head()
    params = sequence_params(head, n_frames)
    canonical = params[0]
    textures = make_textures(rng, tex_resolution, coarse_resolution, head.n_expr)
    disp = make_displacement(rng, head, coarse_resolution)
    avatar = AvatarBundle(head, textures, disp, make_decoder(seed + 11), canonical=canonical)
    posed = lbs_deform(head, canonical)
    hair = make_hair(rng, posed, head.scalp_indices, n_gaussians, seed + 23, hair_opacity)
    field = make_field(rng, hair, deform_amplitude, seed + 37)
    # shift the canonical centers so the canonical frame shows the hair exactly where it was drawn
    shifted, _ = deform_cloud(hair, RigidTransform.identity(), canonical.psi, field)
    hair.x = hair.x - (shifted.x - hair.x)
    avatar.cloud = hair
    avatar.field = field
    avatar.splat = SplatOptions(early_stop_gap=0.5 * hair.extent())
    cameras = ring_cameras(n_views, size=size, height=camera_height)
    records = []
    for f, p in enumerate(params):
        for v, cam in enumerate(cameras):
            fr = render_frame(avatar, p, cam, frame=f)
            records.append(FrameRecord(
                cam, p, fr.image, fr.face.image, fr.hair.result.color, fr.maps.hair_alpha > 0.5,
                fr.face.buffers.coverage, fr.face.buffers.mesh_depth, frame=f, view=v,
            ))
    train = [f for f in range(n_frames) if f not in set(test_frames)]
    return SyntheticScene(avatar, records, cameras, params, train, list(test_frames), 0)


def blank_avatar(head, canonical, tex_resolution=128, view_resolution=64, dyn_resolution=64, disp_resolution=64,
                 n_dynamic=None, seed=0, splat=None, blur_sigma=2.0):
    """Untrained avatar on ``head``: zero textures, zero displacement, fresh pixel decoder, no hair."""
    k = head.n_expr if n_dynamic is None else n_dynamic
    tex = TextureStack.zeros(4, tex_resolution, view_resolution, dyn_resolution, k)
    disp = DisplacementField.zeros(disp_resolution, head.n_expr + 3 * head.n_joints)
    return AvatarBundle(head, tex, disp, pixel_decoder(seed), canonical=canonical,
                        splat=splat or SplatOptions(), blur_sigma=blur_sigma)


def scene_resolutions(avatar):
    return {"tex_resolution": avatar.textures.diffuse.shape[0], "view_resolution": avatar.textures.view.shape[0],
            "dyn_resolution": avatar.textures.dynamic.shape[0], "disp_resolution": avatar.displacement.resolution[0]}


def initial_avatar(scene: SyntheticScene, seed=0, n_dynamic=None):
    """Untrained avatar on the scene's head model with the scene's texture sizes and splat options."""
    gt = scene.avatar
    return blank_avatar(gt.head, scene.params[scene.canonical_frame], n_dynamic=n_dynamic, seed=seed,
                        splat=SplatOptions(**gt.splat.to_dict()), blur_sigma=gt.blur_sigma, **scene_resolutions(gt))
