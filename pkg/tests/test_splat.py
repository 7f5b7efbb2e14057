import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hybridhead.camera import Camera
from hybridhead.errors import ContractViolation, ParameterError
from hybridhead.splat.cloud import (GaussianCloud, SplatOptions, init_from_scalp, load_ply, logit, save_ply,
                                    scalp_triangles, sigmoid)
from hybridhead.splat.deform import DeformField, RigidTransform, deform_backward, deform_cloud, transform_cloud
from hybridhead.splat.projection import project_gaussian
from hybridhead.splat.reference import render_splats_reference
from hybridhead.splat.render import render_splats, splat_backward
from hybridhead.splat.sh import colors_backward, colors_with_grad, eval_sh, sh_basis
from hybridhead.synthetic import make_head

from conftest import central_diff, front_camera, random_cloud, rel_err

C0 = 0.5 / np.sqrt(np.pi)  # Y_00 = sqrt(1 / (4 pi))


# --- spherical harmonics ------------------------------------------------------


def test_zero_coefficients_mid_gray():
    assert np.array_equal(eval_sh(np.zeros((16, 3)), [0, 0, 1.0]), [0.5, 0.5, 0.5])


def test_dc_only():
    sh = np.zeros((1, 3))
    sh[0] = [0.3, -0.7, 1.1]
    assert np.allclose(eval_sh(sh, [0.6, 0.0, 0.8]), 0.5 + C0 * sh[0], atol=1e-15)
    assert abs(C0 - 0.2820947918) < 1e-10


def test_degree_one_parity(rng):
    sh = np.zeros((4, 3))
    sh[1:] = rng.normal(0, 0.2, (3, 3))
    d = np.array([0.48, -0.6, 0.64])
    a, b = eval_sh(sh, d), eval_sh(sh, -d)
    assert np.allclose(a - 0.5, 0.5 - b, atol=1e-15)


def test_basis_orthonormal_on_sphere():
    # Gauss-Legendre in cos(theta) x uniform phi integrates degree <= 6 polynomials exactly
    ct, wt = np.polynomial.legendre.leggauss(12)
    phi = np.arange(24) * 2 * np.pi / 24
    c, p = np.meshgrid(ct, phi, indexing="ij")
    s = np.sqrt(1 - c ** 2)
    d = np.stack([s * np.cos(p), s * np.sin(p), c], -1).reshape(-1, 3)
    w = np.repeat(wt, 24) * (2 * np.pi / 24)
    y = sh_basis(d, 3)
    gram = (y * w[:, None]).T @ y
    assert np.abs(gram - np.eye(16)).max() < 1e-12


def test_sh_gradients_match_finite_differences(rng):
    sh = rng.normal(0, 0.2, (4, 16, 3))
    pos = rng.normal(size=(4, 3))
    cam = np.array([0.1, -0.3, 2.5])
    g = rng.normal(size=(4, 3))
    _, cache = colors_with_grad(sh, pos, cam)
    g_sh, g_pos = colors_backward(sh, cache, g)

    def f():
        return float(np.sum(g * colors_with_grad(sh, pos, cam)[0]))

    assert rel_err(g_sh, central_diff(f, sh)) < 1e-7
    assert rel_err(g_pos, central_diff(f, pos)) < 1e-7


# --- projection ---------------------------------------------------------------


def iso(x, scale, r=(1.0, 0, 0, 0)):
    return GaussianCloud([x], [r], [[np.log(scale)] * 3], [0.0], np.zeros((1, 1, 3)))


def test_isotropic_on_axis():
    cam = front_camera(64, focal=50.0)
    for z, sigma in [(1.0, 0.01), (2.0, 0.03), (5.0, 0.2)]:
        p = project_gaussian(iso([0, 0, z], sigma), cam)
        expect = (50.0 * sigma / z) ** 2 + 0.3
        assert np.allclose(p["cov2d"], expect * np.eye(2), rtol=1e-12)
        assert p["depth"] == z and not p["culled"]


def test_doubling_distance_halves_std():
    cam = front_camera(64, focal=200.0)
    a = project_gaussian(iso([0.01, 0, 3.0], 0.05), cam)["cov2d"]
    b = project_gaussian(iso([0.02, 0, 6.0], 0.05), cam)["cov2d"]
    sa = np.sqrt(a[0, 0] - 0.3)
    sb = np.sqrt(b[0, 0] - 0.3)
    assert abs(sb / sa - 0.5) < 0.01


@given(st.integers(0, 10_000))
def test_rotation_does_not_change_isotropic(seed):
    cam = front_camera(32)
    q = Rotation.random(random_state=seed).as_quat()[[3, 0, 1, 2]]
    a = project_gaussian(iso([0.1, -0.2, 2.0], 0.04), cam)["cov2d"]
    b = project_gaussian(iso([0.1, -0.2, 2.0], 0.04, q), cam)["cov2d"]
    assert np.abs(a - b).max() < 1e-9


def test_behind_camera_culled():
    p = project_gaussian(iso([0, 0, -1.0], 0.1), front_camera(32))
    assert p["culled"]
    res = render_splats(iso([0, 0, -1.0], 0.1), front_camera(32))
    assert res.alpha.max() == 0.0


# --- rendering ----------------------------------------------------------------


def at_pixel(cam, px, py, z):
    """Camera-space point (identity pose) that projects exactly onto pixel (px, py)'s center."""
    return [(px + 0.5 - cam.cx) * z / cam.fx, (py + 0.5 - cam.cy) * z / cam.fy, z]


def solid(color):
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = (np.asarray(color, float) - 0.5) / C0
    return sh


def test_single_opaque_gaussian():
    cam = front_camera(32)
    x = at_pixel(cam, 10, 12, 2.0)
    sh = solid([0.2, 0.4, 0.9])
    cloud = GaussianCloud([x], [[1, 0, 0, 0]], [[-4.0] * 3], [40.0], sh)
    res = render_splats(cloud, cam, SplatOptions(early_stop=False))
    assert res.alpha[12, 10] == 1.0
    assert np.allclose(res.color[12, 10], eval_sh(sh[0], [0, 0, 1.0]), atol=1e-12)
    assert res.nearz[12, 10] == 2.0


def test_two_gaussians_blend():
    cam = front_camera(32)
    cloud = GaussianCloud([at_pixel(cam, 8, 8, 1.0), at_pixel(cam, 8, 8, 1.5)], [[1, 0, 0, 0]] * 2,
                          [[-5.0] * 3] * 2, [logit(0.6), logit(0.8)], np.concatenate([solid([1, 0, 0]), solid([0, 1, 0])]))
    res = render_splats(cloud, cam, SplatOptions(early_stop=False))
    assert np.allclose(res.color[8, 8], [0.6, 0.32, 0.0], atol=1e-12)
    assert np.isclose(res.alpha[8, 8], 0.92, atol=1e-12)
    assert res.nearz[8, 8] == 1.0


def test_nearz_skips_faint_front():
    cam = front_camera(32)
    cloud = GaussianCloud([at_pixel(cam, 8, 8, 1.0), at_pixel(cam, 8, 8, 1.5)], [[1, 0, 0, 0]] * 2,
                          [[-5.0] * 3] * 2, [logit(0.04), logit(0.5)], np.zeros((2, 1, 3)))
    opts = SplatOptions(early_stop=False)
    assert render_splats(cloud, cam, opts).nearz[8, 8] == 1.5
    cloud.o[0] = logit(0.06)
    assert render_splats(cloud, cam, opts).nearz[8, 8] == 1.0


def test_early_stop_excludes_far_side():
    cam = front_camera(32)
    cloud = GaussianCloud([at_pixel(cam, 8, 8, 1.0), at_pixel(cam, 8, 8, 1.5)], [[1, 0, 0, 0]] * 2,
                          [[-5.0] * 3] * 2, [logit(0.5), logit(0.5)], np.zeros((2, 1, 3)))
    near = render_splats(cloud, cam, SplatOptions(early_stop_gap=0.4))
    far = render_splats(cloud, cam, SplatOptions(early_stop_gap=0.6))
    assert np.isclose(near.alpha[8, 8], 0.5) and np.isclose(far.alpha[8, 8], 0.75)


def test_empty_cloud():
    res = render_splats(GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                                      np.zeros((0, 1, 3))), front_camera(16))
    assert res.alpha.max() == 0 and np.all(np.isinf(res.nearz))


def reference_scenes(n_scenes=50):
    rng = np.random.default_rng(2024)
    for k in range(n_scenes):
        n = int(rng.integers(1, 21))
        yield random_cloud(rng, n, degree=int(rng.integers(0, 4))), front_camera(int(rng.choice([16, 24, 32])))


def test_matches_dense_reference():
    opts = SplatOptions(early_stop=False)
    worst = 0.0
    for cloud, cam in reference_scenes():
        res = render_splats(cloud, cam, opts)
        color, alpha, nearz = render_splats_reference(cloud, cam, opts)
        worst = max(worst, np.abs(res.color - color).max(), np.abs(res.alpha - alpha).max())
        assert np.array_equal(np.isinf(res.nearz), np.isinf(nearz))
    assert worst < 1e-6


def test_matches_dense_reference_with_early_stop():
    rng = np.random.default_rng(7)
    opts = SplatOptions(early_stop=True, early_stop_gap=0.15)
    for _ in range(10):
        cloud = random_cloud(rng, 15, spread=0.4)
        res = render_splats(cloud, front_camera(24), opts)
        color, alpha, _ = render_splats_reference(cloud, front_camera(24), opts)
        assert np.abs(res.color - color).max() < 1e-6 and np.abs(res.alpha - alpha).max() < 1e-6


def test_alpha_bounds_and_nearz_before_mean_depth(rng):
    # near-z bounds the mean depth from below once nothing fainter than the threshold can sit in front of it
    opts = SplatOptions(nearz_opacity_threshold=1.0 / 255.0 + 1e-12)
    for _ in range(10):
        res = render_splats(random_cloud(rng, 20), front_camera(32), opts)
        assert res.alpha.min() >= 0 and res.alpha.max() <= 1
        both = np.isfinite(res.nearz) & np.isfinite(res.depth)
        assert np.all(res.nearz[both] <= res.depth[both] + 1e-12)


def test_faint_front_gaussian_can_pull_mean_depth_ahead_of_nearz():
    cam = front_camera(32)
    cloud = GaussianCloud([at_pixel(cam, 8, 8, 1.0), at_pixel(cam, 8, 8, 1.2)], [[1, 0, 0, 0]] * 2,
                          [[-5.0] * 3] * 2, [logit(0.04), logit(0.1)], np.zeros((2, 1, 3)))
    res = render_splats(cloud, cam, SplatOptions(early_stop=False))
    assert res.nearz[8, 8] == 1.2
    assert res.depth[8, 8] < 1.2


def test_alpha_monotone_in_opacity(rng):
    for _ in range(10):
        cloud = random_cloud(rng, 12)
        base = render_splats(cloud, front_camera(24), SplatOptions(early_stop=False)).alpha
        k = int(rng.integers(0, 12))
        cloud.o[k] += 0.5
        up = render_splats(cloud, front_camera(24), SplatOptions(early_stop=False)).alpha
        assert np.all(up >= base - 1e-12)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_permutation_bit_identical(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 15)
    perm = rng.permutation(15)
    a = render_splats(cloud, front_camera(24))
    b = render_splats(cloud.subset(perm), front_camera(24))
    for name in ("color", "alpha", "nearz", "depth"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def _splat_fd(cloud, cam, opts, wc, wa, h=1e-5):
    res = render_splats(cloud, cam, opts)
    g = splat_backward(cloud, cam, opts, wc, wa, forward=res)

    def f():
        r = render_splats(cloud, cam, opts)
        return float(np.sum(wc * r.color) + np.sum(wa * r.alpha))

    out = {}
    for name in ("x", "r", "s", "o", "sh"):
        out[name] = rel_err(getattr(g, name), central_diff(f, getattr(cloud, name), h=h))
    return out


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    for trial in range(3):
        cloud = random_cloud(rng, 5, scale=(-2.6, -2.0))
        cloud.o[:] = rng.uniform(-1.0, 1.0, 5)
        cam = front_camera(16, focal=20.0)
        errs = _splat_fd(cloud, cam, SplatOptions(early_stop=False), rng.normal(size=(16, 16, 3)),
                         rng.normal(size=(16, 16)))
        assert max(errs.values()) < 1e-4, errs


def test_backward_zero_grads():
    cloud = random_cloud(np.random.default_rng(0), 5)
    g = splat_backward(cloud, front_camera(16), SplatOptions(), np.zeros((16, 16, 3)), np.zeros((16, 16)))
    for name in ("x", "r", "s", "o", "sh"):
        assert not np.any(getattr(g, name))


def test_descent_on_color():
    cam = front_camera(16)
    cloud = GaussianCloud([at_pixel(cam, 8, 8, 2.0)], [[1, 0, 0, 0]], [[-3.0] * 3], [1.0], np.zeros((1, 4, 3)))
    target = np.zeros((16, 16, 3))
    target[..., 0] = 0.5

    def loss():
        return float(np.sum((render_splats(cloud, cam).color - target) ** 2))

    res = render_splats(cloud, cam)
    g = splat_backward(cloud, cam, SplatOptions(), 2 * (res.color - target), np.zeros((16, 16)), forward=res)
    before = loss()
    cloud.sh -= 1e-3 * g.sh
    assert loss() < before


def test_backward_rejects_mismatched_options():
    cloud = random_cloud(np.random.default_rng(0), 5)
    res = render_splats(cloud, front_camera(16), SplatOptions())
    with pytest.raises(ContractViolation):
        splat_backward(cloud, front_camera(16), SplatOptions(early_stop=False), np.zeros((16, 16, 3)),
                       np.zeros((16, 16)), forward=res)


def test_options_validation():
    with pytest.raises(ParameterError):
        SplatOptions(nearz_opacity_threshold=1.5)
    with pytest.raises(ParameterError):
        SplatOptions(early_stop_gap=0.0)
    with pytest.raises(ParameterError):
        SplatOptions(depth_mode="median")


# --- scalp initialization -----------------------------------------------------


def _point_triangle_distance(p, tris):
    """Closest distance from p to a set of triangles (dense, via barycentric projection and edges)."""
    best = np.inf
    for a, b, c in tris:
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        q = p - np.dot(p - a, n) * n
        m = np.stack([b - a, c - a], 1)
        uv = np.linalg.lstsq(m, q - a, rcond=None)[0]
        if uv.min() >= 0 and uv.sum() <= 1:
            best = min(best, abs(np.dot(p - a, n)))
            continue
        for s, e in ((a, b), (b, c), (c, a)):
            t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
            best = min(best, np.linalg.norm(p - (s + t * (e - s))))
    return best


def test_shell_zero_lies_on_scalp():
    head = make_head(1)
    mesh = head.rest_mesh()
    cloud = init_from_scalp(mesh, head.scalp_indices, 40, 0.0, 3)
    tris = mesh.vertices[scalp_triangles(mesh, head.scalp_indices)]
    assert max(_point_triangle_distance(p, tris) for p in cloud.x) < 1e-9


def test_init_defaults_and_determinism():
    head = make_head(1)
    mesh = head.rest_mesh()
    a = init_from_scalp(mesh, head.scalp_indices, 1000, 0.01, 5)
    b = init_from_scalp(mesh, head.scalp_indices, 1000, 0.01, 5)
    for name in ("x", "r", "s", "o", "sh"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.allclose(sigmoid(a.o), 0.1)
    assert np.all(a.sh == 0) and a.sh.shape[1] == 16
    assert np.all(a.s == a.s[0, 0])


def test_init_barycenter_matches_area_centroid():
    head = make_head(1)
    mesh = head.rest_mesh()
    tris = mesh.vertices[scalp_triangles(mesh, head.scalp_indices)]
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    centroid = (area[:, None] * tris.mean(axis=1)).sum(0) / area.sum()
    radius = np.linalg.norm(tris.reshape(-1, 3) - centroid, axis=1).max()
    cloud = init_from_scalp(mesh, head.scalp_indices, 100_000, 0.0, 0)
    assert np.linalg.norm(cloud.x.mean(0) - centroid) < 0.05 * radius


def test_init_errors():
    mesh = make_head(0).rest_mesh()
    with pytest.raises(ParameterError):
        init_from_scalp(mesh, [], 10, 0.0, 0)
    with pytest.raises(ParameterError):
        init_from_scalp(mesh, [0, 1, 2], 0, 0.0, 0)


# --- deformation --------------------------------------------------------------


def test_identity_and_zero_field_is_canonical(rng):
    cloud = random_cloud(rng, 10)
    field = DeformField.init(10, 16, 0)
    out, delta = deform_cloud(cloud, RigidTransform.identity(), rng.normal(size=5), field)
    for name in ("x", "s", "o", "sh"):
        assert np.array_equal(getattr(out, name), getattr(cloud, name))
    assert np.allclose(out.r, cloud.r / np.linalg.norm(cloud.r, axis=1, keepdims=True), atol=1e-15)
    assert not np.any(delta.dx)


def test_rigid_preserves_distances_and_translates(rng):
    cloud = random_cloud(rng, 10)
    rot = Rotation.random(random_state=4).as_matrix()
    out, _ = deform_cloud(cloud, RigidTransform(rot, [0.1, 0.2, 0.3]), np.zeros(3), DeformField.init(10, 16, 0))
    d0 = np.linalg.norm(cloud.x[:, None] - cloud.x[None], axis=-1)
    d1 = np.linalg.norm(out.x[:, None] - out.x[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9
    shift, _ = deform_cloud(cloud, RigidTransform(np.eye(3), [0.1, 0.2, 0.3]), np.zeros(3), DeformField.init(10, 16, 0))
    assert np.allclose(shift.x - cloud.x, [0.1, 0.2, 0.3], atol=1e-15)


def test_similarity_transform_renders_consistently(rng):
    # scaling the cloud and moving the camera back by the same factor leaves the image unchanged
    cloud = random_cloud(rng, 8, center=(0, 0, 0), degree=0)
    cam_a = Camera.look_at([0, 0, -2.0], [0, 0, 0], [0, -1, 0], 40, 40, 32, 32)
    cam_b = Camera.look_at([0, 0, -4.0], [0, 0, 0], [0, -1, 0], 40, 40, 32, 32)
    big = transform_cloud(cloud, RigidTransform(np.eye(3), np.zeros(3), 2.0))
    opts = SplatOptions(early_stop=False)
    a = render_splats(cloud, cam_a, opts)
    b = render_splats(big, cam_b, opts)
    assert np.abs(a.alpha - b.alpha).max() < 1e-9


def test_deform_backward_matches_finite_differences(rng):
    cloud = random_cloud(rng, 6, degree=1)
    field = DeformField.init(6, 4, 1, n_psi=3, embed_dim=4, hidden=5)
    last = field.mlp.layers[-1]
    last.weight[:] = rng.normal(0, 0.1, last.weight.shape)
    psi = rng.normal(size=3)
    rigid = RigidTransform(Rotation.random(random_state=1).as_matrix(), [0.1, 0, 0])
    w = {k: rng.normal(size=np.shape(getattr(cloud, k))) for k in ("x", "r", "s", "o", "sh")}

    def f():
        out, _ = deform_cloud(cloud, rigid, psi, field)
        return float(sum(np.sum(w[k] * getattr(out, k)) for k in w))

    out, _, cache = deform_cloud(cloud, rigid, psi, field, return_cache=True)
    gc = GaussianCloud(w["x"], w["r"], w["s"], w["o"], w["sh"])
    mgrads, g_emb = deform_backward(field, cache, gc)
    assert rel_err(g_emb, central_diff(f, field.embedding)) < 1e-6
    for layer, (gw, gb) in zip(field.mlp.layers, mgrads):
        assert rel_err(gw, central_diff(f, layer.weight)) < 1e-6
        assert rel_err(gb, central_diff(f, layer.bias)) < 1e-6


def test_field_layout_checked(rng):
    cloud = random_cloud(rng, 6)
    with pytest.raises(ParameterError):
        deform_cloud(cloud, RigidTransform.identity(), np.zeros(3), DeformField.init(5, 16, 0))


# --- PLY ----------------------------------------------------------------------


@pytest.mark.parametrize("dtype", ["f8", "f4"])
def test_ply_round_trip(tmp_path, rng, dtype):
    cloud = random_cloud(rng, 7)
    save_ply(tmp_path / "c.ply", cloud, dtype)
    back = load_ply(tmp_path / "c.ply")
    for name in ("x", "r", "s", "o", "sh"):
        a, b = getattr(cloud, name), getattr(back, name)
        if dtype == "f8":
            assert np.array_equal(a, b)
        else:
            assert np.allclose(a, b, rtol=1e-6, atol=1e-7)


def test_ply_header_names(tmp_path, rng):
    save_ply(tmp_path / "c.ply", random_cloud(rng, 2, degree=1))
    head = (tmp_path / "c.ply").read_bytes().split(b"end_header")[0].decode()
    for name in ("x", "f_dc_0", "f_rest_8", "opacity", "scale_2", "rot_3"):
        assert f" {name}\n" in head
