import dataclasses

import numpy as np
import pytest

from hybridhead.avatar import render_face, render_frame
from hybridhead.errors import AlignmentError, ConfigurationError, HybridHeadWarning
from hybridhead.optim.editing import edit_texture, reproject_uv_mask, swap_hair, uv_paint_mask


def scaled_head(head, k):
    return dataclasses.replace(head, template_vertices=k * head.template_vertices,
                               joint_positions=k * head.joint_positions, shape_basis=k * head.shape_basis,
                               expr_basis=k * head.expr_basis)


def test_self_swap_is_identity(tiny_scene):
    av = tiny_scene.avatar
    out, fit = swap_hair(av, av)
    assert np.linalg.norm(fit.transform.rotation - np.eye(3)) < 1e-4
    assert abs(fit.transform.scale - 1) < 1e-4
    assert np.allclose(out.cloud.x, av.cloud.x, atol=1e-10)


def test_swap_recovers_scale(tiny_scene):
    a = tiny_scene.avatar
    b = a.copy()
    b.head = scaled_head(a.head, 1.5)
    _, fit = swap_hair(a, b)
    assert abs(fit.transform.scale - 1 / 1.5) < 1e-3
    _, fit = swap_hair(b, a)
    assert abs(fit.transform.scale - 1.5) < 1e-3


def test_swap_with_transparent_hair_shows_bare_head(tiny_scene):
    a = tiny_scene.avatar
    b = a.copy()
    b.cloud.o[:] = -60.0
    out, _ = swap_hair(a, b)
    rec = tiny_scene.frames([0])[0]
    img = render_frame(out, rec.params, rec.camera).image
    bare = render_face(a, rec.params, rec.camera).image
    assert np.array_equal(img, bare)


def test_swap_errors(tiny_scene):
    a = tiny_scene.avatar
    b = a.copy()
    b.cloud = None
    with pytest.raises(ConfigurationError):
        swap_hair(a, b)
    flat = a.copy()
    v = flat.head.template_vertices.copy()
    v[flat.head.scalp_indices] = v[flat.head.scalp_indices[0]]
    flat.head = dataclasses.replace(flat.head, template_vertices=v)
    with pytest.raises(AlignmentError):
        swap_hair(a, flat)


def _front(scene):
    rec = scene.frames([0])[0]
    return rec.camera, rec.params


def cheek_mask(buffers, size=6):
    """A square of covered pixels near the centre of the face coverage."""
    ys, xs = np.nonzero(buffers.coverage)
    cy, cx = int(np.median(ys)), int(np.median(xs))
    m = np.zeros_like(buffers.coverage)
    m[cy - size // 2:cy + size // 2, cx - size // 2:cx + size // 2] = True
    return m & buffers.coverage


def test_uv_mask_reprojects_onto_painted_pixels(tiny_scene):
    cam, params = _front(tiny_scene)
    av = tiny_scene.avatar
    buf = render_face(av, params, cam).buffers
    m = cheek_mask(buf)
    uv = uv_paint_mask(buf, m, av.textures.diffuse.shape[:2], dilate=0)
    back = reproject_uv_mask(buf, uv)
    assert np.all(back[m])


def test_empty_paint_mask_is_noop(tiny_scene):
    cam, params = _front(tiny_scene)
    av = tiny_scene.avatar
    img = render_frame(av, params, cam).image
    with pytest.warns(HybridHeadWarning):
        res = edit_texture(av, img, np.zeros(img.shape[:2], bool), cam, params, steps=5)
    assert np.array_equal(res.avatar.textures.diffuse, av.textures.diffuse)


def test_painting_current_render_changes_nothing(tiny_scene):
    cam, params = _front(tiny_scene)
    av = tiny_scene.avatar
    img = render_frame(av, params, cam).image
    buf = render_face(av, params, cam).buffers
    res = edit_texture(av, img, cheek_mask(buf), cam, params, steps=10)
    assert np.abs(res.avatar.textures.diffuse - av.textures.diffuse).max() < 1e-6
    for a, b in zip(res.avatar.pix.layers, av.pix.layers):
        assert np.abs(a.weight - b.weight).max() < 1e-6


def test_red_square_painted_and_contained(tiny_scene):
    scene = tiny_scene
    av = scene.avatar
    cam, params = _front(scene)
    other = scene.frames([0])[1]
    buf = render_face(av, params, cam).buffers
    m = cheek_mask(buf)
    painted = render_frame(av, params, cam).image.copy()
    # a saturated red the sigmoid output can reach without driving its logits to infinity
    painted[m] = [0.9, 0.1, 0.1]
    before_other = render_frame(av, other.params, other.camera).image
    res = edit_texture(av, painted, m, cam, params, other_views=[(other.camera, other.params)], steps=500)
    after = render_frame(res.avatar, params, cam).image
    assert np.abs(after[m] - painted[m]).mean() < 0.05
    after_other = render_frame(res.avatar, other.params, other.camera).image
    outside = ~reproject_uv_mask(render_face(av, other.params, other.camera).buffers, res.uv_mask)
    assert np.abs(after_other[outside] - before_other[outside]).mean() < 0.01
