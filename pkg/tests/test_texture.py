from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridhead.errors import HybridHeadWarning, ParameterError
from hybridhead.micronet import Layer, MlpParams, pixel_decoder
from hybridhead.sampling import sampling_matrix
from hybridhead.texture import (TextureStack, decode_face, decode_face_backward, eval_dynamic_texture,
                                eval_view_texture, sample_uv)

from conftest import central_diff, rel_err


def texel_center(row, col, h, w):
    return np.array([(col + 0.5) / w, (row + 0.5) / h])


def test_texel_center_returns_texel(rng):
    g = rng.normal(size=(5, 7, 3))
    for r, c in [(0, 0), (2, 3), (4, 6)]:
        assert np.allclose(sample_uv(g, texel_center(r, c, 5, 7)), g[r, c], atol=1e-15)


@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5))
def test_constant_grid_constant_output(u, v):
    g = np.full((4, 6, 2), 0.3)
    assert np.allclose(sample_uv(g, [u, v]), 0.3, atol=1e-15)


def test_midway_is_average(rng):
    g = rng.normal(size=(4, 4, 2))
    uv = 0.5 * (texel_center(1, 1, 4, 4) + texel_center(1, 2, 4, 4))
    assert np.allclose(sample_uv(g, uv), 0.5 * (g[1, 1] + g[1, 2]), atol=1e-15)


def test_uv_clamped_to_edge(rng):
    g = rng.normal(size=(4, 4, 1))
    assert np.allclose(sample_uv(g, [-3.0, 9.0]), g[3, 0])


def test_sample_gradient_matches_finite_differences(rng):
    g = rng.normal(size=(6, 5, 2))
    uv = rng.random((9, 2))
    w = rng.normal(size=(9, 2))
    s = sampling_matrix(uv, 6, 5)
    analytic = (s.T @ w).reshape(g.shape)
    fd = central_diff(lambda: float(np.sum(w * sample_uv(g, uv))), g)
    assert rel_err(analytic, fd) < 1e-6


def test_view_texture_examples(rng):
    model = np.zeros((3, 3, 2, 4))
    assert np.all(eval_view_texture(model, [0, 0, 1.0]) == 0)
    model[..., 0] = rng.normal(size=(3, 3, 2))
    d1 = np.array([0.6, 0.0, 0.8])
    assert np.array_equal(eval_view_texture(model, d1), eval_view_texture(model, [0, 1.0, 0]))
    odd = rng.normal(size=(3, 3, 2, 4))
    odd[..., 0] = 0.0
    assert np.allclose(eval_view_texture(odd, -d1), -eval_view_texture(odd, d1))


def test_non_unit_view_vector_warns(rng):
    model = rng.normal(size=(2, 2, 1, 4))
    with pytest.warns(HybridHeadWarning):
        out = eval_view_texture(model, [0, 0, 2.0])
    assert np.allclose(out, eval_view_texture(model, [0, 0, 1.0]))


def test_dynamic_texture_examples(rng):
    basis = rng.normal(size=(3, 3, 2, 4))
    assert np.all(eval_dynamic_texture(basis, np.zeros(6)) == 0)
    e1 = np.zeros(6)
    e1[0] = 1
    assert np.array_equal(eval_dynamic_texture(basis, e1), basis[..., 0])
    psi = rng.normal(size=6)
    assert np.allclose(eval_dynamic_texture(basis, 2 * psi), 2 * eval_dynamic_texture(basis, psi))
    with pytest.raises(ParameterError):
        eval_dynamic_texture(basis, np.zeros(3))


def fake_buffers(rng, h=6, w=5, frac=0.7):
    cov = rng.random((h, w)) < frac
    return SimpleNamespace(coverage=cov, uv=rng.random((h, w, 2)))


def random_stack(rng, r=8, c=4, k=3):
    return TextureStack(rng.normal(0, 0.5, (r, r, c)), rng.normal(0, 0.5, (r, r, c, 4)),
                        rng.normal(0, 0.5, (r, r, c, k)))


def unit_dirs(rng, shape):
    d = rng.normal(size=shape + (3,))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def test_bias_only_decoder_constant_face(rng):
    dec = MlpParams([Layer(np.zeros((3, 6)), np.array([0.0, 1.0, -1.0]), "sigmoid")])
    buf = fake_buffers(rng)
    img = decode_face(random_stack(rng), buf, unit_dirs(rng, (6, 5)), rng.normal(size=5), dec)
    expect = 1 / (1 + np.exp(-np.array([0.0, 1.0, -1.0])))
    assert np.allclose(img[buf.coverage], expect, atol=1e-15)
    assert np.all(img[~buf.coverage] == 0)


def test_diffuse_only_ignores_view_and_expression(rng):
    stack = random_stack(rng)
    dec = MlpParams.init([6, 8, 3], ["tanh", "sigmoid"], 1)
    buf = fake_buffers(rng)
    a = decode_face(stack, buf, unit_dirs(rng, (6, 5)), rng.normal(size=5), dec, diffuse_only=True)
    b = decode_face(stack, buf, unit_dirs(rng, (6, 5)), rng.normal(size=5), dec, diffuse_only=True)
    assert np.array_equal(a, b)


def test_empty_coverage_black(rng):
    buf = SimpleNamespace(coverage=np.zeros((4, 4), bool), uv=np.zeros((4, 4, 2)))
    img = decode_face(random_stack(rng), buf, unit_dirs(rng, (4, 4)), np.zeros(5), pixel_decoder(0))
    assert np.all(img == 0)


def test_channel_mismatch(rng):
    with pytest.raises(ParameterError):
        decode_face(random_stack(rng, c=3), fake_buffers(rng), unit_dirs(rng, (6, 5)), np.zeros(5), pixel_decoder(0))
    with pytest.raises(ParameterError):
        TextureStack(np.zeros((2, 2, 4)), np.zeros((2, 2, 3, 4)), np.zeros((2, 2, 4, 1)))


def test_composition_equals_presummed_grid(rng):
    stack = random_stack(rng)
    d = np.array([0.36, 0.48, 0.8])
    psi = rng.normal(size=5)
    dec = MlpParams.init([6, 8, 3], ["tanh", "sigmoid"], 2)
    buf = fake_buffers(rng)
    dirs = np.broadcast_to(d, (6, 5, 3))
    summed = stack.diffuse + eval_view_texture(stack.view, d) + eval_dynamic_texture(stack.dynamic, psi)
    flat = TextureStack(summed, np.zeros_like(stack.view), np.zeros_like(stack.dynamic))
    a = decode_face(stack, buf, dirs, psi, dec)
    b = decode_face(flat, buf, dirs, psi, dec)
    assert np.abs(a - b).max() < 1e-12


def test_decode_independent_of_pixel_order(rng):
    stack = random_stack(rng)
    dec = MlpParams.init([6, 8, 3], ["tanh", "sigmoid"], 3)
    buf = fake_buffers(rng, 6, 6)
    dirs = unit_dirs(rng, (6, 6))
    psi = rng.normal(size=5)
    img = decode_face(stack, buf, dirs, psi, dec)
    t = SimpleNamespace(coverage=buf.coverage.T.copy(), uv=buf.uv.transpose(1, 0, 2).copy())
    img_t = decode_face(stack, t, dirs.transpose(1, 0, 2), psi, dec)
    assert np.array_equal(img_t.transpose(1, 0, 2), img)


def test_decode_backward_matches_finite_differences(rng):
    stack = random_stack(rng, r=4)
    dec = MlpParams.init([6, 5, 3], ["tanh", "sigmoid"], 4)
    buf = fake_buffers(rng, 4, 4)
    dirs = unit_dirs(rng, (4, 4))
    psi = rng.normal(size=5)
    w = rng.normal(size=(4, 4, 3))
    _, cache = decode_face(stack, buf, dirs, psi, dec, return_cache=True)
    g = decode_face_backward(stack, dec, cache, w)

    def f():
        return float(np.sum(w * decode_face(stack, buf, dirs, psi, dec)))

    for name in ("diffuse", "view", "dynamic"):
        assert rel_err(g[name], central_diff(f, getattr(stack, name))) < 1e-6, name
    for layer, (gw, gb) in zip(dec.layers, g["pix"]):
        assert rel_err(gw, central_diff(f, layer.weight)) < 1e-6
        assert rel_err(gb, central_diff(f, layer.bias)) < 1e-6
