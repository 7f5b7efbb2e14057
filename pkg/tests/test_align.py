import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from hybridhead.align import compose, icp, procrustes
from hybridhead.errors import ParameterError, RankDeficiencyError
from hybridhead.splat.deform import RigidTransform
from hybridhead.synthetic import make_head


def scalp_points():
    head = make_head()
    return head.template_vertices[head.scalp_indices]


def cloud(rng, n=150):
    # anisotropic blob so the principal axes are well separated
    return rng.normal(size=(n, 3)) * [0.1, 0.06, 0.03]


def random_rotation(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * np.radians(rng.uniform(0, max_deg))).as_matrix()


def rot_z(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def test_identity_alignment():
    pts = scalp_points()
    res = icp(pts, pts)
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(res.transform.translation, 0, atol=1e-12)
    assert res.residual < 1e-12


def test_quarter_turn_about_z(rng):
    src = cloud(rng)
    r = rot_z(90)
    t = np.array([1.0, 2.0, 3.0])
    res = icp(src, src @ r.T + t)
    assert np.linalg.norm(res.transform.rotation - r) < 1e-6
    assert np.linalg.norm(res.transform.translation - t) < 1e-6


def test_uniform_scale_recovered(rng):
    src = cloud(rng)
    res = icp(src, 1.3 * src, with_scale=True)
    assert abs(res.transform.scale - 1.3) < 1e-6


def test_rigid_recovery_hundred_trials():
    worst_r = worst_t = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        src = cloud(rng)
        r = random_rotation(rng, 60)
        t = rng.uniform(-0.5, 0.5, 3)
        res = icp(src, src @ r.T + t)
        worst_r = max(worst_r, np.linalg.norm(res.transform.rotation - r))
        worst_t = max(worst_t, np.linalg.norm(res.transform.translation - t))
    assert worst_r < 1e-6 and worst_t < 1e-6


def test_similarity_recovery_trials():
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(1000 + seed)
        src = cloud(rng)
        s = rng.uniform(0.5, 2.0)
        r = random_rotation(rng, 60)
        res = icp(src, s * src @ r.T + rng.uniform(-0.5, 0.5, 3), with_scale=True)
        worst = max(worst, abs(res.transform.scale - s))
    assert worst < 1e-4


@given(st.integers(0, 10_000))
def test_procrustes_matches_kabsch_oracle(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3))
    dst = src @ random_rotation(rng, 180).T + rng.normal(size=3) + 0.05 * rng.normal(size=(20, 3))
    ours = procrustes(src, dst)
    ref, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
    assert np.allclose(ours.rotation, ref.as_matrix(), atol=1e-9)
    assert abs(np.linalg.det(ours.rotation) - 1) < 1e-9


def test_index_pairing_one_iteration_equals_procrustes(rng):
    src = cloud(rng, 40)
    dst = src @ random_rotation(rng, 40).T + 0.01 * rng.normal(size=(40, 3))
    res = icp(src, dst, correspondence="index", max_iters=1)
    closed = procrustes(src, dst)
    assert np.array_equal(res.transform.rotation, closed.rotation)
    assert np.array_equal(res.transform.translation, closed.translation)


@given(st.integers(0, 10_000))
def test_residual_non_increasing_and_rotation_proper(seed):
    rng = np.random.default_rng(seed)
    src = cloud(rng, 60)
    dst = src @ random_rotation(rng, 45).T + 0.02 * rng.normal(size=(60, 3)) + rng.normal(size=3) * 0.1
    res = icp(src, dst, with_scale=bool(seed % 2))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-15)
    rot = res.transform.rotation
    assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(rot) - 1) < 1e-9


def test_compose_matches_sequential_application(rng):
    a = RigidTransform(random_rotation(rng, 90), rng.normal(size=3), 1.7)
    b = RigidTransform(random_rotation(rng, 90), rng.normal(size=3), 0.6)
    pts = rng.normal(size=(5, 3))
    assert np.allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)))


def test_transform_serialization_roundtrip(rng):
    t = RigidTransform(random_rotation(rng, 90), rng.normal(size=3), 1.25)
    assert len(t.to_list()) == 13
    back = RigidTransform.from_list(t.to_list())
    assert np.array_equal(back.rotation, t.rotation) and back.scale == 1.25
    assert len(RigidTransform(np.eye(3), np.zeros(3)).to_list()) == 12


def test_degenerate_inputs():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(RankDeficiencyError):
        icp(line, line)
    with pytest.raises(RankDeficiencyError):
        icp(np.ones((5, 3)), scalp_points())
    with pytest.raises(RankDeficiencyError):
        icp(scalp_points()[:2], scalp_points())
    with pytest.raises(ParameterError):
        icp(scalp_points(), scalp_points(), correspondence="bogus")
    with pytest.raises(ParameterError):
        icp(scalp_points(), scalp_points()[:-1], correspondence="index")


def test_trim_rejects_outliers(rng):
    src = cloud(rng, 100)
    r = random_rotation(rng, 20)
    dst = src @ r.T
    dst[:5] += 2.0
    res = icp(src, dst, correspondence="index", trim=0.1)
    assert np.linalg.norm(res.transform.rotation - r) < 1e-9
