import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualsplat.scene import (
    Camera,
    Dataset,
    GaussianSet,
    NumericError,
    Role,
    SceneError,
    init_scene,
    logit,
    materialize,
    quat_to_rotmat,
    sigmoid,
)

BOX = ([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


def one_primitive(q=(1, 0, 0, 0), log_s=(0.0, 0.0), raw_op=0.0):
    geo, _ = init_scene(BOX, 1, 1, 0, dtype=np.float64)
    geo.rotations[:] = q
    geo.log_scales[:] = log_s
    geo.raw_opacities[:] = raw_op
    return geo


def test_activation_examples():
    mat = materialize(one_primitive())
    assert mat.opacities[0] == 0.5
    np.testing.assert_array_equal(mat.scales[0], [1.0, 1.0])
    np.testing.assert_allclose(mat.frames[0], np.eye(3), atol=1e-15)
    np.testing.assert_allclose(mat.frames[0][:, 2], [0, 0, 1])


def test_sigmoid_logit_inverse():
    p = np.linspace(0.01, 0.99, 17)
    np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_frames_orthonormal_and_right_handed(q):
    mat = materialize(one_primitive(q=q))
    F = mat.frames[0]
    tu, tv, tw = F[:, 0], F[:, 1], F[:, 2]
    assert abs(tu @ tv) <= 1e-6
    assert np.abs(tw - np.cross(tu, tv)).max() <= 1e-6
    np.testing.assert_allclose(F.T @ F, np.eye(3), atol=1e-6)


def test_materialized_ranges(scene20):
    geo, local = scene20
    for g in (geo, local):
        mat = materialize(g)
        assert np.all(mat.scales > 0)
        assert np.all((mat.opacities > 0) & (mat.opacities < 1))
    mat = materialize(geo)
    assert np.all((mat.roughness > 0) & (mat.roughness < 1))
    assert np.all((mat.diffuse >= 0) & (mat.diffuse <= 1))


def test_quat_to_rotmat_matches_known_rotation():
    half = np.pi / 4  # 90 deg about z
    R = quat_to_rotmat(np.array([[np.cos(half), 0, 0, np.sin(half)]]))[0]
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_length_mismatch_is_structural_error():
    geo = one_primitive()
    bad = geo.with_params({**geo.params(), "raw_opacities": np.zeros(2)})
    with pytest.raises(SceneError):
        bad.validate()


def test_non_finite_names_index():
    geo, _ = init_scene(BOX, 5, 1, 0)
    geo.centers[3, 1] = np.nan
    with pytest.raises(NumericError, match="index 3"):
        geo.validate()
    with pytest.raises(NumericError):
        materialize(geo)


def test_init_deterministic_and_in_box():
    a = init_scene(BOX, 50, 50, 7)
    b = init_scene(BOX, 50, 50, 7)
    for x, y in zip(a, b):
        for k in x.params():
            np.testing.assert_array_equal(x.params()[k], y.params()[k])
    geo, local = a
    assert np.all(np.abs(geo.centers) <= 1.0)
    np.testing.assert_allclose(sigmoid(geo.raw_opacities.astype(float)), 0.1, rtol=1e-6)
    np.testing.assert_array_equal(local.payload.features, 0)


def test_local_centers_are_jittered_geo_copies():
    geo, local = init_scene(BOX, 2000, 2000, 3, dtype=np.float64)
    sigma = 0.01 * np.linalg.norm(np.subtract(BOX[1], BOX[0]))
    jit = local.centers - geo.centers
    # Gaussian jitter: ~99.7% of components inside 3 sigma, empirical std close to sigma
    assert np.mean(np.abs(jit) <= 3 * sigma) >= 0.99
    assert abs(jit.std() / sigma - 1.0) < 0.05


def test_degenerate_bbox_rejected():
    with pytest.raises(SceneError):
        init_scene(([0, 0, 0], [1, 0, 1]), 5, 5, 0)


def test_camera_invariants():
    with pytest.raises(SceneError):
        Camera(10, 10, -1.0, 1.0, 5, 5)
    c2w = np.eye(4)
    c2w[0, 1] = 0.1
    with pytest.raises(SceneError):
        Camera(10, 10, 1.0, 1.0, 5, 5, c2w)


def test_camera_projection_round_trip():
    cam = Camera.look_at([1, 2, -3], [0, 0, 0], [0, -1, 0], 40, 30, 1.0)
    R = cam.R_cw
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(cam.project(np.zeros((1, 3)))[0], [20.0, 15.0], atol=1e-9)
    d = cam.ray_dirs_world()
    assert np.allclose(np.linalg.norm(d, axis=-1), 1.0)


def test_dataset_validation():
    cam = Camera(4, 4, 4.0, 4.0, 2, 2)
    ok = Dataset([cam], [np.zeros((4, 4, 4))])
    ok.validate()
    with pytest.raises(SceneError):
        Dataset([cam, cam], [np.zeros((4, 4, 4))]).validate()
    with pytest.raises(SceneError):
        Dataset([cam, cam], [np.zeros((4, 4, 4)), np.zeros((5, 4, 4))]).validate()
    with pytest.raises(SceneError):
        Dataset([cam], [np.zeros((4, 4, 4))], depth_priors=[np.zeros((3, 3))]).validate()


def test_empty_set_round_trip():
    e = GaussianSet.empty(Role.LOCAL)
    assert len(e) == 0 and e.feature_dim == 4
    e.validate()
