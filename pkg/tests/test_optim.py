import math

import numpy as np
import pytest

from conftest import front_camera, random_scene
from dualsplat.oracle import make_toy_scene
from dualsplat.optim import AdamState, DensifyConfig, OptimError, adam_step, densify_and_prune, train
from dualsplat.pipeline import evaluate, forward
from dualsplat.scene import Dataset, logit
from dualsplat.train import TrainConfig, build_model


@pytest.fixture(scope="module")
def blobs8():
    return make_toy_scene("diffuse_blobs", 0, n_views=8, resolution=32, n_test=4)


def small_config(**kw):
    cfg = TrainConfig(iterations=kw.pop("iterations", 20), warmup_iters=kw.pop("warmup_iters", 10),
                      n_geo=300, n_local=100, sphmip_height=16, sphmip_width=32, sphmip_levels=4,
                      mlp_width=16, init_bbox=[[-0.9] * 3, [0.9] * 3])
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def params_of(model):
    return {k: np.array(v, copy=True) for k, v in model.params().items()}


def test_adam_zero_gradient_keeps_params():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    st = AdamState.create(p, {"a": 0.1})
    out = adam_step(st, p, {"a": np.zeros(3)})
    np.testing.assert_array_equal(out["a"], p["a"])


def test_adam_first_step_closed_form():
    p = {"a": np.array([0.5, 0.5]), "b": np.zeros(1)}
    st = AdamState.create(p, {"a": 0.01, "b": 0.01})
    g = np.array([3.0, -1e-3])
    out = adam_step(st, p, {"a": g})
    np.testing.assert_allclose(out["a"] - p["a"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(out["a"] - p["a"], -0.01 * np.sign(g), rtol=1e-4)
    np.testing.assert_array_equal(out["b"], p["b"])  # no gradient, untouched


def test_adam_deterministic_and_checks_shapes():
    rng = np.random.default_rng(0)
    grads = [{"a": rng.normal(size=4)} for _ in range(5)]
    runs = []
    for _ in range(2):
        p = {"a": np.ones(4)}
        st = AdamState.create(p, {"a": 0.05})
        for g in grads:
            p = adam_step(st, p, g)
        runs.append(p["a"])
    np.testing.assert_array_equal(*runs)
    with pytest.raises(OptimError):
        adam_step(st, {"a": np.ones(4)}, {"a": np.ones(3)})


def _densify_setup(n=6):
    geo, _ = random_scene(1, n=n)
    geo.raw_opacities[:] = 2.0
    geo.log_scales[:] = math.log(0.001)
    params = {f"geo.{k}": v for k, v in geo.params().items()}
    st = AdamState.create(params, {k: 1e-3 for k in params})
    rng = np.random.default_rng(0)
    for k in params:
        st.m[k] = rng.normal(size=params[k].shape)
        st.v[k] = rng.uniform(size=params[k].shape)
    return geo, st


def test_densify_noop():
    geo, st = _densify_setup()
    cfg = DensifyConfig(grad_threshold=1.0)
    new, source, fresh, rep = densify_and_prune(geo, np.full(6, 0.5), np.ones(6), cfg, 2.0,
                                                np.random.default_rng(0), st, "geo.")
    assert len(new) == 6 and rep.after == 6 and not fresh.any()
    np.testing.assert_array_equal(new.centers, geo.centers)


def test_densify_prunes_transparent():
    geo, st = _densify_setup()
    geo.raw_opacities[2] = logit(0.001)
    m_before = st.m["geo.centers"].copy()
    new, source, _, rep = densify_and_prune(geo, np.zeros(6), np.ones(6), DensifyConfig(), 2.0,
                                            np.random.default_rng(0), st, "geo.")
    assert len(new) == 5 and rep.pruned == 1
    np.testing.assert_array_equal(source, [0, 1, 3, 4, 5])
    np.testing.assert_array_equal(st.m["geo.centers"], m_before[[0, 1, 3, 4, 5]])


def test_densify_splits_large_primitive():
    geo, st = _densify_setup()
    geo.log_scales[3] = math.log(0.2)
    grads = np.zeros(6)
    grads[3] = 1.0
    cfg = DensifyConfig(grad_threshold=0.1, split_scale=0.01)
    new, source, fresh, rep = densify_and_prune(geo, grads, np.ones(6), cfg, 2.0,
                                                np.random.default_rng(0), st, "geo.")
    assert len(new) == 7 and rep.split == 1 and rep.cloned == 0
    np.testing.assert_array_equal(source, [0, 1, 2, 4, 5, 3, 3])
    np.testing.assert_allclose(new.log_scales[-2:], math.log(0.2) - math.log(1.6))
    assert not np.allclose(new.centers[-1], geo.centers[3])


def test_densify_clones_small_and_remaps_moments():
    geo, st = _densify_setup()
    grads = np.zeros(6)
    grads[[1, 4]] = 1.0
    old = {k: v.copy() for k, v in st.m.items()}
    new, source, fresh, rep = densify_and_prune(geo, grads, np.ones(6), DensifyConfig(grad_threshold=0.1), 2.0,
                                                np.random.default_rng(0), st, "geo.")
    assert rep.cloned == 2 and len(new) == 8
    np.testing.assert_array_equal(new.centers[6:], geo.centers[[1, 4]])
    st.check({f"geo.{k}": v for k, v in new.params().items()})
    for k, m in st.m.items():
        np.testing.assert_array_equal(m[:6], old[k])
        assert not m[6:].any() and not st.v[k][6:].any()


def test_train_wrapper_and_lr_zero(blobs8):
    cfg = small_config(iterations=5, lr={k: 0.0 for k in TrainConfig().lr})
    cfg.densify.geo = cfg.densify.local = False
    init = params_of(build_model(cfg, cfg.init_bbox))
    res = train(blobs8.train, cfg)
    after = params_of(res.model)
    assert init.keys() == after.keys()
    for k in init:
        np.testing.assert_array_equal(init[k], after[k], err_msg=k)


def test_warmup_ignores_specular_params():
    cfg = small_config()
    m1 = build_model(cfg, cfg.init_bbox)
    m2 = build_model(cfg, cfg.init_bbox)
    m2.sphmip.base = np.random.default_rng(1).normal(size=m2.sphmip.base.shape)
    for w in m2.mlp.weights:
        w += 0.3
    cam = front_camera(24, 24)
    a = forward(m1, cam, np.ones(3), warmup=True).image
    b = forward(m2, cam, np.ones(3), warmup=True).image
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(forward(m1, cam, np.ones(3)).image, forward(m2, cam, np.ones(3)).image)


def test_training_improves_psnr(blobs8):
    cfg = small_config(iterations=300, warmup_iters=100)
    before = evaluate(build_model(cfg, cfg.init_bbox), blobs8.train, np.ones(3))["mean"]["psnr"]
    res = train(blobs8.train, cfg)
    after = evaluate(res.model, blobs8.train, np.ones(3))["mean"]["psnr"]
    assert after > before
    assert res.log[-1]["iter"] == 299


def test_loss_decreases_on_mini_scene():
    scene = make_toy_scene("diffuse_blobs", 1, n_views=4, resolution=32, n_test=4)
    ds = scene.train
    mini = Dataset([ds.cameras[0]], [ds.images[0]], None, None, ds.camera_angle_x, [ds.names[0]])
    cfg = small_config(iterations=100, warmup_iters=100)
    cfg.densify.geo = cfg.densify.local = False
    res = train(mini, cfg)
    total = np.array([r["total"] for r in res.log])
    avg = np.convolve(total, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) <= 0), np.diff(avg).max()


def test_no_local_set_uses_geo_features():
    cfg = small_config(ablation="no_local_set")
    model = build_model(cfg, cfg.init_bbox)
    assert model.local is None or "local.centers" not in model.params()
    cam = front_camera(24, 24)
    model.geo.payload.features[:] = 0.5
    a = forward(model, cam, np.ones(3)).result.f_local.copy()
    model.geo.payload.features[:] = -0.2
    b = forward(model, cam, np.ones(3)).result.f_local
    assert np.abs(a - b).max() > 0.1
    assert model.mlp.in_dim == 10


def test_no_local_features_drops_local_set():
    cfg = small_config(ablation="no_local_features")
    model = build_model(cfg, cfg.init_bbox)
    assert model.mlp.in_dim == 6
    assert not any(k.startswith("local.") for k in model.params())


def test_training_is_deterministic(blobs8):
    cfg = small_config(iterations=30, warmup_iters=10)
    a = params_of(train(blobs8.train, cfg).model)
    b = params_of(train(blobs8.train, cfg).model)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)
