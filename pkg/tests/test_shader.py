import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import front_camera, random_scene
from dualsplat.color import linear_to_srgb
from dualsplat.oracle import finite_diff, reference_pyramid, reference_shade_pixel, rel_error
from dualsplat.rasterizer import render
from dualsplat.shader import (
    MODES,
    ShaderError,
    ShaderMLP,
    compose_final,
    cos_nv,
    input_dim,
    reflect_dir,
    shade_backward,
    shade_image,
    view_dirs,
)
from dualsplat.sphmip import SphMip

BG = np.array([0.3, 0.5, 0.2])


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def shading_setup(seed=0, size=8, mode="full"):
    geo, local = random_scene(seed, n=12)
    cam = front_camera(size, size)
    rng = np.random.default_rng(seed)
    sm = SphMip(rng.normal(size=(16, 32, 4)), 4)
    mlp = ShaderMLP.init(input_dim(mode), seed, dtype=np.float64)
    mlp.biases[-1][:] = 0.0
    mlp.weights[-1] *= 10.0
    return render(geo, cam), render(local, cam).color_or_feature, sm, mlp, cam


def test_reflect_examples():
    z = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(reflect_dir(z, z), z)
    np.testing.assert_allclose(reflect_dir(z, unit([1, 0, 1])), unit([-1, 0, 1]), atol=1e-15)
    np.testing.assert_allclose(reflect_dir(z, [0.0, 1.0, 0.0]), [0.0, -1.0, 0.0])
    with pytest.raises(ShaderError):
        reflect_dir([0.0, 0.0, 0.0], z)


def test_reflection_properties():
    rng = np.random.default_rng(0)
    n = unit(rng.normal(size=(1000, 3)))
    v = unit(rng.normal(size=(1000, 3)))
    r = reflect_dir(n, v)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.sum(r * n, axis=1), np.sum(v * n, axis=1), atol=1e-6)


def test_cos_examples():
    n = np.array([0.0, 0.0, 1.0])
    assert cos_nv(n, n) == 1.0
    assert cos_nv(n, [math.sqrt(1 - 0.09), 0.0, -0.3]) == 0.0
    assert cos_nv(n, [math.sin(math.pi / 3), 0.0, 0.5]) == pytest.approx(0.5)


def test_input_dims_per_mode():
    assert [input_dim(m) for m in MODES] == [10, 10, 6, 6, 8]
    with pytest.raises(ShaderError):
        input_dim("no_local")


def test_mlp_shapes_and_zero_network():
    mlp = ShaderMLP.init(10, 0)
    assert [w.shape for w in mlp.weights] == [(10, 64), (64, 64), (64, 64), (64, 3)]
    out, _ = ShaderMLP.zeros(10).forward(np.random.default_rng(0).normal(size=(5, 10)))
    np.testing.assert_allclose(out, math.log(2.0))
    with pytest.raises(ShaderError):
        mlp.forward(np.zeros((2, 6)))


@given(st.integers(0, 10_000))
def test_specular_non_negative_and_pure(seed):
    rng = np.random.default_rng(seed)
    mlp = ShaderMLP.init(10, seed)
    mlp.biases[-1][:] = rng.normal(0, 20)
    x = rng.normal(0, 5, size=(16, 10))
    a, _ = mlp.forward(x)
    b, _ = mlp.forward(x.copy())
    assert np.all(a >= 0)
    np.testing.assert_array_equal(a, b)


def test_mlp_gradients():
    rng = np.random.default_rng(1)
    mlp = ShaderMLP.init(10, 1, width=16, dtype=np.float64)
    mlp.biases[-1][:] = 0.3
    # keep rows whose hidden pre-activations stay clear of the ReLU kink
    rows = []
    while len(rows) < 7:
        cand = rng.normal(size=(1, 10))
        _, (_, pre) = mlp.forward(cand)
        if min(np.abs(z).min() for z in pre[:-1]) >= 1e-3:
            rows.append(cand[0])
    x = np.array(rows)
    g_out = rng.normal(size=(7, 3))
    _, cache = mlp.forward(x)
    grads, g_x = mlp.backward(cache, g_out)
    num = finite_diff(lambda z: float(np.sum(mlp.forward(z.reshape(7, 10))[0] * g_out)), x.ravel().copy(), h=1e-6)
    assert rel_error(g_x.ravel(), num) <= 1e-3
    params = mlp.params()
    for name in ("w0", "b1", "w3"):
        def loss(p, name=name):
            m = ShaderMLP(list(mlp.weights), list(mlp.biases))
            m.set_params({**params, name: p.reshape(params[name].shape)})
            return float(np.sum(m.forward(x)[0] * g_out))
        num = finite_diff(loss, params[name].ravel().copy(), h=1e-6)
        assert rel_error(grads[name].ravel(), num) <= 1e-3, name


def test_compose_examples():
    c_diff = np.array([[0.2, 0.1, 0.0]])
    alpha = np.array([0.5])
    out = compose_final(c_diff, np.zeros((1, 3)), alpha, BG)
    np.testing.assert_allclose(out, linear_to_srgb(np.clip(c_diff + 0.5 * BG, 0, 1)))
    np.testing.assert_allclose(compose_final(np.zeros((1, 3)), np.zeros((1, 3)), np.ones(1), BG), 0.0)
    np.testing.assert_allclose(compose_final(np.ones((1, 3)), np.zeros((1, 3)), np.ones(1), BG), 1.0)
    knee = compose_final(np.full((1, 3), 0.0031308), np.zeros((1, 3)), np.ones(1), BG)
    np.testing.assert_allclose(knee, 0.040449936, atol=1e-6)
    assert abs(12.92 * 0.0031308 - (1.055 * 0.0031308 ** (1 / 2.4) - 0.055)) <= 1e-5


def test_warmup_gives_diffuse_pass():
    geo, fl, sm, mlp, cam = shading_setup()
    res = shade_image(geo, fl, sm, mlp, cam, BG, warmup_active=True)
    np.testing.assert_array_equal(res.c_spec, 0.0)
    np.testing.assert_array_equal(res.image, compose_final(geo.color_or_feature, 0.0, geo.alpha, BG))


def test_null_specular_path():
    geo, fl, _, _, cam = shading_setup()
    sm = SphMip(np.zeros((16, 32, 4)), 4)
    mlp = ShaderMLP.zeros(10, out_bias=-60.0)
    res = shade_image(geo, np.zeros_like(fl), sm, mlp, cam, BG)
    np.testing.assert_allclose(res.image, compose_final(geo.color_or_feature, 0.0, geo.alpha, BG), atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_matches_scalar_oracle(mode):
    geo, fl, sm, mlp, cam = shading_setup(2, mode=mode)
    res = shade_image(geo, fl, sm, mlp, cam, BG, mode=mode)
    v = view_dirs(cam)
    levels = reference_pyramid(sm.base, sm.n_levels)
    ws = [w.tolist() for w in mlp.weights]
    bs = [b.tolist() for b in mlp.biases]
    assert (geo.alpha > 1e-4).sum() > 10
    worst = 0.0
    for py in range(8):
        for px in range(8):
            ref = reference_shade_pixel(geo.color_or_feature[py, px], geo.roughness[py, px],
                                        geo.normal[py, px], geo.alpha[py, px], fl[py, px], v[py, px],
                                        levels, ws, bs, BG, mode=mode)
            worst = max(worst, float(np.abs(ref - res.image[py, px]).max()))
    assert worst <= 1e-5


def test_empty_pixels_show_background():
    geo, fl, sm, mlp, cam = shading_setup()
    res = shade_image(geo, fl, sm, mlp, cam, BG)
    empty = geo.alpha <= 1e-4
    assert empty.any()
    np.testing.assert_array_equal(res.c_spec[empty], 0.0)


def test_buffer_mismatch_rejected():
    geo, fl, sm, mlp, cam = shading_setup()
    with pytest.raises(ShaderError):
        shade_image(geo, fl[:4], sm, mlp, cam, BG)
    with pytest.raises(ShaderError):
        shade_image(geo, fl, sm, mlp, front_camera(9, 9), BG)
    with pytest.raises(ShaderError):
        shade_image(geo, None, sm, mlp, cam, BG, mode="full")


def test_bright_texel_gradients_end_to_end():
    geo, fl, sm, _, cam = shading_setup(3)
    mlp = ShaderMLP.init(10, 3, width=16, dtype=np.float64)
    mlp.biases[-1][:] = -1.0
    res = shade_image(geo, fl, sm, mlp, cam, BG)
    mask = geo.alpha > 1e-4
    py, px = np.argwhere(mask & (res.linear.max(-1) < 0.9))[0]
    # light up the texel this pixel's reflection ray looks at
    q = res._cache["q_cache"][0]
    k = int(np.flatnonzero(mask.ravel()).tolist().index(py * 8 + px))
    base = sm.base.copy()
    lvl0 = q.level[k] == 0
    tex = q.flat[k][lvl0][np.argmax(q.weight[k][lvl0])] if lvl0.any() else q.flat[k][0]
    base.reshape(-1, 4)[tex] += 3.0
    sm = SphMip(base, 4)
    res = shade_image(geo, fl, sm, mlp, cam, BG)
    g_img = np.zeros_like(res.image)
    g_img[py, px] = 1.0
    grads = shade_backward(res, sm, mlp, g_img)
    assert np.abs(grads["sphmip"]).max() > 0
    assert np.abs(grads["f_local"][py, px]).max() > 0

    def pix(b, f):
        return float(shade_image(geo, f, SphMip(b, 4), mlp, cam, BG).image[py, px].sum())

    idx = np.argsort(-np.abs(grads["sphmip"].ravel()))[:6]
    num = finite_diff(lambda vals: pix(_set(base, idx, vals), fl), base.ravel()[idx].copy())
    assert rel_error(grads["sphmip"].ravel()[idx], num) <= 1e-3
    fidx = (py * 8 + px) * 4 + np.arange(4)
    num = finite_diff(lambda vals: pix(base, _set(fl, fidx, vals)), fl.ravel()[fidx].copy())
    assert rel_error(grads["f_local"].ravel()[fidx], num) <= 1e-3


def _set(arr, flat_idx, vals):
    out = arr.copy()
    out.ravel()[flat_idx] = vals
    return out
