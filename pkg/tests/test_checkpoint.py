import numpy as np
import pytest

from dualsplat.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from dualsplat.scene import init_scene
from dualsplat.shader import ShaderMLP
from dualsplat.sphmip import SphMip


def make(feature_dim=4, local=True):
    geo, loc = init_scene(([-1] * 3, [1] * 3), 30, 20, 0, feature_dim=feature_dim)
    rng = np.random.default_rng(0)
    for g in (geo, loc):
        for v in g.params().values():
            v[...] = rng.normal(size=v.shape).astype(v.dtype)
    sph = SphMip.init(1, (16, 32, feature_dim), 4)
    mlp = ShaderMLP.init(2 * feature_dim + 2, 2, width=8, depth=2)
    return Checkpoint(geo, loc if local else None, sph, mlp, 123, {"seed": 0, "ablation": "full"}, {"mode": "full"})


def test_round_trip_bit_exact(tmp_path):
    ck = make()
    save_checkpoint(ck, tmp_path / "a.rdgs")
    back = load_checkpoint(tmp_path / "a.rdgs")
    for a, b in ((ck.geo, back.geo), (ck.local, back.local)):
        for k in a.params():
            np.testing.assert_array_equal(a.params()[k], b.params()[k])
            assert b.params()[k].dtype == np.float32
    np.testing.assert_array_equal(ck.sphmip.base, back.sphmip.base)
    for k in ck.mlp.params():
        np.testing.assert_array_equal(ck.mlp.params()[k], back.mlp.params()[k])
    assert back.iteration == 123 and back.config == ck.config and back.meta["mode"] == "full"
    assert (tmp_path / "a.rdgs").read_bytes()[:4] == MAGIC


def test_save_is_deterministic(tmp_path):
    save_checkpoint(make(), tmp_path / "a.rdgs")
    save_checkpoint(make(), tmp_path / "b.rdgs")
    assert (tmp_path / "a.rdgs").read_bytes() == (tmp_path / "b.rdgs").read_bytes()


def test_without_local_set(tmp_path):
    save_checkpoint(make(local=False), tmp_path / "a.rdgs")
    assert load_checkpoint(tmp_path / "a.rdgs").local is None


def test_errors(tmp_path):
    p = tmp_path / "a.rdgs"
    save_checkpoint(make(), p)
    data = p.read_bytes()
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.rdgs")
    (tmp_path / "m.rdgs").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.rdgs")
    (tmp_path / "v.rdgs").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.rdgs")
    (tmp_path / "t.rdgs").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.rdgs")


def test_feature_dim_check(tmp_path):
    save_checkpoint(make(), tmp_path / "a.rdgs")
    assert load_checkpoint(tmp_path / "a.rdgs", expect_feature_dim=4).feature_dim == 4
    with pytest.raises(CheckpointError, match="feature dimension"):
        load_checkpoint(tmp_path / "a.rdgs", expect_feature_dim=3)
