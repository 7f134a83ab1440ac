import json
import math

import numpy as np
import pytest

from dualsplat.dataset import (
    DatasetError,
    angle_from_focal,
    focal_from_angle,
    ingest_dataset,
    read_camera_spec,
    read_pfm,
    write_dataset,
    write_pfm,
)
from dualsplat.scene import Camera


def test_focal_example():
    assert focal_from_angle(100, math.pi / 2) == pytest.approx(50.0, abs=1e-12)


def test_angle_round_trip():
    for a in (0.3, 0.69, 1.2, 2.0):
        assert abs(angle_from_focal(320, focal_from_angle(320, a)) - a) <= 1e-9


def test_pfm_round_trip(tmp_path):
    d = np.random.default_rng(0).random((7, 5)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), d)


def _cams(n, w=16, h=12):
    return [Camera.look_at([math.cos(i), math.sin(i), 2.0], [0, 0, 0], [0, 0, 1], w, h, 0.8) for i in range(n)]


def test_write_ingest_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    cams = _cams(3)
    imgs = [np.concatenate([rng.random((12, 16, 3)), np.ones((12, 16, 1))], -1) for _ in cams]
    depth = [rng.uniform(1, 3, (12, 16)).astype(np.float32) for _ in cams]
    nrm = [np.tile([0.0, 0.0, 1.0], (12, 16, 1)) for _ in cams]
    write_dataset(tmp_path, cams, imgs, "train", depth, nrm)
    ds = ingest_dataset(tmp_path, "train")
    assert len(ds) == 3
    for a, b in zip(ds.cameras, cams):
        np.testing.assert_allclose(a.c2w, b.c2w, atol=1e-12)
        assert a.fx == pytest.approx(b.fx, rel=1e-12)
    # 8-bit sRGB quantisation
    for a, b in zip(ds.images, imgs):
        assert np.abs(a - b).max() < 0.02
    np.testing.assert_array_equal(ds.depth_priors[0], depth[0])
    np.testing.assert_allclose(ds.normal_priors[1], nrm[1], atol=1e-4)
    meta = json.loads((tmp_path / "transforms.json").read_text())
    assert abs(angle_from_focal(16, ds.cameras[0].fx) - meta["camera_angle_x"]) <= 1e-9


def test_one_frame_manifest(tmp_path):
    write_dataset(tmp_path, _cams(1), [np.ones((12, 16, 4))])
    assert len(ingest_dataset(tmp_path)) == 1


def test_missing_frame_names_path(tmp_path):
    write_dataset(tmp_path, _cams(2), [np.ones((12, 16, 4))] * 2)
    (tmp_path / "train" / "r_1.png").unlink()
    with pytest.raises(DatasetError, match="r_1"):
        ingest_dataset(tmp_path)


def test_bad_manifest(tmp_path):
    (tmp_path / "transforms.json").write_text("{not json")
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path)
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path / "nowhere")


def test_size_mismatch(tmp_path):
    write_dataset(tmp_path, _cams(1), [np.ones((12, 16, 4))])
    write_dataset(tmp_path / "b", _cams(1, 8, 8), [np.ones((8, 8, 4))])
    meta = json.loads((tmp_path / "transforms.json").read_text())
    (tmp_path / "train" / "r_9.png").write_bytes((tmp_path / "b" / "train" / "r_0.png").read_bytes())
    meta["frames"].append({**meta["frames"][0], "file_path": "./train/r_9"})
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="size"):
        ingest_dataset(tmp_path)


def test_camera_spec(tmp_path):
    cams = _cams(2)
    spec = {"w": 16, "h": 12, "camera_angle_x": angle_from_focal(16, cams[0].fx),
            "frames": [{"transform_matrix": (c.c2w @ np.diag([1.0, -1, -1, 1])).tolist()} for c in cams]}
    (tmp_path / "c.json").write_text(json.dumps(spec))
    got = read_camera_spec(tmp_path / "c.json")
    for a, b in zip(got, cams):
        np.testing.assert_allclose(a.c2w, b.c2w, atol=1e-12)
    (tmp_path / "bad.json").write_text(json.dumps({"w": 16, "frames": []}))
    with pytest.raises(DatasetError):
        read_camera_spec(tmp_path / "bad.json")
