import json

import numpy as np
import pytest

from gausstrace import SceneValidationError, load_scene, save_scene
from gausstrace.deformation import HexPlaneField, KeyframeTrack, Mlp
from gausstrace.sceneio import deformation_from_json, deformation_to_json

from .conftest import random_scene


def test_single_gaussian_roundtrip(tmp_path):
    doc = {"sh_degree": 0,
           "gaussians": [{"mean": [0, 0, -3], "rotation": [1, 0, 0, 0],
                          "scale": [0.5, 0.5, 0.5], "opacity": 0.7,
                          "sh": [[0.1, 0.2, 0.3]]}],
           "deformation": {"kind": "none"}}
    path = tmp_path / "one.json"
    path.write_text(json.dumps(doc))
    snap, deformation = load_scene(path)
    assert len(snap) == 1
    assert deformation is None
    assert snap.opacities[0] == 0.7


def test_zero_scale_names_field_and_index(tmp_path):
    doc = {"sh_degree": 0,
           "gaussians": [{"mean": [0, 0, -3], "rotation": [1, 0, 0, 0],
                          "scale": [0.0, 1.0, 1.0], "opacity": 0.7,
                          "sh": [[0, 0, 0]]}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneValidationError, match="scale.*gaussian 0"):
        load_scene(path)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_scene("/nonexistent/scene.json")


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SceneValidationError, match="not valid JSON"):
        load_scene(path)


def test_large_roundtrip_bit_exact(tmp_path):
    snap = random_scene(99, 10_000, sh_degree=1)
    path = tmp_path / "big.json"
    save_scene(path, snap, None)
    loaded, _ = load_scene(path)
    assert np.array_equal(loaded.means, snap.means)
    assert np.array_equal(loaded.rotations, snap.rotations)
    assert np.array_equal(loaded.scales, snap.scales)
    assert np.array_equal(loaded.opacities, snap.opacities)
    assert np.array_equal(loaded.sh, snap.sh)
    # save -> load -> save is the identity on bytes as well
    path2 = tmp_path / "big2.json"
    save_scene(path2, loaded, None)
    assert path.read_bytes() == path2.read_bytes()


def test_keyframe_deformation_roundtrip(tmp_path):
    snap = random_scene(3, 5)
    rng = np.random.default_rng(0)
    track = KeyframeTrack(np.array([0.0, 0.5, 1.0]),
                          rng.normal(size=(3, 5, 3)),
                          rng.normal(size=(3, 5, 4)) * 0.1,
                          rng.normal(size=(3, 5, 3)) * 0.01)
    path = tmp_path / "kf.json"
    save_scene(path, snap, track)
    _, loaded = load_scene(path)
    assert isinstance(loaded, KeyframeTrack)
    assert np.array_equal(loaded.times, track.times)
    assert np.array_equal(loaded.mean_deltas, track.mean_deltas)


def _tiny_hexplane(h=2, levels=(1, 2), base=4, seed=0):
    rng = np.random.default_rng(seed)
    planes = {pair: tuple(rng.normal(size=(h, l * base, l * base)) for l in levels)
              for pair in ("xy", "xz", "yz", "xt", "yt", "zt")}
    fuse = Mlp((rng.normal(size=(3, h * len(levels))),), (rng.normal(size=3),))
    heads = [Mlp((rng.normal(size=(w, 3)),), (rng.normal(size=w),)) for w in (3, 4, 3)]
    return HexPlaneField(planes, h, tuple(levels), base,
                         np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]),
                         fuse, heads[0], heads[1], heads[2])


def test_hexplane_roundtrip_through_json():
    field = _tiny_hexplane()
    doc = deformation_to_json(field)
    loaded = deformation_from_json(json.loads(json.dumps(doc)))
    assert isinstance(loaded, HexPlaneField)
    assert loaded.levels == field.levels
    for pair in field.planes:
        for a, b in zip(field.planes[pair], loaded.planes[pair]):
            assert np.array_equal(a, b)
    for a, b in zip(field.fuse_mlp.weights, loaded.fuse_mlp.weights):
        assert np.array_equal(a, b)


def test_unknown_deformation_kind():
    with pytest.raises(SceneValidationError, match="unknown deformation kind"):
        deformation_from_json({"kind": "warp"})
