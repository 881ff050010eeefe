import numpy as np
import pytest

from gausstrace import ImageBuffer, SceneValidationError, load_image, save_image
from gausstrace.images import quantize


def test_quantization_endpoints():
    img = ImageBuffer(np.array([[[0.0, 1.0, 0.5]]]))
    assert quantize(img).ravel().tolist() == [0, 255, 128]  # 0.5 rounds half up


def test_byte_rounding_half_up():
    # 126.5/255 must round to 127, not banker's 126
    img = ImageBuffer(np.array([[[126.5 / 255.0] * 3]]))
    assert quantize(img).ravel().tolist() == [127, 127, 127]


def test_save_load_save_idempotent(tmp_path):
    rng = np.random.default_rng(0)
    img = ImageBuffer(rng.uniform(0, 1, (20, 31, 3)))
    p1 = tmp_path / "a.ppm"
    p2 = tmp_path / "b.ppm"
    save_image(img, p1)
    loaded = load_image(p1)
    save_image(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # a second load is exact
    again = load_image(p2)
    assert np.array_equal(loaded.data, again.data)


def test_header_format(tmp_path):
    img = ImageBuffer(np.zeros((3, 5, 3)))
    path = tmp_path / "z.ppm"
    save_image(img, path)
    data = path.read_bytes()
    assert data.startswith(b"P6\n5 3\n255\n")
    assert len(data) == len(b"P6\n5 3\n255\n") + 5 * 3 * 3


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(SceneValidationError):
        load_image(path)


def test_load_rejects_truncated(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(SceneValidationError):
        load_image(path)


def test_load_accepts_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
    img = load_image(path)
    assert img.width == 2 and img.height == 1
    assert np.allclose(img.data[0, 0], [1.0, 0, 0])
