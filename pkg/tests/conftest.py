import numpy as np
import pytest

from gausstrace import CameraPose, CameraRig, SceneSnapshot, SensorSpec


def random_scene(seed, n, sh_degree=1, z_offset=-5.0, spread=1.0,
                 opacity_range=(0.2, 0.9), scale_range=(0.1, 0.5)):
    """Random valid scene in a box in front of the origin (camera at z=0)."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-spread, spread, (n, 3))
    means[:, 2] += z_offset
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(*scale_range, (n, 3))
    opacities = rng.uniform(*opacity_range, n)
    nbands = (sh_degree + 1) ** 2
    sh = rng.uniform(-0.5, 0.5, (n, nbands, 3))
    return SceneSnapshot.from_arrays(means, quats, scales, opacities, sh)


def random_forward_rays(seed, n):
    """Rays starting near the origin heading into -z, unit directions."""
    rng = np.random.default_rng(seed)
    origins = rng.uniform(-0.5, 0.5, (n, 3))
    origins[:, 2] = 0.0
    dirs = rng.normal(size=(n, 3))
    dirs[:, 2] = -np.abs(dirs[:, 2]) - 1.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def look_at_quat(cam_pos, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world quaternion looking from cam_pos toward target (-z forward)."""
    fwd = np.asarray(target, dtype=float) - np.asarray(cam_pos, dtype=float)
    fwd /= np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-8:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    w = np.sqrt(max(np.trace(r) + 1.0, 1e-12)) / 2.0
    q = np.array([w, (r[2, 1] - r[1, 2]) / (4 * w), (r[0, 2] - r[2, 0]) / (4 * w),
                  (r[1, 0] - r[0, 1]) / (4 * w)])
    return q / np.linalg.norm(q)


def ring_camera(index, count, radius=4.2, height=1.2, res=64, focal=30.0):
    ang = 2.0 * np.pi * index / count
    pos = np.array([radius * np.sin(ang), height, radius * np.cos(ang)])
    pose = CameraPose(pos, look_at_quat(pos, np.zeros(3)))
    return CameraRig(pose, SensorSpec(res, res, 36.0, 36.0, focal), None)


@pytest.fixture
def small_scene():
    return random_scene(42, 25)
