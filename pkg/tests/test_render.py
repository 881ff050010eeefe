from dataclasses import replace

import numpy as np
import pytest

from gausstrace import InvalidParameterError, SceneSnapshot
from gausstrace.cameras import (CameraPose, CameraRig, DofParams, FisheyeParams,
                                RollingShutterParams, SensorSpec, chunk_schedule)
from gausstrace.deformation import KeyframeTrack
from gausstrace.render import (RenderJob, frame_times, render_frame_loaded,
                               render_rolling_loaded)
from gausstrace.scene import SH_C0

from .conftest import random_scene

POSE = CameraPose(np.zeros(3), np.array([1.0, 0, 0, 0]))


def rig_with(effect, res=64, focal=30.0):
    return CameraRig(POSE, SensorSpec(res, res, 36.0, 36.0, focal), effect)


JOB = RenderJob("scene", "camera", tile=16, threads=1, background=(0.25, 0.5, 0.75))


def test_nothing_visible_gives_uniform_background():
    snap = random_scene(1, 5, z_offset=+5.0)  # entirely behind the camera
    img = render_frame_loaded(snap, None, rig_with(None), 0.0, JOB)
    assert np.all(img.data == np.array([0.25, 0.5, 0.75]))


def test_single_on_axis_gaussian_brightest_at_center():
    dc = (1.0 - 0.5) / SH_C0
    snap = SceneSnapshot.from_arrays(
        np.array([[0.0, 0, -4]]), np.array([[1.0, 0, 0, 0]]),
        np.full((1, 3), 0.25), np.array([1.0]), np.full((1, 1, 3), dc))
    job = replace(JOB, background=(0.0, 0.0, 0.0))
    img = render_frame_loaded(snap, None, rig_with(None, res=65), 0.0, job)
    lum = img.data.sum(axis=2)
    j, i = np.unravel_index(np.argmax(lum), lum.shape)
    assert (i, j) == (32, 32)


def test_threads_and_tiles_bit_identical():
    snap = random_scene(2, 30)
    base = render_frame_loaded(snap, None, rig_with(None), 0.0, JOB)
    for threads, tile in [(4, 16), (8, 7), (1, 64), (3, 1)]:
        img = render_frame_loaded(snap, None, rig_with(None), 0.0,
                                  replace(JOB, threads=threads, tile=tile))
        assert np.array_equal(img.data, base.data)


def test_rolling_static_scene_equals_pinhole():
    snap = random_scene(3, 25)
    pin = render_frame_loaded(snap, None, rig_with(None), 0.3, JOB)
    for nc in (1, 4, 16, 64):
        rolling = rig_with(RollingShutterParams(0.05, 0.0, 1.0, nc))
        img = render_frame_loaded(snap, None, rolling, 0.3, JOB)
        assert np.array_equal(img.data, pin.data)


def _drifting_track(n, amount=(0.8, 0.0, 0.0)):
    dm = np.tile(np.asarray(amount), (n, 1))
    return KeyframeTrack(np.array([0.0, 1.0]),
                         np.stack([np.zeros((n, 3)), dm]),
                         np.zeros((2, n, 4)), np.zeros((2, n, 3)))


def test_single_chunk_equals_global_shutter_at_mean_time():
    snap = random_scene(4, 20)
    track = _drifting_track(len(snap))
    height = 64
    rs = RollingShutterParams(0.2, 0.0, 1.0, height)
    rolling = rig_with(rs)
    img = render_rolling_loaded(snap, track, rolling, 0.1, JOB)
    (chunk,) = chunk_schedule(RollingShutterParams(0.2, 0.1, 1.0, height), height)
    from gausstrace.deformation import deform_snapshot
    global_shutter = render_frame_loaded(deform_snapshot(snap, track, chunk.time),
                                         None, rig_with(None), chunk.time,
                                         JOB)
    assert np.array_equal(img.data, global_shutter.data)


def test_rolling_chunk_order_independent():
    snap = random_scene(5, 20)
    track = _drifting_track(len(snap))
    rolling = rig_with(RollingShutterParams(0.2, 0.0, 1.0, 8))
    serial = render_frame_loaded(snap, track, rolling, 0.0, JOB)
    threaded = render_frame_loaded(snap, track, rolling, 0.0, replace(JOB, threads=6))
    assert np.array_equal(serial.data, threaded.data)


def test_dof_zero_aperture_equals_pinhole():
    snap = random_scene(6, 25)
    pin = render_frame_loaded(snap, None, rig_with(None), 0.0, JOB)
    dof = rig_with(DofParams(4.0, 0.0, 1, 9))
    img = render_frame_loaded(snap, None, dof, 0.0, JOB)
    assert np.array_equal(img.data, pin.data)


def test_dof_blurs_out_of_focus():
    dc = (1.0 - 0.5) / SH_C0
    snap = SceneSnapshot.from_arrays(
        np.array([[0.0, 0, -6]]), np.array([[1.0, 0, 0, 0]]),
        np.full((1, 3), 0.08), np.array([1.0]), np.full((1, 1, 3), dc))
    job = replace(JOB, background=(0.0, 0.0, 0.0))
    sharp = render_frame_loaded(snap, None, rig_with(DofParams(6.0, 0.12, 16, 3)),
                                0.0, job)
    blurred = render_frame_loaded(snap, None, rig_with(DofParams(1.0, 0.12, 16, 3)),
                                  0.0, job)
    # defocus spreads energy: the peak dims when focused far off the subject
    assert blurred.data.max() < sharp.data.max() - 0.05


def test_fisheye_wide_view_sees_more():
    snap = random_scene(7, 40, spread=4.0)
    pin = render_frame_loaded(snap, None, rig_with(None), 0.0, JOB)
    fe = rig_with(FisheyeParams(np.array([0.0, 0.08, 0, 0, 0])))
    wide = render_frame_loaded(snap, None, fe, 0.0, JOB)
    assert not np.array_equal(wide.data, pin.data)


def test_invalid_fisheye_pixels_are_background():
    snap = random_scene(8, 10)
    fe = rig_with(FisheyeParams(np.array([0.0, 0.4, 0, 0, 0])))  # corners invalid
    img = render_frame_loaded(snap, None, fe, 0.0, JOB)
    assert np.allclose(img.data[0, 0], [0.25, 0.5, 0.75])


def test_frame_times_mapping():
    job = replace(JOB, t0=0.2, t1=0.8, frames=4)
    assert frame_times(job) == pytest.approx([0.2, 0.4, 0.6, 0.8], abs=1e-12)
    assert frame_times(job)[0] == 0.2 and frame_times(job)[-1] == 0.8
    assert frame_times(replace(JOB, t0=0.3, t1=0.9, frames=1)) == [0.3]


def test_job_validation():
    with pytest.raises(InvalidParameterError):
        replace(JOB, frames=0).validate()
    with pytest.raises(InvalidParameterError):
        replace(JOB, t0=1.0, t1=0.0).validate()
    with pytest.raises(InvalidParameterError):
        replace(JOB, tile=0).validate()
