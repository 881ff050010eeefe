"""Frame rendering: pixel tiling, camera-effect dispatch, rolling shutter.

Every pixel's value is a pure function of (scene, camera, time), so frames
are deterministic: tiles and rolling-shutter chunks partition the image
into disjoint pixel ranges, parallel workers write only their own range,
and the per-ray math does not depend on how rays are batched. The same
command therefore produces bit-identical images for any thread count or
tile size.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import (CameraRig, DofParams, FisheyeParams, RollingShutterParams,
                      chunk_schedule, dof_rays, fisheye_directions,
                      load_camera, pinhole_directions)
from .deformation import deform_snapshot
from .errors import InvalidParameterError
from .images import ImageBuffer
from .scene import SceneSnapshot
from .sceneio import Deformation, load_scene
from .tracer import DEFAULT_K, prepare_scene, trace_rays


@dataclass(frozen=True)
class RenderJob:
    """One CLI unit of work; paths plus sampling configuration."""

    scene: str | Path
    camera: str | Path
    out: str | Path = "out.ppm"
    t0: float = 0.0
    t1: float = 0.0
    frames: int = 1
    spp: int | None = None          # overrides the DoF effect's samples_per_pixel
    k: int = DEFAULT_K
    tile: int = 64
    threads: int = 1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    parallel_frames: bool = False

    def validate(self) -> None:
        if self.frames < 1:
            raise InvalidParameterError("frame count must be >= 1")
        if self.t1 < self.t0:
            raise InvalidParameterError(f"time range [{self.t0}, {self.t1}] inverted")
        if self.tile < 1:
            raise InvalidParameterError("tile size must be >= 1")
        if self.threads < 1:
            raise InvalidParameterError("thread count must be >= 1")


def frame_times(job: RenderJob) -> list[float]:
    """Frame i maps to t0 + i (t1 - t0) / (frames - 1); one frame means t0."""
    if job.frames == 1:
        return [job.t0]
    return [job.t0 + i * (job.t1 - job.t0) / (job.frames - 1)
            for i in range(job.frames)]


def _tiles(width: int, height: int, tile: int,
           rows: tuple[int, int] | None = None):
    y_begin, y_end = (0, height) if rows is None else rows
    for y0 in range(y_begin, y_end, tile):
        for x0 in range(0, width, tile):
            yield y0, min(y0 + tile, y_end), x0, min(x0 + tile, width)


def _run_tasks(tasks, threads: int) -> None:
    if threads <= 1:
        for task in tasks:
            task()
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for future in [pool.submit(t) for t in tasks]:
                future.result()  # surface worker exceptions


def _pixel_grid(x0: int, x1: int, y0: int, y1: int):
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    gi, gj = np.meshgrid(xs, ys)
    return gi.ravel(), gj.ravel()


def _trace_tile(image: np.ndarray, rig: CameraRig, prep, background, spp_override,
                y0: int, y1: int, x0: int, x1: int) -> None:
    px_i, px_j = _pixel_grid(x0, x1, y0, y1)
    shape = (y1 - y0, x1 - x0, 3)
    effect = rig.effect
    if isinstance(effect, FisheyeParams):
        dirs, valid = fisheye_directions(rig.pose, rig.sensor, effect, px_i, px_j)
        out = np.broadcast_to(np.asarray(background, dtype=np.float64),
                              (px_i.size, 3)).copy()
        if valid.any():
            origins = np.broadcast_to(rig.pose.position, dirs[valid].shape)
            colors, _ = trace_rays(origins, dirs[valid], prep.snapshot, prep=prep,
                                   background=background)
            out[valid] = colors
        image[y0:y1, x0:x1] = out.reshape(shape)
        return
    if isinstance(effect, DofParams):
        spp = spp_override if spp_override is not None else effect.samples_per_pixel
        acc = np.zeros((px_i.size, 3))
        for s in range(spp):
            origins, dirs = dof_rays(rig.pose, rig.sensor, effect, px_i, px_j,
                                     np.full(px_i.size, s))
            colors, _ = trace_rays(origins, dirs, prep.snapshot, prep=prep,
                                   background=background)
            acc += colors
        image[y0:y1, x0:x1] = (acc / spp).reshape(shape)
        return
    # pinhole geometry (also the per-chunk rolling-shutter path)
    dirs = pinhole_directions(rig.pose, rig.sensor, px_i, px_j)
    origins = np.broadcast_to(rig.pose.position, dirs.shape)
    colors, _ = trace_rays(origins, dirs, prep.snapshot, prep=prep,
                           background=background)
    image[y0:y1, x0:x1] = colors.reshape(shape)


def render_frame_loaded(snapshot: SceneSnapshot, deformation: Deformation,
                        rig: CameraRig, t: float, job: RenderJob) -> ImageBuffer:
    """Render one frame from already-loaded inputs."""
    job.validate()
    if isinstance(rig.effect, RollingShutterParams):
        return render_rolling_loaded(snapshot, deformation, rig, t, job)
    width, height = rig.sensor.width_px, rig.sensor.height_px
    snap_t = deform_snapshot(snapshot, deformation, t)
    prep = prepare_scene(snap_t)
    image = np.zeros((height, width, 3))
    tasks = [
        (lambda b=bounds: _trace_tile(image, rig, prep, job.background, job.spp, *b))
        for bounds in _tiles(width, height, job.tile)
    ]
    _run_tasks(tasks, job.threads)
    return ImageBuffer(image)


def render_rolling_loaded(snapshot: SceneSnapshot, deformation: Deformation,
                          rig: CameraRig, t: float, job: RenderJob) -> ImageBuffer:
    """Rolling-shutter frame: one deformed snapshot per row chunk.

    The frame's base time t replaces the effect's frame_time, so sequences
    advance the shutter start frame by frame. Chunks render independently
    and may run concurrently; each owns a disjoint row range.
    """
    effect = rig.effect
    assert isinstance(effect, RollingShutterParams)
    rs = RollingShutterParams(effect.readout_time, t, effect.time_scale,
                              effect.chunk_rows)
    width, height = rig.sensor.width_px, rig.sensor.height_px
    image = np.zeros((height, width, 3))
    pinhole_rig = CameraRig(rig.pose, rig.sensor, None)

    def render_chunk(chunk):
        snap_c = deform_snapshot(snapshot, deformation, chunk.time)
        prep = prepare_scene(snap_c)
        for bounds in _tiles(width, height, job.tile,
                             rows=(chunk.row_start, chunk.row_stop)):
            _trace_tile(image, pinhole_rig, prep, job.background, None, *bounds)

    tasks = [(lambda c=chunk: render_chunk(c)) for chunk in chunk_schedule(rs, height)]
    _run_tasks(tasks, job.threads)
    return ImageBuffer(image)


def render_frame(job: RenderJob, t: float) -> ImageBuffer:
    """Load the job's scene and camera and render the frame at time t."""
    snapshot, deformation = load_scene(job.scene)
    rig = load_camera(job.camera)
    return render_frame_loaded(snapshot, deformation, rig, t, job)


def render_rolling_frame(job: RenderJob, t: float) -> ImageBuffer:
    """Load inputs and render a rolling-shutter frame starting at time t."""
    snapshot, deformation = load_scene(job.scene)
    rig = load_camera(job.camera)
    if not isinstance(rig.effect, RollingShutterParams):
        raise InvalidParameterError("render_rolling_frame needs a rolling effect")
    return render_rolling_loaded(snapshot, deformation, rig, t, job)


def render_sequence(job: RenderJob, out_dir: str | Path) -> list[Path]:
    """Render all frames of the job's time range into frame_%05d.ppm files."""
    from .images import save_image

    snapshot, deformation = load_scene(job.scene)
    rig = load_camera(job.camera)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = frame_times(job)
    paths = [out_dir / f"frame_{i:05d}.ppm" for i in range(len(times))]

    def render_one(i: int, single_threaded: bool) -> None:
        frame_job = job if not single_threaded else _with_threads(job, 1)
        img = render_frame_loaded(snapshot, deformation, rig, times[i], frame_job)
        save_image(img, paths[i])

    if job.parallel_frames and job.threads > 1:
        tasks = [(lambda i=i: render_one(i, True)) for i in range(len(times))]
        _run_tasks(tasks, job.threads)
    else:
        for i in range(len(times)):
            render_one(i, False)
    return paths


def _with_threads(job: RenderJob, threads: int) -> RenderJob:
    from dataclasses import replace
    return replace(job, threads=threads)
