"""Primary-ray generation for the supported camera models.

Conventions: the camera looks down -z in camera space with +x right and +y
up; `orientation` is the camera-to-world unit quaternion. Pixel (i, j) is
column i, row j with row 0 at the top; a jitter (u, v) in [0, 1)^2 selects
the sample point inside the pixel, (0.5, 0.5) being the center. Pixels map
to physical sensor millimeters with the principal point at the sensor
center.

Scalar operations delegate to the vectorized `*_directions` helpers so a
single ray and a full frame batch produce bit-identical values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidLensError, InvalidParameterError, SceneValidationError
from .scene import rotation_matrices
from .tracer import Ray

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray     # (3,)
    orientation: np.ndarray  # (4,) unit quaternion, camera-to-world

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-6:
            raise InvalidParameterError(f"pose orientation not unit norm: |q| = {norm}")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrices(self.orientation)


@dataclass(frozen=True)
class SensorSpec:
    width_px: int
    height_px: int
    sensor_width_mm: float
    sensor_height_mm: float
    focal_length_mm: float | None = None  # pinhole/DoF/rolling only

    def validate(self) -> None:
        if self.width_px < 1 or self.height_px < 1:
            raise InvalidParameterError("sensor pixel counts must be positive")
        if self.sensor_width_mm <= 0 or self.sensor_height_mm <= 0:
            raise InvalidParameterError("sensor dimensions must be positive")
        if self.focal_length_mm is not None and self.focal_length_mm <= 0:
            raise InvalidParameterError("focal length must be positive")
        pitch_x = self.sensor_width_mm / self.width_px
        pitch_y = self.sensor_height_mm / self.height_px
        if abs(pitch_x - pitch_y) > 1e-9:
            raise InvalidParameterError(
                f"pixel aspect must match sensor aspect (pitches {pitch_x} vs {pitch_y})")

    def require_focal(self) -> float:
        if self.focal_length_mm is None:
            raise InvalidParameterError("this camera model needs focal_length_mm")
        return self.focal_length_mm


@dataclass(frozen=True)
class FisheyeParams:
    """theta = k0 + k1 r + k2 r^2 + k3 r^3 + k4 r^4, r in sensor millimeters."""

    k: np.ndarray  # (5,)

    def theta(self, r):
        k = self.k
        return k[0] + r * (k[1] + r * (k[2] + r * (k[3] + r * k[4])))

    def validate(self, sensor: SensorSpec, samples: int = 4097) -> None:
        """Reject lenses whose polar angle is not strictly increasing on the sensor."""
        if self.k.shape != (5,) or not np.all(np.isfinite(self.k)):
            raise InvalidLensError("fisheye needs five finite coefficients")
        r_max = float(np.hypot(sensor.sensor_width_mm, sensor.sensor_height_mm)) / 2.0
        theta = self.theta(np.linspace(0.0, r_max, samples))
        if not np.all(np.diff(theta) > 0.0):
            raise InvalidLensError(
                "fisheye polynomial folds: theta(r) must be strictly increasing "
                f"on [0, {r_max}] mm")


@dataclass(frozen=True)
class DofParams:
    focus_distance: float      # along the pinhole ray, world units
    aperture_radius: float     # world units
    samples_per_pixel: int
    rng_seed: int

    def validate(self) -> None:
        if self.focus_distance <= 0:
            raise InvalidParameterError("focus distance must be positive")
        if self.aperture_radius < 0:
            raise InvalidParameterError("aperture radius must be non-negative")
        if self.samples_per_pixel < 1:
            raise InvalidParameterError("samples per pixel must be positive")


@dataclass(frozen=True)
class RollingShutterParams:
    readout_time: float   # seconds to scan all rows
    frame_time: float     # normalized scene time of row 0
    time_scale: float     # seconds per unit of scene time
    chunk_rows: int       # N_c

    def validate(self) -> None:
        if self.readout_time <= 0 or self.time_scale <= 0:
            raise InvalidParameterError("readout_time and time_scale must be positive")
        if self.chunk_rows < 1:
            raise InvalidParameterError("chunk_rows must be >= 1")


Effect = FisheyeParams | DofParams | RollingShutterParams | None


@dataclass(frozen=True)
class CameraRig:
    pose: CameraPose
    sensor: SensorSpec
    effect: Effect = None  # None renders an ideal pinhole

    @property
    def kind(self) -> str:
        if self.effect is None:
            return "pinhole"
        return {FisheyeParams: "fisheye", DofParams: "dof",
                RollingShutterParams: "rolling"}[type(self.effect)]


def sensor_mm(sensor: SensorSpec, px_i, px_j, jitter=(0.5, 0.5)):
    """Pixel sample positions to sensor millimeters, +x right, +y up."""
    x = ((px_i + jitter[0]) / sensor.width_px - 0.5) * sensor.sensor_width_mm
    y = (0.5 - (px_j + jitter[1]) / sensor.height_px) * sensor.sensor_height_mm
    return x, y


def _to_world(pose: CameraPose, dx, dy, dz):
    """Rotate camera-space components into world space, (...,) each -> (..., 3)."""
    r = pose.rotation
    return np.stack([r[0, 0] * dx + r[0, 1] * dy + r[0, 2] * dz,
                     r[1, 0] * dx + r[1, 1] * dy + r[1, 2] * dz,
                     r[2, 0] * dx + r[2, 1] * dy + r[2, 2] * dz], axis=-1)


def _normalized(dx, dy, dz):
    n = np.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n


def pinhole_directions(pose: CameraPose, sensor: SensorSpec, px_i, px_j,
                       jitter=(0.5, 0.5)) -> np.ndarray:
    """World-space unit directions through the sensor sample points, (..., 3)."""
    focal = sensor.require_focal()
    x, y = sensor_mm(sensor, np.asarray(px_i, dtype=np.float64),
                     np.asarray(px_j, dtype=np.float64), jitter)
    dx, dy, dz = _normalized(x, y, np.full_like(x, -focal))
    return _to_world(pose, dx, dy, dz)


def fisheye_directions(pose: CameraPose, sensor: SensorSpec, fisheye: FisheyeParams,
                       px_i, px_j, jitter=(0.5, 0.5)):
    """World directions plus a validity mask (False where theta leaves (0, pi]).

    The principal point itself (r = 0 with theta = 0) is valid and maps to
    the camera forward axis.
    """
    x, y = sensor_mm(sensor, np.asarray(px_i, dtype=np.float64),
                     np.asarray(px_j, dtype=np.float64), jitter)
    r = np.sqrt(x * x + y * y)
    theta = fisheye.theta(r)
    valid = (theta >= 0.0) & (theta <= np.pi)
    phi = np.arctan2(y, x)
    sin_t = np.sin(theta)
    dirs = _to_world(pose, sin_t * np.cos(phi), sin_t * np.sin(phi), -np.cos(theta))
    return dirs, valid


def pinhole_ray(pose: CameraPose, sensor: SensorSpec, pixel: tuple[int, int],
                jitter: tuple[float, float] = (0.5, 0.5)) -> Ray:
    _check_pixel(sensor, pixel)
    d = pinhole_directions(pose, sensor, np.array([pixel[0]]), np.array([pixel[1]]),
                           jitter)[0]
    return Ray(np.asarray(pose.position, dtype=np.float64), d)


def fisheye_ray(pose: CameraPose, sensor: SensorSpec, fisheye: FisheyeParams,
                pixel: tuple[int, int],
                jitter: tuple[float, float] = (0.5, 0.5)) -> Ray | None:
    _check_pixel(sensor, pixel)
    fisheye.validate(sensor)
    d, valid = fisheye_directions(pose, sensor, fisheye,
                                  np.array([pixel[0]]), np.array([pixel[1]]), jitter)
    if not valid[0]:
        return None
    return Ray(np.asarray(pose.position, dtype=np.float64), d[0])


def _check_pixel(sensor: SensorSpec, pixel) -> None:
    i, j = pixel
    if not (0 <= i < sensor.width_px and 0 <= j < sensor.height_px):
        raise InvalidParameterError(
            f"pixel {pixel} outside {sensor.width_px}x{sensor.height_px} sensor")


_U64_MASK = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (x + _GOLDEN).astype(_U64)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D4A2C62ED4D1D3)
    return z ^ (z >> _U64(31))


def _splitmix64_int(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _U64_MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D4A2C62ED4D1D3) & _U64_MASK
    return z ^ (z >> 31)


def _hash_uniform(seed: int, counter: np.ndarray, lane: int) -> np.ndarray:
    """Counter-based uniform in [0, 1): same key -> same value, any order."""
    key = _U64(_splitmix64_int(seed & _U64_MASK))
    h = _splitmix64(key ^ _splitmix64(counter.astype(_U64) * _U64(2) + _U64(lane)))
    return (h >> _U64(11)).astype(np.float64) * (2.0 ** -53)


def aperture_samples(dof: DofParams, sensor: SensorSpec, px_i, px_j,
                     sample_index) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic lens-disk offsets for (seed, pixel, sample) keys.

    Uses the concentric square-to-disk map over counter-based hashes, so the
    distribution is uniform on the aperture disk and reproducible under any
    evaluation order or batching.
    """
    px_i = np.asarray(px_i, dtype=np.int64)
    px_j = np.asarray(px_j, dtype=np.int64)
    sample_index = np.asarray(sample_index, dtype=np.int64)
    counter = ((px_j * sensor.width_px + px_i) * dof.samples_per_pixel
               + sample_index).astype(_U64)
    a = 2.0 * _hash_uniform(dof.rng_seed, counter, 0) - 1.0
    b = 2.0 * _hash_uniform(dof.rng_seed, counter, 1) - 1.0
    use_a = np.abs(a) > np.abs(b)
    r = np.where(use_a, a, b)
    safe_a = np.where(a == 0.0, 1.0, a)
    safe_b = np.where(b == 0.0, 1.0, b)
    phi = np.where(use_a, (np.pi / 4.0) * (b / safe_a),
                   (np.pi / 2.0) - (np.pi / 4.0) * (a / safe_b))
    phi = np.where((a == 0.0) & (b == 0.0), 0.0, phi)
    lx = dof.aperture_radius * r * np.cos(phi)
    ly = dof.aperture_radius * r * np.sin(phi)
    return lx, ly


def dof_rays(pose: CameraPose, sensor: SensorSpec, dof: DofParams, px_i, px_j,
             sample_index):
    """Thin-lens rays: jittered origins on the aperture, refocused at f_z.

    A zero aperture degenerates to the exact pinhole rays.
    """
    d = pinhole_directions(pose, sensor, px_i, px_j)
    o = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), d.shape)
    if dof.aperture_radius == 0.0:
        return np.array(o), d
    p = o + dof.focus_distance * d
    r = pose.rotation
    lx, ly = aperture_samples(dof, sensor, px_i, px_j, sample_index)
    origins = o + lx[..., np.newaxis] * r[:, 0] + ly[..., np.newaxis] * r[:, 1]
    rel = p - origins
    dx, dy, dz = _normalized(rel[..., 0], rel[..., 1], rel[..., 2])
    return origins, np.stack([dx, dy, dz], axis=-1)


def dof_sample_ray(pose: CameraPose, sensor: SensorSpec, dof: DofParams,
                   pixel: tuple[int, int], sample_index: int) -> Ray:
    _check_pixel(sensor, pixel)
    dof.validate()
    if not 0 <= sample_index < dof.samples_per_pixel:
        raise InvalidParameterError(
            f"sample index {sample_index} outside [0, {dof.samples_per_pixel})")
    o, d = dof_rays(pose, sensor, dof, np.array([pixel[0]]), np.array([pixel[1]]),
                    np.array([sample_index]))
    return Ray(o[0], d[0])


def row_sensing_time(rs: RollingShutterParams, row: int, height: int) -> float:
    """Normalized scene time at which a sensor row is captured."""
    if not 0 <= row < height:
        raise InvalidParameterError(f"row {row} outside [0, {height})")
    return row_sensing_times(rs, np.array([row]), height)[0]


def row_sensing_times(rs: RollingShutterParams, rows: np.ndarray, height: int) -> np.ndarray:
    t = rs.frame_time + (rows / height) * rs.readout_time / rs.time_scale
    return np.clip(t, 0.0, 1.0)


@dataclass(frozen=True)
class RowChunk:
    row_start: int
    row_stop: int   # exclusive
    time: float     # mean sensing time of the rows in the chunk


def chunk_schedule(rs: RollingShutterParams, height: int) -> list[RowChunk]:
    """Contiguous chunks of N_c rows, each at the mean of its rows' times."""
    if height < 1:
        raise InvalidParameterError("height must be >= 1")
    chunks = []
    for start in range(0, height, rs.chunk_rows):
        stop = min(start + rs.chunk_rows, height)
        times = row_sensing_times(rs, np.arange(start, stop), height)
        chunks.append(RowChunk(start, stop, float(np.mean(times))))
    return chunks


def load_camera(path: str | Path) -> CameraRig:
    """Parse a camera config file; validates pose, sensor, and effect."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneValidationError(f"{path}: not valid JSON: {exc}") from exc
    return camera_from_json(doc, where=str(path))


def camera_from_json(doc: dict, where: str = "camera config") -> CameraRig:
    try:
        pose = CameraPose(np.asarray(doc["pose"]["position"], dtype=np.float64),
                          np.asarray(doc["pose"]["orientation"], dtype=np.float64))
        s = doc["sensor"]
        sensor = SensorSpec(int(s["width_px"]), int(s["height_px"]),
                            float(s["sensor_width_mm"]), float(s["sensor_height_mm"]),
                            float(s["focal_length_mm"]) if "focal_length_mm" in s else None)
        e = doc.get("effect", {"kind": "pinhole"})
        kind = e["kind"]
    except (KeyError, TypeError) as exc:
        raise SceneValidationError(f"{where}: malformed camera config: {exc}") from exc
    pose.validate()
    sensor.validate()
    effect: Effect
    if kind == "pinhole":
        sensor.require_focal()
        effect = None
    elif kind == "fisheye":
        effect = FisheyeParams(np.asarray(e["k"], dtype=np.float64))
        effect.validate(sensor)
    elif kind == "dof":
        effect = DofParams(float(e["focus_distance"]), float(e["aperture_radius"]),
                           int(e.get("samples_per_pixel", 16)), int(e.get("rng_seed", 0)))
        effect.validate()
        sensor.require_focal()
    elif kind == "rolling":
        effect = RollingShutterParams(float(e["readout_time"]),
                                      float(e.get("frame_time", 0.0)),
                                      float(e["time_scale"]), int(e.get("chunk_rows", 4)))
        effect.validate()
        sensor.require_focal()
    else:
        raise SceneValidationError(f"{where}: unknown effect kind {kind!r}")
    return CameraRig(pose, sensor, effect)


def camera_to_json(rig: CameraRig) -> dict:
    sensor: dict = {"width_px": rig.sensor.width_px, "height_px": rig.sensor.height_px,
                    "sensor_width_mm": rig.sensor.sensor_width_mm,
                    "sensor_height_mm": rig.sensor.sensor_height_mm}
    if rig.sensor.focal_length_mm is not None:
        sensor["focal_length_mm"] = rig.sensor.focal_length_mm
    effect: dict = {"kind": rig.kind}
    e = rig.effect
    if isinstance(e, FisheyeParams):
        effect["k"] = e.k.tolist()
    elif isinstance(e, DofParams):
        effect.update(focus_distance=e.focus_distance, aperture_radius=e.aperture_radius,
                      samples_per_pixel=e.samples_per_pixel, rng_seed=e.rng_seed)
    elif isinstance(e, RollingShutterParams):
        effect.update(readout_time=e.readout_time, frame_time=e.frame_time,
                      time_scale=e.time_scale, chunk_rows=e.chunk_rows)
    return {"pose": {"position": np.asarray(rig.pose.position).tolist(),
                     "orientation": np.asarray(rig.pose.orientation).tolist()},
            "sensor": sensor, "effect": effect}
