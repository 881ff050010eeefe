"""Gaussian primitives, scene snapshots, covariance and SH color evaluation.

A scene is a set of anisotropic 3D Gaussians, each carrying a mean, a unit
quaternion rotation, per-axis standard deviations, an opacity in [0, 1] and
real spherical-harmonic color coefficients up to degree 3. Snapshots store
the parameters as flat arrays (structure-of-arrays) so the tracer and the
fitter can work on them vectorized; `Gaussian` is the record-level view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, SceneValidationError

QUAT_UNIT_TOL = 1e-6
VALID_SH_COUNTS = {1: 0, 4: 1, 9: 2, 16: 3}

# Real SH basis constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def _as_float_array(x, shape, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidParameterError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic Gaussian primitive."""

    mean: np.ndarray          # (3,) world units
    rotation: np.ndarray      # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray         # (3,) positive standard deviations
    opacity: float            # in [0, 1]
    sh_coeffs: np.ndarray     # (B, 3), B = (degree+1)^2

    def validate(self, sh_degree: int, index: int | None = None) -> None:
        where = "" if index is None else f" (gaussian {index})"
        if not np.all(np.isfinite(self.mean)):
            raise SceneValidationError(f"non-finite mean{where}")
        norm = float(np.linalg.norm(self.rotation))
        if not np.isfinite(norm) or abs(norm - 1.0) > QUAT_UNIT_TOL:
            raise SceneValidationError(f"rotation not unit norm{where}: |q| = {norm}")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0.0):
            raise SceneValidationError(f"scale must be strictly positive{where}")
        if not np.isfinite(self.opacity) or not 0.0 <= self.opacity <= 1.0:
            raise SceneValidationError(f"opacity outside [0, 1]{where}: {self.opacity}")
        expected = (sh_degree + 1) ** 2
        if self.sh_coeffs.shape != (expected, 3):
            raise SceneValidationError(
                f"sh coefficient shape {self.sh_coeffs.shape} does not match "
                f"degree {sh_degree} (expected ({expected}, 3)){where}")
        if not np.all(np.isfinite(self.sh_coeffs)):
            raise SceneValidationError(f"non-finite sh coefficients{where}")


@dataclass(frozen=True)
class SceneSnapshot:
    """All Gaussians at one normalized time, stored as flat arrays."""

    means: np.ndarray       # (N, 3)
    rotations: np.ndarray   # (N, 4) unit quaternions
    scales: np.ndarray      # (N, 3)
    opacities: np.ndarray   # (N,)
    sh: np.ndarray          # (N, B, 3)
    time: float = 0.0
    sh_degree: int = field(default=0)

    def __post_init__(self):
        for arr in (self.means, self.rotations, self.scales, self.opacities, self.sh):
            arr.flags.writeable = False

    @classmethod
    def from_arrays(cls, means, rotations, scales, opacities, sh, time=0.0,
                    sh_degree=None, validate=True) -> "SceneSnapshot":
        means = np.ascontiguousarray(means, dtype=np.float64)
        rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        scales = np.ascontiguousarray(scales, dtype=np.float64)
        opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        sh = np.ascontiguousarray(sh, dtype=np.float64)
        if sh_degree is None:
            if sh.ndim != 3 or sh.shape[2] != 3 or sh.shape[1] not in VALID_SH_COUNTS:
                raise SceneValidationError(f"sh array has invalid shape {sh.shape}")
            sh_degree = VALID_SH_COUNTS[sh.shape[1]]
        snap = cls(means.copy(), rotations.copy(), scales.copy(), opacities.copy(),
                   sh.copy(), float(time), int(sh_degree))
        if validate:
            snap.validate()
        return snap

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], time: float,
                       sh_degree: int) -> "SceneSnapshot":
        if not gaussians:
            raise SceneValidationError("scene must contain at least one gaussian")
        return cls.from_arrays(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.sh_coeffs for g in gaussians]),
            time=time, sh_degree=sh_degree)

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise SceneValidationError("scene must contain at least one gaussian")
        if not 0.0 <= self.time <= 1.0:
            raise SceneValidationError(f"snapshot time {self.time} outside [0, 1]")
        if self.sh_degree not in (0, 1, 2, 3):
            raise SceneValidationError(f"sh_degree {self.sh_degree} outside [0, 3]")
        nbands = (self.sh_degree + 1) ** 2
        for name, arr, shape in (("mean", self.means, (n, 3)),
                                 ("rotation", self.rotations, (n, 4)),
                                 ("scale", self.scales, (n, 3)),
                                 ("opacity", self.opacities, (n,)),
                                 ("sh", self.sh, (n, nbands, 3))):
            if arr.shape != shape:
                raise SceneValidationError(
                    f"field {name!r} has shape {arr.shape}, expected {shape}")
            finite = np.isfinite(arr).reshape(n, -1).all(axis=1)
            if not finite.all():
                raise SceneValidationError(
                    f"non-finite field {name!r} at gaussian {int(np.argmin(finite))}")
        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.abs(norms - 1.0) > QUAT_UNIT_TOL
        if bad.any():
            i = int(np.argmax(bad))
            raise SceneValidationError(
                f"field 'rotation' not unit norm at gaussian {i}: |q| = {norms[i]}")
        bad = (self.scales <= 0.0).any(axis=1)
        if bad.any():
            raise SceneValidationError(
                f"field 'scale' must be strictly positive at gaussian {int(np.argmax(bad))}")
        bad = (self.opacities < 0.0) | (self.opacities > 1.0)
        if bad.any():
            raise SceneValidationError(
                f"field 'opacity' outside [0, 1] at gaussian {int(np.argmax(bad))}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.rotations[i], self.scales[i],
                        float(self.opacities[i]), self.sh[i])

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self.gaussian(i) for i in range(len(self))]


def rotation_matrices(quats: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def covariance_from_params(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Covariance R S S^T R^T from a unit quaternion and per-axis std deviations.

    The eigenvalues of the result are the squared scale components.
    """
    rotation = _as_float_array(rotation, (4,), "rotation")
    scale = _as_float_array(scale, (3,), "scale")
    if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(scale)):
        raise InvalidParameterError("rotation and scale must be finite")
    if np.any(scale <= 0.0):
        raise InvalidParameterError("scale components must be strictly positive")
    norm = float(np.linalg.norm(rotation))
    if abs(norm - 1.0) > QUAT_UNIT_TOL:
        raise InvalidParameterError(f"rotation must be unit norm, |q| = {norm}")
    r = rotation_matrices(rotation)
    cov = (r * scale[np.newaxis, :] ** 2) @ r.T
    return 0.5 * (cov + cov.T)  # symmetrize away rounding drift


def sh_basis(view_dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, (..., 3) -> (..., (degree+1)^2)."""
    d = np.asarray(view_dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    nbands = (degree + 1) ** 2
    out = np.empty(d.shape[:-1] + (nbands,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_eval_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients: 0.5 + basis.sh, clamped to [0, 1]."""
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != 3 or coeffs.shape[0] not in VALID_SH_COUNTS:
        raise InvalidParameterError(
            f"sh coefficient count must be in {sorted(VALID_SH_COUNTS)} x 3, got {coeffs.shape}")
    view_dir = _as_float_array(view_dir, (3,), "view_dir")
    norm = float(np.linalg.norm(view_dir))
    if abs(norm - 1.0) > QUAT_UNIT_TOL:
        raise InvalidParameterError(f"view_dir must be unit norm, |d| = {norm}")
    degree = VALID_SH_COUNTS[coeffs.shape[0]]
    basis = sh_basis(view_dir, degree)
    return np.clip(0.5 + basis @ coeffs, 0.0, 1.0)
