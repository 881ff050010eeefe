"""Time deformation of a canonical Gaussian scene.

Two deformation sources are supported: forward evaluation of a hexplane
field (six multi-resolution 2D feature grids over coordinate pairs of
(x, y, z, t), fused by an MLP and decoded by per-attribute residual heads)
and explicit keyframe tracks with piecewise-linear interpolation. In both
cases residuals are added to mean, rotation and scale; opacity and SH
coefficients are untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, SceneValidationError
from .scene import SceneSnapshot

PLANE_PAIRS = ("xy", "xz", "yz", "xt", "yt", "zt")
# coordinate index per axis letter; "t" is handled separately
_AXIS = {"x": 0, "y": 1, "z": 2}

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class Mlp:
    """Dense layers with ReLU hidden activations and a linear output layer."""

    weights: tuple[np.ndarray, ...]  # each (out, in), row-major
    biases: tuple[np.ndarray, ...]   # each (out,)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidParameterError("mlp needs matching weight/bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidParameterError(f"mlp layer {i} has inconsistent shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidParameterError(
                    f"mlp layer {i} input width {w.shape[1]} does not match "
                    f"previous output width {self.weights[i - 1].shape[0]}")

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (..., in_width) -> (..., out_width)."""
        if x.shape[-1] != self.in_width:
            raise InvalidParameterError(
                f"mlp input width {x.shape[-1]}, expected {self.in_width}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h


@dataclass(frozen=True)
class HexPlaneField:
    """Hexplane feature grids plus fuse and residual-head MLPs."""

    planes: dict[str, tuple[np.ndarray, ...]]  # pair -> one (h, lN, lN) grid per level
    feature_dim: int
    levels: tuple[int, ...]
    base_resolution: int
    bounds_min: np.ndarray  # (3,)
    bounds_max: np.ndarray  # (3,)
    fuse_mlp: Mlp
    head_mean: Mlp
    head_rotation: Mlp
    head_scale: Mlp

    def __post_init__(self):
        if set(self.planes) != set(PLANE_PAIRS):
            raise SceneValidationError(
                f"hexplane needs exactly the six planes {PLANE_PAIRS}")
        h, n = self.feature_dim, self.base_resolution
        for pair in PLANE_PAIRS:
            grids = self.planes[pair]
            if len(grids) != len(self.levels):
                raise SceneValidationError(f"plane {pair} missing levels")
            for lvl, grid in zip(self.levels, grids):
                if grid.shape != (h, lvl * n, lvl * n):
                    raise SceneValidationError(
                        f"plane {pair} level {lvl} has shape {grid.shape}, "
                        f"expected {(h, lvl * n, lvl * n)}")
        if np.any(self.bounds_max <= self.bounds_min):
            raise SceneValidationError("hexplane bounds must satisfy min < max per axis")
        if self.fuse_mlp.in_width != h * len(self.levels):
            raise SceneValidationError(
                f"fuse mlp input width {self.fuse_mlp.in_width} != "
                f"feature_dim * levels = {h * len(self.levels)}")
        f = self.fuse_mlp.out_width
        for name, head, out in (("mean", self.head_mean, 3),
                                ("rotation", self.head_rotation, 4),
                                ("scale", self.head_scale, 3)):
            if head.in_width != f:
                raise SceneValidationError(
                    f"{name} head input width {head.in_width} != fused width {f}")
            if head.out_width != out:
                raise SceneValidationError(
                    f"{name} head output width {head.out_width}, expected {out}")


@dataclass(frozen=True)
class KeyframeTrack:
    """Per-gaussian deformation deltas at sorted keyframe times."""

    times: np.ndarray        # (K,) strictly increasing, within [0, 1]
    mean_deltas: np.ndarray  # (K, N, 3)
    rot_deltas: np.ndarray   # (K, N, 4)
    scale_deltas: np.ndarray  # (K, N, 3)

    def __post_init__(self):
        t = self.times
        if t.ndim != 1 or len(t) == 0:
            raise SceneValidationError("keyframe track needs at least one time")
        if np.any(t < 0.0) or np.any(t > 1.0) or np.any(np.diff(t) <= 0.0):
            raise SceneValidationError("keyframe times must be strictly increasing in [0, 1]")
        k = len(t)
        n = self.mean_deltas.shape[1] if self.mean_deltas.ndim == 3 else -1
        if (self.mean_deltas.shape != (k, n, 3) or self.rot_deltas.shape != (k, n, 4)
                or self.scale_deltas.shape != (k, n, 3)):
            raise SceneValidationError("keyframe delta arrays have inconsistent shapes")

    @property
    def num_gaussians(self) -> int:
        return self.mean_deltas.shape[1]

    def deltas_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Piecewise-linear deltas at time t, held constant outside the key range."""
        times = self.times
        if t <= times[0]:
            k0 = k1 = 0
            w = 0.0
        elif t >= times[-1]:
            k0 = k1 = len(times) - 1
            w = 0.0
        else:
            k1 = int(np.searchsorted(times, t, side="right"))
            k0 = k1 - 1
            w = (t - times[k0]) / (times[k1] - times[k0])
        return ((1.0 - w) * self.mean_deltas[k0] + w * self.mean_deltas[k1],
                (1.0 - w) * self.rot_deltas[k0] + w * self.rot_deltas[k1],
                (1.0 - w) * self.scale_deltas[k0] + w * self.scale_deltas[k1])


def interp_plane_batch(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup on one (h, H, W) grid; u indexes rows, v columns.

    Coordinates are align-corners: u = i/(H-1) returns row i exactly.
    """
    h, rows, cols = plane.shape
    gu = u * (rows - 1)
    gv = v * (cols - 1)
    i0 = np.minimum(gu.astype(np.int64), max(rows - 2, 0))
    j0 = np.minimum(gv.astype(np.int64), max(cols - 2, 0))
    fu = gu - i0
    fv = gv - j0
    i1 = np.minimum(i0 + 1, rows - 1)
    j1 = np.minimum(j0 + 1, cols - 1)
    p00 = plane[:, i0, j0]
    p01 = plane[:, i0, j1]
    p10 = plane[:, i1, j0]
    p11 = plane[:, i1, j1]
    out = (p00 * ((1.0 - fu) * (1.0 - fv)) + p01 * ((1.0 - fu) * fv)
           + p10 * (fu * (1.0 - fv)) + p11 * (fu * fv))
    return out.T  # (M, h)


def interp_plane(plane: np.ndarray, u: float, v: float) -> np.ndarray:
    """Single bilinear lookup; raises for coordinates outside [0, 1]."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 3 or plane.shape[1] < 1 or plane.shape[2] < 1:
        raise InvalidParameterError(f"plane must be (h, rows, cols), got {plane.shape}")
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise InvalidParameterError(f"grid coordinates ({u}, {v}) outside [0, 1]")
    return interp_plane_batch(plane, np.array([u]), np.array([v]))[0]


def _normalized_coords(field: HexPlaneField, positions: np.ndarray) -> np.ndarray:
    span = field.bounds_max - field.bounds_min
    return np.clip((positions - field.bounds_min) / span, 0.0, 1.0)


def hexplane_features(field: HexPlaneField, positions: np.ndarray,
                      t: float) -> np.ndarray:
    """Pre-MLP spatio-temporal features f_h for a batch of positions, (M, h*L).

    Per level the six interpolated plane features are multiplied elementwise;
    levels are concatenated in declaration order.
    """
    coords = _normalized_coords(field, positions)
    tq = np.full(coords.shape[0], np.clip(t, 0.0, 1.0))
    chunks = []
    for li in range(len(field.levels)):
        prod = None
        for pair in PLANE_PAIRS:
            a, b = pair
            u = coords[:, _AXIS[a]]
            v = tq if b == "t" else coords[:, _AXIS[b]]
            feat = interp_plane_batch(field.planes[pair][li], u, v)
            prod = feat if prod is None else prod * feat
        chunks.append(prod)
    return np.concatenate(chunks, axis=1)


def encode_spacetime_batch(field: HexPlaneField, positions: np.ndarray,
                           t: float) -> np.ndarray:
    """Fused feature f = phi(f_h) for a batch of positions."""
    return field.fuse_mlp.forward(hexplane_features(field, positions, t))


def encode_spacetime(field: HexPlaneField, position: np.ndarray, t: float) -> np.ndarray:
    """Fused spatio-temporal feature for one position; out-of-bounds clamps."""
    position = np.asarray(position, dtype=np.float64).reshape(3)
    return encode_spacetime_batch(field, position[np.newaxis, :], t)[0]


def decode_residuals_batch(f: np.ndarray, head_mean: Mlp, head_rotation: Mlp,
                           head_scale: Mlp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return head_mean.forward(f), head_rotation.forward(f), head_scale.forward(f)


def decode_residuals(f: np.ndarray, heads: tuple[Mlp, Mlp, Mlp]):
    """(Δmean, Δrotation, Δscale) for one fused feature vector."""
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    dm, dr, ds = decode_residuals_batch(f, *heads)
    return dm[0], dr[0], ds[0]


def _apply_residuals(canonical: SceneSnapshot, dmean, drot, dscale,
                     t: float) -> SceneSnapshot:
    if not (np.any(dmean) or np.any(drot) or np.any(dscale)):
        # zero residuals must not perturb parameters, not even by one ulp of
        # quaternion renormalization
        return SceneSnapshot(canonical.means, canonical.rotations, canonical.scales,
                             canonical.opacities, canonical.sh, float(t),
                             canonical.sh_degree)
    means = canonical.means + dmean
    quats = canonical.rotations + drot
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    # a residual that exactly cancels the quaternion has no meaningful
    # direction; keep the canonical rotation there
    degenerate = norms[:, 0] < 1e-12
    quats = np.where(degenerate[:, np.newaxis], canonical.rotations, quats / np.maximum(norms, 1e-12))
    scales = np.maximum(canonical.scales + dscale, SCALE_FLOOR)
    return SceneSnapshot.from_arrays(means, quats, scales, canonical.opacities,
                                     canonical.sh, time=t,
                                     sh_degree=canonical.sh_degree, validate=False)


def deform_snapshot(canonical: SceneSnapshot,
                    deformation: HexPlaneField | KeyframeTrack | None,
                    t: float) -> SceneSnapshot:
    """Deformed snapshot at normalized time t; `None` returns the canonical set."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"time {t} outside [0, 1]")
    if deformation is None:
        return canonical
    if isinstance(deformation, KeyframeTrack):
        if deformation.num_gaussians != len(canonical):
            raise SceneValidationError(
                f"keyframe track covers {deformation.num_gaussians} gaussians, "
                f"scene has {len(canonical)}")
        dm, dr, ds = deformation.deltas_at(t)
        return _apply_residuals(canonical, dm, dr, ds, t)
    if isinstance(deformation, HexPlaneField):
        f = encode_spacetime_batch(deformation, canonical.means, t)
        dm, dr, ds = decode_residuals_batch(f, deformation.head_mean,
                                            deformation.head_rotation,
                                            deformation.head_scale)
        return _apply_residuals(canonical, dm, dr, ds, t)
    raise InvalidParameterError(f"unknown deformation type {type(deformation)!r}")
