"""Gradient-based fitting of Gaussian parameters to reference images.

The loss is the mean absolute error between a traced render and the
reference. Gradients flow analytically through the compositing sum
C = sum_i T_i a_i c_i + T_final * bg: for hit i,

    dL/dc_i = dC * T_i a_i
    dL/da_i = dC . (T_i c_i - S_i / (1 - a_i)),   S_i = suffix radiance after i,

then through the peak response (envelope: the peak parameter t* needs no
derivative because dm/dt = 0 there), the Mahalanobis form, and the
whitening transform to mean, scale and rotation. Optimized parameters are
stored raw (scale as log, opacity as logit, rotation renormalized after
each step) and updated by Adam with per-group learning rates. Hits dropped
by the response cutoff in the forward pass get zero gradient, matching the
traced image exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cameras import (CameraRig, DofParams, FisheyeParams, RollingShutterParams,
                      chunk_schedule, dof_rays, fisheye_directions,
                      pinhole_directions)
from .deformation import (SCALE_FLOOR, HexPlaneField, KeyframeTrack,
                          deform_snapshot)
from .errors import InvalidParameterError, NumericalAbortError
from .images import ImageBuffer
from .scene import SceneSnapshot, rotation_matrices
from .tracer import ALPHA_MAX, Bvh, Ray, ScenePrep, TraceTape, prepare_scene, trace_rays

_LOGIT_EPS = 1e-9  # opacities are clamped inside (0, 1) before the logit


@dataclass(frozen=True)
class FitConfig:
    lr_mean: float = 1.6e-4
    lr_scale_log: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity_logit: float = 5e-2
    lr_sh: float = 2.5e-3
    iterations: int = 1000
    densify_interval: int = 0          # 0 disables densification
    densify_threshold: float = 2.5e-5
    densify_distance_scaling: bool = True
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01  # of the scene bbox diagonal
    split_scale_divisor: float = 1.6
    first_frame_only: bool = False      # stage 1: fit the canonical set at the earliest time
    rng_seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        for name in ("lr_mean", "lr_scale_log", "lr_rotation", "lr_opacity_logit", "lr_sh"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if self.iterations < 1:
            raise InvalidParameterError("iteration count must be >= 1")
        if self.densify_threshold <= 0:
            raise InvalidParameterError("densify threshold must be > 0")

    @classmethod
    def from_json(cls, path: str | Path) -> "FitConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise InvalidParameterError(f"unknown fit config keys: {sorted(unknown)}")
        if "background" in doc:
            doc["background"] = tuple(doc["background"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass
class ParamGradients:
    """Per-gaussian gradients in raw parameter space."""

    mean: np.ndarray            # (N, 3)
    scale_log: np.ndarray       # (N, 3)
    rotation: np.ndarray        # (N, 4)
    opacity_logit: np.ndarray   # (N,)
    sh: np.ndarray              # (N, B, 3)
    accum_mean_mag: np.ndarray  # (N,) accumulated mean-gradient magnitude

    @classmethod
    def zeros(cls, n: int, nbands: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros(n), np.zeros((n, nbands, 3)), np.zeros(n))


@dataclass
class _LinearGrads:
    """Gradients w.r.t. the post-activation snapshot parameters."""

    mean: np.ndarray      # (N, 3)
    scale: np.ndarray     # (N, 3)
    quat: np.ndarray      # (N, 4), w.r.t. the unit quaternion entries, unprojected
    opacity: np.ndarray   # (N,)
    sh: np.ndarray        # (N, B, 3)


@dataclass
class RawParams:
    """Optimizer-facing parameterization of a canonical scene."""

    means: np.ndarray           # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    quats: np.ndarray           # (N, 4), kept unit norm between steps
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, B, 3)
    sh_degree: int

    @classmethod
    def from_snapshot(cls, snap: SceneSnapshot) -> "RawParams":
        op = np.clip(snap.opacities, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
        return cls(snap.means.copy(), np.log(snap.scales),
                   snap.rotations.copy(), np.log(op / (1.0 - op)),
                   snap.sh.copy(), snap.sh_degree)

    def __len__(self) -> int:
        return self.means.shape[0]

    def to_snapshot(self, time: float = 0.0) -> SceneSnapshot:
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        return SceneSnapshot.from_arrays(
            self.means, self.quats / norms, np.exp(self.log_scales),
            1.0 / (1.0 + np.exp(-self.opacity_logits)), self.sh,
            time=time, sh_degree=self.sh_degree, validate=False)


def l1_loss(rendered, reference) -> float:
    """Mean absolute difference over all pixels and channels."""
    a = rendered.data if isinstance(rendered, ImageBuffer) else np.asarray(rendered)
    b = reference.data if isinstance(reference, ImageBuffer) else np.asarray(reference)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def l1_grad(rendered: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return np.sign(rendered - reference) / rendered.size


def backward_tape(prep: ScenePrep, tape: TraceTape, d_color: np.ndarray) -> _LinearGrads:
    """Accumulate per-gaussian gradients from one batch forward tape.

    d_color: (R, 3) upstream gradient of the traced radiance per ray.
    """
    snapshot = prep.snapshot
    n = len(snapshot)
    nbands = snapshot.sh.shape[1]
    grads = _LinearGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                         np.zeros(n), np.zeros((n, nbands, 3)))
    nrays, nslots = tape.slot_gauss.shape
    if nslots == 0 or nrays == 0:
        return grads
    act = tape.slot_active
    t_before = tape.slot_t_before
    alpha = np.where(act, tape.slot_alpha, 0.0)
    color = tape.slot_color
    weight = np.where(act, t_before * alpha, 0.0)

    # compositing adjoint needs the per-ray suffix structure, so this part
    # stays dense over slots
    contrib = weight[:, :, np.newaxis] * color
    prefix = np.cumsum(contrib, axis=1)
    total = prefix[:, -1, :]
    suffix = (total[:, np.newaxis, :] - prefix
              + tape.t_final[:, np.newaxis, np.newaxis] * tape.background)
    d_alpha = np.sum(d_color[:, np.newaxis, :]
                     * (t_before[:, :, np.newaxis] * color
                        - suffix / (1.0 - alpha)[:, :, np.newaxis]), axis=2)

    # everything below is per composited hit; gather those first
    rows, slots = np.nonzero(act)
    if rows.size == 0:
        return grads
    g = tape.slot_gauss[rows, slots]
    d_alpha = d_alpha[rows, slots]
    resp = tape.slot_resp[rows, slots]
    d_c = d_color[rows] * weight[rows, slots, np.newaxis]
    d_c = np.where(tape.slot_color_live[rows, slots], d_c, 0.0)

    opac = snapshot.opacities[g]
    d_alpha_pre = np.where(tape.slot_unclamped[rows, slots], d_alpha, 0.0)
    d_opacity = d_alpha_pre * resp
    d_resp = d_alpha_pre * opac
    d_m = d_resp * (-0.5 * resp)  # response = exp(-m / 2)

    x = tape.slot_x[rows, slots]
    w_vec = tape.slot_w[rows, slots]
    m_g = prep.whitening[g]                      # (K, 3, 3)
    s_g = snapshot.scales[g]                     # (K, 3)
    # mean: dm/dmu = -2 M^T x
    mtx = np.einsum("kab,ka->kb", m_g, x)
    d_mu = -2.0 * d_m[:, np.newaxis] * mtx
    # scale: dm/ds_a = -2 x_a^2 / s_a
    d_scale = d_m[:, np.newaxis] * (-2.0 * x * x) / s_g
    # rotation: dm/dR[b, a] = 2 w_b x_a / s_a, then chain through R(q)
    y = x / s_g
    dmat = 2.0 * d_m[:, np.newaxis, np.newaxis] * w_vec[:, :, np.newaxis] * y[:, np.newaxis, :]
    quat = snapshot.rotations[g]
    qw, qx, qy, qz = quat[..., 0], quat[..., 1], quat[..., 2], quat[..., 3]
    d00, d01, d02 = dmat[..., 0, 0], dmat[..., 0, 1], dmat[..., 0, 2]
    d10, d11, d12 = dmat[..., 1, 0], dmat[..., 1, 1], dmat[..., 1, 2]
    d20, d21, d22 = dmat[..., 2, 0], dmat[..., 2, 1], dmat[..., 2, 2]
    d_qw = 2.0 * (-qz * d01 + qy * d02 + qz * d10 - qx * d12 - qy * d20 + qx * d21)
    d_qx = 2.0 * (qy * d01 + qz * d02 + qy * d10 - 2.0 * qx * d11 - qw * d12
                  + qz * d20 + qw * d21 - 2.0 * qx * d22)
    d_qy = 2.0 * (-2.0 * qy * d00 + qx * d01 + qw * d02 + qx * d10 + qz * d12
                  - qw * d20 + qz * d21 - 2.0 * qy * d22)
    d_qz = 2.0 * (-2.0 * qz * d00 - qw * d01 + qx * d02 + qw * d10 - 2.0 * qz * d11
                  + qy * d12 + qx * d20 + qy * d21)
    d_quat = np.stack([d_qw, d_qx, d_qy, d_qz], axis=-1)

    np.add.at(grads.mean, g, d_mu)
    np.add.at(grads.scale, g, d_scale)
    np.add.at(grads.quat, g, d_quat)
    np.add.at(grads.opacity, g, d_opacity)
    d_sh = tape.basis[rows][:, :, np.newaxis] * d_c[:, np.newaxis, :]
    np.add.at(grads.sh, g, d_sh)
    return grads


def _project_quat(quats: np.ndarray, d_quat: np.ndarray) -> np.ndarray:
    """Gradient through q -> q/|q| evaluated at (near-)unit quaternions."""
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    unit = quats / norms
    inner = np.sum(unit * d_quat, axis=-1, keepdims=True)
    return (d_quat - unit * inner) / norms


def linear_to_raw(grads: _LinearGrads, snapshot: SceneSnapshot) -> ParamGradients:
    """Chain post-activation gradients to the snapshot's raw parameter space."""
    opac = snapshot.opacities
    return ParamGradients(
        mean=grads.mean,
        scale_log=grads.scale * snapshot.scales,
        rotation=_project_quat(snapshot.rotations, grads.quat),
        opacity_logit=grads.opacity * opac * (1.0 - opac),
        sh=grads.sh,
        accum_mean_mag=np.linalg.norm(grads.mean, axis=1))


def backprop_ray(ray: Ray, snapshot: SceneSnapshot, bvh: Bvh,
                 d_color: np.ndarray) -> ParamGradients:
    """Analytic gradients of one traced ray w.r.t. every raw scene parameter.

    Replays the forward trace deterministically, then runs the compositing
    adjoint. Gradients are expressed against the snapshot's raw space:
    mean, log-scale, quaternion (through renormalization), opacity logit
    and SH coefficients.
    """
    ray.validate()
    prep = bvh.prep
    _, _, tape = trace_rays(np.asarray(ray.origin, dtype=np.float64)[np.newaxis, :],
                            np.asarray(ray.direction, dtype=np.float64)[np.newaxis, :],
                            snapshot, prep=prep, with_tape=True,
                            t_min=ray.t_min, t_max=ray.t_max)
    linear = backward_tape(prep, tape, np.asarray(d_color, dtype=np.float64)[np.newaxis, :])
    return linear_to_raw(linear, snapshot)


@dataclass
class FitReference:
    image: ImageBuffer
    rig: CameraRig
    time: float = 0.0


@dataclass
class _Segment:
    """One traced batch of a reference render: rays, their pixels, a time."""

    origins: np.ndarray
    dirs: np.ndarray
    pixel_rows: np.ndarray  # flat pixel indices into the (H*W, 3) image
    time: float
    weight: float = 1.0     # contribution to the pixel estimate (1/spp for DoF)


def _reference_segments(ref: FitReference) -> list[_Segment]:
    rig = ref.rig
    sensor = rig.sensor
    width, height = sensor.width_px, sensor.height_px
    gi, gj = np.meshgrid(np.arange(width), np.arange(height))
    px_i, px_j = gi.ravel(), gj.ravel()
    flat = np.arange(width * height)
    effect = rig.effect
    if effect is None:
        dirs = pinhole_directions(rig.pose, sensor, px_i, px_j)
        origins = np.broadcast_to(rig.pose.position, dirs.shape)
        return [_Segment(origins, dirs, flat, ref.time)]
    if isinstance(effect, FisheyeParams):
        dirs, valid = fisheye_directions(rig.pose, sensor, effect, px_i, px_j)
        origins = np.broadcast_to(rig.pose.position, dirs[valid].shape)
        return [_Segment(origins, dirs[valid], flat[valid], ref.time)]
    if isinstance(effect, DofParams):
        segs = []
        for s in range(effect.samples_per_pixel):
            origins, dirs = dof_rays(rig.pose, sensor, effect, px_i, px_j,
                                     np.full(px_i.size, s))
            segs.append(_Segment(origins, dirs, flat, ref.time,
                                 weight=1.0 / effect.samples_per_pixel))
        return segs
    if isinstance(effect, RollingShutterParams):
        rs = RollingShutterParams(effect.readout_time, ref.time,
                                  effect.time_scale, effect.chunk_rows)
        segs = []
        for chunk in chunk_schedule(rs, height):
            rows = slice(chunk.row_start * width, chunk.row_stop * width)
            dirs = pinhole_directions(rig.pose, sensor, px_i[rows], px_j[rows])
            origins = np.broadcast_to(rig.pose.position, dirs.shape)
            segs.append(_Segment(origins, dirs, flat[rows], chunk.time))
        return segs
    raise InvalidParameterError(f"unsupported camera effect {type(effect)!r}")


def _chain_deformed_to_canonical(linear: _LinearGrads, raw: RawParams,
                                 canonical: SceneSnapshot, deformed: SceneSnapshot,
                                 residuals) -> ParamGradients:
    """Map gradients at the deformed snapshot back to raw canonical space.

    Deformation residuals are treated as constants (the field is fixed
    during fitting), so mean gradients pass through unchanged, scale
    gradients vanish where the positivity floor clamped, and rotation
    gradients chain through both renormalizations.
    """
    if residuals is None:
        return linear_to_raw(linear, deformed)
    _, d_rot, _ = residuals
    live = deformed.scales > SCALE_FLOOR
    scale_log = np.where(live, linear.scale, 0.0) * canonical.scales
    v = canonical.rotations + d_rot
    d_v = _project_quat(v, linear.quat)
    rotation = _project_quat(raw.quats, d_v)
    opac = deformed.opacities
    return ParamGradients(
        mean=linear.mean,
        scale_log=scale_log,
        rotation=rotation,
        opacity_logit=linear.opacity * opac * (1.0 - opac),
        sh=linear.sh,
        accum_mean_mag=np.linalg.norm(linear.mean, axis=1))


class _Adam:
    """Per-group Adam with bias correction; moments survive densification."""

    def __init__(self, cfg: FitConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        self.step_count += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p -= lrs[name] * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + eps)

    def remap(self, survivors: np.ndarray, n_new: int) -> None:
        """Keep moments of surviving rows, zero-init appended rows."""
        for name in self.m:
            kept_m = self.m[name][survivors]
            kept_v = self.v[name][survivors]
            pad = (n_new - kept_m.shape[0],) + kept_m.shape[1:]
            self.m[name] = np.concatenate([kept_m, np.zeros(pad)])
            self.v[name] = np.concatenate([kept_v, np.zeros(pad)])


def _densify_plan(scales: np.ndarray, opacities: np.ndarray, stat: np.ndarray,
                  bbox_diag: float, config: FitConfig):
    """Indices to keep / clone / split, given the densification statistic."""
    over = stat > config.densify_threshold
    split_thresh = config.split_scale_fraction * bbox_diag
    split = over & (scales.max(axis=1) > split_thresh)
    clone = over & ~split
    prune = opacities < config.prune_opacity
    keep = ~split & ~prune
    return np.nonzero(keep)[0], np.nonzero(clone & keep)[0], np.nonzero(split & ~prune)[0]


def densify_and_prune(scene: SceneSnapshot, gradients: ParamGradients,
                      camera_distances: np.ndarray | None,
                      config: FitConfig) -> SceneSnapshot:
    """Split/clone high-gradient gaussians and drop near-transparent ones.

    The densification statistic is the accumulated mean-gradient magnitude,
    optionally scaled linearly by each gaussian's distance from the camera.
    Large gaussians split into two children offset by half their largest
    axis with scales divided by the configured factor; small ones clone.
    """
    stat = gradients.accum_mean_mag
    if config.densify_distance_scaling and camera_distances is not None:
        stat = stat * camera_distances
    diag = float(np.linalg.norm(scene.means.max(axis=0) - scene.means.min(axis=0)))
    keep, clone, split = _densify_plan(scene.scales, scene.opacities, stat, diag, config)

    rot = rotation_matrices(scene.rotations[split])
    axis_idx = np.argmax(scene.scales[split], axis=1)
    axes = rot[np.arange(len(split)), :, axis_idx]
    offset = 0.5 * scene.scales[split].max(axis=1)[:, np.newaxis] * axes
    child_scales = scene.scales[split] / config.split_scale_divisor

    means = np.concatenate([scene.means[keep], scene.means[clone],
                            scene.means[split] + offset, scene.means[split] - offset])
    rotations = np.concatenate([scene.rotations[keep], scene.rotations[clone],
                                scene.rotations[split], scene.rotations[split]])
    scales = np.concatenate([scene.scales[keep], scene.scales[clone],
                             child_scales, child_scales])
    opacities = np.concatenate([scene.opacities[keep], scene.opacities[clone],
                                scene.opacities[split], scene.opacities[split]])
    sh = np.concatenate([scene.sh[keep], scene.sh[clone],
                         scene.sh[split], scene.sh[split]])
    if means.shape[0] == 0:
        # pruning must not empty the scene; keep the most opaque gaussian
        top = int(np.argmax(scene.opacities))
        return SceneSnapshot.from_arrays(scene.means[top:top + 1],
                                         scene.rotations[top:top + 1],
                                         scene.scales[top:top + 1],
                                         scene.opacities[top:top + 1],
                                         scene.sh[top:top + 1], time=scene.time,
                                         sh_degree=scene.sh_degree, validate=False)
    return SceneSnapshot.from_arrays(means, rotations, scales, opacities, sh,
                                     time=scene.time, sh_degree=scene.sh_degree,
                                     validate=False)


def _densify_raw(raw: RawParams, accum: np.ndarray, distances: np.ndarray | None,
                 config: FitConfig, adam: _Adam) -> tuple[RawParams, np.ndarray]:
    """In-optimizer densification on raw parameters; mirrors densify_and_prune."""
    stat = accum
    if config.densify_distance_scaling and distances is not None:
        stat = stat * distances
    scales = np.exp(raw.log_scales)
    opacities = 1.0 / (1.0 + np.exp(-raw.opacity_logits))
    diag = float(np.linalg.norm(raw.means.max(axis=0) - raw.means.min(axis=0)))
    keep, clone, split = _densify_plan(scales, opacities, stat, diag, config)

    norms = np.linalg.norm(raw.quats[split], axis=1, keepdims=True)
    rot = rotation_matrices(raw.quats[split] / norms)
    axis_idx = np.argmax(raw.log_scales[split], axis=1)
    axes = rot[np.arange(len(split)), :, axis_idx]
    offset = 0.5 * scales[split].max(axis=1)[:, np.newaxis] * axes
    child_log_scales = raw.log_scales[split] - np.log(config.split_scale_divisor)

    survivors = np.concatenate([keep, clone, split, split])
    means = np.concatenate([raw.means[keep], raw.means[clone],
                            raw.means[split] + offset, raw.means[split] - offset])
    log_scales = np.concatenate([raw.log_scales[keep], raw.log_scales[clone],
                                 child_log_scales, child_log_scales])
    quats = np.concatenate([raw.quats[survivors[:len(keep) + len(clone)]],
                            raw.quats[split], raw.quats[split]])
    logits = raw.opacity_logits[survivors]
    sh = raw.sh[survivors]
    if means.shape[0] == 0:
        top = np.array([int(np.argmax(raw.opacity_logits))])
        survivors = top
        means, log_scales = raw.means[top], raw.log_scales[top]
        quats, logits, sh = raw.quats[top], raw.opacity_logits[top], raw.sh[top]
    new = RawParams(means, log_scales, quats, logits, sh, raw.sh_degree)
    adam.remap(survivors[:len(keep) + len(clone)], len(new))
    return new, survivors


def fit(canonical: SceneSnapshot, references: list[FitReference], config: FitConfig,
        deformation: HexPlaneField | KeyframeTrack | None = None,
        ) -> tuple[SceneSnapshot, list[tuple[int, float, float]]]:
    """Optimize the canonical scene against reference renders.

    Each iteration samples one reference, traces its rays, backpropagates
    the L1 loss and applies one Adam step; every densify_interval
    iterations the scene is densified and pruned. Returns the fitted
    canonical snapshot and the per-iteration (iteration, loss, psnr) trace.
    """
    config.validate()
    if not references:
        raise InvalidParameterError("fit needs at least one reference image")
    refs = list(references)
    if config.first_frame_only:
        t0 = min(r.time for r in refs)
        refs = [r for r in refs if r.time == t0]
    for ref in refs:
        if (ref.image.height != ref.rig.sensor.height_px
                or ref.image.width != ref.rig.sensor.width_px):
            raise InvalidParameterError("reference image does not match its sensor size")
    segments = [_reference_segments(r) for r in refs]
    use_deformation = None if config.first_frame_only else deformation

    raw = RawParams.from_snapshot(canonical)
    adam = _Adam(config)
    rng = np.random.default_rng(config.rng_seed)
    accum = np.zeros(len(raw))
    trace: list[tuple[int, float, float]] = []
    lrs = {"means": config.lr_mean, "log_scales": config.lr_scale_log,
           "quats": config.lr_rotation, "opacity_logits": config.lr_opacity_logit,
           "sh": config.lr_sh}
    bg = np.asarray(config.background, dtype=np.float64)

    for it in range(config.iterations):
        ref_idx = int(rng.integers(len(refs)))
        ref = refs[ref_idx]
        target = ref.image.data.reshape(-1, 3)
        npix = target.shape[0]
        rendered = np.broadcast_to(bg, (npix, 3)).copy()
        canonical_now = raw.to_snapshot()

        seg_state = []
        for seg in segments[ref_idx]:
            snap = deform_snapshot(canonical_now, use_deformation, seg.time)
            residuals = None
            if use_deformation is not None:
                residuals = _residuals_of(canonical_now, use_deformation, seg.time)
            prep = prepare_scene(snap)
            colors, _, tape = trace_rays(seg.origins, seg.dirs, snap, prep=prep,
                                         background=bg, with_tape=True)
            if seg.weight == 1.0:
                rendered[seg.pixel_rows] = colors
            else:
                if seg is segments[ref_idx][0]:
                    rendered[seg.pixel_rows] = 0.0
                rendered[seg.pixel_rows] += seg.weight * colors
            seg_state.append((seg, prep, tape, snap, residuals))

        diff = rendered - target
        loss = float(np.mean(np.abs(diff)))
        mse = float(np.mean(diff * diff))
        psnr = float("inf") if mse == 0.0 else 10.0 * float(np.log10(1.0 / mse))
        if not np.isfinite(loss):
            raise NumericalAbortError(f"non-finite loss at iteration {it}")
        trace.append((it, loss, psnr))

        d_image = np.sign(diff) / diff.size
        total = ParamGradients.zeros(len(raw), raw.sh.shape[1])
        for seg, prep, tape, snap, residuals in seg_state:
            linear = backward_tape(prep, tape, d_image[seg.pixel_rows] * seg.weight)
            part = _chain_deformed_to_canonical(linear, raw, canonical_now, snap,
                                                residuals)
            total.mean += part.mean
            total.scale_log += part.scale_log
            total.rotation += part.rotation
            total.opacity_logit += part.opacity_logit
            total.sh += part.sh

        accum = np.maximum(accum, np.linalg.norm(total.mean, axis=1))

        params = {"means": raw.means, "log_scales": raw.log_scales,
                  "quats": raw.quats, "opacity_logits": raw.opacity_logits,
                  "sh": raw.sh}
        grads = {"means": total.mean, "log_scales": total.scale_log,
                 "quats": total.rotation, "opacity_logits": total.opacity_logit,
                 "sh": total.sh}
        adam.step(params, grads, lrs)
        if config.lr_rotation != 0.0:  # lr 0 must leave parameters bit-identical
            raw.quats /= np.linalg.norm(raw.quats, axis=1, keepdims=True)

        if config.densify_interval > 0 and (it + 1) % config.densify_interval == 0:
            cam = np.asarray(ref.rig.pose.position, dtype=np.float64)
            snap_now = deform_snapshot(raw.to_snapshot(), use_deformation, ref.time)
            distances = np.linalg.norm(snap_now.means - cam, axis=1)
            raw, survivors = _densify_raw(raw, accum, distances, config, adam)
            accum = np.zeros(len(raw))

    return raw.to_snapshot(), trace


def _residuals_of(canonical: SceneSnapshot,
                  deformation: HexPlaneField | KeyframeTrack, t: float):
    from .deformation import (decode_residuals_batch, encode_spacetime_batch)
    if isinstance(deformation, KeyframeTrack):
        return deformation.deltas_at(t)
    f = encode_spacetime_batch(deformation, canonical.means, t)
    return decode_residuals_batch(f, deformation.head_mean,
                                  deformation.head_rotation, deformation.head_scale)
