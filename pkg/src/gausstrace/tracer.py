"""Ray tracing of Gaussian scenes.

A ray's interaction with one Gaussian is reduced to the point of maximum
density along the ray: with the whitening transform M = S^-1 R^T the ray
becomes o_g + t * d_g, the peak sits at t* = -(o_g . d_g)/(d_g . d_g), and
the response is exp(-||o_g + t* d_g||^2 / 2). Radiance is alpha-composited
front to back over per-ray peak order.

Two equivalent paths exist: `trace_ray` walks a BVH with a k-buffer
marching scheme (collect the k nearest unconsumed hits, composite, resume
past the last consumed peak), and `trace_rays` evaluates all ray/gaussian
pairs of a batch densely and composites vectorized. Both consume hits in
identical (t_peak, index) order and share the same arithmetic, so they
agree bit for bit; the batch path is what the renderer and fitter use.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .scene import Gaussian, SceneSnapshot, rotation_matrices, sh_basis

EPS_RESPONSE = 0.01 / 255.0   # peak responses below this are not hits
ALPHA_MAX = 0.999             # per-hit opacity clamp
T_MIN = 1e-4                  # terminate a ray once transmittance drops below
DEFAULT_K = 16
# AABB half-extent in standard deviations; chosen so the box bounds the
# response = EPS_RESPONSE level set and BVH hit sets match brute force
AABB_KAPPA = float(np.sqrt(-2.0 * np.log(EPS_RESPONSE)))

_LEAF_SIZE = 1


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,) unit norm
    t_min: float = 0.0
    t_max: float = np.inf

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-6:
            raise InvalidParameterError(f"ray direction not unit norm: |d| = {norm}")
        if not self.t_min >= 0.0 or not self.t_max > self.t_min:
            raise InvalidParameterError(
                f"ray parameter range [{self.t_min}, {self.t_max}] invalid")


@dataclass(frozen=True)
class GaussianHit:
    gaussian_index: int
    t_peak: float
    response: float


@dataclass(frozen=True)
class ScenePrep:
    """Per-snapshot arrays the tracing kernels consume."""

    snapshot: SceneSnapshot
    whitening: np.ndarray  # (N, 3, 3), S^-1 R^T per gaussian
    aabb_min: np.ndarray   # (N, 3)
    aabb_max: np.ndarray   # (N, 3)


def prepare_scene(snapshot: SceneSnapshot) -> ScenePrep:
    rot = rotation_matrices(snapshot.rotations)                 # (N, 3, 3)
    whitening = rot.transpose(0, 2, 1) / snapshot.scales[:, :, np.newaxis]
    # diag(Sigma)_a = sum_k R[a, k]^2 s_k^2; box bounds the kappa-sigma ellipsoid
    half = AABB_KAPPA * np.sqrt(((rot ** 2) * (snapshot.scales ** 2)[:, np.newaxis, :]).sum(axis=2))
    return ScenePrep(snapshot, whitening,
                     snapshot.means - half, snapshot.means + half)


def _peak_core(m, means, origin, direction, t_min, t_max):
    """Peak ray parameter/response plus raw offsets, for broadcastable operands.

    m: (..., 3, 3) whitening transforms; means/origin/direction broadcast to
    (..., 3). Returns (t_clamped, response, (x0, x1, x2), (r0, r1, r2)) with
    x the whitened offset at the peak and r the world offset at the origin.
    """
    r0 = origin[..., 0] - means[..., 0]
    r1 = origin[..., 1] - means[..., 1]
    r2 = origin[..., 2] - means[..., 2]
    d0, d1, d2 = direction[..., 0], direction[..., 1], direction[..., 2]
    og0 = m[..., 0, 0] * r0 + m[..., 0, 1] * r1 + m[..., 0, 2] * r2
    og1 = m[..., 1, 0] * r0 + m[..., 1, 1] * r1 + m[..., 1, 2] * r2
    og2 = m[..., 2, 0] * r0 + m[..., 2, 1] * r1 + m[..., 2, 2] * r2
    dg0 = m[..., 0, 0] * d0 + m[..., 0, 1] * d1 + m[..., 0, 2] * d2
    dg1 = m[..., 1, 0] * d0 + m[..., 1, 1] * d1 + m[..., 1, 2] * d2
    dg2 = m[..., 2, 0] * d0 + m[..., 2, 1] * d1 + m[..., 2, 2] * d2
    b = og0 * dg0 + og1 * dg1 + og2 * dg2
    a = dg0 * dg0 + dg1 * dg1 + dg2 * dg2
    t = np.clip(-b / a, t_min, t_max)
    x0 = og0 + t * dg0
    x1 = og1 + t * dg1
    x2 = og2 + t * dg2
    response = np.exp(-0.5 * (x0 * x0 + x1 * x1 + x2 * x2))
    return t, response, (x0, x1, x2), (r0, r1, r2)


def _peak_kernel(m, means, origin, direction, t_min, t_max):
    """Like _peak_core but with stacked whitened/world offsets at the peak."""
    t, response, (x0, x1, x2), (r0, r1, r2) = _peak_core(m, means, origin,
                                                         direction, t_min, t_max)
    x_g = np.stack([x0, x1, x2], axis=-1)
    w = np.stack([r0 + t * direction[..., 0], r1 + t * direction[..., 1],
                  r2 + t * direction[..., 2]], axis=-1)
    return t, response, x_g, w


def _combine_sh(basis: np.ndarray, coeffs: np.ndarray):
    """0.5 + sum_b basis[..., b] * coeffs[..., b, :], pre-clip and clipped."""
    pre = np.full(coeffs.shape[:-2] + (3,), 0.5)
    for b in range(coeffs.shape[-2]):
        pre = pre + basis[..., b, np.newaxis] * coeffs[..., b, :]
    return pre, np.clip(pre, 0.0, 1.0)


def gaussian_peak_response(ray: Ray, g: Gaussian) -> GaussianHit | None:
    """Peak hit of a single ray against a single gaussian, or None below cutoff."""
    ray.validate()
    rot = rotation_matrices(g.rotation[np.newaxis, :])
    m = rot.transpose(0, 2, 1) / g.scale[np.newaxis, :, np.newaxis]
    t, resp, _, _ = _peak_core(m, g.mean[np.newaxis, :],
                               np.asarray(ray.origin, dtype=np.float64)[np.newaxis, :],
                               np.asarray(ray.direction, dtype=np.float64)[np.newaxis, :],
                               ray.t_min, ray.t_max)
    if resp[0] < EPS_RESPONSE:
        return None
    return GaussianHit(0, float(t[0]), float(resp[0]))


@dataclass(frozen=True)
class Bvh:
    """Flat binary BVH over per-gaussian AABBs; leaves hold one gaussian."""

    node_min: np.ndarray    # (M, 3)
    node_max: np.ndarray    # (M, 3)
    node_left: np.ndarray   # (M,) child id, -1 for leaves
    node_right: np.ndarray  # (M,)
    node_prim: np.ndarray   # (M,) gaussian index for leaves, -1 otherwise
    prep: ScenePrep


def build_bvh(snapshot: SceneSnapshot, prep: ScenePrep | None = None) -> Bvh:
    """Median-split BVH over the longest centroid axis."""
    if prep is None:
        prep = prepare_scene(snapshot)
    lo, hi = prep.aabb_min, prep.aabb_max
    centroids = 0.5 * (lo + hi)
    node_min, node_max, node_left, node_right, node_prim = [], [], [], [], []

    def emit(idxs: np.ndarray) -> int:
        node = len(node_min)
        node_min.append(lo[idxs].min(axis=0))
        node_max.append(hi[idxs].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_prim.append(int(idxs[0]) if len(idxs) <= _LEAF_SIZE else -1)
        if len(idxs) > _LEAF_SIZE:
            c = centroids[idxs]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order = idxs[np.argsort(c[:, axis], kind="stable")]
            half = len(order) // 2
            node_left[node] = emit(order[:half])
            node_right[node] = emit(order[half:])
        return node

    emit(np.arange(len(snapshot)))
    return Bvh(np.array(node_min), np.array(node_max),
               np.array(node_left), np.array(node_right),
               np.array(node_prim), prep)


def _slab_interval(bmin, bmax, o, inv_d, t_lo, t_hi):
    """Entry/exit of a ray against one box, or None when disjoint."""
    for a in range(3):
        if np.isinf(inv_d[a]):
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return None
            continue
        ta = (bmin[a] - o[a]) * inv_d[a]
        tb = (bmax[a] - o[a]) * inv_d[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_lo:
            t_lo = ta
        if tb < t_hi:
            t_hi = tb
        if t_lo > t_hi:
            return None
    return t_lo, t_hi


def collect_hits(bvh: Bvh, ray: Ray, after: tuple[float, int] = (-np.inf, -1),
                 limit: int | None = None) -> list[GaussianHit]:
    """Hits with (t_peak, index) strictly after the cursor, nearest first.

    With a limit, at most the `limit` nearest such hits are returned; the
    traversal prunes subtrees that cannot beat the current k-th best entry.
    """
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.direction, dtype=np.float64)
    with np.errstate(divide="ignore"):
        inv_d = np.where(d == 0.0, np.inf, 1.0 / d)
    prep = bvh.prep
    heap: list[tuple[float, int, float]] = []  # (-t, -idx, response)
    stack = [0]
    while stack:
        node = stack.pop()
        interval = _slab_interval(bvh.node_min[node], bvh.node_max[node],
                                  o, inv_d, ray.t_min, ray.t_max)
        if interval is None:
            continue
        entry, exit_ = interval
        if exit_ < after[0]:
            continue  # everything inside was already consumed
        if limit is not None and len(heap) == limit and entry > -heap[0][0]:
            continue  # cannot beat the current k-th nearest
        prim = bvh.node_prim[node]
        if prim >= 0:
            t, resp, _, _ = _peak_core(prep.whitening[prim:prim + 1],
                                       prep.snapshot.means[prim:prim + 1],
                                       o[np.newaxis, :], d[np.newaxis, :],
                                       ray.t_min, ray.t_max)
            t = float(t[0])
            resp = float(resp[0])
            if resp >= EPS_RESPONSE and (t, prim) > after:
                heapq.heappush(heap, (-t, -int(prim), resp))
                if limit is not None and len(heap) > limit:
                    heapq.heappop(heap)
        else:
            stack.append(int(bvh.node_left[node]))
            stack.append(int(bvh.node_right[node]))
    out = [GaussianHit(-ni, -nt, resp) for nt, ni, resp in heap]
    out.sort(key=lambda h: (h.t_peak, h.gaussian_index))
    return out


def trace_ray(ray: Ray, snapshot: SceneSnapshot, bvh: Bvh, k: int = DEFAULT_K,
              background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, float]:
    """Radiance and final transmittance via k-buffer marching over the BVH."""
    ray.validate()
    if k < 1:
        raise InvalidParameterError(f"k-buffer size must be >= 1, got {k}")
    prep = bvh.prep
    basis = sh_basis(np.asarray(ray.direction, dtype=np.float64)[np.newaxis, :],
                     snapshot.sh_degree)
    color = np.zeros(3)
    transmittance = np.float64(1.0)
    cursor = (-np.inf, -1)
    while True:
        buffer = collect_hits(bvh, ray, after=cursor, limit=k)
        if not buffer:
            break
        stopped = False
        for hit in buffer:
            if transmittance < T_MIN:
                stopped = True
                break
            alpha = np.minimum(prep.snapshot.opacities[hit.gaussian_index] * hit.response,
                               ALPHA_MAX)
            _, c = _combine_sh(basis, prep.snapshot.sh[np.newaxis, hit.gaussian_index])
            color = color + (transmittance * alpha) * c[0]
            transmittance = transmittance * (1.0 - alpha)
            cursor = (hit.t_peak, hit.gaussian_index)
        if stopped or len(buffer) < k:
            break
    color = color + transmittance * np.asarray(background, dtype=np.float64)
    return color, float(transmittance)


@dataclass
class TraceTape:
    """Per-hit intermediates of a batch forward pass, for backpropagation."""

    directions: np.ndarray    # (R, 3)
    basis: np.ndarray         # (R, B)
    slot_gauss: np.ndarray    # (R, S) gaussian index per composited slot
    slot_active: np.ndarray   # (R, S) True where the slot was composited
    slot_x: np.ndarray        # (R, S, 3) whitened offset at peak
    slot_w: np.ndarray        # (R, S, 3) world offset at peak
    slot_resp: np.ndarray     # (R, S)
    slot_alpha: np.ndarray    # (R, S)
    slot_unclamped: np.ndarray  # (R, S) alpha below the ALPHA_MAX clamp
    slot_color: np.ndarray    # (R, S, 3)
    slot_color_live: np.ndarray  # (R, S, 3) pre-clip color inside (0, 1)
    slot_t_before: np.ndarray  # (R, S) transmittance before the hit
    t_final: np.ndarray       # (R,)
    background: np.ndarray    # (3,)


def trace_rays(origins: np.ndarray, directions: np.ndarray, snapshot: SceneSnapshot,
               prep: ScenePrep | None = None, background=(0.0, 0.0, 0.0),
               t_min: float = 0.0, t_max: float = np.inf, with_tape: bool = False):
    """Vectorized radiance for a batch of rays.

    Returns (colors (R, 3), transmittance (R,)) and, with `with_tape`, the
    TraceTape of per-hit intermediates. Equivalent to running trace_ray per
    row: hits are consumed in globally sorted (t_peak, index) order with the
    same clamped compositing arithmetic.
    """
    if prep is None:
        prep = prepare_scene(snapshot)
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    nrays = origins.shape[0]
    bg = np.asarray(background, dtype=np.float64)
    if with_tape:
        t_peak, resp, x_g, w_vec = _peak_kernel(
            prep.whitening[np.newaxis, :, :, :], prep.snapshot.means[np.newaxis, :, :],
            origins[:, np.newaxis, :], directions[:, np.newaxis, :], t_min, t_max)
    else:
        t_peak, resp, _, _ = _peak_core(
            prep.whitening[np.newaxis, :, :, :], prep.snapshot.means[np.newaxis, :, :],
            origins[:, np.newaxis, :], directions[:, np.newaxis, :], t_min, t_max)
    valid = resp >= EPS_RESPONSE
    order = np.argsort(np.where(valid, t_peak, np.inf), axis=1, kind="stable")
    smax = int(valid.sum(axis=1).max()) if nrays else 0
    basis = sh_basis(directions, snapshot.sh_degree)

    color = np.zeros((nrays, 3))
    transmittance = np.ones(nrays)
    rows = np.arange(nrays)
    if with_tape:
        tape = TraceTape(
            directions=directions, basis=basis,
            slot_gauss=np.zeros((nrays, smax), dtype=np.int64),
            slot_active=np.zeros((nrays, smax), dtype=bool),
            slot_x=np.zeros((nrays, smax, 3)), slot_w=np.zeros((nrays, smax, 3)),
            slot_resp=np.zeros((nrays, smax)), slot_alpha=np.zeros((nrays, smax)),
            slot_unclamped=np.zeros((nrays, smax), dtype=bool),
            slot_color=np.zeros((nrays, smax, 3)),
            slot_color_live=np.zeros((nrays, smax, 3), dtype=bool),
            slot_t_before=np.zeros((nrays, smax)),
            t_final=transmittance, background=bg)
    for s in range(smax):
        g = order[:, s]
        active = valid[rows, g] & (transmittance >= T_MIN)
        alpha_pre = prep.snapshot.opacities[g] * resp[rows, g]
        alpha = np.minimum(alpha_pre, ALPHA_MAX)
        pre, c = _combine_sh(basis, prep.snapshot.sh[g])
        new_color = color + (transmittance * alpha)[:, np.newaxis] * c
        new_t = transmittance * (1.0 - alpha)
        if with_tape:
            tape.slot_gauss[:, s] = g
            tape.slot_active[:, s] = active
            tape.slot_x[:, s] = x_g[rows, g]
            tape.slot_w[:, s] = w_vec[rows, g]
            tape.slot_resp[:, s] = resp[rows, g]
            tape.slot_alpha[:, s] = alpha
            tape.slot_unclamped[:, s] = alpha_pre < ALPHA_MAX
            tape.slot_color[:, s] = c
            tape.slot_color_live[:, s] = (pre > 0.0) & (pre < 1.0)
            tape.slot_t_before[:, s] = transmittance
        color = np.where(active[:, np.newaxis], new_color, color)
        transmittance = np.where(active, new_t, transmittance)
    color = color + transmittance[:, np.newaxis] * bg
    if with_tape:
        tape.t_final = transmittance
        return color, transmittance, tape
    return color, transmittance
