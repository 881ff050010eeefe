"""Scene file reading and writing.

A scene file is UTF-8 JSON with a top-level object:

    {
      "sh_degree": 1,
      "gaussians": [
        {"mean": [x, y, z], "rotation": [w, x, y, z], "scale": [sx, sy, sz],
         "opacity": a, "sh": [[r, g, b], ...]},
        ...
      ],
      "deformation": {"kind": "none"}
                   | {"kind": "keyframes", "times": [...], "deltas": [...]}
                   | {"kind": "hexplane", ...}
    }

Floats are serialized with full round-trip precision, so save followed by
load reproduces parameters bit-for-bit. Keyframe deltas are one object per
keyframe with "mean" (N, 3), "rotation" (N, 4) and "scale" (N, 3) arrays.
The hexplane section carries the grids under "planes" (per coordinate pair,
one [h][rows][cols] array per level) and row-major MLP weights under
"fuse_mlp" and "heads".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .deformation import PLANE_PAIRS, HexPlaneField, KeyframeTrack, Mlp
from .errors import SceneValidationError
from .scene import VALID_SH_COUNTS, SceneSnapshot

Deformation = HexPlaneField | KeyframeTrack | None


def _record_array(record: dict, key: str, shape: tuple[int, ...], index: int) -> np.ndarray:
    if key not in record:
        raise SceneValidationError(f"gaussian {index} missing field {key!r}")
    arr = np.asarray(record[key], dtype=np.float64)
    if arr.shape != shape:
        raise SceneValidationError(
            f"gaussian {index} field {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def _mlp_from_json(obj: dict, what: str) -> Mlp:
    try:
        layers = obj["layers"]
        weights = tuple(np.asarray(l["weight"], dtype=np.float64) for l in layers)
        biases = tuple(np.asarray(l["bias"], dtype=np.float64) for l in layers)
    except (KeyError, TypeError) as exc:
        raise SceneValidationError(f"malformed {what} mlp section: {exc}") from exc
    return Mlp(weights, biases)


def _mlp_to_json(mlp: Mlp) -> dict:
    return {"layers": [{"weight": w.tolist(), "bias": b.tolist()}
                       for w, b in zip(mlp.weights, mlp.biases)]}


def deformation_from_json(obj: dict | None) -> Deformation:
    if obj is None:
        return None
    kind = obj.get("kind")
    if kind == "none":
        return None
    if kind == "keyframes":
        times = np.asarray(obj["times"], dtype=np.float64)
        deltas = obj["deltas"]
        if len(deltas) != len(times):
            raise SceneValidationError(
                f"keyframe deltas count {len(deltas)} != times count {len(times)}")
        return KeyframeTrack(
            times,
            np.stack([np.asarray(d["mean"], dtype=np.float64) for d in deltas]),
            np.stack([np.asarray(d["rotation"], dtype=np.float64) for d in deltas]),
            np.stack([np.asarray(d["scale"], dtype=np.float64) for d in deltas]))
    if kind == "hexplane":
        try:
            planes = {pair: tuple(np.asarray(g, dtype=np.float64)
                                  for g in obj["planes"][pair])
                      for pair in PLANE_PAIRS}
            heads = obj["heads"]
            return HexPlaneField(
                planes=planes,
                feature_dim=int(obj["feature_dim"]),
                levels=tuple(int(l) for l in obj["levels"]),
                base_resolution=int(obj["base_resolution"]),
                bounds_min=np.asarray(obj["bounds"]["min"], dtype=np.float64),
                bounds_max=np.asarray(obj["bounds"]["max"], dtype=np.float64),
                fuse_mlp=_mlp_from_json(obj["fuse_mlp"], "fuse"),
                head_mean=_mlp_from_json(heads["mean"], "mean head"),
                head_rotation=_mlp_from_json(heads["rotation"], "rotation head"),
                head_scale=_mlp_from_json(heads["scale"], "scale head"))
        except (KeyError, TypeError) as exc:
            raise SceneValidationError(f"malformed hexplane section: {exc}") from exc
    raise SceneValidationError(f"unknown deformation kind {kind!r}")


def deformation_to_json(deformation: Deformation) -> dict:
    if deformation is None:
        return {"kind": "none"}
    if isinstance(deformation, KeyframeTrack):
        return {"kind": "keyframes",
                "times": deformation.times.tolist(),
                "deltas": [{"mean": deformation.mean_deltas[k].tolist(),
                            "rotation": deformation.rot_deltas[k].tolist(),
                            "scale": deformation.scale_deltas[k].tolist()}
                           for k in range(len(deformation.times))]}
    if isinstance(deformation, HexPlaneField):
        return {"kind": "hexplane",
                "feature_dim": deformation.feature_dim,
                "levels": list(deformation.levels),
                "base_resolution": deformation.base_resolution,
                "bounds": {"min": deformation.bounds_min.tolist(),
                           "max": deformation.bounds_max.tolist()},
                "planes": {pair: [g.tolist() for g in deformation.planes[pair]]
                           for pair in PLANE_PAIRS},
                "fuse_mlp": _mlp_to_json(deformation.fuse_mlp),
                "heads": {"mean": _mlp_to_json(deformation.head_mean),
                          "rotation": _mlp_to_json(deformation.head_rotation),
                          "scale": _mlp_to_json(deformation.head_scale)}}
    raise SceneValidationError(f"cannot serialize deformation {type(deformation)!r}")


def load_scene(path: str | Path) -> tuple[SceneSnapshot, Deformation]:
    """Parse and validate a scene file; returns the canonical snapshot."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneValidationError(f"{path}: top level must be an object")
    if "sh_degree" not in doc or "gaussians" not in doc:
        raise SceneValidationError(f"{path}: missing 'sh_degree' or 'gaussians'")
    sh_degree = int(doc["sh_degree"])
    if sh_degree not in (0, 1, 2, 3):
        raise SceneValidationError(f"{path}: sh_degree {sh_degree} outside [0, 3]")
    records = doc["gaussians"]
    if not isinstance(records, list) or not records:
        raise SceneValidationError(f"{path}: 'gaussians' must be a non-empty list")
    nbands = (sh_degree + 1) ** 2
    n = len(records)
    means = np.empty((n, 3))
    rotations = np.empty((n, 4))
    scales = np.empty((n, 3))
    opacities = np.empty(n)
    sh = np.empty((n, nbands, 3))
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise SceneValidationError(f"gaussian {i} is not an object")
        means[i] = _record_array(rec, "mean", (3,), i)
        rotations[i] = _record_array(rec, "rotation", (4,), i)
        scales[i] = _record_array(rec, "scale", (3,), i)
        sh[i] = _record_array(rec, "sh", (nbands, 3), i)
        if "opacity" not in rec:
            raise SceneValidationError(f"gaussian {i} missing field 'opacity'")
        opacities[i] = float(rec["opacity"])
    snapshot = SceneSnapshot.from_arrays(means, rotations, scales, opacities, sh,
                                         time=0.0, sh_degree=sh_degree)
    return snapshot, deformation_from_json(doc.get("deformation"))


def save_scene(path: str | Path, snapshot: SceneSnapshot,
               deformation: Deformation = None) -> None:
    """Write a scene file that round-trips through load_scene bit-for-bit."""
    doc = {
        "sh_degree": snapshot.sh_degree,
        "gaussians": [
            {"mean": snapshot.means[i].tolist(),
             "rotation": snapshot.rotations[i].tolist(),
             "scale": snapshot.scales[i].tolist(),
             "opacity": float(snapshot.opacities[i]),
             "sh": snapshot.sh[i].tolist()}
            for i in range(len(snapshot))
        ],
        "deformation": deformation_to_json(deformation),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
