"""Command-line interface.

Commands: `render` (one frame), `sequence` (a frame range), `metrics`
(PSNR/SSIM between two PPMs, optionally masked), and `fit` (optimize a
scene against references). Exit codes: 0 on success, 2 for input or
validation errors, 3 for numerical aborts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time as _time
from pathlib import Path

from .errors import GaussTraceError, NumericalAbortError
from .images import load_image, save_image
from .metrics import masked_metric, psnr, ssim
from .render import RenderJob, frame_times, render_frame_loaded, render_sequence


def _parse_bg(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("background must be r,g,b")
    return tuple(parts)


def _add_render_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spp", type=int, default=None,
                   help="override depth-of-field samples per pixel")
    p.add_argument("--k", type=int, default=16, help="k-buffer size")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--tile", type=int, default=64, help="pixel tile size")
    p.add_argument("--bg", type=_parse_bg, default=(0.0, 0.0, 0.0),
                   metavar="R,G,B", help="background color")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gausstrace",
                                     description="Ray trace deformable Gaussian "
                                                 "scenes with physical camera models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render one frame")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_render_options(p)

    p = sub.add_parser("sequence", help="render a frame sequence")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel-frames", action="store_true",
                   help="render frames concurrently instead of tiling inside frames")
    _add_render_options(p)

    p = sub.add_parser("metrics", help="compare two PPM images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask-diameter", type=float, default=None,
                   help="restrict metrics to a centered circle of this pixel diameter")
    p.add_argument("--metric", choices=("psnr", "ssim", "both"), default="both")

    p = sub.add_parser("fit", help="fit a scene to reference images")
    p.add_argument("--scene", required=True, help="initial scene file")
    p.add_argument("--refs", required=True, help="references manifest JSON")
    p.add_argument("--config", required=True, help="fit config JSON")
    p.add_argument("--out", required=True, help="fitted scene output path")
    p.add_argument("--trace", required=True, help="loss trace CSV output path")
    return parser


def _cmd_render(args) -> int:
    job = RenderJob(scene=args.scene, camera=args.camera, out=args.out,
                    t0=args.time, t1=args.time, frames=1, spp=args.spp, k=args.k,
                    tile=args.tile, threads=args.threads, background=args.bg)
    job.validate()
    from .cameras import load_camera
    from .sceneio import load_scene
    snapshot, deformation = load_scene(job.scene)
    rig = load_camera(job.camera)
    start = _time.perf_counter()
    img = render_frame_loaded(snapshot, deformation, rig, args.time, job)
    elapsed = _time.perf_counter() - start
    save_image(img, args.out)
    print(f"wrote {args.out} ({img.width}x{img.height}) in {elapsed:.3f}s")
    return 0


def _cmd_sequence(args) -> int:
    job = RenderJob(scene=args.scene, camera=args.camera, out=args.out_dir,
                    t0=args.t0, t1=args.t1, frames=args.frames, spp=args.spp,
                    k=args.k, tile=args.tile, threads=args.threads,
                    background=args.bg, parallel_frames=args.parallel_frames)
    job.validate()
    start = _time.perf_counter()
    paths = render_sequence(job, args.out_dir)
    elapsed = _time.perf_counter() - start
    times = frame_times(job)
    print(f"wrote {len(paths)} frames to {args.out_dir} "
          f"(t in [{times[0]}, {times[-1]}]) in {elapsed:.3f}s")
    return 0


def _cmd_metrics(args) -> int:
    a = load_image(args.a)
    b = load_image(args.b)
    if args.metric in ("psnr", "both"):
        value = (psnr(a, b) if args.mask_diameter is None
                 else masked_metric(a, b, args.mask_diameter, "psnr"))
        print(f"psnr={value}")
    if args.metric in ("ssim", "both"):
        value = (ssim(a, b) if args.mask_diameter is None
                 else masked_metric(a, b, args.mask_diameter, "ssim"))
        print(f"ssim={value}")
    return 0


def _load_references(path: str | Path):
    from .cameras import camera_from_json, load_camera
    from .errors import SceneValidationError
    from .fitter import FitReference

    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc.get("references")
    if not entries:
        raise SceneValidationError(f"{path}: no 'references' listed")
    refs = []
    for entry in entries:
        camera = entry["camera"]
        if isinstance(camera, str):
            cam_path = Path(camera)
            rig = load_camera(cam_path if cam_path.is_absolute() else base / cam_path)
        else:
            rig = camera_from_json(camera)
        img_path = Path(entry["image"])
        image = load_image(img_path if img_path.is_absolute() else base / img_path)
        refs.append(FitReference(image, rig, float(entry.get("time", 0.0))))
    return refs


def _cmd_fit(args) -> int:
    from .fitter import FitConfig, fit
    from .sceneio import load_scene, save_scene

    canonical, deformation = load_scene(args.scene)
    refs = _load_references(args.refs)
    config = FitConfig.from_json(args.config)
    fitted, trace = fit(canonical, refs, config, deformation=deformation)
    save_scene(args.out, fitted, deformation)
    with open(args.trace, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss,psnr\n")
        for it, loss, value in trace:
            fh.write(f"{it},{loss},{value}\n")
    print(f"fit finished: {len(trace)} iterations, final loss {trace[-1][1]:.6g}, "
          f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"render": _cmd_render, "sequence": _cmd_sequence,
                "metrics": _cmd_metrics, "fit": _cmd_fit}
    try:
        return handlers[args.command](args)
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (GaussTraceError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
