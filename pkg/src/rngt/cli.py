"""Command-line entry points: train | eval | render | scan | bench | serve.

Failures exit nonzero with a machine-readable JSON object on stderr:
``{"error": "<kind>", "message": "<detail>"}``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np


class UsageError(ValueError):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    sys.exit(code)


def _load_model(path):
    from .model import load_model

    model, _ = load_model(path)
    return model.eval().requires_grad_(False)


def _load_source_images(directory, model):
    from PIL import Image

    cfg = model.config
    paths = sorted(Path(directory).glob("*.png"))
    if len(paths) != cfg.n_sources:
        raise UsageError(
            f"--images directory must hold exactly {cfg.n_sources} PNG files, found {len(paths)}"
        )
    images = []
    for p in paths:
        img = Image.open(p).convert("RGB")
        if img.size != (cfg.resolution, cfg.resolution):
            raise UsageError(f"{p.name}: expected {cfg.resolution}x{cfg.resolution}")
        images.append(np.asarray(img, dtype=np.float32) / 255.0)
    return np.stack(images)


def _pose_from_file(path, model):
    from .geometry import CameraPose

    data = json.loads(Path(path).read_text())
    fx, fy, cx, cy = model.config.default_intrinsics()
    res = model.config.resolution
    return CameraPose(
        np.array(data["rotation"], dtype=np.float64).reshape(3, 3),
        np.array(data["center"], dtype=np.float64),
        fx, fy, cx, cy, res, res,
    )


def fibonacci_sphere_directions(n: int) -> np.ndarray:
    """n roughly uniform unit directions (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    phi = math.pi * (1.0 + math.sqrt(5.0)) * k
    y = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)


def cmd_train(args):
    from .trainer import TrainConfig, train

    config_path = args.config or os.environ.get("RNG_CONFIG")
    if not config_path:
        raise UsageError("--config (or the RNG_CONFIG environment variable) is required")
    raw = json.loads(Path(config_path).read_text())
    dataset_dir = raw.pop("dataset_dir", str(Path(args.out).parent / "dataset"))
    log_path = raw.pop("log_path", str(Path(args.out).with_suffix(".log.jsonl")))
    cfg = TrainConfig.from_json(raw)
    train(cfg, dataset_dir, args.out, log_path=log_path, resume_path=args.resume, progress=not args.quiet)
    print(json.dumps({"checkpoint": str(args.out), "log": log_path, "steps": cfg.steps}))


def cmd_eval(args):
    from .evaluation import evaluate_model

    model = _load_model(args.ckpt)
    report, details = evaluate_model(
        model, n_scenes=args.scenes, seed=args.seed, progress=not args.quiet
    )
    payload = report.to_json()
    payload["details"] = {
        "baseline_psnr": details.baseline_psnr,
        "ra15": details.ra15,
        "first_view_rotation_deg": details.first_view_rotation_deg,
        "first_view_center_err": details.first_view_center_err,
    }
    text = json.dumps(payload, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(text)


def cmd_render(args):
    import torch
    from PIL import Image

    from .container import save_container
    from .geometry import pointmap_to_depth

    model = _load_model(args.ckpt)
    images = _load_source_images(args.images, model)
    pose = _pose_from_file(args.pose, model)
    with torch.no_grad():
        cache, poses = model.forward_stage1(images)
        rgb, pmap, conf = model.forward_stage2(pose, cache)
    rgb8 = np.clip(np.round(rgb.numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8).save(args.out)
    if args.pointmap:
        save_container(
            args.pointmap,
            {
                "depth": pointmap_to_depth(pmap.numpy(), pose).astype(np.float32),
                "pointmap": pmap.numpy(),
                "confidence": conf.numpy(),
            },
            {"kind": "render-maps"},
        )
    print(json.dumps({"rgb": str(args.out), "pointmap": args.pointmap}))


def cmd_scan(args):
    import torch

    from .evaluation import filter_by_confidence
    from .geometry import look_at_pose, merge_clouds
    from .ply import write_ply

    if args.views < 1:
        raise UsageError("--views must be at least 1")
    if not 0.0 <= args.conf_quantile <= 1.0:
        raise UsageError("--conf-quantile must lie in [0, 1]")
    model = _load_model(args.ckpt)
    images = _load_source_images(args.images, model)
    with torch.no_grad():
        cache, poses = model.forward_stage1(images)
        radius = args.radius or float(np.mean([np.linalg.norm(p.center) for p in poses]))
        fx, fy, cx, cy = model.config.default_intrinsics()
        res = model.config.resolution
        queries = [
            look_at_pose(d * radius, fx, fy, cx, cy, res, res)
            for d in fibonacci_sphere_directions(args.views)
        ]
        clouds = []
        for q in queries:
            rgb, pmap, conf = model.forward_stage2(q, cache)
            clouds.append(
                filter_by_confidence(pmap.numpy(), conf.numpy(), rgb.numpy(), args.conf_quantile)
            )
    cloud = merge_clouds(clouds)
    if len(cloud) == 0:
        raise UsageError("confidence quantile removed every point; lower --conf-quantile")
    Path(args.out).write_bytes(write_ply(cloud))
    print(json.dumps({"cloud": str(args.out), "points": len(cloud), "radius": radius}))


def cmd_bench(args):
    from .evaluation import efficiency_bench

    model = _load_model(args.ckpt)
    report = efficiency_bench(model, n_sources=model.config.n_sources, n_queries=args.queries)
    print(json.dumps(report.to_json(), sort_keys=True, indent=1))


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(_load_model(args.ckpt), max_sessions=args.max_sessions)
    if args.ui:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=args.ui, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> JsonArgumentParser:
    parser = JsonArgumentParser(prog="rngt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="TrainConfig JSON (default: $RNG_CONFIG)")
    p.add_argument("--out", required=True, help="output checkpoint path (.rngt)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out metric report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--csv", help="write a one-row CSV in table column order")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one novel view from source images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="directory with the source PNGs")
    p.add_argument("--pose", required=True, help="pose JSON: rotation (9 floats) + center (3)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--pointmap", help="optional RNGT dump: depth/pointmap/confidence")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("scan", help="accumulate a point cloud over sphere-uniform views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--views", type=int, required=True, help="number of query viewpoints")
    p.add_argument("--conf-quantile", type=float, default=0.3)
    p.add_argument("--radius", type=float, help="query sphere radius (default: mean source distance)")
    p.add_argument("--out", required=True, help="output PLY")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("bench", help="joint vs cached rendering efficiency report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--queries", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--max-sessions", type=int, default=16)
    p.add_argument("--ui", help="static directory to mount at /ui (the scanner frontend)")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        _fail("UsageError", str(exc), code=2)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    main()
