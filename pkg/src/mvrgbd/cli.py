"""Command-line front end: gen-data / train / sample / eval / bench-frustum /
export-ply.

Every command reads the same flat config (defaults, then ``--config FILE``,
then repeated ``--set key=value``, then any sugar flag like ``--steps``).
Output lands under ``--out`` (or ``$MVRGBD_OUT``, or the current directory).
Failures print a single ``error: ...`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import dataset as ds
from . import engine
from . import frustum as fr
from . import geometry as geo
from . import metrics as mx
from . import nn
from .denoiser import Denoiser
from .errors import ConfigError, MVRGBDError


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key=value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override one config key (repeatable)")
    p.add_argument("--out", metavar="DIR",
                   default=os.environ.get("MVRGBD_OUT", "."),
                   help="output root (default: $MVRGBD_OUT or '.')")
    p.add_argument("--threads", type=int, metavar="N",
                   help="cap BLAS threads via environment (best set before launch)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvrgbd",
        description="Multi-view RGB-D diffusion: synthesize data, train, "
                    "sample consistent views, and extract point clouds.",
        epilog=cfgmod.describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural scene dataset")
    _common_flags(p)
    p.add_argument("--scenes", type=int, help="shorthand for --set num_scenes=N")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--name", default="dataset", help="directory name under --out")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a rendered dataset")
    _common_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", default="run", help="run directory name under --out")
    p.add_argument("--steps", type=int, help="shorthand for --set steps=N")
    p.add_argument("--learning-rate", type=float,
                   help="shorthand for --set learning_rate=X")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate novel views from one input view")
    _common_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory (cameras + input)")
    p.add_argument("--scene", type=int, default=0, help="scene index (default 0)")
    p.add_argument("--input-view", type=int, default=0,
                   help="rig index of the conditioning view (default 0)")
    p.add_argument("--omega", type=float, help="shorthand for --set omega=X")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--name", default="sample", help="directory name under --out")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score generated views against ground truth")
    _common_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--gen", required=True, help="generated-view directory")
    p.add_argument("--scene", type=int, help="scene index (default: from --gen)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-frustum",
                       help="time depth-guided vs dense frustum sampling")
    _common_flags(p)
    p.add_argument("--t", type=int, default=50, help="diffusion step (default 50)")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--name", default="bench.csv", help="CSV file name under --out")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("export-ply", help="extract a point cloud to ASCII PLY")
    _common_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--gen", help="generated-view directory")
    src.add_argument("--data", help="dataset directory (ground-truth cloud)")
    p.add_argument("--scene", type=int, default=0,
                   help="scene index when reading --data (default 0)")
    p.add_argument("--ply", help="output path (default: <out>/cloud.ply)")
    p.add_argument("--threshold", type=float,
                   help="shorthand for --set depth_threshold=X")
    p.set_defaults(func=_cmd_export)

    return parser


def _resolve(args, sugar: dict[str, str]) -> dict:
    """Config dict for one invocation: defaults < file < --set < sugar flags."""
    path = args.config
    if path is None and getattr(args, "_auto_config", None):
        path = args._auto_config
        print(f"using config {path}")
    values = cfgmod.load_config(path) if path else cfgmod.defaults()
    cfgmod.apply_overrides(values, args.overrides)
    for flag, key in sugar.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    return values


def _check_image_size(values: dict, data: ds.Dataset):
    cam = data.cameras[0]
    if cam.width != values["image_size"] or cam.height != values["image_size"]:
        raise ConfigError(
            f"dataset renders {cam.width}x{cam.height} but image_size is "
            f"{values['image_size']}; pass --set image_size={cam.width}")


def _write_config(values: dict, path: str):
    with open(path, "w") as fh:
        for name, value in values.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{name} = {value}\n")


def _cmd_gen_data(args) -> int:
    values = _resolve(args, {"scenes": "num_scenes", "seed": "seed"})
    rng = np.random.default_rng(cfgmod.stage_seed(values["seed"], "gen-data"))
    scenes = [ds.random_scene(rng) for _ in range(values["num_scenes"])]
    rig = cfgmod.build_rig(values)
    path = os.path.join(args.out, args.name)
    ds.write_dataset(path, scenes, rig, near=values["near"], far=values["far"])
    print(f"wrote {len(scenes)} scenes x {len(rig)} views to {path}")
    return 0


def _cmd_train(args) -> int:
    values = _resolve(args, {"steps": "steps", "learning_rate": "learning_rate",
                             "seed": "seed"})
    data = ds.read_dataset(args.data)
    _check_image_size(values, data)
    run_dir = os.path.join(args.out, args.run)
    os.makedirs(run_dir, exist_ok=True)
    _write_config(values, os.path.join(run_dir, "config.txt"))

    base = cfgmod.stage_seed(values["seed"], "train")
    model = Denoiser(cfgmod.build_denoiser_config(values),
                     np.random.default_rng(base))
    train_cfg = cfgmod.build_train_config(values, out_dir=run_dir,
                                          seed=(base + 1) % 2 ** 63)
    schedule = cfgmod.build_schedule(values)
    losses = engine.train(model, data, train_cfg, schedule,
                          depth_params=cfgmod.build_depth_params(values))
    print(f"trained {len(losses)} steps, final loss {losses[-1]:.6f}; "
          f"checkpoints in {run_dir}")
    return 0


def _load_model(values: dict, ckpt_path: str) -> Denoiser:
    model = Denoiser(cfgmod.build_denoiser_config(values),
                     np.random.default_rng(0))
    nn.load_state(model, ckpt_path)
    return model


def _write_generated(gen_dir: str, result: engine.SampleResult, values: dict,
                     scene: int, input_view: int, view_ids, near, far):
    os.makedirs(gen_dir, exist_ok=True)
    threshold = values["depth_threshold"]
    for i, (plane, camera) in enumerate(zip(result.views, result.cameras)):
        depth = plane[3]
        metric = ds.denormalize_depth(depth, near, far)
        mask = metric < threshold * far
        view = ds.RenderedView(rgb=plane[:3].transpose(1, 2, 0), depth=depth,
                               mask=mask, camera=camera)
        ds.write_view(gen_dir, i, view)
    manifest = {
        "version": 1,
        "near": near,
        "far": far,
        "scene": scene,
        "input_view": input_view,
        "view_ids": list(view_ids),
        "omega": values["omega"],
        "cameras": [geo.camera_to_manifest(c) for c in result.cameras],
    }
    with open(os.path.join(gen_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _read_generated(gen_dir: str):
    with open(os.path.join(gen_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cameras = [geo.camera_from_manifest(c) for c in manifest["cameras"]]
    views = [ds.read_view(gen_dir, i, cam) for i, cam in enumerate(cameras)]
    return views, manifest


def _cmd_sample(args) -> int:
    auto = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "config.txt")
    if os.path.exists(auto):
        args._auto_config = auto
    values = _resolve(args, {"omega": "omega", "seed": "seed"})
    data = ds.read_dataset(args.data)
    _check_image_size(values, data)
    input_view = data.load_view(args.scene, args.input_view)
    model = _load_model(values, args.ckpt)

    result = engine.sample(
        model, input_view.rgb, input_view.camera, data.cameras,
        cfgmod.build_schedule(values), omega=values["omega"],
        seed=cfgmod.stage_seed(values["seed"], "sample"),
        depth_params=cfgmod.build_depth_params(values),
        near=data.near, far=data.far)

    gen_dir = os.path.join(args.out, args.name)
    _write_generated(gen_dir, result, values, args.scene, args.input_view,
                     range(len(data.cameras)), data.near, data.far)
    cloud = engine.extract_pointcloud(result.viewset(),
                                      depth_threshold=values["depth_threshold"],
                                      near=data.near, far=data.far)
    engine.write_ply(os.path.join(gen_dir, "cloud.ply"), cloud)
    print(f"generated {len(result.cameras)} views in {gen_dir} "
          f"({len(cloud)} cloud points)")
    return 0


def _viewset_from_views(views) -> fr.ViewSet:
    return engine.rendered_to_viewset(views)


def _cmd_eval(args) -> int:
    values = _resolve(args, {})
    gen_views, manifest = _read_generated(args.gen)
    data = ds.read_dataset(args.data)
    scene = manifest.get("scene", 0) if args.scene is None else args.scene
    gt_views = [data.load_view(scene, vid) for vid in manifest["view_ids"]]
    report = mx.compare_viewsets(_viewset_from_views(gen_views),
                                 _viewset_from_views(gt_views),
                                 near=data.near, far=data.far)
    report.write_json(os.path.join(args.gen, "report.json"))
    report.write_csv(os.path.join(args.gen, "report.csv"))

    def fmt(x):
        return "n/a" if x is None else f"{x:.6f}"

    print(f"psnr {report.mean_psnr:.2f} dB  ssim {report.mean_ssim:.4f}  "
          f"chamfer {fmt(report.chamfer)}  reprojection {fmt(report.reprojection)}")
    return 0


def _cmd_bench(args) -> int:
    values = _resolve(args, {"seed": "seed"})
    near, far = values["near"], values["far"]
    rng = np.random.default_rng(cfgmod.stage_seed(values["seed"], "bench"))
    scene = ds.random_scene(rng)
    rig = cfgmod.build_rig(values)
    views = [ds.render(scene, cam, near, far) for cam in rig]
    viewset = _viewset_from_views(views)

    agg = fr.Aggregator(fr.AggregatorConfig(
        in_channels=viewset.feature_channels, hidden=values["agg_hidden"],
        out_channels=values["agg_out"], heads=values["heads"],
        layers=values["agg_layers"], time_dim=values["agg_time_dim"]), rng)

    size = values["image_size"]
    grid = size // 2
    pooled = views[0].depth.reshape(grid, 2, grid, 2).mean(axis=(1, 3))
    center = np.clip(ds.denormalize_depth(pooled, near, far), near, far)
    offsets = np.linspace(-0.05, 0.05, values["depth_D"]) * (far - near)
    sparse = np.clip(center[..., None] + offsets, near, far)

    rows = fr.benchmark_frustum(viewset, 0, args.t, agg, sparse,
                                near=near, far=far, repeats=args.repeats)
    path = os.path.join(args.out, args.name)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write("mode,depth_samples,seconds,peak_mb\n")
        for row in rows:
            fh.write(f"{row['mode']},{row['depth_samples']},"
                     f"{row['seconds']:.6f},{row['peak_mb']:.3f}\n")
    guided = next(r for r in rows if r["mode"] == "guided")
    print(f"wrote {path}; guided D={guided['depth_samples']} takes "
          f"{guided['seconds']:.4f}s")
    return 0


def _cmd_export(args) -> int:
    values = _resolve(args, {"threshold": "depth_threshold"})
    if args.gen:
        views, manifest = _read_generated(args.gen)
        near, far = manifest["near"], manifest["far"]
    else:
        data = ds.read_dataset(args.data)
        views = data.load_scene_views(args.scene)
        near, far = data.near, data.far
    cloud = engine.extract_pointcloud(_viewset_from_views(views),
                                      depth_threshold=values["depth_threshold"],
                                      near=near, far=far)
    path = args.ply or os.path.join(args.out, "cloud.ply")
    engine.write_ply(path, cloud)
    print(f"wrote {len(cloud)} points to {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MVRGBDError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
