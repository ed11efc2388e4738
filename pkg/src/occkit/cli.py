"""Command-line surface wiring the pipeline into reproducible artifacts.

Subcommands: synth, preprocess, fuse, predict, train, eval, bench. All
reports are JSON with sorted keys; every command is byte-reproducible for a
fixed seed. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import DataError, NumericalError, OcckitError
from . import grid as gridmod
from . import pointprep, scenes
from .pointprep import FillScope, PreprocessConfig
from .pipeline import (
    OccModel,
    PipelineConfig,
    evaluate,
    load_checkpoint,
    predict,
    prepare_sample,
    save_checkpoint,
)
from .training import active_train

log = logging.getLogger("occkit")

BENCH_DELTAS = (0.1, 0.2, 0.3, 1.0)


def _setup_logging():
    level = os.environ.get("OCCKIT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config(args, default_preset="tiny"):
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return PipelineConfig.from_json(json.load(fh))
    preset = getattr(args, "preset", None) or default_preset
    return PipelineConfig.for_preset(preset, seed=args.seed)


def _load_sample(sample_dir, cfg):
    scene_path = os.path.join(sample_dir, "scene.json")
    if not os.path.exists(scene_path):
        raise DataError(f"{sample_dir}: missing scene.json")
    spec = scenes.load_scene(scene_path)
    cloud = pointprep.read_cloud(os.path.join(sample_dir, "cloud.ocfp"))
    gt = gridmod.read_occg(os.path.join(sample_dir, "gt.occg"))
    images = [
        scenes.read_ppm(os.path.join(sample_dir, f"cam_{cam.cam_id}.ppm"))
        for cam in spec.rig
    ]
    return prepare_sample(spec, cfg, cloud=cloud, images=images, gt=gt)


def _model_for(args, cfg):
    if getattr(args, "ckpt", None):
        model, ckpt_cfg = load_checkpoint(args.ckpt)
        return model, ckpt_cfg
    return OccModel.create(cfg), cfg


def _cmd_synth(args):
    cfg = _load_config(args, default_preset=args.preset)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = scenes.preset(args.preset, seed=args.seed + i)
        sdir = os.path.join(args.out, f"sample_{i:03d}")
        os.makedirs(sdir, exist_ok=True)
        scenes.save_scene(os.path.join(sdir, "scene.json"), spec)
        cloud = scenes.cast_lidar(spec)
        pointprep.write_ocfp(os.path.join(sdir, "cloud.ocfp"), cloud)
        gridmod.write_occg(os.path.join(sdir, "gt.occg"), scenes.rasterize_gt(spec))
        for cam, img in zip(spec.rig, scenes.render_views(spec)):
            scenes.write_ppm(os.path.join(sdir, f"cam_{cam.cam_id}.ppm"), img)
        _write_json(os.path.join(sdir, "config.json"), cfg.to_json())
    _write_json(os.path.join(args.out, "config.json"), cfg.to_json())
    log.info("wrote %d samples to %s", args.count, args.out)
    return 0


def _cmd_preprocess(args):
    cfg = _load_config(args)
    pp = PreprocessConfig(
        tau=args.tau,
        theta=args.theta,
        seed=args.seed,
        fill_scope=FillScope(args.fill_scope),
    )
    cloud = pointprep.read_cloud(args.cloud)
    bins, dropped = gridmod.bin_points(cloud, cfg.grid)
    refs = pointprep.preprocess(bins, cloud, pp, cfg.grid)
    counts = [refs.voxels[k].count for k in refs.sorted_keys()]
    synthetic = sum(
        int((refs.voxels[k].source == pointprep.SOURCE_SYNTHETIC).sum())
        for k in refs.sorted_keys()
    )
    report = {
        "cloud_points": len(cloud),
        "dropped_points": dropped,
        "processed_voxels": len(counts),
        "reference_points": int(sum(counts)),
        "synthetic_points": synthetic,
        "min_count": int(min(counts)) if counts else 0,
        "max_count": int(max(counts)) if counts else 0,
        "tau": pp.tau,
        "theta": pp.theta,
    }
    _write_json(args.out, report)
    return 0


def _cmd_fuse(args):
    cfg = _load_config(args)
    model, cfg = _model_for(args, cfg)
    sample = _load_sample(args.sample, cfg)
    from .fusion import occ_fuse

    fused, _ = occ_fuse(
        sample.lidar_volume, sample.maps, sample.refs, sample.proj,
        model.attention, cfg.grid,
    )
    os.makedirs(args.out, exist_ok=True)
    blob = os.path.join(args.out, "fused.f64")
    with open(blob, "wb") as fh:
        fh.write(np.ascontiguousarray(fused.data, dtype="<f8").tobytes())
    _write_json(
        os.path.join(args.out, "fused.json"),
        {"dims": list(fused.dims), "channels": fused.channels, "blob": "fused.f64"},
    )
    return 0


def _cmd_predict(args):
    cfg = _load_config(args)
    model, cfg = _model_for(args, cfg)
    if args.delta is not None:
        cfg.decoder = type(cfg.decoder)(
            delta=args.delta,
            split_factor=cfg.decoder.split_factor,
            n_class=cfg.decoder.n_class,
            rank_scope=cfg.decoder.rank_scope,
        )
    sample = _load_sample(args.sample, cfg)
    _, fine_grid, report, coarse_grid = predict(model, sample, cfg)
    os.makedirs(args.out, exist_ok=True)
    gridmod.write_occg(os.path.join(args.out, "pred.occg"), fine_grid)
    gridmod.write_occg(os.path.join(args.out, "coarse.occg"), coarse_grid)
    _write_json(os.path.join(args.out, "opcount.json"), report.to_json())
    _write_json(
        os.path.join(args.out, "metrics.json"), evaluate(fine_grid, sample.gt_fine)
    )
    return 0


def _cmd_train(args):
    root = args.data
    sample_dirs = sorted(
        os.path.join(root, d)
        for d in os.listdir(root)
        if d.startswith("sample_") and os.path.isdir(os.path.join(root, d))
    )
    if not sample_dirs:
        raise DataError(f"{root}: no sample_* directories")
    cfg_path = args.config or os.path.join(root, "config.json")
    with open(cfg_path) as fh:
        cfg = PipelineConfig.from_json(json.load(fh))
    cfg.training = type(cfg.training)(
        epochs=args.epochs,
        k_percent=args.k_percent,
        learning_rate=args.learning_rate,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    dataset = [_load_sample(d, cfg) for d in sample_dirs]
    model = OccModel.create(cfg)
    model, history = active_train(model, dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint"), model, cfg)
    with open(os.path.join(args.out, "history.jsonl"), "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec.to_json(), sort_keys=True))
            fh.write("\n")
    return 0


def _cmd_eval(args):
    pred = gridmod.read_occg(args.pred)
    gt = gridmod.read_occg(args.gt)
    _write_json(args.out, evaluate(pred, gt))
    return 0


def _cmd_bench(args):
    cfg = _load_config(args)
    model, cfg = _model_for(args, cfg)
    sample = _load_sample(args.sample, cfg)
    from .decoder import decode
    from .pipeline import forward_coarse

    # The fused volume does not depend on delta; compute it once per sweep.
    fused, _, _ = forward_coarse(model, sample, cfg)
    rows = []
    for delta in BENCH_DELTAS:
        dec = type(cfg.decoder)(
            delta=delta,
            split_factor=cfg.decoder.split_factor,
            n_class=cfg.decoder.n_class,
            rank_scope=cfg.decoder.rank_scope,
        )
        _, report, _ = decode(fused, sample.maps, sample.scene.rig, model.heads, dec, cfg.grid)
        row = report.to_json()
        row["delta"] = delta
        rows.append(row)
    _write_json(args.out, {"rows": rows})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occkit",
        description="Depth-estimation-free LiDAR-camera occupancy toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap; results are independent of this")
        p.add_argument("--config", help="pipeline config JSON path")
        if preset:
            p.add_argument("--preset", choices=("tiny", "small"), default="tiny")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="densify/reduce a point cloud")
    common(p)
    p.add_argument("--cloud", required=True,
                   help="OCFP binary or CSV (header x,y,z,intensity)")
    p.add_argument("--tau", type=int, default=5)
    p.add_argument("--theta", type=int, default=20)
    p.add_argument("--fill-scope", choices=("all_voxels", "non_empty_only"),
                   default="all_voxels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("fuse", help="compute the fused voxel volume")
    common(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("predict", help="fine occupancy prediction + metrics")
    common(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("train", help="active training on a dataset directory")
    common(p, preset=False)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--k-percent", type=float, default=70.0)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="compare two OCCG grids")
    common(p, preset=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="sweep the refinement fraction")
    common(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    return parser


def run_command(argv) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OcckitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
