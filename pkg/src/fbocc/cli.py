"""Command-line entry point: ``fbocc <subcommand>``.

Prediction files are tensor containers holding ``probs`` (float32,
classes x X x Y x Z) and ``labels`` (uint8, X x Y x Z). Ground-truth files hold
``semantics`` and ``mask_camera`` (or are Occ3D ``labels.npz`` archives).
JSON goes to stdout unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import container
from .losses import LossWeights, occupancy_losses, total_loss
from .metrics import accumulate, iou_per_class, iou_report, miou
from .occ_head import PredictionResult, decode
from .pipeline import ModelWeights, PipelineConfig, run_pipeline
from .postprocess import EnsembleMember, ensemble, search_weights, weights_from_json
from .scene import demo_scene, ground_truth


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def read_prediction(path) -> PredictionResult:
    t = container.read_container(path)
    if "probs" not in t:
        raise container.ContainerError("probs", f"missing from prediction file {path}")
    return PredictionResult(t["probs"].astype(np.float64))


def write_prediction(path, pred: PredictionResult) -> None:
    container.write_container(path, {"probs": pred.probs.astype(np.float32), "labels": decode(pred).astype(np.uint8)})


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "flip_tta", False):
        overrides["flip_tta"] = True
    if getattr(args, "temporal_tta", False):
        overrides["temporal_tta"] = True
    if getattr(args, "frame", None) is not None:
        overrides["frame"] = args.frame
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _check_shape(pred: PredictionResult, gt, what="prediction") -> None:
    if pred.probs.shape[1:] != gt.labels.shape:
        raise ValueError(f"{what} grid {pred.probs.shape[1:]} does not match ground truth {gt.labels.shape}")


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    spec = demo_scene(args.seed, n_frames=args.frames, grid=cfg.voxel_grid)
    spec.save(args.out)
    if args.gt_dir:
        d = Path(args.gt_dir)
        d.mkdir(parents=True, exist_ok=True)
        for f in range(len(spec.ego_trajectory)):
            container.write_occ_gt(d / f"gt_{f:03d}.fbt", ground_truth(spec, cfg.voxel_grid, f, args.threads))
    return 0


def _run(args, cfg) -> int:
    weights = ModelWeights.load(args.weights, cfg) if args.weights else None
    result = run_pipeline(args.scene, weights, cfg, seed=args.seed, threads=args.threads)
    if args.pred:
        write_prediction(args.pred, result.prediction)
    if args.timings:
        _emit(result.timings, args.timings)
    if args.out:
        Path(args.out).write_text(result.report_json())
    else:
        sys.stdout.write(result.report_json())
    return 0


def cmd_infer(args) -> int:
    return _run(args, _config(args))


def cmd_tta(args) -> int:
    cfg = _config(args)
    if not (cfg.flip_tta or cfg.temporal_tta):
        cfg = dataclasses.replace(cfg, flip_tta=True)
    return _run(args, cfg)


def cmd_eval(args) -> int:
    pred = read_prediction(args.pred)
    gt = container.read_occ_gt(args.gt)
    _check_shape(pred, gt)
    _emit(iou_report(accumulate(decode(pred), gt, use_mask=not args.no_mask)), args.out)
    return 0


def cmd_eval_loss(args) -> int:
    cfg = _config(args)
    pred = read_prediction(args.pred)
    gt = container.read_occ_gt(args.gt)
    _check_shape(pred, gt)
    grid = cfg.voxel_grid
    if grid.shape != gt.labels.shape:
        raise ValueError(f"config grid {grid.shape} does not match ground truth {gt.labels.shape}")
    total, breakdown = total_loss(occupancy_losses(pred, gt, grid), LossWeights())
    _emit({"total": total, "terms": breakdown}, args.out)
    return 0


def _members(specs) -> list:
    """``id=path[,path...]`` -> ``[(id, [paths])]`` keeping command-line order."""
    out = []
    for s in specs:
        mid, sep, paths = s.partition("=")
        if not sep or not mid or not paths:
            raise ValueError(f"member must look like id=path[,path...], got {s!r}")
        out.append((mid, paths.split(",")))
    ids = [m for m, _ in out]
    if len(set(ids)) != len(ids):
        raise ValueError("member ids must be unique")
    return out


def cmd_ensemble(args) -> int:
    members = _members(args.member)
    preds = [read_prediction(paths[0]) for _, paths in members]
    ids = [m for m, _ in members]
    if args.weights:
        table = weights_from_json(json.loads(Path(args.weights).read_text()), ids)
        mbs = [EnsembleMember(p) for p in preds]
        out = ensemble(mbs, np.ones(len(mbs)), table)
    elif args.gt:
        gt = container.read_occ_gt(args.gt)
        mbs = []
        for p in preds:
            _check_shape(p, gt, "member")
            ious = iou_per_class(accumulate(decode(p), gt))
            m = miou(ious)
            mbs.append(EnsembleMember(p, 0.0 if np.isnan(m) else m, np.nan_to_num(ious)))
        out = ensemble(mbs)
    else:
        out = ensemble([EnsembleMember(p) for p in preds])
    write_prediction(args.out, out)
    return 0


def cmd_search_weights(args) -> int:
    members = _members(args.member)
    gts = [container.read_occ_gt(g) for g in args.gt]
    preds = [[read_prediction(p) for p in paths] for _, paths in members]
    result = search_weights(preds, gts, budget=args.budget, seed=args.seed)
    _emit(result.to_json([m for m, _ in members]), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbocc", description="Forward-backward occupancy toolkit.")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=0, help="seed for weights, scenes and weight search")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a synthetic scene JSON (and optional GT containers)")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=3)
    g.add_argument("--gt-dir", help="also write gt_<frame>.fbt per frame here")
    g.set_defaults(func=cmd_gen_scene)

    for name, func, aliases in (("infer", cmd_infer, ["run-pipeline"]), ("tta", cmd_tta, [])):
        r = sub.add_parser(name, aliases=aliases, help="run the model on a scene and print the metrics report")
        r.add_argument("--scene", help="scene JSON (default: bundled demo scene)")
        r.add_argument("--weights", help="weights container (default: random from --seed)")
        r.add_argument("--frame", type=int)
        r.add_argument("--pred", help="write the prediction container here")
        r.add_argument("--timings", help="write per-stage timings JSON here")
        r.add_argument("--out", help="write the report here")
        r.add_argument("--flip-tta", action="store_true")
        r.add_argument("--temporal-tta", action="store_true")
        r.set_defaults(func=func)

    e = sub.add_parser("eval", help="per-class IoU and mIoU of a prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--no-mask", action="store_true", help="score every voxel, ignoring mask_camera")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    el = sub.add_parser("eval-loss", help="per-term occupancy loss breakdown")
    el.add_argument("--pred", required=True)
    el.add_argument("--gt", required=True)
    el.add_argument("--out")
    el.set_defaults(func=cmd_eval_loss)

    en = sub.add_parser("ensemble", help="two-factor weighted ensemble of prediction files")
    en.add_argument("--member", action="append", required=True, metavar="ID=PATH")
    en.add_argument("--weights", help="weight table JSON from search-weights")
    en.add_argument("--gt", help="derive default weights from IoUs on this ground truth")
    en.add_argument("--out", required=True)
    en.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("search-weights", help="search ensemble weights on validation frames")
    s.add_argument("--member", action="append", required=True, metavar="ID=PATH[,PATH...]")
    s.add_argument("--gt", nargs="+", required=True, help="one GT file per validation frame")
    s.add_argument("--budget", type=int, default=32)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        print("fbocc: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("fbocc: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"fbocc: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
