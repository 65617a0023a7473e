"""Batch command-line entry point: data generation, pretraining, features, probes, ablations."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_override_value
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateBatchError,
    DegenerateInputError,
    DegenerateViewError,
    EmptySceneError,
    FormatError,
    NumericError,
    SpecError,
)
from .evaluation import HierFeatures, layer_importance, limited_annotation_split, pca_colors
from .hunet import HUNetConfig
from .pipeline import (
    DUMP_SUFFIX,
    ProbeData,
    class_rows,
    generate_dataset,
    instance_map,
    labeled_fraction,
    linear_miou,
    load_scenes,
    nn_miou,
    read_index,
    read_manifest,
    scene_features,
    select_split,
    write_index,
    write_report,
)
from .scene import FeatureDump, PointCloud, read_feature_dump, read_ply, write_feature_dump, write_ply
from .train import load_state, pretrain

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATIONS = ("mask-ratio", "masking", "supervision", "strategy", "layers", "nn-metric")
MASK_RATIOS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


class UsageError(ConfigError):
    pass


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """``--ns.key value``, ``--ns.key=value`` or a bare ``--ns.key`` (meaning true)."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            out[key] = parse_override_value(text)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            out[key] = parse_override_value(tokens[i + 1])
            i += 2
        else:
            out[key] = True
            i += 1
    return out


def _run_config(args, overrides: dict) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), overrides)
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def _load_weights(path, which: str):
    state, ck = load_state(path)
    params = state.teacher if which == "teacher" else state.student
    voxel = float(ck.meta.get("views", {}).get("voxel_size", 0.1))
    return params, ck.config, voxel


def _parse_levels(text: str, model: HUNetConfig):
    if text == "all":
        return tuple(range(model.levels))
    try:
        levels = tuple(sorted({int(t) for t in text.split(",") if t.strip()}))
    except ValueError:
        raise UsageError(f"--levels expects 'all' or a comma list of integers, got {text!r}") from None
    if not levels or levels[0] < 0 or levels[-1] >= model.levels:
        raise UsageError(f"--levels {text!r} outside 0..{model.levels - 1}")
    return levels


# ----------------------------------------------------------------------------
# commands

def cmd_gen_data(args, overrides) -> int:
    if overrides:
        raise UsageError(f"gen-data takes no config overrides, got {sorted(overrides)}")
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    entries = generate_dataset(args.out, args.scenes, args.seed if args.seed is not None else 0, args.jobs)
    print(f"wrote {len(entries)} scenes to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, overrides) -> int:
    cfg = _run_config(args, overrides)
    model, train, views = cfg.model(), cfg.train(), cfg.views()
    entries = select_split(read_manifest(args.data), "train")
    if not entries:
        raise EmptySceneError(f"{args.data}: no training scenes")
    scenes = load_scenes(entries, args.jobs)
    out = Path(args.out)
    metrics = out.with_name(out.stem + ".metrics.tsv")

    def progress(row):
        print(f"epoch {row['epoch']}\tloss {row['loss']:.6f}", flush=True)

    pretrain(scenes, model, train, views, checkpoint=out, metrics=metrics, resume=args.resume,
             jobs=args.jobs, progress=progress)
    return EXIT_OK


def cmd_features(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    params, model, voxel = _load_weights(args.ckpt, cfg.probe().weights)
    levels = _parse_levels(args.levels, model)
    entries = select_split(read_manifest(args.data), args.split)
    clouds = load_scenes(entries, args.jobs)
    feats = scene_features(params, model, clouds, voxel, levels, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry, cloud, f in zip(entries, clouds, feats):
        name = entry.scene_id + DUMP_SUFFIX
        write_feature_dump(FeatureDump(f.features, list(f.widths), cloud.labels), out / name)
        rows.append((entry.scene_id, name, str(entry.path.resolve())))
    write_index(out, rows)
    print(f"wrote {len(rows)} feature dumps to {out}")
    return EXIT_OK


def _read_probe_data(dump_dir, need_clouds: bool) -> ProbeData:
    rows = read_index(dump_dir)
    if not rows:
        raise EmptySceneError(f"{dump_dir}: no feature dumps")
    dumps = [read_feature_dump(p) for _, p, _ in rows]
    widths = {tuple(d.channels) for d in dumps}
    if len(widths) != 1:
        raise FormatError(f"{dump_dir}: feature dumps disagree in level widths")
    clouds = None
    if need_clouds:
        if any(ply is None for _, _, ply in rows):
            raise FormatError(f"{dump_dir}: index does not name the source scenes")
        clouds = [read_ply(ply) for _, _, ply in rows]
        for c, d in zip(clouds, dumps):
            if len(c) != d.num_points:
                raise FormatError(f"{c.scene_id}: dump rows do not match the scene's points")
    return ProbeData([d.features.astype(np.float64) for d in dumps],
                     [d.labels.astype(np.int64) for d in dumps], clouds)


def _apply_limited(data: ProbeData, spec: str | None, seed: int) -> ProbeData:
    if spec is None:
        return data
    mode, sep, amount = spec.partition(":")
    if not sep or mode not in ("scenes", "points"):
        raise UsageError(f"--limited expects scenes:FRACTION or points:COUNT, got {spec!r}")
    try:
        value = float(amount)
    except ValueError:
        raise UsageError(f"--limited amount {amount!r} is not a number") from None
    labels = limited_annotation_split(data.labels, mode, value, seed)
    return ProbeData(data.features, labels, data.clouds)


def cmd_probe(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    settings = cfg.probe()
    metric = args.metric or settings.metric
    if metric not in ("L1", "L2", "cosine"):
        raise UsageError(f"--metric must be L1, L2 or cosine, got {metric!r}")
    seed = args.seed if args.seed is not None else 0
    need_clouds = args.task in ("nn", "instance")
    train = _apply_limited(_read_probe_data(args.train, need_clouds), args.limited, seed)
    val = _read_probe_data(args.val, need_clouds)
    if args.task == "linear":
        score, per_class = linear_miou(train, val, settings.probe_config(seed))
        rows = [("linear", "val", "mIoU", score)] + class_rows("linear", "val", per_class)
    elif args.task == "nn":
        score, per_class = nn_miou(train, val, metric, settings.superpoint_cell, settings.unit_norm)
        rows = [("nn", "val", f"mIoU[{metric}]", score)] + class_rows("nn", "val", per_class)
    else:
        rows = [("instance", "val", "mAP@50", instance_map(train, val, settings, seed))]
    if args.limited is not None:
        rows.append((args.task, "train", "labeled_fraction", labeled_fraction(train.labels)))
    print(write_report(args.out, rows), end="")
    return EXIT_OK


def cmd_viz_pca(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    params, model, voxel = _load_weights(args.ckpt, cfg.probe().weights)
    cloud = read_ply(args.scene)
    feats = scene_features(params, model, [cloud], voxel)[0]
    colors = pca_colors(feats.features)
    write_ply(PointCloud(cloud.positions, colors, cloud.labels, cloud.instance_ids, cloud.scene_id), args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def _ablation_settings(which: str) -> list[tuple[str, dict]]:
    if which == "mask-ratio":
        return [(f"ratio={r:.1f}", {"mask.ratio": r}) for r in MASK_RATIOS]
    if which == "masking":
        return [("no_mask", {"train.no_mask": True}), ("mask", {"train.no_mask": False})]
    if which == "supervision":
        return [("last", {"train.supervise_last_only": True}), ("all", {"train.supervise_last_only": False})]
    if which == "strategy":
        return [("top-down", {"mask.topdown": True}), ("bottom-up", {"mask.topdown": False})]
    return []


def _probe_split_data(params, model, voxel, entries, jobs, split) -> tuple[ProbeData, list]:
    chosen = select_split(entries, split)
    if not chosen:
        raise EmptySceneError(f"no {split} scenes")
    clouds = load_scenes(chosen, jobs)
    feats = scene_features(params, model, clouds, voxel, None, jobs)
    return ProbeData([f.features for f in feats], [c.labels for c in clouds], clouds), feats


def cmd_ablate(args, overrides) -> int:
    base = _run_config(args, overrides)
    settings = base.probe()
    seed = args.seed if args.seed is not None else 0
    entries = read_manifest(args.data)
    task = f"ablate/{args.which}"
    rows = []

    def trained_weights(cfg: RunConfig):
        scenes = load_scenes(select_split(entries, "train"), args.jobs)
        if not scenes:
            raise EmptySceneError(f"{args.data}: no training scenes")
        state = pretrain(scenes, cfg.model(), cfg.train(), cfg.views(), jobs=args.jobs)
        params = state.teacher if settings.weights == "teacher" else state.student
        return params, cfg.model(), cfg.voxel_size()

    if args.which in ("layers", "nn-metric"):
        weights = _load_weights(args.ckpt, settings.weights) if args.ckpt else trained_weights(base)
        train, train_feats = _probe_split_data(*weights, entries, args.jobs, "train")
        val, val_feats = _probe_split_data(*weights, entries, args.jobs, "val")
        if args.which == "layers":
            def stack(feats):
                return HierFeatures(np.concatenate([f.features for f in feats]), feats[0].levels, feats[0].widths)

            for kind, lv, score in layer_importance(stack(train_feats), np.concatenate(train.labels),
                                                    stack(val_feats), np.concatenate(val.labels),
                                                    settings.probe_config(seed)):
                label = "all" if kind == "all" else f"{kind}={lv}"
                rows.append((task, "val", f"mIoU[{label}]", score))
        else:
            for metric in ("L1", "L2", "cosine"):
                score, _ = nn_miou(train, val, metric, settings.superpoint_cell, settings.unit_norm)
                rows.append((task, "val", f"mIoU[{metric}]", score))
    else:
        for label, change in _ablation_settings(args.which):
            cfg = load_config(args.config, {**overrides, **change})
            if args.seed is not None:
                cfg.set("train.seed", args.seed)
            weights = trained_weights(cfg)
            train, _ = _probe_split_data(*weights, entries, args.jobs, "train")
            val, _ = _probe_split_data(*weights, entries, args.jobs, "val")
            score, _ = linear_miou(train, val, settings.probe_config(seed))
            rows.append((task, "val", f"mIoU[{label}]", score))
    print(write_report(args.out, rows), end="")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msm3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument("--jobs", type=int, default=1, help="scene-level worker threads")
        if config:
            p.add_argument("--config", default=None, help="YAML config file")

    p = sub.add_parser("gen-data", help="write synthetic PLY scenes and a train/val manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=64)
    common(p, config=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; metrics go next to it")
    p.add_argument("--resume", default=None)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("features", help="dump frozen hierarchical features per scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--levels", default="all")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("probe", help="linear, nearest-neighbor or instance probe on feature dumps")
    p.add_argument("--task", choices=("linear", "nn", "instance"), required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--metric", default=None)
    p.add_argument("--limited", default=None, help="scenes:FRACTION or points:COUNT")
    p.add_argument("--out", default=None, help="report file (TSV)")
    common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("viz-pca", help="color a scene by the top-3 principal components of its features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_viz_pca)

    p = sub.add_parser("ablate", help="run one ablation sweep and write a comparison report")
    p.add_argument("--which", choices=ABLATIONS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="pretrained weights for the layers and nn-metric sweeps")
    p.add_argument("--out", default=None, help="report file (TSV)")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


_CONFIG_ERRORS = (ConfigError, ContractError, SpecError)
_DATA_ERRORS = (FormatError, EmptySceneError, CheckpointError, DegenerateInputError, DegenerateViewError,
                DegenerateBatchError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args, parse_overrides(extra))
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
