"""Command-line entry point: ``gaa <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from gaa import __version__
from gaa.clustering import ClusterConfig, multi_round_cluster
from gaa.dataset_io import (
    ManifestEntry,
    load_feature_file,
    load_image,
    load_mask,
    read_manifest,
    save_feature_file,
    save_image,
    save_mask,
    scan_dataset,
    write_manifest,
)
from gaa.errors import ConfigError, DegenerateEnhancementError, GaatFormatError, StageError
from gaa.features import DEFAULT_WEIGHTS, FeatureBlock, anomaly_descriptors, fuse_features
from gaa.filtering import (
    LOSSES,
    TrainConfig,
    extract_local_features,
    load_model,
    save_model,
    score_image,
    select_top,
    train_filter,
)
from gaa.mask_enhance import SHAPES, EnhanceConfig, StructuringElement, enhance
from gaa.pipeline import load_config, render_overlay, run_pipeline, score_manifest
from gaa.placement import read_plan, synthesize_aligned

logger = logging.getLogger("gaa")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _weights(text: str) -> dict:
    out = dict(DEFAULT_WEIGHTS)
    for item in filter(None, text.split(",")):
        name, _, value = item.partition("=")
        if name not in out:
            raise argparse.ArgumentTypeError(f"unknown feature block {name!r}")
        out[name] = float(value)
    return out


def cmd_features(args) -> int:
    index = scan_dataset(args.dataset, args.layout, args.regions)
    records = index.anomaly_records
    if not records:
        raise ConfigError(f"no anomaly records under {args.dataset}")
    lab, lbp = zip(*(anomaly_descriptors(load_image(r.image), r.load_mask()) for r in records))
    blocks = [FeatureBlock("lab", np.array(lab), args.weights["lab"]),
              FeatureBlock("lbp", np.array(lbp), args.weights["lbp"])]
    if args.deep:
        deep = load_feature_file(args.deep)
        if len(deep) != len(records):
            raise ConfigError(f"{args.deep}: {len(deep)} rows for {len(records)} anomaly records")
        blocks.insert(0, FeatureBlock("deep", deep, args.weights["deep"]))
    fused = fuse_features(blocks)
    save_feature_file(args.out, fused)
    listing = Path(args.out).with_suffix(".records.tsv")
    listing.write_text("".join(f"{i}\t{r.label}\t{r.image}\t{r.mask}\n" for i, r in enumerate(records)),
                       encoding="utf-8")
    print(f"{len(records)} records, {fused.shape[1]} fused dims -> {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    x = load_feature_file(args.features)
    cfg = ClusterConfig(k_min=args.k_min, k_max=args.k_max, w1=args.w1, w2=args.w2, max_rounds=args.max_rounds,
                        restarts=args.restarts, seed=args.seed, log_base=args.log_base,
                        eq2_literal=args.eq2_literal, jobs=args.jobs)
    tree = multi_round_cluster(x, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(tree.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"{len(x)} samples -> {tree.n_leaves} clusters in {len(tree.rounds)} rounds -> {args.out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    cfg = EnhanceConfig(
        close_b1=StructuringElement(args.shape, args.close_radius),
        erode_b2=StructuringElement(args.shape, args.erode_radius),
        delta=args.delta,
        perturb_sigma=args.sigma,
        alpha=args.alpha,
        seed=args.seed,
    )
    mask = load_mask(args.mask)
    a_avg = args.a_avg if args.a_avg is not None else float(mask.sum())
    mg = enhance(mask, cfg, a_avg)
    save_mask(args.out, mg)
    print(f"area {int(mask.sum())} -> {int(mg.sum())} (target {a_avg}) -> {args.out}")
    return EXIT_OK


def _read_pool(directory: Path):
    pool, names = {}, {}
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    if not subdirs:
        raise ConfigError(f"mask pool {directory} has no cluster subdirectories")
    numeric = all(p.name.isdigit() for p in subdirs)
    for i, d in enumerate(subdirs):
        cid = int(d.name) if numeric else i
        files = sorted(d.glob("*.png"))
        pool[cid] = [load_mask(f) for f in files]
        names[cid] = [f"{d.name}/{f.name}" for f in files]
    return pool, names


def cmd_place(args) -> int:
    index = scan_dataset(args.dataset, args.layout, args.regions)
    pool, names = _read_pool(Path(args.mg_pool))
    plan = read_plan(args.plan)
    entries, warnings = synthesize_aligned(index, None, pool, plan, args.seed, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, prov = [], []
    for e in entries:
        path = out / f"r{e.row:02d}_{e.index:04d}.png"
        save_mask(path, e.placed.mask)
        manifest.append((Path(e.image_path).resolve(), path.resolve(), e.cluster_id, e.kind))
        prov.append(json.dumps(e.provenance(), sort_keys=True) + "\n")
    write_manifest(out / "placed.tsv", [ManifestEntry(*m) for m in manifest])
    (out / "provenance.jsonl").write_text("".join(prov), encoding="utf-8")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(entries)} masks -> {out}")
    return EXIT_OK


def cmd_train_filter(args) -> int:
    index = scan_dataset(args.dataset, args.layout)
    if not index.normal_images:
        raise ConfigError(f"no normal images under {args.dataset}")
    maps = [extract_local_features(load_image(p), args.patch, args.stride) for p in index.normal_images]
    cfg = TrainConfig(epochs=args.epochs, batch=args.batch, noise_sigma=args.sigma, hidden=args.hidden,
                      loss=args.loss, seed=args.seed)
    model = train_filter(maps, cfg)
    model.meta.update({"patch": args.patch, "stride": args.stride})
    save_model(args.out, model)
    print(f"trained on {len(maps)} images, final epoch loss {model.meta['final_epoch_loss']:.6g} -> {args.out}")
    return EXIT_OK


def _patch_stride(args, model):
    patch = args.patch or model.meta.get("patch", 16)
    stride = args.stride or model.meta.get("stride", 8)
    return int(patch), int(stride)


def cmd_score(args) -> int:
    model = load_model(args.model)
    entries = read_manifest(args.pairs)
    scored = score_manifest(model, entries, *_patch_stride(args, model))
    write_manifest(args.out, scored)
    print(f"{len(scored)} pairs scored -> {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    entries = read_manifest(args.scored)
    kept = select_top(entries, args.top)
    write_manifest(args.out, kept)
    print(f"kept {len(kept)} of {len(entries)} -> {args.out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if not args.config:
        raise ConfigError("pipeline needs --config")
    cfg = load_config(args.config, seed=args.seed, jobs=args.jobs)
    result = run_pipeline(cfg, force=args.force)
    for st in result.report["stages"]:
        print(f"{st['stage']:<9} {st['status']:<8} {st['duration_s']:>8.3f}s  {st['counts']}")
    print(f"{len(result.manifest)} pairs in {cfg.output / 'final.tsv'}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    image = load_image(args.image)
    mask = load_mask(args.mask)
    scores = None
    if args.model:
        model = load_model(args.model)
        feats = extract_local_features(image, *_patch_stride(args, model))
        scores = score_image(model, feats, *mask.shape)
    save_image(args.out, render_overlay(image, mask, scores, alpha=args.alpha))
    print(f"overlay -> {args.out}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from gaa.toy import write_toy_project

    cfg = write_toy_project(args.out, seed=args.seed)
    print(f"toy project written; run: gaa pipeline --config {cfg}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (YAML or JSON)")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--force", action="store_true", help="rerun stages even if up to date")
    common.add_argument("--jobs", type=int, default=1, help="worker threads where supported")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="gaa", description="Region-aware anomaly mask synthesis toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    def dataset_args(p):
        p.add_argument("--dataset", required=True, help="category root directory")
        p.add_argument("--layout", default="mvtec_ad", choices=("mvtec_ad", "mvtec_loco"))

    p = add("features", cmd_features, "fuse LAB/LBP (and optional deep) features of anomaly regions")
    dataset_args(p)
    p.add_argument("--regions")
    p.add_argument("--deep", help="GAAT matrix of deep features, one row per anomaly record")
    p.add_argument("--weights", type=_weights, default=dict(DEFAULT_WEIGHTS), help="e.g. deep=1,lab=0.5,lbp=0.5")
    p.add_argument("--out", required=True)

    p = add("cluster", cmd_cluster, "multi-round clustering of a feature matrix")
    p.add_argument("--features", required=True)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=1.0)
    p.add_argument("--max-rounds", type=int, default=2)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--log-base", type=float, default=None)
    p.add_argument("--eq2-literal", action="store_true", help="minimize raw w1*CH + w2*DB")
    p.add_argument("--out", required=True)

    p = add("enhance", cmd_enhance, "turn a ground-truth mask into an enhanced pseudo-mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--a-avg", type=float, default=None, help="target average area (default: own area)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--shape", choices=SHAPES, default="square")
    p.add_argument("--close-radius", type=int, default=1)
    p.add_argument("--erode-radius", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("place", cmd_place, "place pool masks into region masks following a plan")
    dataset_args(p)
    p.add_argument("--regions")
    p.add_argument("--mg-pool", required=True, help="directory with one subdirectory of PNG masks per cluster")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)

    p = add("train-filter", cmd_train_filter, "train the noise discriminator on normal images")
    dataset_args(p)
    p.add_argument("--epochs", type=int, default=160)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.015)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--loss", choices=LOSSES, default="hinge")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "compute ARS for every pair of a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("filter", cmd_filter, "keep the top pairs per (cluster, kind)")
    p.add_argument("--scored", required=True)
    p.add_argument("--top", type=int, required=True)
    p.add_argument("--out", required=True)

    add("pipeline", cmd_pipeline, "run every stage from a config file")

    p = add("overlay", cmd_overlay, "render a mask (and optional score map) over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--model", help="filter model for a score heat tint")
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = add("make-toy", cmd_make_toy, "write a tiny synthetic dataset, plan and config")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = None if args.command == "pipeline" else 0
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except DegenerateEnhancementError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, GaatFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
