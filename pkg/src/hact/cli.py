"""Command-line entry point: ``hact <subcommand> ...``."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import HactConfig, load_config
from .dataset import apply_label_map, label_map_by_name, load_manifest
from .entity_detect import NucleiSet, detect_nuclei_blob, load_nuclei_centroids
from .graph_build import FeatureSpec
from .pipeline import build_graph, build_manifest_graphs, feature_variant, load_graphs, read_image, write_image, write_image_dataset
from .stain_norm import StainBasis, estimate_stain_basis, normalize_image, od_transform
from .synthetic import (
    ABLATION_RECIPES,
    DEFAULT_RECIPES,
    generate_image_dataset,
    generate_synthetic_dataset,
    random_hact_graph,
)
from .training import evaluate, model_gradcheck, repeat_with_seeds, train

RECIPES = {"default": DEFAULT_RECIPES, "ablation": ABLATION_RECIPES}


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config(args, **extra) -> HactConfig:
    overrides = {k: getattr(args, k, None) for k in ("epochs", "seed", "batch_size", "learning_rate")}
    overrides.update(extra)
    return load_config(getattr(args, "config", None), overrides)


def _manifest(args):
    manifest = load_manifest(args.manifest)
    if args.label_map != "identity":
        manifest = apply_label_map(label_map_by_name(args.label_map, manifest.class_names), manifest)
    return manifest


def _split_data(manifest, config, name):
    part = manifest.split(name)
    return load_graphs(part, config) if part.entries else ([], [])


# ---------------------------------------------------------------------- commands


def cmd_stain_normalize(args) -> int:
    image = read_image(args.input)
    if args.target_basis:
        target = StainBasis.load(args.target_basis)
    else:
        target = estimate_stain_basis(od_transform(read_image(args.target), args.background_threshold)[0])
    if args.save_basis:
        target.save(args.save_basis)
    write_image(normalize_image(image, target, args.background_threshold), args.output)
    return 0


def cmd_build_graph(args) -> int:
    overrides = {
        "k": args.k,
        "d_min": args.d_min,
        "n_segments": args.n_segments,
        "compactness": args.compactness,
        "similarity_threshold": args.similarity_threshold,
        "feature_mode": args.feature_mode,
    }
    config = load_config(args.config, overrides)
    if args.manifest:
        result = build_manifest_graphs(load_manifest(args.manifest), args.output, config)
        print(f"wrote {len(result.entries)} graphs and {Path(args.output) / 'manifest.jsonl'}")
        return 0
    image = read_image(args.image)
    h, w = image.shape[:2]
    nuclei: NucleiSet = load_nuclei_centroids(args.nuclei, (w, h)) if args.nuclei else detect_nuclei_blob(image)
    spec = None
    if config.feature_mode == "external":
        spec = FeatureSpec("external", external_cell=args.cell_features, external_tissue=args.tissue_features)
    out = build_graph(image, nuclei, config, spec)
    out.graph.save(args.output)
    if args.superpixels_out:
        out.regions.save(args.superpixels_out)
    g = out.graph
    print(
        f"cells {g.cell_graph.node_count} (edges {g.cell_graph.edges.shape[0]}), "
        f"regions {g.tissue_graph.node_count} (edges {g.tissue_graph.edges.shape[0]})"
    )
    return 0


def cmd_synth_data(args) -> int:
    recipes = RECIPES[args.recipe]
    if args.kind == "graphs":
        ds = generate_synthetic_dataset(args.seed, args.n_per_class, recipes)
        manifest = ds.write(args.output)
    else:
        manifest = write_image_dataset(*generate_image_dataset(args.seed, args.n_per_class, recipes), args.output)
    print(f"wrote {len(manifest.entries)} samples to {Path(args.output) / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    manifest = _manifest(args)
    train_data = _split_data(manifest, config, "train")
    val_data = _split_data(manifest, config, "val")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    if args.seeds:
        test_data = _split_data(manifest, config, "test")
        if not test_data[0]:
            raise SystemExit("--seeds needs a test split in the manifest")
        summary = repeat_with_seeds(args.seeds, train_data, val_data, test_data, config, manifest.class_names, out, log)
        _dump_json(summary.to_json(), out / "seeds_summary.json")
        print(f"test weighted F1 {summary.mean:.4f} +- {summary.std:.4f} over seeds {summary.seeds}")
        return 0
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(*train_data, *val_data, config, manifest.class_names, out_dir=out, resume=resume, log_fn=log)
    _dump_json(result.log, out / "train_log.json")
    print(f"best val weighted F1 {result.state.best_val_f1:.4f} at epoch {result.state.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    config = HactConfig.from_json(ckpt.header["config"])
    manifest = _manifest(args)
    graphs, labels = _split_data(manifest, config, args.split)
    if not graphs:
        raise SystemExit(f"manifest has no {args.split!r} entries")
    metrics = evaluate(ckpt, graphs, labels)
    if args.output:
        _dump_json(metrics.to_json(), args.output)
    print(metrics.format_table())
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    graphs = [random_hact_graph(rng, args.max_cells, args.max_regions) for _ in range(args.n_graphs)]
    labels = rng.integers(0, args.n_classes, len(graphs))
    config = _config(args, model=args.model, layer_type=args.layer_type, jk=args.jk)
    max_entries = None if args.max_entries <= 0 else args.max_entries
    res = model_gradcheck(graphs, labels, config, args.n_classes, max_entries=max_entries, seed=args.seed)
    print(f"max relative error {res.worst:.3e} ({res.worst_param}) in {res.seconds:.1f} s")
    return 0 if res.worst < args.tolerance else 1


def cmd_ablate(args) -> int:
    base = _config(args)
    manifest = _manifest(args)
    splits = {name: _split_data(manifest, base, name) for name in ("train", "val", "test")}
    rows = []
    for features, layer, jk, model in itertools.product(args.features, args.layer_types, args.jk_modes, args.models):
        cfg = replace(base, model=model, layer_type=layer, jk=jk)
        data = [(feature_variant(g, features), y) for g, y in (splits["train"], splits["val"], splits["test"])]
        summary = repeat_with_seeds(args.seeds, *data, cfg, manifest.class_names)
        row = {"features": features, "layer_type": layer, "jk": jk, "model": model, **summary.to_json()}
        rows.append(row)
        print(f"{features:6s} {layer:4s} {jk:7s} {model:5s} wF1 {summary.mean:.4f} +- {summary.std:.4f}")
    _dump_json(rows, args.output)
    return 0


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hact", description="Hierarchical cell-to-tissue graphs and HACT-Net.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stain-normalize", help="Macenko-normalize an RGB image to a target stain basis")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--target", help="reference image whose stain basis is the target")
    target.add_argument("--target-basis", help="JSON stain basis")
    p.add_argument("--save-basis", help="write the target basis as JSON")
    p.add_argument("--background-threshold", type=float, default=0.15)
    p.set_defaults(func=cmd_stain_normalize)

    p = sub.add_parser("build-graph", help="build a HACT graph from an image (or every image of a manifest)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest", help="image manifest; --output is then a directory")
    p.add_argument("--nuclei", help="CSV of integer x,y centroids (default: blob detection)")
    p.add_argument("--output", "--out", dest="output", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--d-min", type=float)
    p.add_argument("--n-segments", type=int)
    p.add_argument("--compactness", type=float)
    p.add_argument("--similarity-threshold", type=float)
    p.add_argument("--feature-mode", choices=["none", "handcrafted", "external"])
    p.add_argument("--cell-features", "--features-cell", dest="cell_features", help="CSV, one row per nucleus (external mode)")
    p.add_argument(
        "--tissue-features", "--features-tissue", dest="tissue_features", help="CSV, one row per superpixel (external mode)"
    )
    p.add_argument("--superpixels-out", help="write the merged region map as 16-bit PNG")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=150)
    p.add_argument("--recipe", choices=sorted(RECIPES), default="default")
    p.add_argument("--kind", choices=["graphs", "images"], default="graphs")
    p.set_defaults(func=cmd_synth_data)

    def add_run_args(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--config")
        p.add_argument("--label-map", default="identity", help="identity, 4class, or a binary task name")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)

    p = sub.add_parser("train", help="train HACT-Net on a manifest's train/val splits")
    add_run_args(p)
    p.add_argument("--output", required=True, help="directory for checkpoints and logs")
    p.add_argument("--resume", help="last.ckpt to continue from")
    p.add_argument("--seeds", type=int, nargs="+", help="repeat per seed and report test mean +- std")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--label-map", default="identity")
    p.add_argument("--split", default="test")
    p.add_argument("--output", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model on random graphs")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-graphs", type=int, default=10)
    p.add_argument("--max-cells", type=int, default=15)
    p.add_argument("--max-regions", type=int, default=4)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--max-entries", type=int, default=8, help="entries sampled per tensor; <= 0 checks all")
    p.add_argument("--model", choices=["hact", "cg", "tg"])
    p.add_argument("--layer-type", choices=["pna", "gin"])
    p.add_argument("--jk", choices=["none", "concat", "lstm"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="features x layer type x jumping knowledge x model grid")
    add_run_args(p)
    p.add_argument("--output", required=True, help="results JSON path")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--features", nargs="+", choices=["morph", "none"], default=["morph", "none"])
    p.add_argument("--layer-types", nargs="+", choices=["pna", "gin"], default=["pna", "gin"])
    p.add_argument("--jk-modes", nargs="+", choices=["none", "concat", "lstm"], default=["none", "concat", "lstm"])
    p.add_argument("--models", nargs="+", choices=["hact", "cg", "tg"], default=["hact", "cg", "tg"])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
