"""Long-running acceptance jobs, run in a fresh single-threaded interpreter.

Usage: python3 acceptance_jobs.py {classify,ablation,determinism} [out_dir]
Each job prints one JSON object on its last stdout line.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

from hact.checkpoint import Checkpoint
from hact.config import HactConfig
from hact.pipeline import build_manifest_graphs, load_graphs, write_image_dataset
from hact.synthetic import ABLATION_RECIPES, generate_image_dataset, generate_synthetic_dataset
from hact.training import evaluate, repeat_with_seeds, train

ABLATION_N_PER_CLASS = 90
ABLATION_EPOCHS = 15
ABLATION_SEEDS = (0, 1, 2)


def classify() -> dict:
    start = time.perf_counter()
    ds = generate_synthetic_dataset(0)
    cfg = HactConfig()  # batch 16, lr 1e-3, 100 epochs
    result = train(*ds.subset("train"), *ds.subset("val"), cfg, ds.class_names)
    metrics = evaluate(result.state.best_checkpoint(), *ds.subset("test"))
    return {
        "accuracy": metrics.accuracy,
        "epochs": result.state.epoch,
        "best_epoch": result.state.best_epoch,
        "sizes": [len(ds.subset(s)[0]) for s in ("train", "val", "test")],
        "seconds": time.perf_counter() - start,
    }


def ablation() -> dict:
    ds = generate_synthetic_dataset(1, n_per_class=ABLATION_N_PER_CLASS, class_recipes=ABLATION_RECIPES)
    splits = [ds.subset(s) for s in ("train", "val", "test")]
    out = {}
    for model in ("hact", "cg", "tg"):
        cfg = HactConfig(model=model, epochs=ABLATION_EPOCHS)
        summary = repeat_with_seeds(ABLATION_SEEDS, *splits, cfg, ds.class_names)
        out[model] = summary.to_json()
    return out


def determinism(out_dir: Path) -> dict:
    """Images -> graphs -> training -> evaluation; returns digests of every artifact."""
    import hashlib

    images = write_image_dataset(*generate_image_dataset(3, n_per_class=6), out_dir / "images")
    cfg = HactConfig(epochs=3, n_segments=40)
    graphs = build_manifest_graphs(images, out_dir / "graphs", cfg)
    tr, va, te = (load_graphs(graphs.split(s)) for s in ("train", "val", "test"))
    train(*tr, *va, cfg, graphs.class_names, out_dir=out_dir / "run")
    metrics = evaluate(Checkpoint.load(out_dir / "run" / "best.ckpt"), *te)
    (out_dir / "metrics.json").write_text(json.dumps(metrics.to_json(), sort_keys=True))
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.suffix in (".json", ".ckpt", ".png", ".csv"))
    return {str(p.relative_to(out_dir)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


if __name__ == "__main__":
    job = sys.argv[1]
    if job == "classify":
        result = classify()
    elif job == "ablation":
        result = ablation()
    elif job == "determinism":
        result = determinism(Path(sys.argv[2]))
    else:
        raise SystemExit(f"unknown job {job!r}")
    print(json.dumps(result))
