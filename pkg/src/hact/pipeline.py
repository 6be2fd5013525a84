"""Image-to-graph pipeline and manifest-driven dataset loading."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import HactConfig
from .dataset import DatasetManifest, ManifestEntry
from .entity_detect import (
    NucleiSet,
    SuperpixelMap,
    detect_nuclei_blob,
    load_nuclei_centroids,
    merge_superpixels,
    save_nuclei_centroids,
    slic_superpixels,
)
from .graph_build import FeatureSpec, HactGraph, assemble_hact, strip_morphology


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


@dataclass
class BuildOutput:
    graph: HactGraph
    superpixels: SuperpixelMap
    regions: SuperpixelMap


def build_graph(
    image: np.ndarray,
    nuclei: NucleiSet,
    config: HactConfig,
    spec: FeatureSpec | None = None,
) -> BuildOutput:
    """Superpixels -> merged tissue regions -> HACT graph for one image."""
    fine = slic_superpixels(image, n_segments=min(config.n_segments, image.shape[0] * image.shape[1]), compactness=config.compactness)
    regions = merge_superpixels(image, fine, config.similarity_threshold)
    spec = spec or FeatureSpec(config.feature_mode, config.patch_size_cell, config.patch_size_tissue)
    g = assemble_hact(image, nuclei, regions, spec, k=config.k, d_min=config.d_min, superpixels=fine)
    return BuildOutput(g, fine, regions)


def build_graph_from_files(image_path, nuclei_path, config: HactConfig) -> HactGraph:
    image = read_image(image_path)
    h, w = image.shape[:2]
    if nuclei_path is None:
        nuclei = detect_nuclei_blob(image)
    else:
        nuclei = load_nuclei_centroids(nuclei_path, (w, h))
    return build_graph(image, nuclei, config).graph


def load_graphs(manifest: DatasetManifest, config: HactConfig | None = None) -> tuple[list[HactGraph], list[int]]:
    """Graphs and labels of every entry; image entries are built on the fly with ``config``."""
    graphs = []
    for e in manifest.entries:
        if e.graph is not None:
            graphs.append(HactGraph.load(manifest.resolve(e.graph)))
        else:
            graphs.append(build_graph_from_files(manifest.resolve(e.image), manifest.resolve(e.nuclei), config or HactConfig()))
    return graphs, manifest.labels()


def build_manifest_graphs(manifest: DatasetManifest, out_dir, config: HactConfig) -> DatasetManifest:
    """Turn an image manifest into a graph manifest written under ``out_dir``."""
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(manifest.entries):
        rel = e.graph
        if rel is None:
            g = build_graph_from_files(manifest.resolve(e.image), manifest.resolve(e.nuclei), config)
            rel = f"graphs/{Path(e.image).stem}_{i:05d}.json"
            g.save(out / rel)
        else:
            rel = str(manifest.resolve(rel))
        entries.append(ManifestEntry(label=e.label, split=e.split, graph=rel))
    result = DatasetManifest(entries, list(manifest.class_names), out)
    result.save(out / "manifest.jsonl")
    return result


def feature_variant(graphs: list[HactGraph], features: str) -> list[HactGraph]:
    """``'morph'`` keeps the stored features; ``'none'`` keeps only the spatial columns."""
    if features == "morph":
        return list(graphs)
    if features == "none":
        return [strip_morphology(g) for g in graphs]
    raise ValueError(f"unknown feature variant {features!r}")


def write_image_dataset(images, labels, splits, class_names, out_dir) -> DatasetManifest:
    """Save rendered images and nuclei CSVs plus an image manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "nuclei").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (sample, y, s) in enumerate(zip(images, labels, splits)):
        img_rel, nuc_rel = f"images/img{i:05d}.png", f"nuclei/img{i:05d}.csv"
        write_image(sample.image, out / img_rel)
        save_nuclei_centroids(sample.nuclei, out / nuc_rel)
        entries.append(ManifestEntry(label=y, split=s, image=img_rel, nuclei=nuc_rel))
    manifest = DatasetManifest(entries, list(class_names), out)
    manifest.save(out / "manifest.jsonl")
    return manifest
