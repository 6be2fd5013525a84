"""Synthetic HACT graphs, H&E-like images and two-stain test images.

Graphs are built with the same topology code as real images: cells are
scattered points, tissue regions are a Voronoi partition of the image, and
each cell belongs to the region under its centroid.  Class recipes plant
signal in the cell layout, the cell features, the region count and the
region features, so that cell-only, tissue-only and joint models can be
told apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import DatasetManifest, ManifestEntry
from .entity_detect import DEFAULT_EOSIN, DEFAULT_HEMATOXYLIN, NucleiSet, SuperpixelMap, enforce_connectivity, relabel_contiguous
from .graph_build import (
    DEFAULT_D_MIN,
    DEFAULT_K,
    EntityGraph,
    HactGraph,
    build_assignment,
    build_cell_topology,
    build_tissue_topology,
    region_centroids,
    spatial_features,
)
from .stain_norm import od_to_rgb

SYNTH_MORPH_DIM = 8
SIGNAL_DIMS = 4  # feature shifts are planted in the first SIGNAL_DIMS columns


@dataclass(frozen=True)
class Recipe:
    """Generative parameters of one class (or one mode of a mixture class)."""

    cell_density: float = 4.0  # cells per 1000 px^2
    cluster_count: int = 0  # 0 = uniform scatter, otherwise Gaussian clumps
    cluster_spread: float = 8.0
    cell_feature_mean: float = 0.0
    region_count: int = 4
    tissue_feature_mean: float = 0.0


@dataclass(frozen=True)
class ClassRecipe:
    name: str
    modes: tuple[Recipe, ...]  # each sample draws one mode uniformly

    @classmethod
    def single(cls, name: str, **kwargs) -> "ClassRecipe":
        return cls(name, (Recipe(**kwargs),))


DEFAULT_RECIPES = (
    ClassRecipe.single("sparse", cell_density=3.0, cluster_count=0, cell_feature_mean=0.0, region_count=3, tissue_feature_mean=0.0),
    ClassRecipe.single("dense", cell_density=6.0, cluster_count=3, cell_feature_mean=1.0, region_count=6, tissue_feature_mean=1.0),
)

# Class 1 is a mixture: half of its samples shift only the cell features and
# half shift only the tissue features.  A cell-only or tissue-only model can
# catch at most one of the two modes.
ABLATION_RECIPES = (
    ClassRecipe.single("base"),
    ClassRecipe(
        "shifted",
        (Recipe(cell_feature_mean=1.5), Recipe(tissue_feature_mean=1.5)),
    ),
)


@dataclass(frozen=True)
class SizeRange:
    low: int = 40
    high: int = 140


@dataclass
class Layout:
    """Geometry of one synthetic image before features are drawn."""

    width: int
    height: int
    cell_centroids: np.ndarray  # n x 2 (x, y)
    regions: SuperpixelMap


def _clip_points(pts: np.ndarray, w: int, h: int) -> np.ndarray:
    pts[:, 0] = np.clip(pts[:, 0], 0, np.nextafter(w, 0))
    pts[:, 1] = np.clip(pts[:, 1], 0, np.nextafter(h, 0))
    return pts


def voronoi_regions(seeds: np.ndarray, width: int, height: int) -> SuperpixelMap:
    """Pixel-grid Voronoi partition, made 4-connected and contiguously labeled."""
    yy, xx = np.mgrid[0:height, 0:width]
    pix = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    _, nearest = cKDTree(seeds).query(pix)
    labels = nearest.reshape(height, width)
    return SuperpixelMap(relabel_contiguous(enforce_connectivity(labels)))


def sample_layout(rng: np.random.Generator, recipe: Recipe, sizes: SizeRange = SizeRange()) -> Layout:
    w = int(rng.integers(sizes.low, sizes.high + 1))
    h = int(rng.integers(sizes.low, sizes.high + 1))
    n_cells = max(3, int(rng.poisson(recipe.cell_density * w * h / 1000.0)))
    if recipe.cluster_count > 0:
        centers = rng.uniform([0, 0], [w, h], size=(recipe.cluster_count, 2))
        which = rng.integers(0, recipe.cluster_count, n_cells)
        pts = centers[which] + rng.normal(0, recipe.cluster_spread, (n_cells, 2))
    else:
        pts = rng.uniform([0, 0], [w, h], size=(n_cells, 2))
    pts = _clip_points(pts, w, h)
    n_regions = max(1, recipe.region_count + int(rng.integers(-1, 2)))
    seeds = rng.uniform([0, 0], [w, h], size=(n_regions, 2))
    return Layout(w, h, pts, voronoi_regions(seeds, w, h))


def _features(rng: np.random.Generator, n: int, shift: float) -> np.ndarray:
    f = rng.normal(0.0, 1.0, (n, SYNTH_MORPH_DIM))
    f[:, :SIGNAL_DIMS] += shift
    return f


def graph_from_layout(
    layout: Layout,
    cell_morph: np.ndarray,
    tissue_morph: np.ndarray,
    k: int = DEFAULT_K,
    d_min: float = DEFAULT_D_MIN,
) -> HactGraph:
    dims = (layout.width, layout.height)
    nuclei = NucleiSet(layout.cell_centroids)
    t_centroids = region_centroids(layout.regions)
    cell_feats = np.concatenate([cell_morph, [spatial_features(c, dims) for c in nuclei.centroids]], axis=1)
    tissue_feats = np.concatenate([tissue_morph, [spatial_features(c, dims) for c in t_centroids]], axis=1)
    g = HactGraph(
        EntityGraph(build_cell_topology(nuclei.centroids, k, d_min), cell_feats, nuclei.centroids, "cell"),
        EntityGraph(build_tissue_topology(layout.regions), tissue_feats, t_centroids, "tissue"),
        build_assignment(nuclei, layout.regions),
    )
    g.validate()
    return g


def sample_graph(rng: np.random.Generator, recipe: Recipe, sizes: SizeRange = SizeRange()) -> HactGraph:
    layout = sample_layout(rng, recipe, sizes)
    cell = _features(rng, len(layout.cell_centroids), recipe.cell_feature_mean)
    tissue = _features(rng, layout.regions.region_count, recipe.tissue_feature_mean)
    return graph_from_layout(layout, cell, tissue)


@dataclass
class SyntheticDataset:
    graphs: list[HactGraph]
    labels: list[int]
    splits: list[str]
    class_names: list[str]
    modes: list[int] = field(default_factory=list)  # mixture mode drawn per sample

    def subset(self, split: str) -> tuple[list[HactGraph], list[int]]:
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return [self.graphs[i] for i in idx], [self.labels[i] for i in idx]

    def write(self, out_dir) -> DatasetManifest:
        """Save every graph as JSON and a ``manifest.jsonl`` next to them."""
        out = Path(out_dir)
        (out / "graphs").mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (g, y, s) in enumerate(zip(self.graphs, self.labels, self.splits)):
            rel = f"graphs/g{i:05d}.json"
            g.save(out / rel)
            entries.append(ManifestEntry(label=y, split=s, graph=rel))
        manifest = DatasetManifest(entries, list(self.class_names), out)
        manifest.save(out / "manifest.jsonl")
        return manifest


def split_counts(n: int, fractions=(4, 1, 1)) -> tuple[int, int, int]:
    total = sum(fractions)
    n_val = n * fractions[1] // total
    n_test = n * fractions[2] // total
    return n - n_val - n_test, n_val, n_test


def generate_synthetic_dataset(
    seed: int,
    n_per_class: int = 150,
    class_recipes=DEFAULT_RECIPES,
    sizes: SizeRange = SizeRange(),
    split_fractions=(4, 1, 1),
) -> SyntheticDataset:
    """Reproducible labeled graphs; each class is split train/val/test by ``split_fractions``.

    With the defaults (2 classes, 150 per class) this gives 200 / 50 / 50.
    """
    if len(class_recipes) < 2:
        raise ValueError("need at least two class recipes")
    modes_per_class = [set(r.modes) for r in class_recipes]
    if all(m == modes_per_class[0] for m in modes_per_class[1:]):
        raise ValueError("class recipes must differ in at least one generative parameter")
    children = np.random.SeedSequence(seed).spawn(len(class_recipes) * n_per_class)
    graphs, labels, splits, modes = [], [], [], []
    n_train, n_val, _ = split_counts(n_per_class, split_fractions)
    for c, recipe in enumerate(class_recipes):
        for i in range(n_per_class):
            rng = np.random.default_rng(children[c * n_per_class + i])
            m = int(rng.integers(len(recipe.modes)))
            graphs.append(sample_graph(rng, recipe.modes[m], sizes))
            labels.append(c)
            modes.append(m)
            splits.append("train" if i < n_train else "val" if i < n_train + n_val else "test")
    return SyntheticDataset(graphs, labels, splits, [r.name for r in class_recipes], modes)


def random_hact_graph(
    rng: np.random.Generator,
    max_cells: int = 15,
    max_regions: int = 4,
    d_cell: int = SYNTH_MORPH_DIM,
    d_tissue: int = SYNTH_MORPH_DIM,
) -> HactGraph:
    """Small random graph for invariance and gradient tests (features are N(0, 1))."""
    recipe = Recipe(region_count=int(rng.integers(1, max_regions + 1)))
    layout = sample_layout(rng, recipe, SizeRange(20, 60))
    n = int(rng.integers(3, max_cells + 1))
    layout.cell_centroids = rng.uniform([0, 0], [layout.width, layout.height], size=(n, 2))
    if layout.regions.region_count > max_regions:
        seeds = rng.uniform([0, 0], [layout.width, layout.height], size=(max_regions, 2))
        layout.regions = voronoi_regions(seeds, layout.width, layout.height)
    cell = rng.normal(size=(n, d_cell - 2)) if d_cell > 2 else np.zeros((n, 0))
    tissue = rng.normal(size=(layout.regions.region_count, d_tissue - 2)) if d_tissue > 2 else np.zeros((layout.regions.region_count, 0))
    return graph_from_layout(layout, cell, tissue)


# --------------------------------------------------------------------- images


@dataclass
class SyntheticImage:
    image: np.ndarray  # H x W x 3 uint8
    nuclei: NucleiSet
    regions: SuperpixelMap


def render_he_image(
    rng: np.random.Generator,
    recipe: Recipe = Recipe(),
    sizes: SizeRange = SizeRange(64, 96),
    nucleus_radius: float = 2.5,
) -> SyntheticImage:
    """H&E-like RGB image: eosin-stained Voronoi regions of distinct intensity plus hematoxylin nuclei.

    Region eosin levels encode ``tissue_feature_mean``; nucleus hematoxylin
    levels encode ``cell_feature_mean``.
    """
    layout = sample_layout(rng, recipe, sizes)
    h, w = layout.height, layout.width
    labels = layout.regions.labels
    n_reg = layout.regions.region_count
    eosin_level = np.clip(0.35 + 0.15 * recipe.tissue_feature_mean + rng.uniform(-0.2, 0.2, n_reg), 0.05, None)
    conc_e = eosin_level[labels] + rng.normal(0, 0.01, (h, w))
    conc_h = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.floor(layout.cell_centroids).astype(int)
    # drop nuclei whose disks would overlap so each has its own blob
    keep = []
    for i, p in enumerate(pts):
        if all(np.hypot(*(p - pts[j])) > 2 * nucleus_radius + 2 for j in keep):
            keep.append(i)
    pts = pts[keep]
    level = np.clip(0.9 + 0.2 * recipe.cell_feature_mean + rng.normal(0, 0.05, len(pts)), 0.6, None)
    for (x, y), lv in zip(pts, level):
        disk = (xx - x) ** 2 + (yy - y) ** 2 <= nucleus_radius**2
        conc_h[disk] = lv
    he = np.stack([DEFAULT_HEMATOXYLIN / np.linalg.norm(DEFAULT_HEMATOXYLIN), DEFAULT_EOSIN / np.linalg.norm(DEFAULT_EOSIN)], axis=1)
    od = np.stack([conc_h, conc_e], axis=-1) @ he.T
    image = od_to_rgb(od)
    return SyntheticImage(image, NucleiSet(pts.astype(np.float64)), layout.regions)


# ---------------------------------------------------------------- stain test images


def random_stain_vectors(rng: np.random.Generator, min_angle_deg: float = 25.0) -> np.ndarray:
    """Two unit, all-positive stain directions (3 x 2, hematoxylin column first)."""
    while True:
        h = DEFAULT_HEMATOXYLIN + rng.uniform(-0.1, 0.1, 3)
        e = np.array([0.30, 0.85, 0.40]) + rng.uniform(-0.1, 0.1, 3)
        h, e = h / np.linalg.norm(h), e / np.linalg.norm(e)
        angle = np.degrees(np.arccos(np.clip(h @ e, -1, 1)))
        if angle >= min_angle_deg and h[2] > e[2] and h.min() > 0.2 and e.min() > 0.2:
            return np.stack([h, e], axis=1)


@dataclass
class StainCase:
    image: np.ndarray
    stain_vectors: np.ndarray
    foreground: np.ndarray  # True where tissue was painted


def two_stain_image(
    rng: np.random.Generator,
    size: int = 128,
    stain_vectors: np.ndarray | None = None,
    background_fraction: float = 0.3,
    noise: float = 0.02,
) -> StainCase:
    """Two-stain image whose tissue pixels mix the stains with a Beta(0.5, 0.5) fraction.

    The U-shaped mixing law puts many pixels near each pure stain, which is
    what angular-percentile estimators need.  Background pixels are bright
    and fall below the optical-density threshold in at least one channel.
    """
    vectors = stain_vectors if stain_vectors is not None else random_stain_vectors(rng)
    t = rng.beta(0.5, 0.5, (size, size))
    density = rng.uniform(0.8, 1.5, (size, size))
    conc = np.stack([t * density, (1 - t) * density], axis=-1)
    conc = np.clip(conc + rng.normal(0, noise, conc.shape), 0, None)
    image = od_to_rgb(conc @ vectors.T)
    fg = rng.random((size, size)) >= background_fraction
    bg = rng.integers(235, 256, (size, size, 3)).astype(np.uint8)
    image[~fg] = bg[~fg]
    return StainCase(image, vectors, fg)


def stain_angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-column angle in degrees between two 3 x 2 stain matrices."""
    a = a / np.linalg.norm(a, axis=0)
    b = b / np.linalg.norm(b, axis=0)
    return np.degrees(np.arccos(np.clip((a * b).sum(axis=0), -1.0, 1.0)))



def generate_image_dataset(
    seed: int,
    n_per_class: int = 12,
    class_recipes=DEFAULT_RECIPES,
    sizes: SizeRange = SizeRange(64, 96),
    split_fractions=(4, 1, 1),
) -> tuple[list[SyntheticImage], list[int], list[str], list[str]]:
    """Rendered images with labels and splits, laid out like ``generate_synthetic_dataset``."""
    children = np.random.SeedSequence(seed).spawn(len(class_recipes) * n_per_class)
    n_train, n_val, _ = split_counts(n_per_class, split_fractions)
    images, labels, splits = [], [], []
    for c, recipe in enumerate(class_recipes):
        for i in range(n_per_class):
            rng = np.random.default_rng(children[c * n_per_class + i])
            mode = recipe.modes[int(rng.integers(len(recipe.modes)))]
            images.append(render_he_image(rng, mode, sizes))
            labels.append(c)
            splits.append("train" if i < n_train else "val" if i < n_train + n_val else "test")
    return images, labels, splits, [r.name for r in class_recipes]
