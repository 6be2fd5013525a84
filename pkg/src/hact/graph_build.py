"""Cell graphs, tissue graphs and their hierarchical (HACT) combination."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .entity_detect import (
    NucleiSet,
    SuperpixelMap,
    _boundary_pairs,
    hematoxylin_density,
    superpixel_membership,
)
from .features import N_HANDCRAFTED, features_from_coords, to_gray
from .stain_norm import as_rgb_image

SPATIAL_DIMS = 2  # spatial (x/w, y/h) features are always the last two columns
DEFAULT_K = 5
DEFAULT_D_MIN = 50.0
CELL_MASK_THRESHOLD = 0.5
CELL_FALLBACK_RADIUS = 3


def canonical_edges(edges) -> np.ndarray:
    """Sorted unique ``(i, j)`` rows with ``i < j``."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


@dataclass
class EntityGraph:
    edges: np.ndarray
    features: np.ndarray
    centroids: np.ndarray
    kind: str = "cell"

    def __post_init__(self):
        self.edges = canonical_edges(self.edges)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1) if self.features.size else self.features.reshape(0, 0)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)

    @property
    def node_count(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)

    def validate(self) -> None:
        n = self.node_count
        if self.features.shape[0] != n:
            raise ValueError(f"{self.features.shape[0]} feature rows for {n} nodes")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        if self.kind not in ("cell", "tissue"):
            raise ValueError(f"unknown graph kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "edges": self.edges.tolist(),
            "features": self.features.tolist(),
            "feature_dim": int(self.feature_dim),
        }

    @classmethod
    def from_json(cls, obj: dict, kind: str) -> "EntityGraph":
        feats = np.asarray(obj["features"], dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(0, int(obj.get("feature_dim", 0)))
        return cls(np.asarray(obj["edges"], dtype=np.int64), feats, np.asarray(obj["centroids"]), kind)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EntityGraph)
            and self.kind == other.kind
            and np.array_equal(self.edges, other.edges)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.centroids, other.centroids)
        )


@dataclass
class HactGraph:
    cell_graph: EntityGraph
    tissue_graph: EntityGraph
    assignment: np.ndarray  # |V_CG| x |V_TG| binary

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.uint8).reshape(
            self.cell_graph.node_count, self.tissue_graph.node_count
        )

    def validate(self) -> None:
        self.cell_graph.validate()
        self.tissue_graph.validate()
        if self.assignment.shape != (self.cell_graph.node_count, self.tissue_graph.node_count):
            raise ValueError("assignment shape does not match node counts")
        if self.assignment.size and not np.all(self.assignment.sum(axis=1) == 1):
            raise ValueError("every assignment row must contain exactly one 1")

    def to_json(self) -> dict:
        return {
            "cell": self.cell_graph.to_json(),
            "tissue": self.tissue_graph.to_json(),
            "assignment": self.assignment.ravel().astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HactGraph":
        cell = EntityGraph.from_json(obj["cell"], "cell")
        tissue = EntityGraph.from_json(obj["tissue"], "tissue")
        g = cls(cell, tissue, np.asarray(obj["assignment"], dtype=np.uint8))
        g.validate()
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "HactGraph":
        return cls.from_json(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HactGraph)
            and self.cell_graph == other.cell_graph
            and self.tissue_graph == other.tissue_graph
            and np.array_equal(self.assignment, other.assignment)
        )


@dataclass
class FeatureSpec:
    mode: str = "none"  # none | handcrafted | external
    patch_size_cell: int = 72
    patch_size_tissue: int = 144
    external_cell: str | None = None
    external_tissue: str | None = None

    def __post_init__(self):
        if self.mode not in ("none", "handcrafted", "external"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        has_path = self.external_cell is not None or self.external_tissue is not None
        if (self.mode == "external") != has_path:
            raise ValueError("external feature paths are required for, and only for, mode='external'")


# ------------------------------------------------------------------------ topology


def build_cell_topology(centroids, k: int = DEFAULT_K, d_min: float = DEFAULT_D_MIN) -> np.ndarray:
    """Thresholded kNN edges: ``u`` is one of ``v``'s k nearest and closer than ``d_min``.

    Distance ties are ordered by node id; an edge chosen from either endpoint
    is kept.
    """
    if k < 1 or d_min <= 0:
        raise ValueError("need k >= 1 and d_min > 0")
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    kk = min(k, n - 1)
    tree = cKDTree(pts)
    dk, _ = tree.query(pts, k=kk + 1)
    radius = np.atleast_2d(dk)[:, -1]
    candidates = tree.query_ball_point(pts, radius * (1 + 1e-9) + 1e-12)
    edges = []
    for v in range(n):
        cand = np.array([u for u in candidates[v] if u != v], dtype=np.int64)
        diff = pts[cand] - pts[v]
        dist = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1])
        order = np.lexsort((cand, dist))[:kk]
        for u, d in zip(cand[order], dist[order]):
            if d < d_min:
                edges.append((v, u))
    return canonical_edges(edges)


def build_tissue_topology(spmap: SuperpixelMap) -> np.ndarray:
    """Region adjacency graph over 4-neighboring pixels."""
    return canonical_edges(_boundary_pairs(spmap.labels))


# ------------------------------------------------------------------------ features


def spatial_features(centroid, image_dims: tuple[int, int]) -> np.ndarray:
    w, h = image_dims
    x, y = centroid
    return np.array([x / w, y / h])


def region_feature_average(superpixel_features, membership) -> np.ndarray:
    feats = np.asarray(superpixel_features, dtype=np.float64)
    out = []
    for members in membership:
        if len(members) == 0:
            raise ValueError("every region needs at least one constituent superpixel")
        out.append(feats[list(members)].mean(axis=0))
    return np.array(out).reshape(len(membership), feats.shape[1] if feats.ndim == 2 else 0)


def _centroid_pixel(centroid, shape) -> tuple[int, int]:
    h, w = shape
    x, y = centroid
    return int(np.clip(np.floor(y), 0, h - 1)), int(np.clip(np.floor(x), 0, w - 1))


def build_assignment(nuclei: NucleiSet, spmap: SuperpixelMap) -> np.ndarray:
    """One-hot cell-to-region matrix.

    With instance masks, a nucleus goes to the region it overlaps most (ties to
    the smaller region id); otherwise to the region under its centroid.
    """
    n, m = len(nuclei), spmap.region_count
    out = np.zeros((n, m), dtype=np.uint8)
    if n == 0:
        return out
    labels = spmap.labels
    if nuclei.instance_labels is not None:
        inst = nuclei.instance_labels.ravel()
        sel = inst > 0
        overlap = np.zeros((n, m), dtype=np.int64)
        np.add.at(overlap, (inst[sel] - 1, labels.ravel()[sel]), 1)
        for i in range(n):
            if overlap[i].any():
                out[i, int(np.argmax(overlap[i]))] = 1
            else:
                out[i, labels[_centroid_pixel(nuclei.centroids[i], labels.shape)]] = 1
        return out
    for i, c in enumerate(nuclei.centroids):
        out[i, labels[_centroid_pixel(c, labels.shape)]] = 1
    return out


def load_feature_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def _cell_pixel_sets(image: np.ndarray, nuclei: NucleiSet, patch_size: int):
    """Yield ``(rows, cols)`` for each nucleus mask."""
    h, w = image.shape[:2]
    if nuclei.instance_labels is not None:
        slices = ndimage.find_objects(nuclei.instance_labels, max_label=len(nuclei))
        for i, sl in enumerate(slices):
            sub = nuclei.instance_labels[sl] == i + 1
            rows, cols = np.nonzero(sub)
            yield rows + sl[0].start, cols + sl[1].start
        return
    dens = None
    half = max(patch_size // 2, CELL_FALLBACK_RADIUS + 1)
    for c in nuclei.centroids:
        cy, cx = _centroid_pixel(c, (h, w))
        y0, y1 = max(0, cy - half), min(h, cy + half + 1)
        x0, x1 = max(0, cx - half), min(w, cx + half + 1)
        if dens is None:
            dens = hematoxylin_density(image)
        fg = dens[y0:y1, x0:x1] > CELL_MASK_THRESHOLD
        comp, _ = ndimage.label(fg)
        cid = comp[cy - y0, cx - x0]
        if cid > 0:
            rows, cols = np.nonzero(comp == cid)
        else:
            yy, xx = np.mgrid[y0:y1, x0:x1]
            rows, cols = np.nonzero((yy - cy) ** 2 + (xx - cx) ** 2 <= CELL_FALLBACK_RADIUS**2)
        yield rows + y0, cols + x0


def _region_pixel_sets(spmap: SuperpixelMap):
    slices = ndimage.find_objects(spmap.labels + 1)
    for rid, sl in enumerate(slices):
        rows, cols = np.nonzero(spmap.labels[sl] == rid)
        yield rows + sl[0].start, cols + sl[1].start


def region_centroids(spmap: SuperpixelMap) -> np.ndarray:
    n = spmap.region_count
    h, w = spmap.labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    flat = spmap.labels.ravel()
    count = np.bincount(flat, minlength=n)
    cx = np.bincount(flat, weights=xx.ravel(), minlength=n) / count
    cy = np.bincount(flat, weights=yy.ravel(), minlength=n) / count
    return np.stack([cx, cy], axis=1)


def _check_rows(feats: np.ndarray, expected: int, what: str) -> np.ndarray:
    if feats.shape[0] != expected:
        raise ValueError(f"{what} feature file has {feats.shape[0]} rows, expected {expected}")
    return feats


def assemble_hact(
    image,
    nuclei: NucleiSet,
    spmap: SuperpixelMap,
    spec: FeatureSpec | None = None,
    k: int = DEFAULT_K,
    d_min: float = DEFAULT_D_MIN,
    superpixels: SuperpixelMap | None = None,
) -> HactGraph:
    """Build the HACT graph of one image.

    ``spmap`` holds the merged tissue regions.  ``superpixels`` is the
    oversegmentation they were merged from; region morphology is the mean of
    its constituent superpixels' features (each region is its own constituent
    when omitted).  External tissue feature rows follow superpixel order.
    """
    spec = spec or FeatureSpec()
    img = as_rgb_image(image)
    h, w = img.shape[:2]
    dims = (w, h)
    nuclei.validate(dims)
    fine = superpixels if superpixels is not None else spmap
    membership = superpixel_membership(fine, spmap) if superpixels is not None else [[i] for i in range(spmap.region_count)]

    n_cells = len(nuclei)
    cell_spatial = np.array([spatial_features(c, dims) for c in nuclei.centroids]).reshape(n_cells, SPATIAL_DIMS)
    t_centroids = region_centroids(spmap)
    tissue_spatial = np.array([spatial_features(c, dims) for c in t_centroids]).reshape(-1, SPATIAL_DIMS)

    if spec.mode == "none":
        cell_morph = np.zeros((n_cells, 0))
        tissue_morph = np.zeros((spmap.region_count, 0))
    elif spec.mode == "handcrafted":
        gray = to_gray(img)
        cell_morph = np.array(
            [
                features_from_coords(gray, r, c, center, spec.patch_size_cell)
                for (r, c), center in zip(_cell_pixel_sets(img, nuclei, spec.patch_size_cell), nuclei.centroids)
            ]
        ).reshape(n_cells, N_HANDCRAFTED)
        fine_centroids = region_centroids(fine)
        sp_feats = np.array(
            [
                features_from_coords(gray, r, c, center, spec.patch_size_tissue)
                for (r, c), center in zip(_region_pixel_sets(fine), fine_centroids)
            ]
        )
        tissue_morph = region_feature_average(sp_feats, membership)
    else:
        cell_morph = (
            _check_rows(load_feature_csv(spec.external_cell), n_cells, "cell")
            if spec.external_cell
            else np.zeros((n_cells, 0))
        )
        if spec.external_tissue:
            sp_feats = _check_rows(load_feature_csv(spec.external_tissue), fine.region_count, "tissue")
            tissue_morph = region_feature_average(sp_feats, membership)
        else:
            tissue_morph = np.zeros((spmap.region_count, 0))

    cell = EntityGraph(
        build_cell_topology(nuclei.centroids, k, d_min),
        np.concatenate([cell_morph, cell_spatial], axis=1),
        nuclei.centroids,
        "cell",
    )
    tissue = EntityGraph(
        build_tissue_topology(spmap),
        np.concatenate([tissue_morph, tissue_spatial], axis=1),
        t_centroids,
        "tissue",
    )
    g = HactGraph(cell, tissue, build_assignment(nuclei, spmap))
    g.validate()
    return g


# ------------------------------------------------------------------ standardization


@dataclass
class FeatureStats:
    """Per-dimension z-score statistics for cell and tissue node features."""

    cell_mean: np.ndarray
    cell_std: np.ndarray
    tissue_mean: np.ndarray
    tissue_std: np.ndarray

    @staticmethod
    def _fit(blocks: list[np.ndarray], d: int) -> tuple[np.ndarray, np.ndarray]:
        allf = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, d))
        if allf.shape[0] == 0:
            return np.zeros(d), np.ones(d)
        std = allf.std(axis=0)
        std[std < 1e-12] = 1.0
        return allf.mean(axis=0), std

    @classmethod
    def fit(cls, graphs: list[HactGraph]) -> "FeatureStats":
        dc = graphs[0].cell_graph.feature_dim
        dt = graphs[0].tissue_graph.feature_dim
        cm, cs = cls._fit([g.cell_graph.features for g in graphs], dc)
        tm, ts = cls._fit([g.tissue_graph.features for g in graphs], dt)
        return cls(cm, cs, tm, ts)

    def apply(self, g: HactGraph) -> HactGraph:
        cell = EntityGraph(
            g.cell_graph.edges, (g.cell_graph.features - self.cell_mean) / self.cell_std, g.cell_graph.centroids, "cell"
        )
        tissue = EntityGraph(
            g.tissue_graph.edges,
            (g.tissue_graph.features - self.tissue_mean) / self.tissue_std,
            g.tissue_graph.centroids,
            "tissue",
        )
        return HactGraph(cell, tissue, g.assignment)

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("cell_mean", "cell_std", "tissue_mean", "tissue_std")}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureStats":
        return cls(*(np.asarray(obj[k], dtype=np.float64) for k in ("cell_mean", "cell_std", "tissue_mean", "tissue_std")))


def strip_morphology(g: HactGraph) -> HactGraph:
    """Keep only the spatial columns (the no-morphology ablation)."""
    cell = EntityGraph(g.cell_graph.edges, g.cell_graph.features[:, -SPATIAL_DIMS:], g.cell_graph.centroids, "cell")
    tissue = EntityGraph(
        g.tissue_graph.edges, g.tissue_graph.features[:, -SPATIAL_DIMS:], g.tissue_graph.centroids, "tissue"
    )
    return HactGraph(cell, tissue, g.assignment)
