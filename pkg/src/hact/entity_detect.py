"""Entity detection: nuclei centroids and merged superpixel tissue regions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure
from skimage.color import rgb2lab

from .stain_norm import as_rgb_image, rgb_to_od

# Reference H&E optical-density directions used when no basis is supplied.
DEFAULT_HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
DEFAULT_EOSIN = np.array([0.072, 0.990, 0.105])

FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


class NucleiParseError(ValueError):
    pass


@dataclass
class NucleiSet:
    centroids: np.ndarray  # n x 2 float, (x, y)
    instance_labels: np.ndarray | None = None  # H x W int, 0 = background, id i+1 = nucleus i

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.centroids.shape[0]

    def validate(self, image_dims: tuple[int, int]) -> None:
        w, h = image_dims
        c = self.centroids
        if c.size and (c[:, 0].min() < 0 or c[:, 1].min() < 0 or c[:, 0].max() >= w or c[:, 1].max() >= h):
            raise ValueError("nucleus centroid outside image bounds")
        if self.instance_labels is not None:
            ids = np.unique(self.instance_labels)
            ids = ids[ids > 0]
            if ids.size != len(self) or (ids.size and (ids[0] != 1 or ids[-1] != len(self))):
                raise ValueError("instance ids must be exactly 1..n")
            centers = np.array(ndimage.center_of_mass(np.ones_like(self.instance_labels), self.instance_labels, ids))
            if ids.size and np.abs(centers[:, ::-1] - c).max() > 0.5:
                raise ValueError("instance centroid disagrees with listed centroid")


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # H x W int64, ids 0..region_count-1

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def region_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def validate(self) -> None:
        counts = np.bincount(self.labels.ravel())
        if self.labels.min() < 0 or np.any(counts == 0):
            raise ValueError("region ids must be exactly 0..region_count-1")
        for rid in range(self.region_count):
            _, n = ndimage.label(self.labels == rid, structure=FOUR_CONNECTIVITY)
            if n != 1:
                raise ValueError(f"region {rid} is not 4-connected")

    def save(self, png_path) -> None:
        from PIL import Image

        if self.region_count > 65535:
            raise ValueError("too many regions for a 16-bit label image")
        Image.fromarray(self.labels.astype(np.uint16)).save(png_path)
        Path(png_path).with_suffix(".json").write_text(json.dumps({"region_count": self.region_count}))

    @classmethod
    def load(cls, png_path) -> "SuperpixelMap":
        from PIL import Image

        labels = np.asarray(Image.open(png_path)).astype(np.int64)
        meta = json.loads(Path(png_path).with_suffix(".json").read_text())
        out = cls(labels)
        if out.region_count != meta["region_count"]:
            raise ValueError("label image and sidecar disagree on region_count")
        return out


# ------------------------------------------------------------------------ nuclei


def load_nuclei_centroids(path, image_dims: tuple[int, int]) -> NucleiSet:
    """Parse an ``x,y`` CSV (0-indexed integer pixels); duplicates are kept."""
    w, h = image_dims
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise NucleiParseError(f"row {lineno}: expected 'x,y', got {row!r}")
            try:
                x, y = (int(cell.strip()) for cell in row)
            except ValueError:
                if lineno == 1:
                    continue  # header line
                raise NucleiParseError(f"row {lineno}: non-integer coordinate {row!r}") from None
            if not (0 <= x < w and 0 <= y < h):
                raise NucleiParseError(f"row {lineno}: ({x},{y}) outside image of size {w}x{h}")
            rows.append((x, y))
    if not rows:
        raise NucleiParseError(f"{path}: no nuclei listed")
    return NucleiSet(np.array(rows, dtype=np.float64))


def save_nuclei_centroids(nuclei: NucleiSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in np.rint(nuclei.centroids).astype(int):
            writer.writerow([x, y])


def hematoxylin_density(image, stain_vectors: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel hematoxylin concentration by least-squares color deconvolution."""
    img = as_rgb_image(image)
    basis = (
        np.stack([DEFAULT_HEMATOXYLIN / np.linalg.norm(DEFAULT_HEMATOXYLIN), DEFAULT_EOSIN / np.linalg.norm(DEFAULT_EOSIN)], axis=1)
        if stain_vectors is None
        else np.asarray(stain_vectors, dtype=np.float64)
    )
    od = rgb_to_od(img).reshape(-1, 3)
    conc = od @ np.linalg.pinv(basis).T
    return conc[:, 0].reshape(img.shape[:2])


def detect_nuclei_blob(
    image,
    od_threshold: float = 0.5,
    min_area: int = 4,
    max_area: int = 400,
    stain_vectors: np.ndarray | None = None,
) -> NucleiSet:
    """Threshold hematoxylin density and keep 4-connected blobs within the area bounds."""
    if not 0 < min_area < max_area:
        raise ValueError("need 0 < min_area < max_area")
    dens = hematoxylin_density(image, stain_vectors)
    comp, n = ndimage.label(dens > od_threshold, structure=FOUR_CONNECTIVITY)
    instance = np.zeros(comp.shape, dtype=np.int64)
    centroids = []
    if n:
        areas = np.bincount(comp.ravel(), minlength=n + 1)
        keep = [cid for cid in range(1, n + 1) if min_area <= areas[cid] <= max_area]
        remap = np.zeros(n + 1, dtype=np.int64)
        remap[keep] = np.arange(1, len(keep) + 1)
        instance = remap[comp]
        if keep:
            com = ndimage.center_of_mass(np.ones_like(comp), instance, range(1, len(keep) + 1))
            centroids = [(c[1], c[0]) for c in com]
    return NucleiSet(np.array(centroids, dtype=np.float64).reshape(-1, 2), instance)


# ---------------------------------------------------------------------- superpixels


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Map ids to 0..k-1 preserving the order of first appearance in raster scan."""
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse].reshape(labels.shape).astype(np.int64)


def _boundary_pairs(labels: np.ndarray) -> np.ndarray:
    """All (a, b) label pairs across 4-neighbor pixel boundaries with a != b, both orders."""
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    p = np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2), dtype=np.int64)
    return np.concatenate([p, p[:, ::-1]], axis=0)


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Make every label 4-connected.

    The largest component of each label keeps it; every other fragment is
    given to the neighboring component sharing the longest boundary with it
    (ties to the smaller label).  Result ids are contiguous.
    """
    labels = np.asarray(labels, dtype=np.int64).copy()
    while True:
        comp = measure.label(labels, background=-1, connectivity=1).astype(np.int64) - 1
        next_id = int(comp.max()) + 1
        comp_label = np.zeros(next_id, dtype=np.int64)
        comp_label[comp.ravel()] = labels.ravel()
        sizes = np.bincount(comp.ravel(), minlength=next_id)
        # the keeper of each label is its largest component (first on ties)
        keeper = {}
        for cid in range(next_id):
            lab = comp_label[cid]
            if lab not in keeper or sizes[cid] > sizes[keeper[lab]]:
                keeper[lab] = cid
        orphans = [cid for cid in range(next_id) if keeper[comp_label[cid]] != cid]
        if not orphans:
            return relabel_contiguous(labels)
        pairs = _boundary_pairs(comp)
        # process smallest orphans first; each reassignment is to a neighbor's label
        for cid in sorted(orphans, key=lambda c: (sizes[c], c)):
            nb = pairs[pairs[:, 0] == cid, 1]
            if nb.size == 0:
                continue
            nb_labels = comp_label[nb]
            uniq, counts = np.unique(nb_labels, return_counts=True)
            target = uniq[np.argmax(counts)]
            labels[comp == cid] = target
            comp_label[cid] = target
        # loop: reassignment may merge fragments, recheck


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    hh, ww = h // factor, w // factor
    blocks = img[: hh * factor, : ww * factor].astype(np.float64)
    blocks = blocks.reshape(hh, factor, ww, factor, -1).mean(axis=(1, 3))
    return blocks


def _upsample_labels(labels: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)
    h, w = shape
    out = np.empty((h, w), dtype=np.int64)
    hh, ww = up.shape
    out[:hh, :ww] = up
    # odd trailing rows/columns copy their neighbor, which keeps regions connected
    if ww < w:
        out[:hh, ww:] = up[:, -1:]
    if hh < h:
        out[hh:, :] = out[hh - 1 : hh, :]
    return out


def slic_superpixels(
    image,
    n_segments: int = 100,
    compactness: float = 10.0,
    iterations: int = 10,
    downsample: int = 2,
) -> SuperpixelMap:
    """SLIC on CIELAB color plus compactness-weighted position.

    Clustering runs on the image block-averaged by ``downsample``; labels are
    upsampled by nearest neighbor.
    """
    img = as_rgb_image(image)
    h, w = img.shape[:2]
    if n_segments < 1 or iterations < 1:
        raise ValueError("n_segments and iterations must be >= 1")
    if n_segments > h * w:
        raise ValueError(f"n_segments={n_segments} exceeds pixel count {h * w}")
    factor = downsample if (h // downsample >= 1 and w // downsample >= 1 and downsample > 1) else 1
    if factor > 1 and (h // factor) * (w // factor) < n_segments:
        factor = 1
    small = _downsample(img, factor) if factor > 1 else img.astype(np.float64)
    lab = rgb2lab(small / 255.0)
    hs, ws = lab.shape[:2]

    step = np.sqrt(hs * ws / n_segments)
    ny = max(1, int(round(hs / step)))
    nx = max(1, int(round(ws / step)))
    while ny * nx > n_segments:
        if ny >= nx and ny > 1:
            ny -= 1
        elif nx > 1:
            nx -= 1
    # seeds in pixel-index coordinates, so a uniform image splits symmetrically
    ys = (np.arange(ny) + 0.5) * hs / ny - 0.5
    xs = (np.arange(nx) + 0.5) * ws / nx - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers_pos = np.stack([cy.ravel(), cx.ravel()], axis=1)
    iy = np.clip(np.rint(centers_pos[:, 0]).astype(int), 0, hs - 1)
    ix = np.clip(np.rint(centers_pos[:, 1]).astype(int), 0, ws - 1)
    centers_col = lab[iy, ix].copy()
    k = centers_pos.shape[0]
    s = max(hs / ny, ws / nx)
    spatial_w = (compactness / s) ** 2

    yy, xx = np.mgrid[0:hs, 0:ws].astype(np.float64)
    labels = np.zeros((hs, ws), dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((hs, ws), np.inf)
        for c in range(k):
            y0 = int(max(0, np.floor(centers_pos[c, 0] - s)))
            y1 = int(min(hs, np.ceil(centers_pos[c, 0] + s) + 1))
            x0 = int(max(0, np.floor(centers_pos[c, 1] - s)))
            x1 = int(min(ws, np.ceil(centers_pos[c, 1] + s) + 1))
            win = lab[y0:y1, x0:x1]
            dc = ((win - centers_col[c]) ** 2).sum(axis=2)
            ds = (yy[y0:y1, x0:x1] - centers_pos[c, 0]) ** 2 + (xx[y0:y1, x0:x1] - centers_pos[c, 1]) ** 2
            d = dc + spatial_w * ds
            cur = dist[y0:y1, x0:x1]
            better = d < cur
            cur[better] = d[better]
            labels[y0:y1, x0:x1][better] = c
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        alive = counts > 0
        for dim, arr in enumerate((yy, xx)):
            sums = np.bincount(flat, weights=arr.ravel(), minlength=k)
            centers_pos[alive, dim] = sums[alive] / counts[alive]
        for ch in range(3):
            sums = np.bincount(flat, weights=lab[..., ch].ravel(), minlength=k)
            centers_col[alive, ch] = sums[alive] / counts[alive]

    labels = enforce_connectivity(labels)
    if factor > 1:
        labels = _upsample_labels(labels, factor, (h, w))
    return SuperpixelMap(labels)


# ---------------------------------------------------------------------------- merge


def color_descriptor_sums(image: np.ndarray, labels: np.ndarray, n: int):
    """Per-region pixel count, channel sums and channel sums of squares (unit-range RGB)."""
    rgb = image.reshape(-1, 3).astype(np.float64) / 255.0
    flat = labels.ravel()
    count = np.bincount(flat, minlength=n).astype(np.float64)
    s1 = np.stack([np.bincount(flat, weights=rgb[:, c], minlength=n) for c in range(3)], axis=1)
    s2 = np.stack([np.bincount(flat, weights=rgb[:, c] ** 2, minlength=n) for c in range(3)], axis=1)
    return count, s1, s2


def _descriptor(count, s1, s2) -> np.ndarray:
    mean = s1 / count
    var = np.maximum(s2 / count - mean**2, 0.0)
    return np.concatenate([mean, np.sqrt(var)])


def merge_superpixels(image, spmap: SuperpixelMap, similarity_threshold: float = 0.08) -> SuperpixelMap:
    """Greedily merge the most similar adjacent pair while its distance is below the threshold.

    The descriptor is per-channel RGB mean and std on [0, 1] values.  Ties go to
    the lexicographically smallest id pair.  Output ids follow the smallest
    original id of each merged group.
    """
    img = as_rgb_image(image)
    labels = spmap.labels
    n = spmap.region_count
    count, s1, s2 = color_descriptor_sums(img, labels, n)
    parent = list(range(n))
    pairs = _boundary_pairs(labels)
    neighbors: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in np.unique(pairs, axis=0) if pairs.size else []:
        neighbors[int(a)].add(int(b))

    desc = {i: _descriptor(count[i], s1[i], s2[i]) for i in range(n)}
    stats = {i: (count[i], s1[i].copy(), s2[i].copy()) for i in range(n)}

    def pair_dist(a, b):
        return float(np.linalg.norm(desc[a] - desc[b]))

    dists = {(a, b): pair_dist(a, b) for a in neighbors for b in neighbors[a] if a < b}
    while dists:
        (a, b), d = min(dists.items(), key=lambda kv: (kv[1], kv[0]))
        if not d < similarity_threshold:
            break
        # merge b into a (a < b)
        ca, s1a, s2a = stats[a]
        cb, s1b, s2b = stats.pop(b)
        stats[a] = (ca + cb, s1a + s1b, s2a + s2b)
        desc[a] = _descriptor(*stats[a])
        del desc[b]
        parent[b] = a
        for c in neighbors.pop(b):
            neighbors[c].discard(b)
            if c != a:
                neighbors[c].add(a)
                neighbors[a].add(c)
        neighbors[a].discard(b)
        dists = {k: v for k, v in dists.items() if a not in k and b not in k}
        for c in neighbors[a]:
            key = (min(a, c), max(a, c))
            dists[key] = pair_dist(*key)

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    roots = np.array([find(i) for i in range(n)])
    uniq = np.unique(roots)
    remap = np.searchsorted(uniq, roots)
    return SuperpixelMap(remap[labels])


def superpixel_membership(fine: SuperpixelMap, merged: SuperpixelMap) -> list[list[int]]:
    """For each merged region, the fine superpixel ids whose majority lies inside it."""
    nf, nm = fine.region_count, merged.region_count
    overlap = np.zeros((nf, nm), dtype=np.int64)
    np.add.at(overlap, (fine.labels.ravel(), merged.labels.ravel()), 1)
    owner = overlap.argmax(axis=1)
    members = [[] for _ in range(nm)]
    for sp, region in enumerate(owner):
        members[region].append(sp)
    for region, m in enumerate(members):
        if not m:
            # region smaller than any superpixel majority: use the largest overlap
            m.append(int(overlap[:, region].argmax()))
    return members
