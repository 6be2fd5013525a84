"""Hand-crafted texture and shape descriptors for nuclei and tissue regions."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import stats
from skimage.filters.rank import entropy as rank_entropy
from skimage.measure import regionprops
from skimage.morphology import disk

GLCM_LEVELS = 32
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
ENTROPY_FOOTPRINT = disk(2)

FEATURE_NAMES = (
    "fg_bg_difference",
    "intensity_std",
    "skewness",
    "mean_local_entropy",
    "glcm_dissimilarity",
    "glcm_homogeneity",
    "glcm_energy",
    "glcm_asm",
    "eccentricity",
    "area",
    "major_axis_length",
    "minor_axis_length",
    "perimeter",
    "solidity",
    "orientation",
    "pixel_count",
)
N_HANDCRAFTED = len(FEATURE_NAMES)


def to_gray(image: np.ndarray) -> np.ndarray:
    rgb = np.asarray(image, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def quantize(gray: np.ndarray, levels: int = GLCM_LEVELS) -> np.ndarray:
    q = np.floor(np.asarray(gray, dtype=np.float64) * levels / 256.0).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def glcm(q: np.ndarray, offset: tuple[int, int], levels: int = GLCM_LEVELS) -> np.ndarray:
    """Symmetric co-occurrence counts of quantized image ``q`` for one (row, col) offset."""
    dr, dc = offset
    h, w = q.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    counts = np.zeros((levels, levels), dtype=np.float64)
    if r1 <= r0 or c1 <= c0:
        return counts
    a = q[r0:r1, c0:c1].ravel()
    b = q[r0 + dr : r1 + dr, c0 + dc : c1 + dc].ravel()
    np.add.at(counts, (a, b), 1.0)
    return counts + counts.T


def glcm_properties(q: np.ndarray, levels: int = GLCM_LEVELS) -> np.ndarray:
    """(dissimilarity, homogeneity, energy, ASM) averaged over the four offsets.

    Offsets without any pixel pair are skipped; a patch with no pairs at all is
    treated as constant.
    """
    i, j = np.indices((levels, levels))
    diff = np.abs(i - j).astype(np.float64)
    props = []
    for off in GLCM_OFFSETS:
        counts = glcm(q, off, levels)
        total = counts.sum()
        if total == 0:
            continue
        p = counts / total
        asm = float((p * p).sum())
        props.append((float((p * diff).sum()), float((p / (1.0 + diff * diff)).sum()), np.sqrt(asm), asm))
    if not props:
        return np.array([0.0, 1.0, 1.0, 1.0])
    return np.mean(np.array(props), axis=0)


def _shape_features(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if rows.size == 1:
        return np.array([0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    r0, c0 = rows.min(), cols.min()
    crop = np.zeros((rows.max() - r0 + 1, cols.max() - c0 + 1), dtype=np.uint8)
    crop[rows - r0, cols - c0] = 1
    prop = regionprops(crop)[0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            solidity = float(prop.solidity)
    except Exception:
        solidity = 1.0  # degenerate (collinear) hull
    if not np.isfinite(solidity):
        solidity = 1.0
    return np.array(
        [
            float(prop.eccentricity),
            float(prop.area),
            float(prop.axis_major_length),
            float(prop.axis_minor_length),
            float(prop.perimeter),
            solidity,
            float(prop.orientation),
        ]
    )


def _patch_bounds(center, size: int, shape) -> tuple[slice, slice]:
    cx, cy = center
    half = size // 2
    h, w = shape
    y0 = int(np.clip(np.floor(cy) - half, 0, h - 1))
    x0 = int(np.clip(np.floor(cx) - half, 0, w - 1))
    return slice(y0, min(h, y0 + size)), slice(x0, min(w, x0 + size))


def features_from_coords(
    gray: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    center=None,
    patch_size: int = 72,
) -> np.ndarray:
    """Descriptor for the entity whose pixels are ``(rows, cols)`` of ``gray``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("instance mask is empty")
    if center is None:
        center = (cols.mean(), rows.mean())
    sy, sx = _patch_bounds(center, patch_size, gray.shape)
    patch = gray[sy, sx]

    inside = (rows >= sy.start) & (rows < sy.stop) & (cols >= sx.start) & (cols < sx.stop)
    local = np.zeros(patch.shape, dtype=bool)
    local[rows[inside] - sy.start, cols[inside] - sx.start] = True
    fg, bg = patch[local], patch[~local]
    fg_bg = float(fg.mean() - bg.mean()) if fg.size and bg.size else 0.0

    std = float(patch.std())
    skew = float(stats.skew(patch.ravel())) if std > 0 else 0.0
    gray8 = np.clip(np.rint(patch), 0, 255).astype(np.uint8)
    ent = float(rank_entropy(gray8, ENTROPY_FOOTPRINT).mean())
    texture = np.concatenate([[fg_bg, std, skew, ent], glcm_properties(quantize(patch))])
    shape = _shape_features(rows, cols)
    return np.concatenate([texture, shape, [float(rows.size)]])


def handcrafted_features(image, instance_mask: np.ndarray, center=None, patch_size: int = 72) -> np.ndarray:
    """16-dim texture + shape descriptor of one entity.

    ``instance_mask`` is a boolean array of the image's height and width.
    Texture statistics use the ``patch_size`` window centered on ``center``
    (default: the mask centroid); shape statistics use the mask itself.
    """
    rows, cols = np.nonzero(np.asarray(instance_mask, dtype=bool))
    return features_from_coords(to_gray(image), rows, cols, center, patch_size)
