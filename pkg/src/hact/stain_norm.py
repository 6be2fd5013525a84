"""Reference-free Macenko stain normalization.

Images are ``(height, width, 3)`` uint8 arrays.  Optical density (OD) uses the
``-log10((I + 1) / 256)`` convention so that every 8-bit value maps to a finite
density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_BACKGROUND_THRESHOLD = 0.15
DEFAULT_ANGLE_PERCENTILE = 1.0
CONCENTRATION_PERCENTILE = 99.0


class NoTissueError(ValueError):
    """The image has no foreground (stained) pixels."""


class DegenerateStainError(ValueError):
    """The OD cloud does not span two independent stain directions."""


def as_rgb_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("RGB values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass
class StainBasis:
    stain_vectors: np.ndarray  # 3 x 2, columns = (hematoxylin, eosin)
    max_concentrations: np.ndarray  # 2

    def __post_init__(self):
        self.stain_vectors = np.asarray(self.stain_vectors, dtype=np.float64).reshape(3, 2)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)

    def validate(self) -> None:
        norms = np.linalg.norm(self.stain_vectors, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError(f"stain vectors must have unit norm, got {norms}")
        if np.any(self.stain_vectors < 0):
            raise ValueError("stain vectors must be nonnegative")
        if np.any(self.max_concentrations <= 0):
            raise ValueError("max concentrations must be positive")

    def to_json(self) -> dict:
        return {
            "stain_vectors": self.stain_vectors.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StainBasis":
        basis = cls(np.asarray(obj["stain_vectors"], dtype=np.float64), obj["max_concentrations"])
        basis.validate()
        return basis

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "StainBasis":
        return cls.from_json(json.loads(Path(path).read_text()))


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    return -np.log10((rgb.astype(np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def od_transform(image, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD):
    """Return ``(od_matrix, foreground_mask)``.

    A pixel is foreground iff all three OD channels exceed the threshold; the
    matrix holds only foreground rows in row-major pixel order.
    """
    if background_threshold <= 0:
        raise ValueError("background_threshold must be positive")
    img = as_rgb_image(image)
    od = rgb_to_od(img)
    mask = np.all(od > background_threshold, axis=2)
    if not mask.any():
        raise NoTissueError("image contains no foreground pixels above the OD threshold")
    return od[mask], mask


def _concentrations(od_matrix: np.ndarray, stain_vectors: np.ndarray) -> np.ndarray:
    sol, *_ = np.linalg.lstsq(stain_vectors, od_matrix.T, rcond=None)
    return np.maximum(sol.T, 0.0)


def estimate_stain_basis(od_matrix: np.ndarray, angle_percentile: float = DEFAULT_ANGLE_PERCENTILE) -> StainBasis:
    od = np.asarray(od_matrix, dtype=np.float64)
    if od.ndim != 2 or od.shape[1] != 3 or od.shape[0] < 3:
        raise ValueError("od_matrix must be N x 3 with N >= 3")
    if not 0 < angle_percentile < 50:
        raise ValueError("angle_percentile must lie in (0, 50)")

    _, s, vt = np.linalg.svd(od, full_matrices=False)
    if s[0] <= 0 or s[1] <= 1e-8 * s[0]:
        raise DegenerateStainError("OD cloud is rank-deficient; cannot separate two stains")
    plane = vt[:2].T  # 3 x 2
    # orient the principal axes toward positive OD
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[:, 1].sum() < 0:
        plane[:, 1] *= -1

    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, angle_percentile)
    hi = np.percentile(phi, 100.0 - angle_percentile)
    if hi - lo < 1e-6:
        raise DegenerateStainError("OD directions collapse to a single stain")
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])

    cols = []
    for v in (v1, v2):
        v = np.maximum(v, 0.0)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DegenerateStainError("stain direction has no nonnegative component")
        cols.append(v / norm)
    # hematoxylin first: the larger blue-channel absorption
    if cols[0][2] < cols[1][2]:
        cols.reverse()
    vectors = np.stack(cols, axis=1)
    if abs(np.dot(vectors[:, 0], vectors[:, 1])) > 1 - 1e-12:
        raise DegenerateStainError("recovered stain vectors are collinear")

    conc = _concentrations(od, vectors)
    max_c = np.percentile(conc, CONCENTRATION_PERCENTILE, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateStainError("a stain has zero concentration across the image")
    return StainBasis(vectors, max_c)


def normalize_image(
    image,
    target: StainBasis,
    background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD,
    angle_percentile: float = DEFAULT_ANGLE_PERCENTILE,
) -> np.ndarray:
    """Map the image's stain basis and concentration scale onto ``target``."""
    target.validate()
    img = as_rgb_image(image)
    od_fg, mask = od_transform(img, background_threshold)
    source = estimate_stain_basis(od_fg, angle_percentile)
    conc = _concentrations(od_fg, source.stain_vectors)
    conc *= target.max_concentrations / source.max_concentrations
    out = img.copy()
    out[mask] = od_to_rgb(conc @ target.stain_vectors.T)
    return out
