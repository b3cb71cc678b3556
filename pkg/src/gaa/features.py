"""Low-level color/texture descriptors and weighted feature fusion."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# sRGB (D65) -> XYZ
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# Reference white taken as the image of sRGB white so that (1, 1, 1) maps to
# exactly L* = 100, a* = b* = 0.
_WHITE = _RGB_TO_XYZ.sum(axis=1)

DEFAULT_WEIGHTS = {"deep": 1.0, "lab": 0.5, "lbp": 0.5}


def _check_pair(image: np.ndarray, mask: np.ndarray) -> None:
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} dimensions differ")


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert ``(..., 3)`` sRGB values in [0, 1] to CIE L*a*b* (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T / _WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_stats(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean and population std of L*, a*, b* over the masked pixels.

    Returns ``(mean L, mean a, mean b, std L, std a, std b)``.
    """
    mask = np.asarray(mask, dtype=bool)
    _check_pair(image, mask)
    if not mask.any():
        raise ValueError("lab_stats needs a non-empty mask")
    lab = srgb_to_lab(image[mask].astype(np.float64) / 255.0)
    return np.concatenate([lab.mean(axis=0), lab.std(axis=0)])


def luma(image: np.ndarray, scaled: bool = True) -> np.ndarray:
    """ITU-R BT.601 luma in 0..255 units.

    With ``scaled=False`` the integer numerator (1000 x luma) is returned;
    comparisons on it are exact under affine changes of the input.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        gray = image.astype(np.float64)
        return gray if scaled else gray * 1000.0
    rgb = image.astype(np.int64)
    num = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]).astype(np.float64)
    return num / 1000.0 if scaled else num


@lru_cache(maxsize=None)
def uniform_lbp_table(neighbors: int = 8) -> np.ndarray:
    """Map every LBP code to its histogram bin.

    Uniform codes (at most two circular 0/1 transitions) get one bin each in
    increasing code order; all other codes share the last bin. For eight
    neighbors that gives 58 + 1 = 59 bins.
    """
    codes = np.arange(2**neighbors)
    bits = (codes[:, None] >> np.arange(neighbors)) & 1
    transitions = np.count_nonzero(bits != np.roll(bits, 1, axis=1), axis=1)
    uniform = transitions <= 2
    table = np.full(codes.shape, np.count_nonzero(uniform), dtype=np.int64)
    table[uniform] = np.arange(np.count_nonzero(uniform))
    return table


def lbp_codes(gray: np.ndarray, neighbors: int = 8, radius: float = 1) -> np.ndarray:
    """Per-pixel LBP codes with circular, bilinearly interpolated sampling.

    Pixels whose neighborhood leaves the image get code -1. Neighbor ``p``
    sits at angle ``2*pi*p/neighbors`` counter-clockwise from east and sets
    bit ``p`` when its value is ``>=`` the center.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    r = int(np.ceil(radius - 1e-9))
    codes = np.full((h, w), -1, dtype=np.int64)
    if h <= 2 * r or w <= 2 * r:
        return codes
    center = gray[r:h - r, r:w - r]
    acc = np.zeros(center.shape, dtype=np.int64)
    for p in range(neighbors):
        theta = 2.0 * np.pi * p / neighbors
        dx, dy = radius * np.cos(theta), -radius * np.sin(theta)
        dx = round(dx) if abs(dx - round(dx)) < 1e-9 else dx
        dy = round(dy) if abs(dy - round(dy)) < 1e-9 else dy
        x0, y0 = int(np.floor(dx)), int(np.floor(dy))
        fx, fy = dx - x0, dy - y0

        def shifted(ox, oy):
            return gray[r + oy:h - r + oy, r + ox:w - r + ox]

        # Differences against the center keep exact ties for flat regions.
        diff = shifted(x0, y0) - center
        if fx:
            diff = diff + fx * (shifted(x0 + 1, y0) - shifted(x0, y0))
        if fy:
            diff = diff + fy * (shifted(x0, y0 + 1) - shifted(x0, y0))
        if fx and fy:
            diff = diff + fx * fy * (
                shifted(x0, y0) - shifted(x0 + 1, y0) - shifted(x0, y0 + 1) + shifted(x0 + 1, y0 + 1)
            )
        acc |= (diff >= 0).astype(np.int64) << p
    codes[r:h - r, r:w - r] = acc
    return codes


def lbp_histogram(image: np.ndarray, mask: np.ndarray, neighbors: int = 8, radius: float = 1) -> np.ndarray:
    """Normalized uniform-LBP histogram over masked pixels.

    Only masked pixels with a fully in-bounds neighborhood contribute; if none
    do, the all-zero histogram is returned.
    """
    mask = np.asarray(mask, dtype=bool)
    _check_pair(image, mask)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if not mask.any():
        raise ValueError("lbp_histogram needs a non-empty mask")
    table = uniform_lbp_table(neighbors)
    nbins = int(table.max()) + 1
    codes = lbp_codes(luma(image, scaled=False), neighbors, radius)
    valid = codes[mask & (codes >= 0)]
    hist = np.bincount(table[valid], minlength=nbins).astype(np.float64)
    total = hist.sum()
    return hist / total if total else hist


@dataclass
class FeatureBlock:
    name: str
    vectors: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim == 1:
            self.vectors = self.vectors[:, None]
        if self.vectors.ndim != 2:
            raise ValueError(f"block {self.name!r}: vectors must be N x d")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError(f"block {self.name!r}: non-finite entries")
        if not self.weight >= 0:
            raise ValueError(f"block {self.name!r}: weight must be nonnegative")


def zscore_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    varying = np.ptp(x, axis=0) > 0
    if varying.any():
        cols = x[:, varying]
        out[:, varying] = (cols - cols.mean(axis=0)) / cols.std(axis=0)
    return out


def fuse_features(blocks: list[FeatureBlock]) -> np.ndarray:
    """Z-score each block column-wise, scale by its weight share, concatenate."""
    if not blocks:
        raise ValueError("no feature blocks")
    n = blocks[0].vectors.shape[0]
    for b in blocks:
        if b.vectors.shape[0] != n:
            raise ValueError(f"block {b.name!r} has {b.vectors.shape[0]} rows, expected {n}")
    total = sum(b.weight for b in blocks)
    if total <= 0:
        raise ValueError("all block weights are zero")
    return np.concatenate([zscore_columns(b.vectors) * (b.weight / total) for b in blocks], axis=1)


def anomaly_descriptors(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """LAB statistics and LBP histogram of one anomaly region."""
    return lab_stats(image, mask), lbp_histogram(image, mask)
