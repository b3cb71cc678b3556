"""Tiny synthetic MVTec-style category for smoke tests and demos.

Eight normal images of a two-compartment tray with region masks for both
compartments, six anomalous test images (three scratches, three stains) with
ground-truth masks, a placement plan and a pipeline config.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from gaa.dataset_io import save_image, save_mask

SIZE = 64
LEFT = (slice(8, 56), slice(6, 30))
RIGHT = (slice(8, 56), slice(34, 58))

PLAN = """\
# kind      region              strategy  count  options
structural  left                anywhere  4
structural  right               skeleton  3      tol=0.2
structural  left                tangent   2      tol=0.1
logical     right               -         2
combined    left+logical:right  anywhere  2      overlap=0.3
combined    right               anywhere  2      overlap=0.1
"""

CONFIG = """\
dataset:
  root: {root}
  layout: mvtec_ad
seed: 7
output: {output}
features:
  weights: {{lab: 0.5, lbp: 0.5}}
cluster:
  k_min: 2
  k_max: 3
  restarts: 4
enhance:
  delta: 1.0
  sigma: 0.5
  alpha: 0.5
place:
  plan: {plan}
generate:
  method: paste
filter:
  epochs: 40
  patch: 16
  stride: 8
  top_k: 3
"""


def _tray(rng: np.random.Generator) -> np.ndarray:
    img = np.empty((SIZE, SIZE, 3))
    img[:] = (150, 140, 120)
    img[LEFT] = (90, 110, 160)
    img[RIGHT] = (170, 120, 80)
    img += rng.normal(0, 4, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _region(sl) -> np.ndarray:
    m = np.zeros((SIZE, SIZE), dtype=bool)
    m[sl] = True
    return m


def _scratch(rng) -> np.ndarray:
    m = np.zeros((SIZE, SIZE), dtype=bool)
    x0, y0 = rng.integers(12, 24), rng.integers(14, 24)
    length = int(rng.integers(12, 20))
    for t in range(length):
        m[y0 + t, x0 + t // 3: x0 + t // 3 + 2] = True
    return m


def _stain(rng) -> np.ndarray:
    yy, xx = np.mgrid[:SIZE, :SIZE]
    cy, cx = rng.integers(20, 44), rng.integers(38, 50)
    ry, rx = rng.uniform(3, 5), rng.uniform(3, 6)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_toy_dataset(root, seed: int = 0) -> Path:
    """Write the toy category under ``root``; returns the category directory."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(8):
        stem = f"{i:03d}"
        save_image(root / "train" / "good" / f"{stem}.png", _tray(rng))
        save_mask(root / "regions" / "left" / f"{stem}.png", _region(LEFT))
        save_mask(root / "regions" / "right" / f"{stem}.png", _region(RIGHT))
    for i in range(2):
        save_image(root / "test" / "good" / f"{i:03d}.png", _tray(rng))
    for label, make, color in (("scratch", _scratch, (30, 30, 30)), ("stain", _stain, (120, 60, 20))):
        for i in range(3):
            img = _tray(rng)
            mask = make(rng)
            img[mask] = color
            save_image(root / "test" / label / f"{i:03d}.png", img)
            save_mask(root / "ground_truth" / label / f"{i:03d}_mask.png", mask)
    return root


def write_toy_project(directory, seed: int = 0) -> Path:
    """Write the toy dataset next to its plan and config; returns the config path."""
    directory = Path(directory)
    make_toy_dataset(directory / "toy", seed)
    (directory / "plan.txt").write_text(PLAN, encoding="utf-8")
    cfg = directory / "config.yaml"
    cfg.write_text(CONFIG.format(root="toy", output="out", plan="plan.txt"), encoding="utf-8")
    return cfg
