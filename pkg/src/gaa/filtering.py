"""Discriminator-based scoring and filtering of generated image-mask pairs.

A small network (linear feature adaptor, then a two-layer discriminator) is
trained to tell normal patch features from the same features with Gaussian
noise added. Its per-patch anomaly scores, upsampled to image size and
averaged over an aligned mask, give the anomaly region score (ARS) used to
rank generated pairs.
"""

from __future__ import annotations

import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from gaa.dataset_io import ManifestEntry, load_tensor, read_tensor, write_tensor
from gaa.features import luma

logger = logging.getLogger(__name__)

LOCAL_FEATURE_DIM = 14
DISC_PARAMS = ("w1", "b1", "w2", "b2")
ADAPTOR_PARAMS = ("wa", "ba")
_MODEL_MAGIC = "GAA-FILTER"
LOSSES = ("hinge", "margin", "logistic")


@dataclass
class PatchFeatureMap:
    values: np.ndarray  # (grid_h, grid_w, dim)
    patch: int
    stride: int
    image_shape: tuple  # (H, W)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("patch features must be (grid_h, grid_w, dim)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("patch features contain non-finite values")
        gh, gw = grid_shape(self.image_shape, self.patch, self.stride)
        if (gh, gw) != self.values.shape[:2]:
            raise ValueError(
                f"grid {self.values.shape[:2]} inconsistent with image {self.image_shape}, "
                f"patch {self.patch}, stride {self.stride} (expected {(gh, gw)})"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def vectors(self) -> np.ndarray:
        return self.values.reshape(-1, self.dim)


def grid_shape(image_shape, patch: int, stride: int) -> tuple[int, int]:
    h, w = image_shape[:2]
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be >= 1")
    if patch > min(h, w):
        raise ValueError(f"patch {patch} exceeds image size {h}x{w}")
    return (h - patch) // stride + 1, (w - patch) // stride + 1


def extract_local_features(image: np.ndarray, patch: int = 16, stride: int = 8) -> PatchFeatureMap:
    """Hand-computable 14-dim patch descriptor.

    Per patch: RGB means and population stds (6) plus an 8-bin histogram of
    unsigned luma-gradient orientation weighted by gradient magnitude and
    divided by the patch area (8). Bin 0 is centered on horizontal gradients.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    gh, gw = grid_shape(image.shape, patch, stride)
    rgb = image.astype(np.float64)

    def windows(a):
        return sliding_window_view(a, (patch, patch), axis=(0, 1))[::stride, ::stride][:gh, :gw]

    win = windows(rgb)  # (gh, gw, 3, p, p)
    means = win.mean(axis=(-2, -1))
    stds = win.std(axis=(-2, -1))

    gray = luma(image)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.floor((theta + np.pi / 16) / (np.pi / 8)).astype(np.int64) % 8
    hist = np.empty((gh, gw, 8))
    for k in range(8):
        hist[..., k] = windows(np.where(bins == k, mag, 0.0)).sum(axis=(-2, -1)) / (patch * patch)
    values = np.concatenate([means, stds, hist], axis=-1)
    return PatchFeatureMap(values, patch, stride, image.shape[:2])


def load_patch_features(path, patch: int, stride: int, image_shape) -> PatchFeatureMap:
    """Externally computed patch features from a rank-3 GAAT file."""
    values = load_tensor(path)
    if values.ndim != 3:
        raise ValueError(f"expected rank-3 patch features in {path}, got rank {values.ndim}")
    return PatchFeatureMap(values.astype(np.float64), patch, stride, tuple(image_shape[:2]))


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


@dataclass
class FilterModel:
    mean: np.ndarray
    std: np.ndarray
    params: dict
    noise_sigma: float = 0.015
    th_plus: float = 0.5
    th_minus: float = 0.5
    loss: str = "hinge"
    leaky_slope: float = 0.2
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def adapt(self, features: np.ndarray) -> np.ndarray:
        """Standardize and apply the adaptor; training noise is added after this."""
        features = np.atleast_2d(features)
        if features.shape[1] != self.dim:
            raise ValueError(f"feature dim {features.shape[1]} != model dim {self.dim}")
        return self.standardize(features) @ self.params["wa"] + self.params["ba"]

    def discriminate(self, adapted: np.ndarray) -> np.ndarray:
        p = self.params
        return _leaky(adapted @ p["w1"] + p["b1"], self.leaky_slope) @ p["w2"] + p["b2"]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.discriminate(self.adapt(features))

    def scores(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(features))


def init_params(dim: int, hidden: int, rng: np.random.Generator) -> dict:
    return {
        "wa": np.eye(dim),
        "ba": np.zeros(dim),
        "w1": rng.normal(0.0, math.sqrt(2.0 / (dim + hidden)), size=(dim, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, math.sqrt(2.0 / (hidden + 1)), size=hidden),
        "b2": np.zeros(()),
    }


def loss_and_grads(params: dict, z: np.ndarray, noise: np.ndarray, th_plus=0.5, th_minus=0.5,
                   loss="hinge", slope=0.2) -> tuple[float, dict]:
    """Batch loss on clean/noisy pairs and its exact gradient.

    ``z`` are standardized features (n, dim); ``noise`` is added after the
    adaptor. With ``o`` the raw discriminator output and ``s = sigmoid(o)``:

    - ``hinge``: ``sum max(0, th+ - s_noisy) + sum max(0, s_clean - th-)``
    - ``margin``: ``sum max(0, th+ - o_noisy) + sum max(0, o_clean + th-)``
    - ``logistic``: binary cross-entropy with noisy = 1.

    With equal thresholds ``hinge`` is also zero when every score equals
    ``th``, so large learning rates can collapse it; ``margin`` has no such
    fixed point but needs more steps to separate.
    """
    n = len(z)
    a = z @ params["wa"] + params["ba"]
    x = np.concatenate([a, a + noise])  # clean rows first
    target = np.concatenate([np.zeros(n), np.ones(n)])
    h = x @ params["w1"] + params["b1"]
    g = _leaky(h, slope)
    o = g @ params["w2"] + params["b2"]
    s = _sigmoid(o)

    sign = np.where(target == 1, -1.0, 1.0)
    if loss == "margin":
        viol = np.where(target == 1, th_plus - o, o + th_minus)
        active = viol > 0
        value = float(np.sum(np.where(active, viol, 0.0)))
        do = np.where(active, sign, 0.0)
    elif loss == "hinge":
        viol = np.where(target == 1, th_plus - s, s - th_minus)
        active = viol > 0
        value = float(np.sum(np.where(active, viol, 0.0)))
        do = np.where(active, sign, 0.0) * s * (1.0 - s)
    elif loss == "logistic":
        # log(1 + e^-o) for positives, log(1 + e^o) for negatives
        value = float(np.sum(np.logaddexp(0.0, sign * o)))
        do = s - target
    else:
        raise ValueError(f"unknown loss {loss!r}")

    grads = {
        "w2": g.T @ do,
        "b2": np.asarray(do.sum()),
    }
    dg = np.outer(do, params["w2"])
    dh = dg * np.where(h > 0, 1.0, slope)
    grads["w1"] = x.T @ dh
    grads["b1"] = dh.sum(axis=0)
    dx = dh @ params["w1"].T
    da = dx[:n] + dx[n:]
    grads["wa"] = z.T @ da
    grads["ba"] = da.sum(axis=0)
    return value, grads


@dataclass
class TrainConfig:
    epochs: int = 160
    batch: int = 4
    noise_sigma: float = 0.015
    lr_disc: float = 2e-4
    lr_adaptor: float = 1e-4
    weight_decay: float = 1e-5
    th_plus: float = 0.5
    th_minus: float = 0.5
    hidden: int = 64
    loss: str = "hinge"
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.epochs < 1 or self.batch < 1 or self.hidden < 1:
            raise ValueError("epochs, batch and hidden must be >= 1")
        if not (0 < self.th_plus < 1 and 0 < self.th_minus < 1):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


class _Adam:
    def __init__(self, params, lrs, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lrs = lrs
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k] + self.wd * p
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = p - self.lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _as_batches(normal_features) -> list[np.ndarray]:
    out = []
    for f in normal_features:
        out.append(f.vectors() if isinstance(f, PatchFeatureMap) else np.atleast_2d(np.asarray(f, dtype=np.float64)))
    return out


def train_filter(normal_features: Sequence, cfg: TrainConfig = TrainConfig()) -> FilterModel:
    """Fit the adaptor + discriminator on clean vs. noise-perturbed features.

    ``normal_features`` is a list of :class:`PatchFeatureMap` (one per normal
    image) or of plain ``(n, dim)`` arrays. A batch is ``cfg.batch`` images'
    worth of patch vectors. Features are standardized with statistics of the
    training set, stored in the model.
    """
    groups = _as_batches(normal_features)
    if not groups:
        raise ValueError("need at least one normal feature map")
    dims = {g.shape[1] for g in groups}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    dim = dims.pop()
    allv = np.concatenate(groups)
    if not np.all(np.isfinite(allv)):
        raise ValueError("non-finite training features")
    mean = allv.mean(axis=0)
    std = allv.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    zs = [(g - mean) / std for g in groups]

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = init_params(dim, cfg.hidden, rng)
    lrs = {k: cfg.lr_disc for k in DISC_PARAMS} | {k: cfg.lr_adaptor for k in ADAPTOR_PARAMS}
    opt = _Adam(params, lrs, cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(zs))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            z = np.concatenate([zs[i] for i in order[start:start + cfg.batch]])
            noise = rng.normal(0.0, cfg.noise_sigma, size=z.shape)
            value, grads = loss_and_grads(params, z, noise, cfg.th_plus, cfg.th_minus, cfg.loss, cfg.leaky_slope)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {start}: {value}")
            opt.step(params, grads)
            total += value
        history.append(total)
    meta = {
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "lr_disc": cfg.lr_disc,
        "lr_adaptor": cfg.lr_adaptor,
        "weight_decay": cfg.weight_decay,
        "hidden": cfg.hidden,
        "seed": cfg.seed,
        "final_epoch_loss": history[-1],
    }
    return FilterModel(mean, std, params, cfg.noise_sigma, cfg.th_plus, cfg.th_minus, cfg.loss,
                       cfg.leaky_slope, meta)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

def save_model(path, model: FilterModel) -> None:
    """One JSON header line, then float64 GAAT blocks in header order."""
    blocks = [("mean", model.mean), ("std", model.std)] + [(k, model.params[k]) for k in (*ADAPTOR_PARAMS, *DISC_PARAMS)]
    header = {
        "format": _MODEL_MAGIC,
        "version": 1,
        "dim": model.dim,
        "hidden": int(model.params["w1"].shape[1]),
        "noise_sigma": model.noise_sigma,
        "th_plus": model.th_plus,
        "th_minus": model.th_minus,
        "loss": model.loss,
        "leaky_slope": model.leaky_slope,
        "normalization": {"mean": model.mean.tolist(), "std": model.std.tolist()},
        "meta": model.meta,
        "blocks": [name for name, _ in blocks],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for _, arr in blocks:
        write_tensor(buf, arr, "<f8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> FilterModel:
    with open(path, "rb") as fp:
        header = json.loads(fp.readline().decode("utf-8"))
        if header.get("format") != _MODEL_MAGIC:
            raise ValueError(f"{path} is not a filter model file")
        arrays = {name: read_tensor(fp) for name in header["blocks"]}
    params = {k: arrays[k].astype(np.float64) for k in (*ADAPTOR_PARAMS, *DISC_PARAMS)}
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite parameter block {k!r} in {path}")
    return FilterModel(
        arrays["mean"].astype(np.float64),
        arrays["std"].astype(np.float64),
        params,
        header["noise_sigma"],
        header["th_plus"],
        header["th_minus"],
        header["loss"],
        header["leaky_slope"],
        header.get("meta", {}),
    )


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def _interp_axis(n_out: int, n_in: int, coords: np.ndarray):
    coords = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def upsample(grid: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear",
             src_y: Optional[np.ndarray] = None, src_x: Optional[np.ndarray] = None) -> np.ndarray:
    """Resize a score grid. Default sampling uses half-pixel alignment.

    ``src_y``/``src_x`` override the fractional grid coordinates of each
    output row/column. Bilinear values are convex combinations of grid values.
    """
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if src_y is None:
        src_y = (np.arange(out_h) + 0.5) * gh / out_h - 0.5
    if src_x is None:
        src_x = (np.arange(out_w) + 0.5) * gw / out_w - 0.5
    if mode == "nearest":
        iy = np.clip(np.floor(src_y + 0.5), 0, gh - 1).astype(np.int64)
        ix = np.clip(np.floor(src_x + 0.5), 0, gw - 1).astype(np.int64)
        return grid[np.ix_(iy, ix)]
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    y0, y1, fy = _interp_axis(out_h, gh, src_y)
    x0, x1, fx = _interp_axis(out_w, gw, src_x)
    fy = fy[:, None]
    fx = fx[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bottom = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(out, grid.min(), grid.max())


@dataclass
class ScoreMap:
    grid: np.ndarray
    values: Optional[np.ndarray] = None  # upsampled (H, W)

    @property
    def shape(self):
        return None if self.values is None else self.values.shape


def score_image(model: FilterModel, features: PatchFeatureMap, out_h: int, out_w: int,
                mode: str = "bilinear") -> ScoreMap:
    """Per-patch sigmoid scores, upsampled so grid points sit on patch centers."""
    if features.dim != model.dim:
        raise ValueError(f"feature dim {features.dim} != model dim {model.dim}")
    gh, gw = features.values.shape[:2]
    grid = model.scores(features.vectors()).reshape(gh, gw)
    half = (features.patch - 1) / 2.0
    src_y = (np.arange(out_h) - half) / features.stride
    src_x = (np.arange(out_w) - half) / features.stride
    return ScoreMap(grid, upsample(grid, out_h, out_w, mode, src_y, src_x))


def ars(score_map, mask: np.ndarray) -> float:
    """Mean upsampled score over the mask region.

    Accumulated as ``min + fsum(score - min) / n`` so constant maps are
    reproduced exactly and the result never leaves ``[min, max]``.
    """
    values = score_map.values if isinstance(score_map, ScoreMap) else np.asarray(score_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values is None or values.shape != mask.shape:
        raise ValueError(f"score map {None if values is None else values.shape} and mask {mask.shape} differ")
    inside = values[mask]
    if inside.size == 0:
        raise ValueError("ARS undefined for an empty mask")
    lo, hi = float(inside.min()), float(inside.max())
    mean = lo + math.fsum((inside - lo).tolist()) / inside.size
    return min(max(mean, lo), hi)


def select_top(entries: Sequence[ManifestEntry], k_per_type: int) -> list[ManifestEntry]:
    """Keep the ``k_per_type`` highest-ARS entries of each (cluster, kind) group.

    Ties go to the earlier (image path, mask path); survivors keep input order.
    """
    if k_per_type < 0:
        raise ValueError("k_per_type must be >= 0")
    missing = [e for e in entries if e.ars is None]
    if missing:
        raise ValueError(f"{len(missing)} manifest entries lack an ARS score (first: {missing[0].mask_path})")
    groups = defaultdict(list)
    for i, e in enumerate(entries):
        groups[(e.cluster_id, e.kind)].append(i)
    keep = set()
    for idxs in groups.values():
        ranked = sorted(idxs, key=lambda i: (-entries[i].ars, str(entries[i].image_path), str(entries[i].mask_path)))
        keep.update(ranked[:k_per_type])
    return [e for i, e in enumerate(entries) if i in keep]


def auroc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUROC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
