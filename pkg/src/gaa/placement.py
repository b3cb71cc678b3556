"""Placement of enhanced masks into semantic regions of normal images.

Structural masks are embedded inside a region by a placement strategy.
Logical masks are the region itself. Combined masks are unions of members
that overlap each other by at most a set IoU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from gaa.dataset_io import DatasetIndex, load_mask
from gaa.errors import InfeasiblePlacementError

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("anywhere_in_region", "center_on_region_skeleton", "tangent_to_region_edge")
STRATEGY_ALIASES = {
    "anywhere": "anywhere_in_region",
    "skeleton": "center_on_region_skeleton",
    "edge": "tangent_to_region_edge",
    "tangent": "tangent_to_region_edge",
}
MAX_PLACEMENT_ATTEMPTS = 200
MAX_MG_RETRIES = 10


@dataclass(frozen=True)
class PlacementStrategy:
    kind: str = "anywhere_in_region"
    rotation: str = "uniform_0_360"
    size_jitter: tuple = (0.8, 1.2)
    offset_tolerance: float = 0.1

    def __post_init__(self):
        kind = STRATEGY_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "size_jitter", tuple(float(v) for v in self.size_jitter))
        if kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown placement strategy {self.kind!r}")
        if self.rotation not in ("none", "uniform_0_360"):
            raise ValueError(f"unknown rotation mode {self.rotation!r}")
        lo, hi = self.size_jitter
        if not 0.5 <= lo <= hi <= 2.0:
            raise ValueError(f"size_jitter {self.size_jitter} must satisfy 0.5 <= lo <= hi <= 2.0")
        if not 0.0 <= self.offset_tolerance <= 0.5:
            raise ValueError("offset_tolerance must lie in [0, 0.5]")

    @property
    def randomized(self) -> bool:
        return self.rotation != "none" or self.size_jitter[0] != self.size_jitter[1]


@dataclass(frozen=True)
class Transform:
    dx: int
    dy: int
    rotation_deg: float
    scale: float


@dataclass
class PlacedMask:
    mask: np.ndarray
    kind: str
    source_region: str
    transform: Optional[Transform] = None
    members: tuple = field(default_factory=tuple)


# --------------------------------------------------------------------------
# geometry helpers
# --------------------------------------------------------------------------

def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def outside_fraction(mask: np.ndarray, region: np.ndarray) -> float:
    total = np.count_nonzero(mask)
    return np.count_nonzero(mask & ~region) / total if total else 0.0


def region_boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with a 4-neighbor outside the region (or the canvas)."""
    region = np.asarray(region, dtype=bool)
    p = np.pad(region, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return region & ~interior


def _zhang_suen_pass(img: np.ndarray, first: bool) -> np.ndarray:
    p = np.pad(img, 1).astype(np.uint8)
    p2, p3, p4 = p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:]
    p5, p6, p7 = p[2:, 2:], p[2:, 1:-1], p[2:, :-2]
    p8, p9 = p[1:-1, :-2], p[:-2, :-2]
    ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
    b = p2.astype(np.int32) + p3 + p4 + p5 + p6 + p7 + p8 + p9
    a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.int32) for i in range(8))
    if first:
        c1 = (p2 * p4 * p6) == 0
        c2 = (p4 * p6 * p8) == 0
    else:
        c1 = (p2 * p4 * p8) == 0
        c2 = (p2 * p6 * p8) == 0
    delete = img & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
    return img & ~delete


def skeletonize(region: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a one-pixel-wide skeleton."""
    img = np.asarray(region, dtype=bool).copy()
    while True:
        nxt = _zhang_suen_pass(_zhang_suen_pass(img, True), False)
        if np.array_equal(nxt, img):
            return img
        img = nxt


def crop_to_content(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask")
    return mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def transform_patch(patch: np.ndarray, rotation_deg: float, scale: float) -> np.ndarray:
    """Rotate and scale a cropped mask about its centroid (nearest neighbor)."""
    patch = np.asarray(patch, dtype=bool)
    if rotation_deg == 0 and scale == 1.0:
        return patch.copy()
    ys, xs = np.nonzero(patch)
    cy, cx = ys.mean(), xs.mean()
    radius = math.hypot(max(cy, patch.shape[0] - 1 - cy), max(cx, patch.shape[1] - 1 - cx)) + 1
    half = int(math.ceil(radius * scale)) + 1
    gy, gx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    t = math.radians(rotation_deg)
    cos, sin = math.cos(t), math.sin(t)
    # inverse map: output offset -> source offset
    sx = (cos * gx + sin * gy) / scale + cx
    sy = (-sin * gx + cos * gy) / scale + cy
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    ok = (iy >= 0) & (iy < patch.shape[0]) & (ix >= 0) & (ix < patch.shape[1])
    out = np.zeros(gy.shape, dtype=bool)
    out[ok] = patch[iy[ok], ix[ok]]
    if not out.any():
        out[half, half] = True
    return crop_to_content(out)


def _reference_point(patch: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(patch)
    return int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5))


def anchor_outside_counts(patch: np.ndarray, region: np.ndarray) -> np.ndarray:
    """For every anchor pixel, how many patch pixels fall outside the region.

    The anchor is where the patch reference point (rounded centroid) lands.
    Pixels beyond the canvas count as outside.
    """
    ry, rx = _reference_point(patch)
    ph, pw = patch.shape
    h, w = region.shape
    # overlap[ay, ax] = sum_{u,v} patch[u, v] * region[ay - ry + u, ax - rx + v]
    padded = np.pad(region.astype(np.float64), ((ph, ph), (pw, pw)))
    corr = fftconvolve(padded, patch[::-1, ::-1].astype(np.float64), mode="valid")
    overlap = np.rint(corr).astype(np.int64)
    # corr[i, j] pairs patch[0, 0] with padded[i, j] = region[i - ph, j - pw]
    oy, ox = ph - ry, pw - rx
    return int(np.count_nonzero(patch)) - overlap[oy:oy + h, ox:ox + w]


def _stamp(patch: np.ndarray, anchor: tuple[int, int], shape) -> np.ndarray:
    ry, rx = _reference_point(patch)
    top, left = anchor[0] - ry, anchor[1] - rx
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + patch.shape[0], h), min(left + patch.shape[1], w)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = patch[y0 - top:y1 - top, x0 - left:x1 - left]
    return out


def feasible_anchors(patch: np.ndarray, region: np.ndarray, strategy: PlacementStrategy) -> np.ndarray:
    """Boolean map of anchors satisfying the strategy and the containment bound."""
    region = np.asarray(region, dtype=bool)
    outside = anchor_outside_counts(patch, region)
    total = int(np.count_nonzero(patch))
    ok = outside <= strategy.offset_tolerance * total + 1e-9
    if strategy.kind == "anywhere_in_region":
        return ok & region
    if strategy.kind == "center_on_region_skeleton":
        return ok & skeletonize(region)
    # tangent: the placed mask must touch the region's edge
    edge = region_boundary(region)
    # pixels "outside" the complement of the edge are exactly those on it
    touches = anchor_outside_counts(patch, ~edge) > 0
    return ok & region & touches


def place_structural(mg: np.ndarray, region: np.ndarray, strategy: PlacementStrategy, seed=0,
                     name: str = "") -> PlacedMask:
    """Embed ``mg`` inside ``region`` at a uniformly drawn feasible anchor.

    Each attempt draws a rotation and scale; all anchors satisfying the
    containment bound for that transform are enumerated and one is drawn
    uniformly. Up to 200 attempts are made.
    """
    mg = np.asarray(mg, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty region")
    if not mg.any():
        raise ValueError("empty mask")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    base = crop_to_content(mg)
    ys, xs = np.nonzero(mg)
    src_ref = (int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5)))
    attempts = MAX_PLACEMENT_ATTEMPTS if strategy.randomized else 1
    for _ in range(attempts):
        rot = float(rng.uniform(0.0, 360.0)) if strategy.rotation == "uniform_0_360" else 0.0
        lo, hi = strategy.size_jitter
        scale = float(rng.uniform(lo, hi)) if hi > lo else lo
        patch = transform_patch(base, rot, scale)
        feasible = feasible_anchors(patch, region, strategy)
        cands = np.flatnonzero(feasible)
        if len(cands) == 0:
            continue
        pick = int(cands[rng.integers(len(cands))])
        anchor = divmod(pick, region.shape[1])
        placed = _stamp(patch, anchor, region.shape)
        tf = Transform(anchor[1] - src_ref[1], anchor[0] - src_ref[0], rot, scale)
        return PlacedMask(placed, "structural", name, tf)
    raise InfeasiblePlacementError(
        "infeasible placement", attempts=attempts, mask_area=int(mg.sum()), region_area=int(region.sum())
    )


def make_logical(region: np.ndarray, name: str = "") -> PlacedMask:
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty region cannot serve as a logical anomaly mask")
    return PlacedMask(region.copy(), "logical", name, Transform(0, 0, 0.0, 1.0))


def combine(masks: Sequence[PlacedMask], overlap_threshold: float = 0.0, seed=0) -> PlacedMask:
    """Greedy union of masks whose pairwise IoU stays within the threshold."""
    if len(masks) < 2:
        raise ValueError("combine needs at least two masks")
    shape = masks[0].mask.shape
    if any(m.mask.shape != shape for m in masks):
        raise ValueError("masks to combine must share a canvas")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    accepted = []
    for i in rng.permutation(len(masks)):
        cand = masks[int(i)]
        if all(iou(cand.mask, a.mask) <= overlap_threshold for a in accepted):
            accepted.append(cand)
    if len(accepted) < 2:
        raise InfeasiblePlacementError("fewer than two mutually compatible masks", attempts=len(masks))
    union = np.zeros(shape, dtype=bool)
    for a in accepted:
        union |= a.mask
    name = "+".join(a.source_region for a in accepted)
    return PlacedMask(union, "combined", name, None, tuple(accepted))


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanRow:
    kind: str
    region: str
    strategy: PlacementStrategy
    count: int
    cluster: Optional[int] = None
    overlap_threshold: float = 0.0

    @property
    def members(self) -> list[tuple[str, str]]:
        """Combined-row members as (kind, region); a single name means two structural draws."""
        tokens = self.region.split("+")
        if len(tokens) == 1:
            tokens = tokens * 2
        out = []
        for t in tokens:
            if t.startswith("logical:"):
                out.append(("logical", t[len("logical:"):]))
            else:
                out.append(("structural", t))
        return out

    @property
    def regions(self) -> list[str]:
        if self.kind == "combined":
            return sorted({r for _, r in self.members})
        return [self.region]


def parse_plan_line(line: str) -> Optional[PlanRow]:
    """``kind region strategy count [key=value ...]``; ``#`` starts a comment.

    Keys: ``tol`` (offset tolerance), ``rotation`` (none|uniform_0_360),
    ``jitter`` (lo,hi), ``cluster`` (restrict M_G draws), ``overlap``
    (IoU threshold for combined rows).
    """
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    parts = line.split()
    if len(parts) < 4:
        raise ValueError(f"plan line needs 'kind region strategy count': {line!r}")
    kind, region, strategy_name, count = parts[:4]
    if kind not in ("structural", "logical", "combined"):
        raise ValueError(f"unknown anomaly kind {kind!r}")
    opts = {}
    for tok in parts[4:]:
        if "=" not in tok:
            raise ValueError(f"bad plan option {tok!r}")
        k, v = tok.split("=", 1)
        opts[k] = v
    unknown = set(opts) - {"tol", "rotation", "jitter", "cluster", "overlap"}
    if unknown:
        raise ValueError(f"unknown plan options {sorted(unknown)}")
    strategy_kwargs = {"kind": "anywhere_in_region" if strategy_name == "-" else strategy_name}
    if "tol" in opts:
        strategy_kwargs["offset_tolerance"] = float(opts["tol"])
    if "rotation" in opts:
        strategy_kwargs["rotation"] = opts["rotation"]
    if "jitter" in opts:
        lo, hi = (float(v) for v in opts["jitter"].split(","))
        strategy_kwargs["size_jitter"] = (lo, hi)
    n = int(count)
    if n < 0:
        raise ValueError("plan count must be >= 0")
    return PlanRow(
        kind,
        region,
        PlacementStrategy(**strategy_kwargs),
        n,
        int(opts["cluster"]) if "cluster" in opts else None,
        float(opts.get("overlap", 0.0)),
    )


def read_plan(path) -> list[PlanRow]:
    rows = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            try:
                row = parse_plan_line(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if row is not None:
                rows.append(row)
    return rows


# --------------------------------------------------------------------------
# synthesis over a dataset
# --------------------------------------------------------------------------

@dataclass
class SkeletonEntry:
    """One planned pair: the normal image to edit and its aligned mask."""

    row: int
    index: int
    image_path: Path
    cluster_id: int
    placed: PlacedMask
    mg_source: Optional[str] = None

    @property
    def kind(self) -> str:
        return self.placed.kind

    def provenance(self) -> dict:
        def tf(p):
            t = p.transform
            return None if t is None else {"dx": t.dx, "dy": t.dy, "rotation_deg": t.rotation_deg, "scale": t.scale}

        return {
            "row": self.row,
            "index": self.index,
            "image": str(self.image_path),
            "cluster_id": self.cluster_id,
            "kind": self.kind,
            "region": self.placed.source_region,
            "transform": tf(self.placed),
            "mg_source": self.mg_source,
            "members": [
                {"kind": m.kind, "region": m.source_region, "transform": tf(m)} for m in self.placed.members
            ],
        }


def synthesize_aligned(index: DatasetIndex, tree, mg_pool: dict, plan: Sequence[PlanRow], seed=0,
                       pool_names: Optional[dict] = None) -> tuple[list[SkeletonEntry], list[str]]:
    """Emit ``count`` aligned masks per plan row over the dataset's normal images.

    ``mg_pool`` maps cluster id -> list of enhanced masks. Normal images that
    carry the row's regions are visited cyclically. Every entry draws from its
    own random stream ``(seed, row, entry)``. Returns the entries and the
    warnings raised for skipped ones.
    """
    clusters = sorted(c for c, masks in mg_pool.items() if len(masks))
    if tree is not None:
        known = set(range(tree.n_leaves)) if hasattr(tree, "n_leaves") else set(tree)
        stray = [c for c in clusters if c not in known]
        if stray:
            raise ValueError(f"mask pool clusters {stray} are not leaves of the cluster tree")
    entries: list[SkeletonEntry] = []
    warnings: list[str] = []
    region_cache: dict = {}

    def region_mask(path):
        if path not in region_cache:
            region_cache[path] = load_mask(path)
        return region_cache[path]

    for r, row in enumerate(plan):
        for name in row.regions:
            if name not in index.region_records:
                raise KeyError(f"plan row {r}: region {name!r} not in dataset")
        needs_mg = row.kind == "structural" or (row.kind == "combined" and any(k == "structural" for k, _ in row.members))
        pool_ids = clusters if row.cluster is None else [row.cluster]
        if row.cluster is not None and row.cluster not in clusters and needs_mg:
            raise KeyError(f"plan row {r}: cluster {row.cluster} has no masks in the pool")
        if needs_mg and not pool_ids:
            raise ValueError(f"plan row {r}: empty mask pool")
        # images carrying every region the row needs
        images = None
        for name in row.regions:
            have = {img: rm for img, rm in index.region_records[name]}
            images = dict.fromkeys(have) if images is None else {k: None for k in images if k in have}
        images = sorted(images)
        if not images:
            raise ValueError(f"plan row {r}: no normal image carries regions {row.regions}")
        lookup = {name: dict(index.region_records[name]) for name in row.regions}

        for e in range(row.count):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), r, e]))
            image = images[e % len(images)]
            cluster_id = int(pool_ids[rng.integers(len(pool_ids))]) if pool_ids else (row.cluster if row.cluster is not None else 0)
            try:
                placed, src = _place_row(row, image, lookup, region_mask, mg_pool, cluster_id, rng, pool_names)
            except InfeasiblePlacementError as exc:
                msg = f"plan row {r} entry {e} on {image.name}: skipped after retries ({exc})"
                logger.warning(msg)
                warnings.append(msg)
                continue
            entries.append(SkeletonEntry(r, e, image, cluster_id, placed, src))
    return entries, warnings


def _place_row(row, image, lookup, region_mask, mg_pool, cluster_id, rng, pool_names):
    def draw_structural(region_name):
        region = region_mask(lookup[region_name][image])
        pool = mg_pool[cluster_id]
        last = None
        for _ in range(MAX_MG_RETRIES):
            j = int(rng.integers(len(pool)))
            try:
                placed = place_structural(pool[j], region, row.strategy, seed=int(rng.integers(2**63)), name=region_name)
            except InfeasiblePlacementError as exc:
                last = exc
                continue
            src = pool_names[cluster_id][j] if pool_names else None
            return placed, src
        raise last

    if row.kind == "logical":
        return make_logical(region_mask(lookup[row.region][image]), row.region), None
    if row.kind == "structural":
        return draw_structural(row.region)
    last = None
    for _ in range(MAX_MG_RETRIES):
        members, sources = [], []
        for kind, name in row.members:
            if kind == "logical":
                members.append(make_logical(region_mask(lookup[name][image]), name))
            else:
                placed, src = draw_structural(name)
                members.append(placed)
                sources.append(src)
        try:
            combined = combine(members, row.overlap_threshold, seed=int(rng.integers(2**63)))
        except InfeasiblePlacementError as exc:
            last = exc
            continue
        srcs = [s for s in sources if s]
        return combined, ";".join(srcs) if srcs else None
    raise last
