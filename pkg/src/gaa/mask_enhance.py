"""Geometric enhancement of ground-truth anomaly masks.

Pipeline: closing -> outer contours -> polygon approximation -> vertex
perturbation -> rasterization -> area-adaptive rescaling.

Coordinates are ``(x, y)`` with pixel ``(row=y, col=x)`` centered on the
integer point ``(x, y)``; ``y`` grows downwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from gaa.errors import DegenerateEnhancementError

SHAPES = ("square", "disk")


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "square"
    radius: int = 1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown structuring element shape {self.shape!r}")
        if self.radius < 1:
            raise ValueError("structuring element radius must be >= 1")

    def offsets(self) -> list[tuple[int, int]]:
        r = self.radius
        out = []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if self.shape == "square" or dx * dx + dy * dy <= r * r:
                    out.append((dy, dx))
        return out


@dataclass(frozen=True)
class EnhanceConfig:
    close_b1: StructuringElement = field(default_factory=StructuringElement)
    erode_b2: StructuringElement = field(default_factory=StructuringElement)
    delta: float = 2.0
    perturb_sigma: float = 1.5
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.perturb_sigma < 0:
            raise ValueError("perturb_sigma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


# --------------------------------------------------------------------------
# morphology
# --------------------------------------------------------------------------

def _shift_or(mask: np.ndarray, offsets, fill: bool) -> np.ndarray:
    h, w = mask.shape
    r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    padded = np.pad(mask, r, constant_values=fill)
    out = np.zeros_like(mask)
    for dy, dx in offsets:
        out |= padded[r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Binary dilation; pixels beyond the canvas count as background."""
    mask = np.asarray(mask, dtype=bool)
    return _shift_or(mask, [(-dy, -dx) for dy, dx in se.offsets()], False)


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Binary erosion; pixels beyond the canvas count as foreground.

    That border convention makes ``erode`` the exact adjoint of ``dilate`` on
    the canvas, so their composition is a true closing (extensive and
    idempotent) even for masks touching the border.
    """
    mask = np.asarray(mask, dtype=bool)
    return ~_shift_or(~mask, se.offsets(), False)


def morphological_close(mask: np.ndarray, b1: StructuringElement, b2: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot close an empty mask")
    return erode(dilate(mask, b1), b2)


# --------------------------------------------------------------------------
# contours
# --------------------------------------------------------------------------

# Moore neighborhood in counter-clockwise order (as displayed, y down),
# starting west.
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]  # (dx, dy)
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def trace_boundary(component: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor trace of one 8-connected component from its top-left pixel.

    Stops with Jacob's criterion: when the start pixel is left again in the
    same direction as the first time. Returns pixel ``(x, y)`` positions.
    """
    h, w = component.shape

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and component[y, x]

    def step(cur, back):
        # back: direction index (relative to cur) of the background pixel we came from
        for i in range(1, 9):
            d = (back + i) % 8
            nx, ny = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if fg(nx, ny):
                prev = (d - 1) % 8
                px, py = cur[0] + _MOORE[prev][0], cur[1] + _MOORE[prev][1]
                return (nx, ny), _MOORE_INDEX[(px - nx, py - ny)]
        return None, None

    path = [start]
    first = step(start, 0)  # enter the top-left pixel from the west
    if first[0] is None:
        return path
    cur, back = first
    limit = 4 * component.size + 8
    while len(path) < limit:
        if cur == start:
            nxt = step(cur, back)
            if nxt == first:
                break
            path.append(cur)
            cur, back = nxt
            continue
        path.append(cur)
        cur, back = step(cur, back)
    return path


def _pixel_square(x: float, y: float, half: float) -> np.ndarray:
    # counter-clockwise as displayed (y down)
    return np.array([(x - half, y - half), (x - half, y + half), (x + half, y + half), (x + half, y - half)])


def _hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, points)))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1], dtype=np.float64)
    return hull[::-1]  # flip to counter-clockwise as displayed


def signed_area(poly: np.ndarray) -> float:
    """Shoelace area in raw (x, y); negative means counter-clockwise on screen."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def extract_contours(mask: np.ndarray) -> list[np.ndarray]:
    """Outer boundary polygon of every 8-connected component (holes ignored).

    Components are ordered by their top-left-most pixel. A single-pixel
    component becomes its unit square; a two-pixel component becomes the hull
    of its two pixel squares (slightly shrunk so that no neighbor center is
    touched).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot extract contours from an empty mask")
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    firsts = []
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    _, first_pos = np.unique(flat[nz], return_index=True)
    for lab, pos in zip(range(1, count + 1), nz[first_pos]):
        firsts.append((int(pos), lab))
    firsts.sort()
    polygons = []
    w = mask.shape[1]
    for pos, lab in firsts:
        component = labels == lab
        start = (pos % w, pos // w)
        path = trace_boundary(component, start)
        unique = list(dict.fromkeys(path))
        if len(unique) == 1:
            polygons.append(_pixel_square(*start, 0.5))
        elif len(unique) == 2:
            corners = np.vstack([_pixel_square(x, y, 0.45) for x, y in unique])
            polygons.append(_hull(corners))
        else:
            polygons.append(np.array(path, dtype=np.float64))
    return polygons


# --------------------------------------------------------------------------
# polygon approximation
# --------------------------------------------------------------------------

def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``p`` (n, 2) to segment ``a-b``."""
    p = np.atleast_2d(p)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.hypot(*(p - a).T)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


def _rdp(points: np.ndarray, delta: float) -> list[int]:
    """Indices kept by Ramer-Douglas-Peucker on an open polyline."""
    keep = {0, len(points) - 1}
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = point_segment_distance(points[i + 1:j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > delta:
            m = i + 1 + k
            keep.add(m)
            stack.append((i, m))
            stack.append((m, j))
    return sorted(keep)


def _farthest_pair(points: np.ndarray, chunk: int = 512) -> tuple[int, int]:
    best, pair = -1.0, (0, 1)
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=2)
        flat = int(np.argmax(d2))
        if d2.flat[flat] > best:
            best = float(d2.flat[flat])
            i, j = divmod(flat, len(points))
            pair = (start + i, j)
    a, b = pair
    return (a, b) if a < b else (b, a)


def approximate_polygon(contour: np.ndarray, delta: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification of a closed contour.

    The contour is cut at its two mutually farthest vertices and each half is
    simplified with tolerance ``delta``. At least three vertices are kept.
    """
    contour = np.asarray(contour, dtype=np.float64)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    n = len(contour)
    if n < 3:
        raise ValueError("polygon approximation needs at least 3 vertices")
    a, b = _farthest_pair(contour)
    first = contour[a:b + 1]
    second = np.vstack([contour[b:], contour[:a + 1]])
    keep1 = [a + i for i in _rdp(first, delta)]
    keep2 = [(b + i) % n for i in _rdp(second, delta)]
    kept = keep1 + keep2[1:-1]
    if len(kept) < 3:
        # Add back the vertex farthest from the chord.
        rest = [i for i in range(n) if i not in kept]
        dist = point_segment_distance(contour[rest], contour[a], contour[b])
        kept = sorted(kept + [rest[int(np.argmax(dist))]])
    return contour[kept]


# --------------------------------------------------------------------------
# perturbation
# --------------------------------------------------------------------------

def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def _on_segment(a, b, p):
    return (
        (np.minimum(a[..., 0], b[..., 0]) <= p[..., 0]) & (p[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
        & (np.minimum(a[..., 1], b[..., 1]) <= p[..., 1]) & (p[..., 1] <= np.maximum(a[..., 1], b[..., 1]))
    )


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Closed-segment intersection test, broadcasting over leading axes."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, p2, q1, q2))
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    touch = (
        ((d1 == 0) & _on_segment(q1, q2, p1))
        | ((d2 == 0) & _on_segment(q1, q2, p2))
        | ((d3 == 0) & _on_segment(p1, p2, q1))
        | ((d4 == 0) & _on_segment(p1, p2, q2))
    )
    return proper | touch


def _vertex_edges_clear(poly: np.ndarray, i: int) -> bool:
    """True if the two edges at vertex ``i`` cross no non-adjacent edge."""
    n = len(poly)
    if n < 4:
        return abs(signed_area(poly)) > 0
    ends = np.roll(poly, -1, axis=0)
    edge_ids = np.arange(n)
    for a, b, own in ((poly[i - 1], poly[i], (i - 1) % n), (poly[i], poly[(i + 1) % n], i)):
        others = ~np.isin(edge_ids, ((own - 1) % n, own, (own + 1) % n))
        if segments_intersect(a, b, poly[others], ends[others]).any():
            return False
    return True


def is_simple(poly: np.ndarray) -> bool:
    poly = np.asarray(poly, dtype=np.float64)
    return all(_vertex_edges_clear(poly, i) for i in range(len(poly)))


def perturb_polygon(poly: np.ndarray, sigma: float, seed=0, max_attempts: int = 10) -> np.ndarray:
    """Displace each vertex by independent N(0, sigma^2) offsets per axis.

    Vertices are visited in order; a displacement that would make the polygon
    self-intersect is redrawn up to ``max_attempts`` times, after which the
    vertex keeps its original position.
    """
    poly = np.array(poly, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return poly
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for i in range(len(poly)):
        original = poly[i].copy()
        for _ in range(max_attempts):
            poly[i] = original + rng.normal(0.0, sigma, size=2)
            if _vertex_edges_clear(poly, i):
                break
        else:
            poly[i] = original
    return poly


# --------------------------------------------------------------------------
# rasterization and rescaling
# --------------------------------------------------------------------------

def rasterize(poly: np.ndarray, width: int, height: int, include_boundary: bool = False) -> np.ndarray:
    """Even-odd fill on pixel centers, clipped to the canvas.

    Edges cover ``y0 <= y < y1`` and a center is inside when an odd number of
    crossings lie at or left of it, so a rectangle ``[x0, x1) x [y0, y1)``
    sets exactly the centers it contains. ``include_boundary`` additionally
    sets pixels whose centers lie on an edge, which reproduces traced pixel
    contours exactly.
    """
    poly = np.asarray(poly, dtype=np.float64)
    out = np.zeros((height, width), dtype=bool)
    if len(poly) < 2:
        return out
    a = poly
    b = np.roll(poly, -1, axis=0)
    xs = np.arange(width, dtype=np.float64)
    y_lo = max(0, int(math.ceil(poly[:, 1].min())))
    y_hi = min(height - 1, int(math.floor(poly[:, 1].max())))
    for y in range(y_lo, y_hi + 1):
        crossing = ((a[:, 1] <= y) & (b[:, 1] > y)) | ((b[:, 1] <= y) & (a[:, 1] > y))
        if crossing.any():
            ea, eb = a[crossing], b[crossing]
            xc = ea[:, 0] + (y - ea[:, 1]) * (eb[:, 0] - ea[:, 0]) / (eb[:, 1] - ea[:, 1])
            count = np.sum(xc[None, :] <= xs[:, None], axis=1)
            out[y] = (count % 2) == 1
    if include_boundary:
        lo = np.floor(poly.min(axis=0)).astype(int)
        hi = np.ceil(poly.max(axis=0)).astype(int)
        x0, x1 = max(lo[0], 0), min(hi[0], width - 1)
        y0, y1 = max(lo[1], 0), min(hi[1], height - 1)
        if x0 <= x1 and y0 <= y1:
            gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
            on = np.zeros(len(pts), dtype=bool)
            for s, e in zip(a, b):
                on |= point_segment_distance(pts, s, e) <= 1e-9
            out[gy.ravel()[on], gx.ravel()[on]] = True
    return out


def scale_factor(current_area: float, a_avg: float, alpha: float) -> float:
    if current_area == a_avg:
        return 1.0
    ratio = a_avg / current_area
    return alpha * math.sqrt(ratio) + (1.0 - alpha) * ratio ** (1.0 / 3.0)


def scale_mask(mask: np.ndarray, s: float, center=None) -> np.ndarray:
    """Scale the support of ``mask`` by ``s`` about ``center`` (default: centroid).

    The signed distance field of the source support is sampled at the
    inverse-mapped pixel centers, and the ``round(s^2 * area)`` pixels with the
    largest values are kept. Plain nearest-neighbor sampling keeps the parity
    of symmetric side lengths and so misses the target area by up to a full
    pixel ring; the level-set selection hits it exactly while keeping the
    output binary. Pixels that would land beyond the canvas are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if s <= 0:
        raise ValueError("scale must be positive")
    if s == 1.0:
        return mask.copy()
    ys, xs = np.nonzero(mask)
    cy, cx = (ys.mean(), xs.mean()) if center is None else (center[1], center[0])
    h, w = mask.shape
    # work on a canvas large enough to hold the whole scaled support
    reach = s * max(abs(ys - cy).max(), abs(xs - cx).max()) + 2
    top = int(max(0, math.ceil(reach - cy)))
    left = int(max(0, math.ceil(reach - cx)))
    bottom = int(max(0, math.ceil(cy + reach - (h - 1))))
    right = int(max(0, math.ceil(cx + reach - (w - 1))))
    pad = 2
    src = np.pad(mask, pad)
    field = ndimage.distance_transform_edt(src) - ndimage.distance_transform_edt(~src)
    gy, gx = np.mgrid[-top:h + bottom, -left:w + right].astype(np.float64)
    sy = cy + (gy - cy) / s + pad
    sx = cx + (gx - cx) / s + pad
    values = ndimage.map_coordinates(field, [sy, sx], order=1, mode="nearest")
    n = int(math.floor(s * s * ys.size + 0.5))
    order = np.argsort(-values, axis=None, kind="stable")[:n]
    big = np.zeros(values.shape, dtype=bool)
    big.flat[order] = True
    return big[top:top + h, left:left + w]


def scale_adapt(mask: np.ndarray, a_avg: float, alpha: float) -> np.ndarray:
    """Rescale so the area moves toward ``a_avg``.

    The linear factor is ``alpha * sqrt(a_avg / A) + (1 - alpha) * cbrt(a_avg / A)``
    where ``A`` is the current area; the mask is scaled about its centroid.
    """
    mask = np.asarray(mask, dtype=bool)
    current = int(np.count_nonzero(mask))
    if current == 0:
        raise ValueError("cannot scale an empty mask")
    if not a_avg > 0:
        raise ValueError("a_avg must be positive")
    return scale_mask(mask, scale_factor(current, a_avg, alpha))


def enhance(mask: np.ndarray, cfg: EnhanceConfig, a_avg: float, seed=None) -> np.ndarray:
    """Full enhancement of one ground-truth mask into a pseudo-mask.

    Each closed component is traced, simplified, perturbed and filled; the
    union is then rescaled toward ``a_avg``. ``seed`` overrides ``cfg.seed``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot enhance an empty mask")
    h, w = mask.shape
    base_seed = cfg.seed if seed is None else seed
    closed = morphological_close(mask, cfg.close_b1, cfg.erode_b2)
    union = np.zeros_like(closed)
    for idx, contour in enumerate(extract_contours(closed)):
        poly = approximate_polygon(contour, cfg.delta) if len(contour) >= 3 else contour
        poly = perturb_polygon(poly, cfg.perturb_sigma, seed=(*np.atleast_1d(base_seed).tolist(), idx))
        union |= rasterize(poly, w, h, include_boundary=True)
    if not union.any():
        raise DegenerateEnhancementError("degenerate enhancement: every component rasterized empty")
    return scale_adapt(union, a_avg, cfg.alpha)
