import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.stats import chisquare

from gaa.dataset_io import load_mask, scan_dataset
from gaa.errors import InfeasiblePlacementError
from gaa.placement import (
    PlacedMask,
    PlacementStrategy,
    anchor_outside_counts,
    combine,
    feasible_anchors,
    iou,
    make_logical,
    outside_fraction,
    parse_plan_line,
    place_structural,
    read_plan,
    region_boundary,
    skeletonize,
    synthesize_aligned,
    transform_patch,
)
from gaa.toy import make_toy_dataset

FIXED = dict(rotation="none", size_jitter=(1.0, 1.0))


def _box(shape, y0, y1, x0, x1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


# -- strategy and plan -------------------------------------------------------------

def test_strategy_validation_and_aliases():
    assert PlacementStrategy("edge").kind == "tangent_to_region_edge"
    assert PlacementStrategy("skeleton").kind == "center_on_region_skeleton"
    for bad in (dict(kind="x"), dict(rotation="half"), dict(size_jitter=(0.4, 1.0)),
                dict(size_jitter=(1.5, 1.2)), dict(offset_tolerance=0.6)):
        with pytest.raises(ValueError):
            PlacementStrategy(**bad)


def test_parse_plan_lines(tmp_path):
    row = parse_plan_line("structural left skeleton 3 tol=0.2 rotation=none jitter=0.9,1.1 cluster=2")
    assert row.kind == "structural" and row.count == 3 and row.cluster == 2
    assert row.strategy.kind == "center_on_region_skeleton"
    assert row.strategy.offset_tolerance == 0.2 and row.strategy.size_jitter == (0.9, 1.1)
    assert parse_plan_line("  # only a comment") is None
    combo = parse_plan_line("combined left+logical:right anywhere 2 overlap=0.3")
    assert combo.members == [("structural", "left"), ("logical", "right")]
    assert combo.regions == ["left", "right"] and combo.overlap_threshold == 0.3
    assert parse_plan_line("combined left anywhere 1").members == [("structural", "left")] * 2
    for bad in ("structural left", "weird left anywhere 1", "structural left anywhere 1 foo=1",
                "structural left anywhere -1", "structural left anywhere 1 tol"):
        with pytest.raises(ValueError):
            parse_plan_line(bad)
    (tmp_path / "p.txt").write_text("logical left - 2\n\nstructural x nowhere 1\n")
    with pytest.raises(ValueError, match="p.txt:3"):
        read_plan(tmp_path / "p.txt")


# -- geometry helpers -----------------------------------------------------------------

def test_iou_and_outside_fraction():
    a = _box((6, 6), 0, 2, 0, 2)
    b = _box((6, 6), 1, 3, 1, 3)
    assert iou(a, b) == pytest.approx(1 / 7)
    assert iou(a, a) == 1.0 and iou(a & ~a, a & ~a) == 0.0
    assert outside_fraction(b, a) == 0.75


def _brute_outside(patch, region):
    ys, xs = np.nonzero(patch)
    ry, rx = int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5))
    h, w = region.shape
    out = np.zeros((h, w), int)
    for ay in range(h):
        for ax in range(w):
            n = 0
            for y, x in zip(ys, xs):
                yy, xx = ay - ry + y, ax - rx + x
                n += not (0 <= yy < h and 0 <= xx < w and region[yy, xx])
            out[ay, ax] = n
    return out


def test_anchor_counts_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(15):
        patch = rng.random((int(rng.integers(1, 5)), int(rng.integers(1, 5)))) < 0.6
        if not patch.any():
            continue
        region = rng.random((8, 9)) < 0.7
        assert np.array_equal(anchor_outside_counts(patch, region), _brute_outside(patch, region))


def _zs_reference(img):
    """Textbook Zhang-Suen thinning, one pixel at a time."""
    img = np.pad(np.asarray(img, bool), 1).astype(int)
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            drop = []
            for y in range(1, img.shape[0] - 1):
                for x in range(1, img.shape[1] - 1):
                    if not img[y, x]:
                        continue
                    p = [img[y - 1, x], img[y - 1, x + 1], img[y, x + 1], img[y + 1, x + 1],
                         img[y + 1, x], img[y + 1, x - 1], img[y, x - 1], img[y - 1, x - 1]]
                    b = sum(p)
                    a = sum(p[i] == 0 and p[(i + 1) % 8] == 1 for i in range(8))
                    if step == 0:
                        c = p[0] * p[2] * p[4] == 0 and p[2] * p[4] * p[6] == 0
                    else:
                        c = p[0] * p[2] * p[6] == 0 and p[0] * p[4] * p[6] == 0
                    if 2 <= b <= 6 and a == 1 and c:
                        drop.append((y, x))
            for y, x in drop:
                img[y, x] = 0
            changed |= bool(drop)
    return img[1:-1, 1:-1].astype(bool)


def test_skeleton_matches_textbook_thinning():
    rng = np.random.default_rng(0)
    for _ in range(25):
        m = ndimage.binary_closing(rng.random((16, 16)) < 0.55, iterations=2)
        assert np.array_equal(skeletonize(m), _zs_reference(m))
    bar = _box((7, 15), 2, 5, 1, 14)
    sk = skeletonize(bar)
    assert sk.any() and not np.any(sk & ~bar) and np.all(sk.sum(axis=0) <= 1)


def test_region_boundary_is_four_connected_edge():
    r = _box((7, 7), 1, 6, 1, 6)
    b = region_boundary(r)
    assert b.sum() == 16 and not b[2:5, 2:5].any()
    assert region_boundary(np.ones((3, 3), bool)).sum() == 8


def test_transform_patch_identity_and_rotation():
    p = _box((3, 5), 0, 3, 0, 5)
    assert np.array_equal(transform_patch(p, 0.0, 1.0), p)
    assert transform_patch(p, 90.0, 1.0).shape == (5, 3)
    assert transform_patch(p, 0.0, 2.0).sum() == pytest.approx(60, rel=0.25)


# -- structural placement ---------------------------------------------------------------

def test_place_full_canvas_region():
    region = np.ones((20, 20), bool)
    mg = _box((20, 20), 3, 8, 3, 9)
    for s in range(20):
        placed = place_structural(mg, region, PlacementStrategy(offset_tolerance=0.0), seed=s)
        assert placed.mask.sum() > 0 and outside_fraction(placed.mask, region) == 0.0


def test_tight_fit_only_identity_anchor():
    region = _box((12, 12), 3, 8, 2, 9)
    strat = PlacementStrategy(offset_tolerance=0.0, **FIXED)
    assert feasible_anchors(region, region, strat).sum() == 1
    placed = place_structural(region, region, strat, seed=4)
    assert np.array_equal(placed.mask, region)
    assert (placed.transform.dx, placed.transform.dy) == (0, 0)


def test_three_in_five_anchor_set_and_uniformity():
    region = _box((9, 9), 2, 7, 2, 7)
    mg = _box((9, 9), 0, 3, 0, 3)
    strat = PlacementStrategy(offset_tolerance=0.0, **FIXED)
    feas = feasible_anchors(crop(mg), region, strat)
    assert np.array_equal(feas, _box((9, 9), 3, 6, 3, 6))
    counts = np.zeros((9, 9), int)
    for s in range(10_000):
        placed = place_structural(mg, region, strat, seed=s)
        ys, xs = np.nonzero(placed.mask)
        counts[int(ys.mean()), int(xs.mean())] += 1
    observed = counts[3:6, 3:6].ravel()
    assert observed.sum() == 10_000
    assert chisquare(observed).pvalue > 0.01


def crop(m):
    ys, xs = np.nonzero(m)
    return m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def test_tangent_anchors_touch_edge():
    region = _box((9, 9), 2, 7, 2, 7)
    strat = PlacementStrategy("tangent", offset_tolerance=0.0, **FIXED)
    feas = feasible_anchors(np.ones((3, 3), bool), region, strat)
    expected = _box((9, 9), 3, 6, 3, 6)
    expected[4, 4] = False
    assert np.array_equal(feas, expected)
    edge = region_boundary(region)
    for s in range(30):
        placed = place_structural(np.ones((3, 3), bool), region, strat, seed=s)
        assert np.any(placed.mask & edge) and not np.any(placed.mask & ~region)


def test_skeleton_strategy_centers_on_skeleton():
    region = _box((11, 21), 2, 9, 1, 20)
    strat = PlacementStrategy("skeleton", offset_tolerance=0.2, **FIXED)
    sk = skeletonize(region)
    for s in range(20):
        placed = place_structural(np.ones((3, 3), bool), region, strat, seed=s)
        ys, xs = np.nonzero(placed.mask)
        assert sk[int(round(ys.mean())), int(round(xs.mean()))]


def test_infeasible_placement_reports_diagnostics():
    region = _box((10, 10), 0, 3, 0, 3)
    with pytest.raises(InfeasiblePlacementError) as info:
        place_structural(np.ones((6, 6), bool), region, PlacementStrategy(offset_tolerance=0.0, **FIXED))
    assert info.value.mask_area == 36 and info.value.region_area == 9
    with pytest.raises(ValueError):
        place_structural(np.ones((2, 2), bool), np.zeros((4, 4), bool), PlacementStrategy())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_structural_containment_property(side, seed, tol):
    region = _box((30, 30), 4, 26, 6, 24)
    mg = _box((30, 30), 0, side, 0, side + 1)
    placed = place_structural(mg, region, PlacementStrategy(offset_tolerance=tol), seed=seed)
    assert outside_fraction(placed.mask, region) <= tol + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_unrotated_square_is_a_translate(side, seed):
    region = _box((30, 30), 3, 27, 3, 27)
    mg = _box((30, 30), 10, 10 + side, 12, 12 + side)
    placed = place_structural(mg, region, PlacementStrategy(offset_tolerance=0.0, **FIXED), seed=seed)
    t = placed.transform
    assert np.array_equal(np.roll(mg, (t.dy, t.dx), axis=(0, 1)), placed.mask)


# -- logical and combined ----------------------------------------------------------------------

def test_make_logical_identity():
    region = np.random.default_rng(1).random((8, 8)) < 0.4
    out = make_logical(region, "r")
    assert np.array_equal(out.mask, region) and out.kind == "logical"
    assert out.mask is not region
    with pytest.raises(ValueError):
        make_logical(np.zeros((3, 3), bool))


def _pm(mask, name="r"):
    return PlacedMask(mask, "structural", name)


def test_combine_examples():
    a = _box((10, 10), 0, 3, 0, 3)
    b = _box((10, 10), 5, 8, 5, 8)
    out = combine([_pm(a), _pm(b)], 0.0)
    assert np.array_equal(out.mask, a | b) and out.kind == "combined"
    with pytest.raises(InfeasiblePlacementError):
        combine([_pm(a), _pm(a.copy())], 0.0)
    with pytest.raises(ValueError):
        combine([_pm(a)], 0.0)


def test_combine_three_masks_pairwise_threshold():
    a = _box((12, 12), 0, 3, 0, 3)
    b = _box((12, 12), 6, 11, 5, 7)
    c = b.copy()
    c[6:11, 7] = True
    c[6:8, 5:7] = False  # IoU(b, c) = 6/14
    assert iou(a, b) == iou(a, c) == 0.0 and 0.1 < iou(b, c)
    pairs = set()
    for s in range(40):
        out = combine([_pm(a, "a"), _pm(b, "b"), _pm(c, "c")], 0.1, seed=s)
        assert len(out.members) == 2
        for m1, m2 in itertools.combinations(out.members, 2):
            assert iou(m1.mask, m2.mask) <= 0.1
        pairs.add(frozenset(m.source_region for m in out.members))
    assert pairs == {frozenset("ab"), frozenset("ac")}


# -- synthesis over a dataset ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_index(tmp_path_factory):
    root = make_toy_dataset(tmp_path_factory.mktemp("toy"), seed=0)
    return scan_dataset(root)


def _pool():
    disk = np.zeros((64, 64), bool)
    yy, xx = np.mgrid[:64, :64]
    disk[(yy - 30) ** 2 + (xx - 30) ** 2 <= 9] = True
    return {0: [disk], 1: [_box((64, 64), 10, 14, 10, 20)]}


PLAN_TEXT = """\
structural left anywhere 5
structural right skeleton 3 tol=0.2
logical left - 8
combined left anywhere 3
combined right+logical:left anywhere 2
"""


def _plan(tmp):
    p = tmp / "plan.txt"
    p.write_text(PLAN_TEXT)
    return read_plan(p)


def test_synthesize_audits(toy_index, tmp_path):
    plan = _plan(tmp_path)
    entries, warnings = synthesize_aligned(toy_index, None, _pool(), plan, seed=11)
    assert warnings == []
    assert [sum(e.row == r for e in entries) for r in range(5)] == [5, 3, 8, 3, 2]
    for e in entries:
        row = plan[e.row]
        regions = {n: load_mask(dict(toy_index.region_records[n])[e.image_path]) for n in row.regions}
        if e.kind == "structural":
            assert outside_fraction(e.placed.mask, regions[row.region]) <= row.strategy.offset_tolerance
        elif e.kind == "logical":
            assert np.array_equal(e.placed.mask, regions[row.region])
        else:
            for m1, m2 in itertools.combinations(e.placed.members, 2):
                assert iou(m1.mask, m2.mask) <= row.overlap_threshold
        assert e.provenance()["kind"] == e.kind
    logical_images = [e.image_path for e in entries if e.kind == "logical"]
    assert len(set(logical_images)) == 8


def test_synthesize_deterministic(toy_index, tmp_path):
    plan = _plan(tmp_path)
    a, _ = synthesize_aligned(toy_index, None, _pool(), plan, seed=3)
    b, _ = synthesize_aligned(toy_index, None, _pool(), plan, seed=3)
    c, _ = synthesize_aligned(toy_index, None, _pool(), plan, seed=4)
    assert all(np.array_equal(x.placed.mask, y.placed.mask) and x.provenance() == y.provenance() for x, y in zip(a, b))
    assert any(not np.array_equal(x.placed.mask, y.placed.mask) for x, y in zip(a, c))


def test_synthesize_errors_and_skips(toy_index, tmp_path):
    with pytest.raises(KeyError):
        synthesize_aligned(toy_index, None, _pool(), [parse_plan_line("logical nowhere - 1")])
    with pytest.raises(KeyError):
        synthesize_aligned(toy_index, None, _pool(), [parse_plan_line("structural left - 1 cluster=7")])
    huge = {0: [np.ones((64, 64), bool)]}
    entries, warnings = synthesize_aligned(toy_index, None, huge, [parse_plan_line("structural left - 1 tol=0")])
    assert entries == [] and len(warnings) == 1 and "skipped" in warnings[0]
