import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score, calinski_harabasz_score, davies_bouldin_score

from gaa.clustering import (
    Assignment,
    ClusterConfig,
    _kmeanspp,
    _lloyd,
    calinski_harabasz,
    davies_bouldin,
    dense_threshold,
    kmeans,
    multi_round_cluster,
    select_k,
    sweep_k,
)

SQUARE4 = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
SQUARE4_LABELS = np.array([0, 0, 1, 1])


def brute_ch(x, labels):
    n = len(x)
    ks = sorted(set(labels))
    mean = [sum(p[d] for p in x) / n for d in range(x.shape[1])]
    tr_b = tr_w = 0.0
    for c in ks:
        pts = [x[i] for i in range(n) if labels[i] == c]
        cen = [sum(p[d] for p in pts) / len(pts) for d in range(x.shape[1])]
        tr_b += len(pts) * sum((cen[d] - mean[d]) ** 2 for d in range(x.shape[1]))
        tr_w += sum(sum((p[d] - cen[d]) ** 2 for d in range(x.shape[1])) for p in pts)
    k = len(ks)
    return math.inf if tr_w == 0 else tr_b * (n - k) / (tr_w * (k - 1))


def brute_db(x, labels):
    ks = sorted(set(labels))
    cents, sig = [], []
    for c in ks:
        pts = [x[i] for i in range(len(x)) if labels[i] == c]
        cen = np.array([sum(p[d] for p in pts) / len(pts) for d in range(x.shape[1])])
        cents.append(cen)
        sig.append(sum(math.dist(p, cen) for p in pts) / len(pts))
    total = 0.0
    for i in range(len(ks)):
        total += max((sig[i] + sig[j]) / math.dist(cents[i], cents[j]) for j in range(len(ks)) if j != i)
    return total / len(ks)


def blobs(seed, sigma=0.1, n=30, centers=((0, 0), (10, 0), (5, 10))):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(c, sigma, size=(n, 2)) for c in centers])
    return x, np.repeat(np.arange(len(centers)), n)


# -- kmeans -----------------------------------------------------------------------

def test_kmeans_n_equals_k():
    x = np.array([[0.0, 1.0], [3.0, 3.0], [-2.0, 5.0]])
    a = kmeans(x, 3, seed=1)
    assert a.inertia == 0.0
    assert sorted(map(tuple, a.centroids)) == sorted(map(tuple, x))


def test_kmeans_identical_points_k1():
    x = np.full((5, 3), 2.5)
    a = kmeans(x, 1)
    assert a.inertia == 0.0 and np.array_equal(a.centroids[0], x[0])


def test_kmeans_square_matches_exhaustive_partition():
    best = math.inf
    for bits in itertools.product((0, 1), repeat=4):
        if len(set(bits)) < 2:
            continue
        lab = np.array(bits)
        inertia = sum(np.sum((SQUARE4[lab == c] - SQUARE4[lab == c].mean(axis=0)) ** 2) for c in (0, 1))
        best = min(best, inertia)
    a = kmeans(SQUARE4, 2, seed=0)
    assert best == 4.0 and a.inertia == pytest.approx(best, abs=1e-12)
    assert adjusted_rand_score(SQUARE4_LABELS, a.labels) == 1.0


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(SQUARE4, 5)
    with pytest.raises(ValueError):
        kmeans(np.array([[np.nan, 0.0]]), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 20), st.integers(1, 4))
def test_kmeans_fixed_point_and_monotone(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    init = _kmeanspp(x, k, np.random.default_rng(seed))
    prev = math.inf
    for it in range(1, 8):
        _, _, inertia = _lloyd(x, init.copy(), it)
        assert inertia <= prev + 1e-9
        prev = inertia
    a = kmeans(x, k, seed=seed, restarts=2)
    d2 = ((x[:, None, :] - a.centroids[None]) ** 2).sum(-1)
    own = d2[np.arange(n), a.labels]
    assert np.all(own <= d2.min(axis=1) + 1e-12)
    for c in range(k):
        assert np.allclose(a.centroids[c], x[a.labels == c].mean(axis=0))


# -- indices -------------------------------------------------------------------------

def test_index_worked_examples():
    assert calinski_harabasz(SQUARE4, SQUARE4_LABELS) == 50.0
    assert davies_bouldin(SQUARE4, SQUARE4_LABELS) == 0.2
    doubled = np.concatenate([SQUARE4, SQUARE4])
    assert calinski_harabasz(doubled, np.tile(SQUARE4_LABELS, 2)) == 150.0


def test_index_degenerate_cases():
    collapsed = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
    assert calinski_harabasz(collapsed, [0, 0, 1, 1]) == math.inf
    assert davies_bouldin(np.array([[0.0], [4.0]]), [0, 1]) == 0.0
    close = np.array([[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]])
    assert davies_bouldin(close, [0, 0, 1, 1]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        davies_bouldin(np.array([[0.0], [0.0]]), [0, 1])
    with pytest.raises(ValueError):
        calinski_harabasz(SQUARE4, [0, 0, 0, 0])


def test_indices_accept_assignment_objects():
    a = kmeans(SQUARE4, 2)
    assert calinski_harabasz(SQUARE4, a) == 50.0


def test_indices_match_brute_force_and_sklearn():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(3, 13))
        d = int(rng.integers(1, 4))
        k = int(rng.integers(2, n))
        x = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        rng.shuffle(labels)
        assert calinski_harabasz(x, labels) == pytest.approx(brute_ch(x, labels), rel=1e-9)
        assert davies_bouldin(x, labels) == pytest.approx(brute_db(x, labels), rel=1e-9)
        # sklearn expands |x - c|^2 = x.x - 2x.c + c.c, which costs a few digits
        assert calinski_harabasz(x, labels) == pytest.approx(calinski_harabasz_score(x, labels), rel=1e-6)
        assert davies_bouldin(x, labels) == pytest.approx(davies_bouldin_score(x, labels), rel=1e-6)


# -- k selection -------------------------------------------------------------------

def test_select_k_recovers_blobs():
    x, truth = blobs(0)
    k, a = select_k(x, ClusterConfig(k_min=2, k_max=6, seed=0))
    assert k == 3 and adjusted_rand_score(truth, a.labels) == 1.0
    sweep = sweep_k(x, ClusterConfig(k_min=2, k_max=6, seed=0))
    assert sweep.ks[int(np.argmax(sweep.ch))] == 3
    assert sweep.ks[int(np.argmin(sweep.db))] == 3


def test_select_k_db_only():
    x, _ = blobs(1)
    k, _ = select_k(x, ClusterConfig(k_min=2, k_max=6, w1=0.0, w2=1.0))
    assert k == 3


def test_select_k_single_candidate():
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    k, a = select_k(x, ClusterConfig(k_min=2, k_max=2))
    assert k == 2 and sorted(a.labels) == [0, 1]


def test_eq2_literal_prefers_low_ch():
    x, _ = blobs(2)
    cfg = ClusterConfig(k_min=2, k_max=6, eq2_literal=True)
    sweep = sweep_k(x, cfg)
    k, _ = select_k(x, cfg)
    assert k == sweep.ks[int(np.argmin(sweep.ch + sweep.db))]
    assert k != 3


def test_parallel_sweep_matches_serial():
    x, _ = blobs(3)
    a = sweep_k(x, ClusterConfig(k_max=6, jobs=1))
    b = sweep_k(x, ClusterConfig(k_max=6, jobs=4))
    assert a.ks == b.ks and np.array_equal(a.objective, b.objective)
    for k in a.ks:
        assert np.array_equal(a.assignments[k].labels, b.assignments[k].labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2 * math.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_select_k_rigid_motion_invariant(seed, theta, tx, ty):
    x, _ = blobs(seed)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    y = x @ rot.T + np.array([tx, ty])
    cfg = ClusterConfig(k_min=2, k_max=6, restarts=3)
    k1, a1 = select_k(x, cfg)
    k2, a2 = select_k(y, cfg)
    assert k1 == k2 and adjusted_rand_score(a1.labels, a2.labels) == 1.0


# -- dense threshold and multi-round ---------------------------------------------------

def test_dense_threshold_values():
    assert dense_threshold(100) == pytest.approx(37.00, abs=0.01)
    assert dense_threshold(10) == pytest.approx(25.0, abs=1e-12)
    assert dense_threshold(120) == pytest.approx(120 / (math.log(12) + 0.4))
    assert dense_threshold(6) is None
    assert dense_threshold(100, log_base=10) == pytest.approx(100 / 1.4)


def planted_supercluster(seed=0):
    """30 loose points far away plus a 120-point cluster made of two tight halves."""
    rng = np.random.default_rng(seed)
    a = rng.normal((0, 0), 1.0, size=(30, 2))
    b1 = rng.normal((10, 0), 0.1, size=(60, 2))
    b2 = rng.normal((10, 1), 0.1, size=(60, 2))
    return np.concatenate([a, b1, b2]), np.repeat([0, 1, 2], [30, 60, 60])


def test_planted_supercluster_gets_one_extra_round():
    x, truth = planted_supercluster()
    tree = multi_round_cluster(x, ClusterConfig(seed=0))
    root = tree.rounds[0]
    assert root.assignment.k == 2
    sizes = sorted(np.bincount(root.assignment.labels))
    assert sizes == [30, 120]
    assert len(tree.rounds) == 2 and tree.rounds[1].depth == 2
    assert len(tree.rounds[1].members) == 120
    assert tree.n_leaves == 3
    assert adjusted_rand_score(truth, tree.leaf_labels) == 1.0


def test_no_dense_cluster_means_one_round():
    x, _ = blobs(0, n=10)  # 30 points: threshold(30) ~ 20.9 > 10
    tree = multi_round_cluster(x, ClusterConfig())
    assert len(tree.rounds) == 1 and tree.n_leaves == 3


def test_max_rounds_one_equals_select_k():
    x, _ = planted_supercluster()
    cfg = ClusterConfig(max_rounds=1, seed=5)
    tree = multi_round_cluster(x, cfg)
    _, a = select_k(x, ClusterConfig(max_rounds=1, seed=5, k_max=min(10, len(x) // 2)), stream=(0,))
    assert len(tree.rounds) == 1
    assert adjusted_rand_score(tree.leaf_labels, a.labels) == 1.0


def test_tiny_input_gives_trivial_tree():
    tree = multi_round_cluster(np.array([[0.0], [1.0], [2.0]]), ClusterConfig())
    assert tree.n_leaves == 1 and tree.leaf_labels.tolist() == [0, 0, 0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_leaves_refine_round_one_and_are_deterministic(seed):
    x, _ = planted_supercluster(seed)
    cfg = ClusterConfig(seed=seed, restarts=3)
    tree = multi_round_cluster(x, cfg)
    first = tree.rounds[0].assignment.labels
    for leaf in range(tree.n_leaves):
        assert len(set(first[tree.leaf_labels == leaf])) == 1
    again = multi_round_cluster(x, cfg)
    assert tree.to_dict() == again.to_dict()


def test_tree_dict_lists_memberships():
    x, _ = planted_supercluster()
    d = multi_round_cluster(x, ClusterConfig()).to_dict()
    assert d["n_leaves"] == 3 and len(d["rounds"]) == 2
    assert sorted(sum(d["rounds"][0]["clusters"], [])) == list(range(150))


def test_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(k_min=1)
    with pytest.raises(ValueError):
        ClusterConfig(k_min=4, k_max=3)
    assert isinstance(kmeans(SQUARE4, 2), Assignment)
