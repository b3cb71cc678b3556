"""Multi-round KMeans refinement of coarse anomaly labels.

The number of clusters at each round is chosen by combining the
Calinski-Harabasz and Davies-Bouldin indices; clusters that are dense relative
to the population they were carved from are split again.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterConfig:
    k_min: int = 2
    k_max: int = 10
    w1: float = 1.0
    w2: float = 1.0
    max_rounds: int = 2
    restarts: int = 10
    seed: int = 0
    log_base: Optional[float] = None  # None = natural log
    eq2_literal: bool = False
    max_iter: int = 300
    jobs: int = 1

    def __post_init__(self):
        if self.k_min < 2:
            raise ValueError("k_min must be >= 2")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class Assignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass
class ClusterRound:
    node: int
    parent: Optional[int]
    depth: int
    members: np.ndarray  # sample indices in the split population
    assignment: Assignment
    dense_threshold: Optional[float]  # threshold the children were judged against
    children: list = field(default_factory=list)


@dataclass
class ClusterTree:
    rounds: list
    leaf_labels: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_labels.max()) + 1 if len(self.leaf_labels) else 0

    def to_dict(self) -> dict:
        return {
            "n_samples": int(len(self.leaf_labels)),
            "n_leaves": self.n_leaves,
            "leaf_labels": [int(v) for v in self.leaf_labels],
            "rounds": [
                {
                    "node": r.node,
                    "parent": r.parent,
                    "depth": r.depth,
                    "k": r.assignment.k,
                    "inertia": r.assignment.inertia,
                    "dense_threshold": r.dense_threshold,
                    "children": list(r.children),
                    "clusters": [
                        [int(m) for m in r.members[r.assignment.labels == c]]
                        for c in range(r.assignment.k)
                    ],
                }
                for r in self.rounds
            ],
        }


def _check_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2D")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature matrix has non-finite entries")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            cdf = np.cumsum(closest)
            pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(n))
        idx.append(pick)
        closest = np.minimum(closest, _sq_dists(x, x[[pick]]).ravel())
    return x[idx].copy()


def _centroids(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    return sums / counts[:, None]


def _repair_empty(x: np.ndarray, labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    own = d2[np.arange(len(x)), labels]
    for c in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[c]:
            continue
        movable = counts[labels] > 1
        far = int(np.argmax(np.where(movable, own, -1.0)))
        labels[far] = c
        own[far] = 0.0
    return labels


def _lloyd(x, centroids, max_iter):
    k = len(centroids)
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new = np.argmin(d2, axis=1)
        if np.bincount(new, minlength=k).min() == 0:
            new = _repair_empty(x, new, d2, k)
        centroids = _centroids(x, new, k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    return labels, centroids, inertia


def kmeans(x, k: int, seed=0, restarts: int = 10, max_iter: int = 300) -> Assignment:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` by inertia.

    ``seed`` may be an int or a sequence of ints; it is fed to
    ``numpy.random.SeedSequence`` so that callers can derive independent
    streams.
    """
    x = _check_matrix(x)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    best = None
    for _ in range(restarts):
        labels, centroids, inertia = _lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = Assignment(labels, centroids, inertia)
    return best


def _scatter_parts(x, labels):
    labels = np.asarray(labels)
    ks = np.unique(labels)
    k = len(ks)
    remap = np.searchsorted(ks, labels)
    centroids = _centroids(x, remap, k)
    return remap, centroids, k


def _labels_of(a):
    return a.labels if isinstance(a, Assignment) else np.asarray(a)


def calinski_harabasz(x, assignment) -> float:
    """Tr(B_k)(N - k) / (Tr(W_k)(k - 1)); ``inf`` when Tr(W_k) = 0."""
    x = _check_matrix(x)
    labels, centroids, k = _scatter_parts(x, _labels_of(assignment))
    n = len(x)
    if k < 2:
        raise ValueError("Calinski-Harabasz needs k >= 2")
    counts = np.bincount(labels, minlength=k)
    mean = x.mean(axis=0)
    tr_b = float(np.sum(counts * np.sum((centroids - mean) ** 2, axis=1)))
    tr_w = float(np.sum((x - centroids[labels]) ** 2))
    if tr_w == 0:
        return math.inf
    return tr_b * (n - k) / (tr_w * (k - 1))


def davies_bouldin(x, assignment) -> float:
    """(1/k) sum_i max_{j != i} (s_i + s_j) / d_ij with mean member distances s_i."""
    x = _check_matrix(x)
    labels, centroids, k = _scatter_parts(x, _labels_of(assignment))
    if k < 2:
        raise ValueError("Davies-Bouldin needs k >= 2")
    dist = np.sqrt(np.sum((x - centroids[labels]) ** 2, axis=1))
    sigma = np.bincount(labels, weights=dist, minlength=k) / np.bincount(labels, minlength=k)
    d = np.sqrt(_sq_dists(centroids, centroids))
    off = ~np.eye(k, dtype=bool)
    if np.any(d[off] == 0):
        raise ValueError("Davies-Bouldin undefined: coincident centroids")
    ratio = np.where(off, (sigma[:, None] + sigma[None, :]) / np.where(off, d, 1.0), -np.inf)
    return float(np.mean(ratio.max(axis=1)))


def _minmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    finite = np.isfinite(v)
    out[~finite] = 1.0
    if finite.any():
        lo, hi = v[finite].min(), v[finite].max()
        if hi > lo:
            out[finite] = (v[finite] - lo) / (hi - lo)
    return out


@dataclass
class Sweep:
    ks: list
    ch: np.ndarray
    db: np.ndarray
    objective: np.ndarray
    assignments: dict


def sweep_k(x, cfg: ClusterConfig, stream=()) -> Sweep:
    """Evaluate every candidate k; ``stream`` distinguishes independent callers."""
    x = _check_matrix(x)
    n = len(x)
    ks = list(range(cfg.k_min, min(cfg.k_max, n) + 1))
    if not ks:
        raise ValueError(f"empty k sweep: k_min={cfg.k_min}, k_max={cfg.k_max}, N={n}")

    def run(k):
        a = kmeans(x, k, seed=(cfg.seed, *stream, k), restarts=cfg.restarts, max_iter=cfg.max_iter)
        try:
            db = davies_bouldin(x, a)
        except ValueError:
            return k, a, None, None
        return k, a, calinski_harabasz(x, a), db

    if cfg.jobs > 1 and len(ks) > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(run, ks))
    else:
        results = [run(k) for k in ks]

    valid = [r for r in results if r[2] is not None]
    for k, _, ch, _ in results:
        if ch is None:
            logger.info("k=%d skipped: coincident centroids", k)
    if not valid:
        raise ValueError("no candidate k produced distinct centroids")
    ks = [r[0] for r in valid]
    ch = np.array([r[2] for r in valid])
    db = np.array([r[3] for r in valid])
    if cfg.eq2_literal:
        objective = cfg.w1 * ch + cfg.w2 * db
    else:
        objective = -cfg.w1 * _minmax(ch) + cfg.w2 * _minmax(db)
    return Sweep(ks, ch, db, objective, {r[0]: r[1] for r in valid})


def select_k(x, cfg: ClusterConfig, stream=()) -> tuple[int, Assignment]:
    """Pick k in [k_min, min(k_max, N)] minimizing the combined index objective.

    The default objective is ``-w1 * CH~ + w2 * DB~`` with both indices
    min-max normalized over the sweep; ``cfg.eq2_literal`` minimizes the raw
    ``w1 * CH + w2 * DB`` instead. Ties go to the smaller k.
    """
    sweep = sweep_k(x, cfg, stream)
    best = int(np.argmin(sweep.objective))
    k = sweep.ks[best]
    return k, sweep.assignments[k]


def dense_threshold(n: int, log_base: Optional[float] = None) -> Optional[float]:
    """Cluster-size threshold ``n / (log(0.1 n) + 0.4)``.

    Returns ``None`` where the denominator is not positive; callers treat that
    as "no cluster is dense".
    """
    if n <= 0:
        return None
    lg = math.log(0.1 * n) if log_base is None else math.log(0.1 * n, log_base)
    denom = lg + 0.4
    if denom <= 0:
        return None
    return n / denom


def multi_round_cluster(x, cfg: ClusterConfig) -> ClusterTree:
    """Recursively split dense clusters, breadth first, up to ``cfg.max_rounds`` levels.

    A cluster produced by splitting a population of size P is dense when its
    size exceeds ``dense_threshold(P)``; it is split again if it also has at
    least ``2 * k_min`` members and the depth cap allows.
    """
    x = _check_matrix(x)
    n = len(x)
    all_idx = np.arange(n)
    if n < 2 * cfg.k_min:
        trivial = kmeans(x, 1, seed=(cfg.seed, 0), restarts=1, max_iter=cfg.max_iter)
        root = ClusterRound(0, None, 1, all_idx, trivial, None, [1])
        return ClusterTree([root], np.zeros(n, dtype=np.int64))

    rounds = []
    next_node = 1
    # (node id, parent node id, depth, member indices)
    frontier = [(0, None, 1, all_idx)]
    leaves = []
    while frontier:
        upcoming = []
        for node, parent, depth, members in frontier:
            pop = len(members)
            sub_cfg = replace(cfg, k_max=max(cfg.k_min, min(cfg.k_max, pop // 2)))
            _, assignment = select_k(x[members], sub_cfg, stream=(node,))
            threshold = dense_threshold(pop, cfg.log_base)
            rnd = ClusterRound(node, parent, depth, members, assignment, threshold)
            rounds.append(rnd)
            for c in range(assignment.k):
                child = members[assignment.labels == c]
                rnd.children.append(next_node)
                dense = threshold is not None and len(child) > threshold
                if dense and len(child) >= 2 * cfg.k_min and depth < cfg.max_rounds:
                    upcoming.append((next_node, node, depth + 1, child))
                else:
                    leaves.append(child)
                next_node += 1
        frontier = upcoming

    leaves.sort(key=lambda m: int(m.min()))
    leaf_labels = np.empty(n, dtype=np.int64)
    for i, m in enumerate(leaves):
        leaf_labels[m] = i
    return ClusterTree(rounds, leaf_labels)
