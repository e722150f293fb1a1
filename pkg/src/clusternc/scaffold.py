"""Static cluster scaffold over frozen class prototypes.

Clustering runs once on the frozen prototypes; the resulting class -> cluster
mapping, member sets and centroids are immutable afterwards.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingMatrix, unit_rows
from .errors import EmptyCluster, EmptyInput, InvalidClusterCount

log = logging.getLogger(__name__)

MAX_ITERS = 100


class Algorithm(str, Enum):
    KMEANS_COSINE = "KMeansCosine"
    KMEANS_EUCLIDEAN = "KMeansEuclidean"
    KMEDOIDS_COSINE = "KMedoidsCosine"


@dataclass(frozen=True)
class ClusterScaffold:
    """Frozen partition of the classes into ``M`` clusters.

    ``mapping`` is the class -> cluster function, ``clusters[m]`` the member
    set of cluster ``m`` (cluster ids are 0..M-1), ``centroids[m]`` its
    centroid. ``objective_history`` is the clustering objective per iteration.
    """

    mapping: Mapping
    centroids: np.ndarray
    algorithm: Algorithm = Algorithm.KMEANS_COSINE
    seed: int = 0
    objective_history: tuple = ()
    clusters: tuple = field(init=False)

    def __post_init__(self):
        mapping = dict(self.mapping)
        if not mapping:
            raise EmptyInput("scaffold has no classes")
        centroids = np.array(self.centroids, dtype=float)
        if centroids.ndim != 2:
            raise ValueError("centroids must be an M x d matrix")
        n_clusters = centroids.shape[0]
        members: list[list] = [[] for _ in range(n_clusters)]
        for label, m in mapping.items():
            if not (isinstance(m, (int, np.integer)) and 0 <= m < n_clusters):
                raise InvalidClusterCount(f"class {label!r} mapped to invalid cluster {m!r}")
            members[int(m)].append(label)
        for m, mem in enumerate(members):
            if not mem:
                raise EmptyCluster(f"cluster {m} has no members")
        centroids.setflags(write=False)
        object.__setattr__(self, "mapping", MappingProxyType({k: int(v) for k, v in mapping.items()}))
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "clusters", tuple(frozenset(mem) for mem in members))
        object.__setattr__(self, "objective_history", tuple(float(v) for v in self.objective_history))

    def __reduce__(self):
        # mappingproxy does not pickle; rebuild through the validating constructor
        args = (dict(self.mapping), np.array(self.centroids), self.algorithm, self.seed, self.objective_history)
        return (type(self), args)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def members(self, m: int) -> list:
        """Members of cluster ``m`` in mapping (insertion) order."""
        return [c for c, k in self.mapping.items() if k == m]

    def sizes(self) -> list[int]:
        return [len(s) for s in self.clusters]

    def restricted(self, labels: Iterable) -> "ClusterScaffold":
        """Scaffold over a subset of classes; clusters left empty are dropped."""
        keep = [c for c in self.mapping if c in set(labels)]
        used = sorted({self.mapping[c] for c in keep})
        remap = {m: i for i, m in enumerate(used)}
        return ClusterScaffold(
            {c: remap[self.mapping[c]] for c in keep},
            self.centroids[used],
            self.algorithm,
            self.seed,
        )

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm.value,
            "M": self.n_clusters,
            "seed": self.seed,
            "mapping": {str(k): v for k, v in self.mapping.items()},
            "centroids": [[float(x) for x in row] for row in self.centroids],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterScaffold":
        mapping = {}
        for k, v in obj["mapping"].items():
            try:
                k = int(k)
            except ValueError:
                pass
            mapping[k] = int(v)
        sc = cls(mapping, np.array(obj["centroids"], dtype=float), Algorithm(obj["algorithm"]), int(obj.get("seed", 0)))
        if "M" in obj and int(obj["M"]) != sc.n_clusters:
            raise InvalidClusterCount(f"M={obj['M']} but {sc.n_clusters} centroids")
        return sc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClusterScaffold":
        return cls.from_json(json.loads(Path(path).read_text()))


def single_cluster(prototypes: EmbeddingMatrix) -> ClusterScaffold:
    """The global-ETF scaffold: every class in one cluster."""
    return ClusterScaffold({c: 0 for c in prototypes.labels}, prototypes.data.mean(axis=0, keepdims=True))


def centroid(members) -> np.ndarray:
    """Plain arithmetic mean of the member rows (no normalization)."""
    arr = members.data if isinstance(members, EmbeddingMatrix) else np.asarray(members, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyCluster("centroid of an empty cluster")
    return arr.mean(axis=0)


# -- helpers -------------------------------------------------------------------

def _check(prototypes: EmbeddingMatrix, n_clusters: int) -> np.ndarray:
    if len(prototypes) == 0:
        raise EmptyInput("no prototypes")
    if not 1 <= n_clusters <= len(prototypes):
        raise InvalidClusterCount(f"M={n_clusters} for K={len(prototypes)} classes")
    return prototypes.data


def _farthest_point_init(dist: np.ndarray, n_clusters: int, rng: np.random.Generator) -> list[int]:
    """Seeded first pick, then greedily the point farthest from the chosen set."""
    chosen = [int(rng.integers(dist.shape[0]))]
    closest = dist[chosen[0]].copy()
    while len(chosen) < n_clusters:
        closest[chosen] = -np.inf
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, dist[nxt])
    return chosen


def _cosine_dist(unit: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def _sq_euclid(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def _repair_empty(assign: np.ndarray, cost: np.ndarray, n_clusters: int) -> np.ndarray:
    """Give each empty cluster the point currently farthest from its centroid."""
    assign = assign.copy()
    own = cost[np.arange(len(assign)), assign]
    for m in range(n_clusters):
        if np.any(assign == m):
            continue
        counts = np.bincount(assign, minlength=n_clusters)
        movable = counts[assign] > 1
        cand = np.where(movable, own, -np.inf)
        i = int(np.argmax(cand))
        assign[i] = m
        own[i] = -np.inf
    return assign


def _build(prototypes, assign, centroids, algorithm, seed, history) -> ClusterScaffold:
    mapping = {lab: int(a) for lab, a in zip(prototypes.labels, assign)}
    return ClusterScaffold(mapping, centroids, algorithm, seed, tuple(history))


def _lloyd(x, n_clusters, seed, *, cosine: bool):
    """Lloyd iterations; returns (assign, history, centers used for assignment)."""
    rng = np.random.default_rng(seed)
    if cosine:
        x, _ = unit_rows(x)
        dist = _cosine_dist(x)
    else:
        dist = _sq_euclid(x, x)
    centers = x[_farthest_point_init(dist, n_clusters, rng)].copy()
    assign = None
    history: list[float] = []
    for _ in range(MAX_ITERS):
        cost = (1.0 - x @ centers.T) if cosine else _sq_euclid(x, centers)
        new = np.argmin(cost, axis=1)
        new = _repair_empty(new, cost, n_clusters)
        for m in range(n_clusters):
            mean = x[new == m].mean(axis=0)
            if cosine:
                nrm = np.linalg.norm(mean)
                if nrm <= 1e-12:
                    warnings.warn(f"cluster {m} has a zero mean direction; keeping previous centroid")
                    continue
                mean = mean / nrm
            centers[m] = mean
        cost = (1.0 - x @ centers.T) if cosine else _sq_euclid(x, centers)
        history.append(float(cost[np.arange(len(new)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    return assign, history


def kmeans_cosine(prototypes: EmbeddingMatrix, n_clusters: int, seed: int = 0) -> ClusterScaffold:
    """Spherical K-means (objective: sum of 1 - cos to the cluster direction).

    Assignment uses normalized mean directions; the reported centroids are
    the plain means of the raw member rows.
    """
    x = _check(prototypes, n_clusters)
    assign, history = _lloyd(x, n_clusters, seed, cosine=True)
    cents = np.stack([centroid(x[assign == m]) for m in range(n_clusters)])
    return _build(prototypes, assign, cents, Algorithm.KMEANS_COSINE, seed, history)


def kmeans_euclidean(prototypes: EmbeddingMatrix, n_clusters: int, seed: int = 0) -> ClusterScaffold:
    x = _check(prototypes, n_clusters)
    assign, history = _lloyd(x, n_clusters, seed, cosine=False)
    cents = np.stack([centroid(x[assign == m]) for m in range(n_clusters)])
    return _build(prototypes, assign, cents, Algorithm.KMEANS_EUCLIDEAN, seed, history)


def kmedoids_cosine(prototypes: EmbeddingMatrix, n_clusters: int, seed: int = 0) -> ClusterScaffold:
    """PAM with cosine distance: seeded farthest-point build, then best-swap
    iterations until no swap lowers the total cost."""
    x = _check(prototypes, n_clusters)
    unit, _ = unit_rows(x)
    dist = _cosine_dist(unit)
    n = len(x)
    medoids = _farthest_point_init(dist, n_clusters, np.random.default_rng(seed))

    def total(meds):
        return float(dist[:, meds].min(axis=1).sum())

    cost = total(medoids)
    history = [cost]
    for _ in range(MAX_ITERS * n):
        best = (cost, None, None)
        for pos in range(n_clusters):
            for cand in range(n):
                if cand in medoids:
                    continue
                trial = medoids.copy()
                trial[pos] = cand
                c = total(trial)
                if c < best[0] - 1e-12:
                    best = (c, pos, cand)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        cost = best[0]
        history.append(cost)
    assign = np.argmin(dist[:, medoids], axis=1)
    return _build(prototypes, assign, x[medoids].copy(), Algorithm.KMEDOIDS_COSINE, seed, history)


_ALGORITHMS = {
    Algorithm.KMEANS_COSINE: kmeans_cosine,
    Algorithm.KMEANS_EUCLIDEAN: kmeans_euclidean,
    Algorithm.KMEDOIDS_COSINE: kmedoids_cosine,
}


def cluster(prototypes: EmbeddingMatrix, n_clusters: int, algorithm=Algorithm.KMEANS_COSINE, seed: int = 0) -> ClusterScaffold:
    return _ALGORITHMS[Algorithm(algorithm)](prototypes, n_clusters, seed)


def cosine_silhouette(prototypes: EmbeddingMatrix, scaffold: ClusterScaffold) -> float:
    """Mean silhouette with cosine distance; singleton clusters score 0."""
    if scaffold.n_clusters < 2:
        raise InvalidClusterCount("silhouette needs at least two clusters")
    unit, _ = unit_rows(prototypes.data)
    dist = _cosine_dist(unit)
    labels = np.array([scaffold.mapping[c] for c in prototypes.labels])
    sizes = np.bincount(labels, minlength=scaffold.n_clusters)
    if np.any(sizes == 0):
        raise InvalidClusterCount("every cluster must be non-empty")
    scores = np.zeros(len(labels))
    for i, own in enumerate(labels):
        if sizes[own] == 1:
            continue
        sums = np.bincount(labels, weights=dist[i], minlength=scaffold.n_clusters)
        a = sums[own] / (sizes[own] - 1)
        other = np.delete(sums / sizes, own)
        b = other.min()
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def select_scaffold(
    prototypes: EmbeddingMatrix,
    candidate_ms: Sequence[int],
    algorithm=Algorithm.KMEANS_COSINE,
    seeds: Sequence[int] = (0,),
) -> ClusterScaffold:
    """Pick the (M, seed) with the highest cosine silhouette.

    Ties go to the smaller M, then the smaller seed. A lone candidate is
    returned without scoring.
    """
    cands = sorted((int(m), int(s)) for m in candidate_ms for s in seeds)
    if not cands:
        raise InvalidClusterCount("no candidate cluster counts")
    if len(cands) == 1:
        return cluster(prototypes, cands[0][0], algorithm, cands[0][1])
    best, best_score = None, -np.inf
    for m, s in cands:
        sc = cluster(prototypes, m, algorithm, s)
        score = cosine_silhouette(prototypes, sc) if 2 <= m < len(prototypes) else -np.inf
        log.debug("M=%d seed=%d silhouette=%.6f", m, s, score)
        if best is None or score > best_score + 1e-12:
            best, best_score = sc, score
    return best


def partition_agreement(a: Mapping, b: Mapping) -> float:
    """Adjusted Rand index between two class -> cluster mappings."""
    labels = list(a)
    x = np.array([a[c] for c in labels])
    y = np.array([b[c] for c in labels])
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(table, (xi, yi), 1)

    def comb2(v):
        return (v * (v - 1) / 2.0).sum()

    n = len(labels)
    index = comb2(table)
    ra, rb = comb2(table.sum(1)), comb2(table.sum(0))
    expected = ra * rb / (n * (n - 1) / 2.0) if n > 1 else 0.0
    max_index = 0.5 * (ra + rb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
