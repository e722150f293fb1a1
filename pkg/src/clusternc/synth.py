"""Long-tailed synthetic classification tasks with planted cluster structure."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .embedding import EmbeddingMatrix, read_embedding_csv, write_embedding_csv
from .errors import InfeasibleGeometry, InvalidImbalance

N_MAX = 16
TEST_PER_CLASS = 32


def sample_counts(n_classes: int, tau: float, n_max: int = N_MAX) -> list[int]:
    """Exponentially decaying per-class counts, largest first.

    n_k = max(1, round(n_max * tau ** (k / (K - 1)))) for k = 0..K-1, so the
    first class has ``n_max`` samples and the last about ``tau * n_max``.
    """
    if not 0 < tau <= 1:
        raise InvalidImbalance(f"tau must lie in (0, 1], got {tau}")
    if n_max < 1:
        raise InvalidImbalance(f"n_max must be >= 1, got {n_max}")
    if n_classes < 2:
        raise InvalidImbalance(f"need at least two classes, got {n_classes}")
    k = np.arange(n_classes)
    # round half up; np.round would send 2.5 to 2
    counts = np.floor(n_max * tau ** (k / (n_classes - 1)) + 0.5).astype(int)
    return [max(1, int(c)) for c in counts]


@dataclass(frozen=True)
class SyntheticTask:
    directions: EmbeddingMatrix
    frozen_prototypes: EmbeddingMatrix
    train_features: Mapping
    test_features: Mapping
    counts: Mapping
    tau: float
    n_max: int
    base_classes: tuple
    new_classes: tuple
    planted_clusters: Mapping
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def classes(self) -> tuple:
        return self.directions.labels

    @property
    def dim(self) -> int:
        return self.directions.dim

    def train_pool(self) -> tuple[np.ndarray, list]:
        """All training samples stacked, with labels, in class order."""
        feats, labels = [], []
        for c in self.base_classes:
            f = self.train_features[c]
            feats.append(f)
            labels.extend([c] * len(f))
        return np.vstack(feats), labels

    def tail_classes(self) -> list:
        """Base classes whose count is at most the median base count."""
        med = float(np.median([self.counts[c] for c in self.base_classes]))
        return [c for c in self.base_classes if self.counts[c] <= med]

    def head_classes(self) -> list:
        tail = set(self.tail_classes())
        return [c for c in self.base_classes if c not in tail]

    # -- serialization ---------------------------------------------------------

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_embedding_csv(out / "frozen_prototypes.csv", self.frozen_prototypes)
        write_embedding_csv(out / "directions.csv", self.directions)
        for name, feats in (("train_features.csv", self.train_features), ("test_features.csv", self.test_features)):
            labels = [c for c in feats for _ in range(len(feats[c]))]
            write_embedding_csv(out / name, EmbeddingMatrix(np.vstack([feats[c] for c in feats]), tuple(labels)))
        meta = {
            "counts": {str(c): int(n) for c, n in self.counts.items()},
            "tau": self.tau,
            "n_max": self.n_max,
            "base_classes": list(self.base_classes),
            "new_classes": list(self.new_classes),
            "planted_clusters": {str(c): int(m) for c, m in self.planted_clusters.items()},
            "seed": self.seed,
            "params": self.params,
        }
        (out / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "SyntheticTask":
        src = Path(directory)
        meta = json.loads((src / "task.json").read_text())

        def grouped(m: EmbeddingMatrix) -> dict:
            out: dict = {}
            for lab, row in zip(m.labels, m.data):
                out.setdefault(lab, []).append(row)
            return {c: np.array(v) for c, v in out.items()}

        return cls(
            directions=read_embedding_csv(src / "directions.csv"),
            frozen_prototypes=read_embedding_csv(src / "frozen_prototypes.csv"),
            train_features=grouped(read_embedding_csv(src / "train_features.csv")),
            test_features=grouped(read_embedding_csv(src / "test_features.csv")),
            counts={int(c): n for c, n in meta["counts"].items()},
            tau=meta["tau"],
            n_max=meta["n_max"],
            base_classes=tuple(meta["base_classes"]),
            new_classes=tuple(meta["new_classes"]),
            planted_clusters={int(c): m for c, m in meta["planted_clusters"].items()},
            seed=meta["seed"],
            params=meta["params"],
        )


def base_new_split(planted_clusters, seed: int = 0) -> tuple[tuple, tuple]:
    """Split classes into base/new halves, stratified by planted cluster.

    Each cluster sends half its classes to each side; leftover classes from
    odd-sized clusters alternate, starting with base, so base gets the extra
    class when K is odd.
    """
    if isinstance(planted_clusters, SyntheticTask):
        planted_clusters = planted_clusters.planted_clusters
    rng = np.random.default_rng(seed)
    by_cluster: dict = {}
    for c, m in planted_clusters.items():
        by_cluster.setdefault(m, []).append(c)
    base, new, leftover = [], [], []
    for m in sorted(by_cluster):
        members = sorted(by_cluster[m])
        members = [members[i] for i in rng.permutation(len(members))]
        half = len(members) // 2
        base += members[:half]
        new += members[half : 2 * half]
        leftover += members[2 * half :]
    for i, c in enumerate(leftover):
        (base if i % 2 == 0 else new).append(c)
    return tuple(sorted(base)), tuple(sorted(new))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _noisy(direction: np.ndarray, sigma: float, n: int, rng) -> np.ndarray:
    base = np.repeat(direction[None, :], n, axis=0)
    if sigma == 0:
        return _unit(base)
    return _unit(base + sigma * rng.standard_normal(base.shape))


def _simplex(k: int) -> np.ndarray:
    """k unit vectors in R^(k-1) with pairwise cosine -1/(k-1)."""
    centered = np.eye(k) - 1.0 / k
    basis = np.linalg.svd(centered)[2][: k - 1]
    return _unit(centered @ basis.T)


def _tilts(m_planted: int, per_cluster: int, complement: np.ndarray, simplex: bool, rng) -> np.ndarray:
    """Unit tilt directions orthogonal to every cluster center."""
    free = complement.shape[0]
    if not simplex:
        return _unit(rng.standard_normal((m_planted * per_cluster, free)) @ complement)
    if per_cluster - 1 > free:
        raise InfeasibleGeometry(f"a {per_cluster}-class simplex needs {per_cluster - 1} free dimensions, have {free}")
    shape = _simplex(per_cluster)
    out = []
    disjoint = m_planted * (per_cluster - 1) <= free
    for m in range(m_planted):
        if disjoint:
            sub = complement[m * (per_cluster - 1) : (m + 1) * (per_cluster - 1)]
        else:
            q, _ = np.linalg.qr(rng.standard_normal((free, per_cluster - 1)))
            sub = q.T @ complement
        rot, _ = np.linalg.qr(rng.standard_normal((per_cluster - 1, per_cluster - 1)))
        out.append(shape @ rot @ sub)
    return np.vstack(out)


def generate_task(
    m_planted: int = 4,
    classes_per_cluster: int = 8,
    d: int = 32,
    intra_cluster_angle: float = 20.0,
    feature_noise: float = 0.1,
    tau: float = 0.06,
    n_max: int = N_MAX,
    seed: int = 0,
    prototype_noise: float = 0.05,
    test_per_class: int = TEST_PER_CLASS,
    feature_angle: float | None = None,
    simplex_tilts: bool = False,
) -> SyntheticTask:
    """Sample a task with ``m_planted`` orthonormal cluster centers.

    Frozen prototypes sit ``intra_cluster_angle`` degrees from their cluster
    center, tilted along directions orthogonal to every center (random, or a
    per-cluster simplex when ``simplex_tilts``). Class directions, around
    which the image features are drawn, use the same tilts at
    ``feature_angle`` degrees (default: the prototype angle), so frozen
    prototypes can be more tightly clustered than the features they name.
    Noise is isotropic Gaussian with the given per-coordinate std, and every
    vector is renormalized.
    """
    if d < 3 or m_planted < 2 or classes_per_cluster < 2:
        raise InfeasibleGeometry("need d >= 3, at least 2 clusters and 2 classes per cluster")
    if m_planted >= d:
        raise InfeasibleGeometry(f"{m_planted} orthogonal centers plus a tilt need d > {m_planted}, got d={d}")
    if not 0 < intra_cluster_angle < 90:
        raise InfeasibleGeometry(f"intra-cluster angle must be in (0, 90) degrees, got {intra_cluster_angle}")
    if feature_angle is not None and not 0 < feature_angle <= 90:
        raise InfeasibleGeometry(f"feature angle must be in (0, 90] degrees, got {feature_angle}")
    ss = np.random.SeedSequence(seed)
    geo_rng, proto_rng, train_rng, test_rng, split_rng = (np.random.default_rng(s) for s in ss.spawn(5))

    q, _ = np.linalg.qr(geo_rng.standard_normal((d, d)))
    centers = q[:, :m_planted].T
    n_classes = m_planted * classes_per_cluster
    planted = {c: c // classes_per_cluster for c in range(n_classes)}
    own_center = centers[[planted[c] for c in range(n_classes)]]
    tilts = _tilts(m_planted, classes_per_cluster, q[:, m_planted:].T, simplex_tilts, geo_rng)

    theta = np.deg2rad(intra_cluster_angle)
    beta = theta if feature_angle is None else np.deg2rad(feature_angle)
    dirs = _unit(np.cos(beta) * own_center + np.sin(beta) * tilts)
    frozen = np.cos(theta) * own_center + np.sin(theta) * tilts

    for name, vecs in (("class directions", dirs), ("prototypes", _unit(frozen))):
        cos = vecs @ vecs.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() > 1.0 - 1e-9:
            raise InfeasibleGeometry(f"two {name} coincide; increase d or the angle")

    if prototype_noise > 0:
        frozen = frozen + prototype_noise * proto_rng.standard_normal(frozen.shape)
    frozen = _unit(frozen)

    labels = tuple(range(n_classes))
    base, new = base_new_split(planted, int(split_rng.integers(2**63)))
    order = [base[i] for i in train_rng.permutation(len(base))]
    counts = dict(zip(order, sample_counts(len(base), tau, n_max)))
    counts = {c: counts[c] for c in base}
    train = {c: _noisy(dirs[c], feature_noise, counts[c], train_rng) for c in base}
    test = {c: _noisy(dirs[c], feature_noise, test_per_class, test_rng) for c in labels}

    params = {
        "m_planted": m_planted,
        "classes_per_cluster": classes_per_cluster,
        "d": d,
        "intra_cluster_angle": intra_cluster_angle,
        "feature_noise": feature_noise,
        "tau": tau,
        "n_max": n_max,
        "seed": seed,
        "prototype_noise": prototype_noise,
        "test_per_class": test_per_class,
        "feature_angle": feature_angle,
        "simplex_tilts": simplex_tilts,
    }
    return SyntheticTask(
        directions=EmbeddingMatrix(dirs, labels),
        frozen_prototypes=EmbeddingMatrix(frozen, labels),
        train_features=train,
        test_features=test,
        counts=counts,
        tau=tau,
        n_max=n_max,
        base_classes=base,
        new_classes=new,
        planted_clusters=planted,
        seed=seed,
        params=params,
    )
