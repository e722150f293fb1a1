"""Evaluation metrics and the per-run report."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import EmbeddingMatrix, effective_rank, gram_matrix, unit_rows
from .errors import MissingPrototype
from .scaffold import ClusterScaffold


def nearest_prototype_accuracy(
    features_by_class: Mapping,
    prototypes: EmbeddingMatrix,
    classes: Sequence,
    candidates: Sequence | None = None,
) -> float:
    """Percentage of features of ``classes`` whose most cosine-similar
    prototype (among ``candidates``, default ``classes``) is their own class.

    Ties go to the candidate listed first after sorting.
    """
    classes = list(classes)
    cands = sorted(candidates if candidates is not None else classes)
    if not classes:
        raise ValueError("empty class subset")
    idx = prototypes.index()
    for c in set(cands) | set(classes):
        if c not in idx:
            raise MissingPrototype(c)
    protos, _ = unit_rows(prototypes.data[[idx[c] for c in cands]])
    hits = total = 0
    for c in classes:
        f, _ = unit_rows(np.atleast_2d(np.asarray(features_by_class[c], dtype=float)))
        pred = np.argmax(f @ protos.T, axis=1)
        hits += int(np.sum(np.array(cands, dtype=object)[pred] == c))
        total += len(f)
    return 100.0 * hits / total


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    if base_acc + new_acc == 0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def etf_conformance(prototypes: EmbeddingMatrix, scaffold: ClusterScaffold) -> dict:
    """Per multi-class cluster: max |cos - (-1/(k-1))| over member pairs."""
    out = {}
    for m in range(scaffold.n_clusters):
        members = scaffold.members(m)
        k = len(members)
        if k < 2:
            continue
        sim = gram_matrix(prototypes.rows(members))
        off = sim[~np.eye(k, dtype=bool)]
        out[m] = float(np.max(np.abs(off + 1.0 / (k - 1))))
    return out


def intra_class_spread(features_by_class: Mapping, prototypes: EmbeddingMatrix, classes: Sequence | None = None) -> float:
    """Mean angle in degrees between each feature and its class prototype."""
    idx = prototypes.index()
    angles = []
    for c in classes if classes is not None else features_by_class:
        if c not in idx:
            raise MissingPrototype(c)
        f, _ = unit_rows(np.atleast_2d(np.asarray(features_by_class[c], dtype=float)))
        g, _ = unit_rows(prototypes.data[idx[c]][None, :])
        angles.append(np.degrees(np.arccos(np.clip(f @ g[0], -1.0, 1.0))))
    return float(np.mean(np.concatenate(angles)))


def centroid_similarity(prototypes: EmbeddingMatrix, scaffold: ClusterScaffold) -> np.ndarray:
    cents = np.stack([prototypes.rows(scaffold.members(m)).mean(axis=0) for m in range(scaffold.n_clusters)])
    return gram_matrix(cents)


def centroid_drift(trained: EmbeddingMatrix, frozen: EmbeddingMatrix, scaffold: ClusterScaffold) -> float:
    """Max abs change of the cluster-centroid cosine matrix."""
    return float(np.max(np.abs(centroid_similarity(trained, scaffold) - centroid_similarity(frozen, scaffold))))


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate(task, prototypes: EmbeddingMatrix, scaffold: ClusterScaffold) -> dict:
    """Accuracy and geometry summary of trained prototypes on ``task``.

    Accuracies are percentages; head/tail are measured on base-class test
    features against all base prototypes.
    """
    test = task.test_features
    base = nearest_prototype_accuracy(test, prototypes, task.base_classes)
    new = nearest_prototype_accuracy(test, prototypes, task.new_classes)
    head_cls, tail_cls = task.head_classes(), task.tail_classes()
    head = nearest_prototype_accuracy(test, prototypes, head_cls, task.base_classes) if head_cls else 0.0
    tail = nearest_prototype_accuracy(test, prototypes, tail_cls, task.base_classes)
    return {
        "accuracy": {
            "base": base,
            "new": new,
            "harmonic": harmonic_mean(base, new),
            "head": head,
            "tail": tail,
        },
        "geometry": {
            "etf_conformance": {str(k): v for k, v in etf_conformance(prototypes, scaffold).items()},
            "intra_class_spread": intra_class_spread(test, prototypes, task.base_classes),
            "effective_rank_before": effective_rank(gram_matrix(task.frozen_prototypes)),
            "effective_rank_after": effective_rank(gram_matrix(prototypes)),
            "centroid_drift": centroid_drift(prototypes, task.frozen_prototypes, scaffold),
        },
    }


@dataclass
class RunReport:
    config: dict
    seed: int
    per_epoch: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "per_epoch": [b.to_json() if hasattr(b, "to_json") else b for b in self.per_epoch],
            "final_metrics": self.final_metrics,
            "notes": {
                "effective_rank": "exp of the Shannon entropy of normalized singular values",
                "counts": "n_k = round(n_max * tau^(k/(K-1))), one parameterization meeting min/max = tau",
                "ablation_mapping": "structural analogue on a synthetic task, not dataset-level numbers",
            },
        }
