"""Training objectives over prototype and feature matrices.

Each loss returns its value together with analytic gradients. Prototypes are
passed unnormalized; the losses normalize where the objective does, and the
gradients include the normalization Jacobian.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from .embedding import EmbeddingMatrix, project_out, unit_rows
from .errors import DimensionMismatch, MissingPrototype, NonPositiveTemperature
from .scaffold import ClusterScaffold


@dataclass(frozen=True)
class LossWeights:
    lambda_tetf: float = 0.25
    lambda_cc: float = 0.15
    lambda_rs: float = 0.10
    temperature: float = 0.07

    def __post_init__(self):
        for name in ("lambda_tetf", "lambda_cc", "lambda_rs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class LossBreakdown:
    clip: float
    tetf_raw: float
    tetf_centered: float
    cc: float
    rs: float
    total: float

    def to_json(self) -> dict:
        return asdict(self)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp_rows(s: np.ndarray) -> np.ndarray:
    mx = s.max(axis=1)
    return mx + np.log(np.exp(s - mx[:, None]).sum(axis=1))


def loss_clip(image_feats, text_feats, temperature: float = 0.07, symmetric: bool = False):
    """Summed contrastive loss; row ``i`` of the two inputs is a matched pair.

    For each text row the softmax runs over the image rows of the batch.
    ``symmetric`` adds the image-to-text term as in two-sided CLIP.

    Returns ``(value, grad_image, grad_text)``.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    f = np.asarray(image_feats, dtype=float)
    g = np.asarray(text_feats, dtype=float)
    if f.shape != g.shape:
        raise DimensionMismatch(f"image {f.shape} vs text {g.shape}")
    fu, fn = unit_rows(f)
    gu, gn = unit_rows(g)
    logits = gu @ fu.T / temperature
    eye = np.eye(len(g))
    value = float(np.sum(_logsumexp_rows(logits) - np.diag(logits)))
    dlogits = _softmax_rows(logits) - eye
    if symmetric:
        value += float(np.sum(_logsumexp_rows(logits.T) - np.diag(logits)))
        dlogits = dlogits + (_softmax_rows(logits.T) - eye).T
    grad_gu = dlogits @ fu / temperature
    grad_fu = dlogits.T @ gu / temperature
    return value, project_out(fu, fn, grad_fu), project_out(gu, gn, grad_gu)


def _cluster_rows(prototypes: EmbeddingMatrix, scaffold: ClusterScaffold) -> list[np.ndarray]:
    idx = prototypes.index()
    rows = []
    for m in range(scaffold.n_clusters):
        members = scaffold.members(m)
        for c in members:
            if c not in idx:
                raise MissingPrototype(c)
        rows.append(np.array([idx[c] for c in members], dtype=int))
    return rows


def loss_tetf(prototypes: EmbeddingMatrix, scaffold: ClusterScaffold):
    """Within-cluster ETF separation loss.

    Per cluster of size k >= 2 the squared Frobenius distance between the
    cosine Gram matrix and the simplex target (off-diagonal -1/(k-1)),
    averaged over those clusters. Singleton clusters contribute nothing and
    are not counted in the average.

    Returns ``(value_raw, value_centered, grad)``. The centered value
    subtracts the constant diagonal floor (sum of k / number of clusters).
    """
    x = prototypes.data
    grad = np.zeros_like(x)
    rows = [r for r in _cluster_rows(prototypes, scaffold) if len(r) >= 2]
    if not rows:
        return 0.0, 0.0, grad
    scale = 1.0 / len(rows)
    raw = 0.0
    floor = 0.0
    for r in rows:
        k = len(r)
        unit, norms = unit_rows(x[r])
        gram = unit @ unit.T
        target = gram + (np.ones((k, k)) - np.eye(k)) / (k - 1)
        raw += float(np.sum(target * target))
        floor += k
        grad[r] = project_out(unit, norms, 4.0 * scale * (target @ unit))
    raw *= scale
    return raw, max(raw - floor * scale, 0.0), grad


def loss_cc(features_by_class: Mapping, prototypes: EmbeddingMatrix):
    """Class-wise convergence: mean squared distance between normalized
    features and their class's normalized prototype, averaged per class and
    then over the classes present in ``features_by_class``.

    Returns ``(value, grad_prototypes, grad_features)``; ``grad_features``
    is a dict keyed like the input.
    """
    x = prototypes.data
    idx = prototypes.index()
    grad = np.zeros_like(x)
    grad_f = {}
    classes = [c for c, f in features_by_class.items() if len(f)]
    if not classes:
        return 0.0, grad, grad_f
    inv_k = 1.0 / len(classes)
    value = 0.0
    for c in classes:
        if c not in idx:
            raise MissingPrototype(c)
        f = np.asarray(features_by_class[c], dtype=float)
        if f.ndim == 1:
            f = f[None, :]
        if f.shape[1] != x.shape[1]:
            raise DimensionMismatch(f"features of class {c!r} have dim {f.shape[1]}")
        fu, fn = unit_rows(f)
        gu, gn = unit_rows(x[idx[c]][None, :])
        diff = fu - gu
        w = inv_k / len(f)
        value += w * float(np.sum(diff * diff))
        grad[idx[c]] += project_out(gu, gn, (-2.0 * w * diff.sum(axis=0))[None, :])[0]
        grad_f[c] = project_out(fu, fn, 2.0 * w * diff)
    return value, grad, grad_f


def loss_rs(prototypes: EmbeddingMatrix, frozen: EmbeddingMatrix):
    """Mean L1 distance of each prototype to its frozen counterpart.

    Works on raw (unnormalized) vectors; the subgradient at zero is 0.
    """
    if prototypes.data.shape != frozen.data.shape:
        raise DimensionMismatch(f"{prototypes.data.shape} vs {frozen.data.shape}")
    ref = frozen.rows(prototypes.labels) if frozen.labels != prototypes.labels else frozen.data
    delta = prototypes.data - ref
    k = len(prototypes)
    return float(np.abs(delta).sum() / k), np.sign(delta) / k


def loss_total(
    prototypes: EmbeddingMatrix,
    frozen: EmbeddingMatrix,
    scaffold: ClusterScaffold,
    batch_features,
    batch_labels,
    weights: LossWeights = LossWeights(),
    features_by_class: Mapping | None = None,
    *,
    use_clip: bool = True,
    symmetric_clip: bool = False,
    tetf_scaffold: ClusterScaffold | None = None,
):
    """Weighted sum of the contrastive, ETF, convergence and anchoring losses.

    The batch supplies image features and their class labels; the text side
    of the contrastive term is the prototype of each label. The convergence
    term uses ``features_by_class`` (defaults to the batch grouped by class).

    Returns ``(LossBreakdown, grad wrt prototypes)``.
    """
    idx = prototypes.index()
    grad = np.zeros_like(prototypes.data)
    batch_features = np.asarray(batch_features, dtype=float)
    labels = list(batch_labels)
    for c in labels:
        if c not in idx:
            raise MissingPrototype(c)
    rows = np.array([idx[c] for c in labels], dtype=int)

    clip = 0.0
    if use_clip and len(labels):
        clip, _, g_text = loss_clip(batch_features, prototypes.data[rows], weights.temperature, symmetric_clip)
        np.add.at(grad, rows, g_text)

    tetf_raw, tetf_centered, g_tetf = loss_tetf(prototypes, tetf_scaffold or scaffold)

    if features_by_class is None:
        features_by_class = {}
        for c in dict.fromkeys(labels):
            features_by_class[c] = batch_features[[i for i, lab in enumerate(labels) if lab == c]]
    cc, g_cc, _ = loss_cc(features_by_class, prototypes)

    rs, g_rs = loss_rs(prototypes, frozen)

    grad += weights.lambda_tetf * g_tetf + weights.lambda_cc * g_cc + weights.lambda_rs * g_rs
    total = clip + weights.lambda_tetf * tetf_raw + weights.lambda_cc * cc + weights.lambda_rs * rs
    return LossBreakdown(clip, tetf_raw, tetf_centered, cc, rs, total), grad


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], point, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.array(point, dtype=float)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
