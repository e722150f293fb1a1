"""Unit-sphere primitives: row normalization, cosine similarity, Gram matrices
and the spectral effective-rank summary.

Every function accepts either an :class:`EmbeddingMatrix` or a plain 2-D
array; array in, array out.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, ZeroNormRow

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-stacked feature vectors with one label per row."""

    data: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise DimensionMismatch(f"expected a 2-D matrix, got shape {data.shape}")
        if data.shape[0] < 1:
            raise EmptyInput("embedding matrix has no rows")
        if not np.isfinite(data).all():
            raise ValueError("embedding matrix contains non-finite values")
        labels = tuple(self.labels) if len(self.labels) else tuple(range(data.shape[0]))
        if len(labels) != data.shape[0]:
            raise DimensionMismatch(f"{len(labels)} labels for {data.shape[0]} rows")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    def index(self) -> dict:
        """Map label -> row index (first occurrence wins)."""
        out: dict = {}
        for i, lab in enumerate(self.labels):
            out.setdefault(lab, i)
        return out

    def rows(self, labels: Sequence[Hashable]) -> np.ndarray:
        idx = self.index()
        return self.data[[idx[lab] for lab in labels]]

    def replace(self, data: np.ndarray) -> "EmbeddingMatrix":
        return EmbeddingMatrix(data, self.labels)


def _as_array(m) -> np.ndarray:
    if isinstance(m, EmbeddingMatrix):
        return m.data
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def unit_rows(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(arr / norms, norms)``; raises ZeroNormRow on a degenerate row."""
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms <= ZERO_NORM)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return arr / norms[:, None], norms


def project_out(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows.

    Applies the Jacobian (I - u u^T) / ||x|| of x -> x / ||x|| row by row.
    """
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def normalize_rows(m):
    unit, _ = unit_rows(_as_array(m))
    if isinstance(m, EmbeddingMatrix):
        return m.replace(unit)
    return unit


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= ZERO_NORM:
        raise ZeroNormRow(0)
    if nb <= ZERO_NORM:
        raise ZeroNormRow(1)
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gram_matrix(m) -> np.ndarray:
    """Cosine-similarity matrix of the rows; normalizes internally."""
    unit, _ = unit_rows(_as_array(m))
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def effective_rank(s) -> float:
    """exp of the Shannon entropy of the normalized singular values.

    Singular values below 1e-12 of the largest are dropped; the zero matrix
    has effective rank 1 by convention.
    """
    s = np.asarray(s, dtype=float)
    sv = np.linalg.svd(s, compute_uv=False)
    if sv.size == 0 or sv[0] <= 0.0:
        return 1.0
    sv = sv[sv > 1e-12 * sv[0]]
    p = sv / sv.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


# -- CSV embedding files -----------------------------------------------------

def _parse_label(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def write_embedding_csv(path, m: EmbeddingMatrix) -> None:
    """Write ``label,x0,...`` rows with 17 significant digits (exact round-trip)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"x{j}" for j in range(m.dim)])
        for lab, row in zip(m.labels, m.data):
            writer.writerow([lab] + [f"{v:.17g}" for v in row])


def read_embedding_csv(path) -> EmbeddingMatrix:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: first column must be 'label'")
        labels, rows = [], []
        for rec in reader:
            if not rec:
                continue
            labels.append(_parse_label(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return EmbeddingMatrix(np.array(rows, dtype=float), tuple(labels))
