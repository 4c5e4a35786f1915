"""Cosine-similarity matrices, neighbor degrees, and redundancy diagnostics.

The neighbor degree of patch i counts how many patches j (including i
itself) satisfy S[i, j] > theta, strictly. A patch whose embedding has zero
norm is defined to have similarity 0 to every other patch and 1 to itself,
so it always ends up an isolated singleton rather than poisoning the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_io import LayerwiseEmbeddings, PatchSet
from .errors import ParameterError, ShapeError

SYMMETRY_TOL = 1e-12
RANGE_EPS = 1e-9


@dataclass
class SimMatrix:
    """Symmetric N x N cosine-similarity matrix with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {v.shape}")
        if np.abs(v - v.T).max() > SYMMETRY_TOL:
            raise ShapeError("similarity matrix is not symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise ShapeError("similarity matrix diagonal must be exactly 1")
        if v.min() < -1.0 - RANGE_EPS or v.max() > 1.0 + RANGE_EPS:
            raise ShapeError("similarity values outside [-1, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _unit_rows(data: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return data / safe


def cosine_matrix(ps: PatchSet) -> SimMatrix:
    """All-pairs cosine similarity of the patch embeddings."""
    unit = _unit_rows(ps.data)
    s = unit @ unit.T
    s = np.clip((s + s.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return SimMatrix(s)


def neighbor_degrees(sim: SimMatrix, theta: float) -> np.ndarray:
    """Per-patch neighbor counts n_i = #{j : S[i, j] > theta}, self included."""
    if not -1.0 <= theta <= 1.0:
        raise ParameterError(f"theta must lie in [-1, 1], got {theta}")
    return np.count_nonzero(sim.values > theta, axis=1)


def mean_pairwise_similarity(rows: np.ndarray) -> float:
    """Mean cosine similarity over the M(M-1)/2 unordered row pairs."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {rows.shape}")
    m = rows.shape[0]
    if m < 2:
        raise ParameterError(f"need at least two rows, got {m}")
    unit = _unit_rows(rows)
    s = unit @ unit.T
    iu = np.triu_indices(m, k=1)
    return float(s[iu].sum() / (m * (m - 1) / 2))


def layerwise_similarity_profile(le: LayerwiseEmbeddings) -> list[tuple[int, float]]:
    """Mean pairwise patch similarity per encoder layer for one image."""
    return [(i, mean_pairwise_similarity(layer.data)) for i, layer in enumerate(le.layers)]


def corpus_similarity_profile(
    corpus: list[LayerwiseEmbeddings],
) -> list[tuple[int, float, float]]:
    """Per-layer (index, mean, stddev) of per-image similarity means.

    The mean averages each layer's per-image values in corpus order; the
    stddev is the population spread of those per-image values (0.0 for a
    single image).
    """
    if not corpus:
        raise ParameterError("empty corpus")
    n_layers = corpus[0].n_layers
    for le in corpus:
        if le.n_layers != n_layers:
            raise ShapeError(f"{le.id}: expected {n_layers} layers, got {le.n_layers}")
    per_layer = np.empty((len(corpus), n_layers))
    for i, le in enumerate(corpus):
        for j, (_, value) in enumerate(layerwise_similarity_profile(le)):
            per_layer[i, j] = value
    return [
        (j, float(per_layer[:, j].mean()), float(per_layer[:, j].std()))
        for j in range(n_layers)
    ]
