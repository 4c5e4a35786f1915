"""Adaptive clustering of patches by similarity threshold.

The number of clusters is not prescribed; it emerges from the similarity
structure. Patches whose similarity exceeds the threshold ``theta`` are
neighbors, every patch gets a neighbor degree, and centroids are chosen
greedily by descending degree, each removing its whole neighborhood from
the candidate pool. A refinement pass then reassigns every patch to its
most similar centroid, and the final clusters are reported with centroids
in spatial (row-major grid) order.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .embedding_io import PatchSet
from .errors import ParameterError, ShapeError
from .similarity import SimMatrix, cosine_matrix

DEGREE_POLICIES = ("static", "recompute")


@dataclass
class GranularityConfig:
    """Knobs that control how finely patches are grouped.

    ``theta`` is the similarity threshold in (-1, 1); ties at exactly theta
    are non-neighbors. ``degree_policy`` selects whether neighbor degrees
    are computed once up front ("static", the default) or recomputed on the
    surviving candidates before every pick ("recompute"). theta = 1 is
    rejected: with strict comparisons nothing would neighbor anything,
    not even itself.
    """

    theta: float
    degree_policy: str = "static"
    tie_break: str = "lowest-index"

    def __post_init__(self):
        if not -1.0 < self.theta < 1.0:
            raise ParameterError(f"theta must lie strictly inside (-1, 1), got {self.theta}")
        if self.degree_policy not in DEGREE_POLICIES:
            raise ParameterError(f"unknown degree policy {self.degree_policy!r}")
        if self.tie_break != "lowest-index":
            raise ParameterError(f"unknown tie break {self.tie_break!r}")


@dataclass
class Clustering:
    """Centroid indices plus the patch -> cluster assignment.

    ``assignment[i] == k`` means patch i belongs to the cluster anchored at
    ``centroids[k]``. Every cluster is nonempty and every centroid sits in
    its own cluster.
    """

    centroids: np.ndarray
    assignment: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.int64)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.centroids.ndim != 1 or self.centroids.size < 1:
            raise ShapeError("centroids must be a nonempty 1-D index array")
        if np.unique(self.centroids).size != self.centroids.size:
            raise ShapeError("centroid indices must be distinct")
        k = self.centroids.size
        n = self.assignment.size
        if self.assignment.ndim != 1 or n < k:
            raise ShapeError(f"assignment of {n} patches cannot cover {k} clusters")
        if self.assignment.min() < 0 or self.assignment.max() >= k:
            raise ShapeError("assignment labels outside [0, K)")
        if np.unique(self.assignment).size != k:
            raise ShapeError("some cluster is empty")
        if not np.array_equal(self.assignment[self.centroids], np.arange(k)):
            raise ShapeError("each centroid must belong to its own cluster")

    @property
    def k_clusters(self) -> int:
        return self.centroids.size

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)


def select_centroids(sim: SimMatrix, cfg: GranularityConfig) -> np.ndarray:
    """Greedy centroid selection; returns indices in selection order.

    Static policy: degrees are counted once, candidates sorted by degree
    descending (ties to the lowest patch index), and the head candidate is
    repeatedly taken as a centroid, removing every remaining candidate whose
    similarity to it exceeds theta (itself included, since self-similarity
    is 1). Recompute policy: identical, except degrees are re-counted over
    the surviving candidates before each pick. Any two returned centroids
    have similarity at most theta.
    """
    s = sim.values
    theta = cfg.theta
    n = sim.n
    chosen: list[int] = []
    alive = np.ones(n, dtype=bool)
    if cfg.degree_policy == "static":
        degrees = np.count_nonzero(s > theta, axis=1)
        order = np.argsort(-degrees, kind="stable")
        for c in order:
            if alive[c]:
                chosen.append(int(c))
                alive &= ~(s[c] > theta)
    else:
        while alive.any():
            idx = np.flatnonzero(alive)
            degrees = np.count_nonzero(s[np.ix_(idx, idx)] > theta, axis=1)
            c = int(idx[np.argmax(degrees)])
            chosen.append(c)
            alive &= ~(s[c] > theta)
    return np.asarray(chosen, dtype=np.int64)


def _argmax_assignment(sim_values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # np.argmax takes the first maximum, i.e. the lowest centroid position.
    return np.argmax(sim_values[:, centroids], axis=1)


def refine_assignments(ps: PatchSet, centroids) -> Clustering:
    """Assign every patch to its most similar centroid.

    Ties go to the centroid earliest in the given list. Whenever the
    centroids come out of :func:`select_centroids` with theta < 1, each
    centroid is strictly most similar to itself, so no cluster can be empty.
    """
    centroids = np.asarray(centroids, dtype=np.int64)
    if centroids.size == 0:
        raise ParameterError("empty centroid list")
    if np.unique(centroids).size != centroids.size:
        raise ParameterError("centroid indices must be distinct")
    if centroids.min() < 0 or centroids.max() >= ps.n_patches:
        raise ParameterError("centroid index out of range")
    sim = cosine_matrix(ps)
    return Clustering(centroids, _argmax_assignment(sim.values, centroids))


def order_centroids_spatial(centroids, grid_h: int, grid_w: int) -> np.ndarray:
    """Sort centroid indices by row-major grid position (row, then column)."""
    centroids = np.asarray(centroids, dtype=np.int64)
    if centroids.size and (centroids.min() < 0 or centroids.max() >= grid_h * grid_w):
        raise ParameterError(
            f"centroid index out of range for a {grid_h}x{grid_w} grid"
        )
    return np.sort(centroids)


def cluster(ps: PatchSet, cfg: GranularityConfig) -> Clustering:
    """Full pipeline: similarity, centroid selection, refinement, ordering."""
    sim = cosine_matrix(ps)
    selection = select_centroids(sim, cfg)
    raw = _argmax_assignment(sim.values, selection)
    spatial_rank = np.argsort(selection)
    inverse = np.empty_like(spatial_rank)
    inverse[spatial_rank] = np.arange(selection.size)
    ordered = order_centroids_spatial(selection, ps.grid_h, ps.grid_w)
    result = Clustering(ordered, inverse[raw])
    if ordered.size > 1:
        cross = sim.values[np.ix_(ordered, ordered)].copy()
        np.fill_diagonal(cross, -np.inf)
        assert cross.max() <= cfg.theta, "centroid separation violated"
    return result


def cluster_export_dict(cl: Clustering, *, id: str, theta: float, grid_h: int, grid_w: int) -> dict:
    """JSON-ready view of a clustering; labels and indices are 0-based."""
    return {
        "id": id,
        "theta": theta,
        "k": int(cl.k_clusters),
        "grid_h": grid_h,
        "grid_w": grid_w,
        "centroids": [int(c) for c in cl.centroids],
        "assignment": [int(a) for a in cl.assignment],
    }


def cluster_palette(k: int) -> list[tuple[int, int, int]]:
    """Deterministic, well-spread RGB palette keyed on cluster index."""
    colors = []
    for i in range(k):
        hue = (i * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        colors.append((int(r * 255 + 0.5), int(g * 255 + 0.5), int(b * 255 + 0.5)))
    return colors


def render_cluster_ppm(assignment, grid_h: int, grid_w: int, scale: int = 16) -> bytes:
    """Render the assignment as a binary PPM (P6), one color per cluster.

    Each patch becomes a ``scale`` x ``scale`` pixel block at its grid
    position; repeated renders are byte-identical.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.size != grid_h * grid_w:
        raise ParameterError(
            f"assignment of {assignment.size} patches does not fit a {grid_h}x{grid_w} grid"
        )
    if scale < 1:
        raise ParameterError("scale must be positive")
    palette = np.asarray(cluster_palette(int(assignment.max()) + 1), dtype=np.uint8)
    grid = palette[assignment.reshape(grid_h, grid_w)]
    image = np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)
    header = f"P6\n{grid_w * scale} {grid_h * scale}\n255\n".encode("ascii")
    return header + image.tobytes()
