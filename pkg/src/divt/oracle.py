"""Brute-force references for the clustering and attention paths.

Everything here is written against the same contracts as the fast paths
but independently, with explicit Python loops and set arithmetic, and runs
only in float64. These are correctness references for tests and the
gradcheck command, never performance paths; keep N small (<= 128).
"""

from __future__ import annotations

import math

import numpy as np

from .clustering import Clustering
from .embedding_io import PatchSet
from .errors import ParameterError
from .similarity import SimMatrix
from .token_former import TokenFormerParams, TokenSequence


def brute_force_centroids(sim: SimMatrix, theta: float) -> list[int]:
    """Literal greedy selection: degree-sorted candidates, head pick, removal."""
    if not -1.0 < theta < 1.0:
        raise ParameterError(f"theta must lie strictly inside (-1, 1), got {theta}")
    s = [list(row) for row in sim.values]
    n = len(s)
    degrees = []
    for i in range(n):
        count = 0
        for j in range(n):
            if s[i][j] > theta:
                count += 1
        degrees.append(count)
    candidates = sorted(range(n), key=lambda i: (-degrees[i], i))
    chosen = []
    while candidates:
        c = candidates[0]
        chosen.append(c)
        survivors = []
        for j in candidates:
            if not s[c][j] > theta:
                survivors.append(j)
        candidates = survivors
    return chosen


def _gelu_scalar(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def naive_attention(ps: PatchSet, cl: Clustering, params: TokenFormerParams) -> TokenSequence:
    """Triple-loop transcription of the cluster-attention token former."""
    x = ps.data.tolist()
    n = ps.n_patches
    d = ps.dim
    d_att = params.d_att
    w_q = params.w_q.tolist()
    w_k = params.w_k.tolist()
    w_v = params.w_v.tolist()
    pos = params.pos_table.tolist()
    scale = 1.0 / math.sqrt(d_att) if params.scale_policy == "scaled" else 1.0

    keys = [[sum(w_k[a][j] * x[i][j] for j in range(d)) for a in range(d_att)] for i in range(n)]
    vals = [
        [sum(w_v[a][j] * (x[i][j] + pos[i][j]) for j in range(d)) for a in range(d_att)]
        for i in range(n)
    ]

    tokens = []
    for k in range(cl.k_clusters):
        centroid = int(cl.centroids[k])
        query = [sum(w_q[a][j] * x[centroid][j] for j in range(d)) for a in range(d_att)]
        members = [i for i in range(n) if cl.assignment[i] == k]
        exps = []
        for i in members:
            logit = scale * sum(query[a] * keys[i][a] for a in range(d_att))
            exps.append(math.exp(logit))
        total = sum(exps)
        agg = [0.0] * d_att
        for weight, i in zip(exps, members):
            for a in range(d_att):
                agg[a] += (weight / total) * vals[i][a]
        hidden = []
        for h in range(params.d_hidden):
            z = params.mlp_b1[h] + sum(params.mlp_w1[h][a] * agg[a] for a in range(d_att))
            hidden.append(_gelu_scalar(z))
        token = []
        for o in range(params.d_out):
            token.append(
                params.mlp_b2[o]
                + sum(params.mlp_w2[o][h] * hidden[h] for h in range(params.d_hidden))
            )
        tokens.append(token)
    return TokenSequence(np.array(tokens, dtype=np.float64), cl)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Worst-case |a - b| / max(|a| + |b|, floor) over all coordinates.

    The floor turns the comparison absolute for near-zero entries, so an
    rtol threshold of 1e-4 tolerates absolute noise up to 1e-7 there.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_grad(loss, x: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of ``loss`` at the flat vector ``x``."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        bumped = x.copy()
        bumped[i] = x[i] + eps
        up = float(loss(bumped))
        bumped[i] = x[i] - eps
        down = float(loss(bumped))
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ParameterError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (up - down) / (2.0 * eps)
    return grad
