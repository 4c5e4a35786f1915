"""One visual token per cluster via centroid-query cross-attention.

The centroid's embedding is projected to a query, all patches to keys, and
values carry a learnable positional embedding (added on the value branch
only, where it shapes token content instead of merely perturbing scores).
Each token's softmax runs strictly over its own cluster's patches, so
perturbing a patch outside cluster k cannot change token k, bit for bit.
The aggregated vector goes through a two-layer GELU MLP.

Forward and backward are implemented analytically in float64; the backward
treats the clustering as fixed, non-differentiable structure.

Parameter checkpoints use the "DIVP" binary format: magic ``DIVP``,
version u32 = 1, then d, d_att, d_hidden, d_out, n_max, scale_policy
(0 = scaled, 1 = unscaled) as u32, followed by the tensors w_q, w_k, w_v,
pos_table, mlp_w1, mlp_b1, mlp_w2, mlp_b2 as little-endian f64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .clustering import Clustering
from .embedding_io import PatchSet, atomic_write_bytes
from .errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    HeaderError,
    NonFiniteValueError,
    ParameterError,
    ShapeError,
    TrailingDataError,
    TruncatedPayloadError,
)

MAGIC_PARAMS = b"DIVP"
PARAMS_VERSION = 1
DEFAULT_N_MAX = 576

SCALE_POLICIES = ("scaled", "unscaled")
PARAM_FIELDS = ("w_q", "w_k", "w_v", "pos_table", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

_PARAMS_HEADER = struct.Struct("<4sIIIIIII")

INIT_STD = 0.02


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_prime(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


@dataclass
class TokenFormerParams:
    """Projection weights, positional table, and output MLP.

    ``scale_policy`` chooses whether attention logits are multiplied by
    1/sqrt(d_att) ("scaled", the default, better conditioned) or left raw
    ("unscaled").
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    pos_table: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    scale_policy: str = "scaled"

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d_att, d = self.w_q.shape
        if self.w_k.shape != (d_att, d) or self.w_v.shape != (d_att, d):
            raise ShapeError("w_q, w_k, w_v must share the same (d_att, d) shape")
        if self.pos_table.ndim != 2 or self.pos_table.shape[1] != d:
            raise ShapeError("pos_table must be (n_max, d)")
        d_hidden = self.mlp_w1.shape[0]
        if self.mlp_w1.shape != (d_hidden, d_att) or self.mlp_b1.shape != (d_hidden,):
            raise ShapeError("first MLP layer must map d_att -> d_hidden")
        d_out = self.mlp_w2.shape[0]
        if self.mlp_w2.shape != (d_out, d_hidden) or self.mlp_b2.shape != (d_out,):
            raise ShapeError("second MLP layer must map d_hidden -> d_out")
        if self.scale_policy not in SCALE_POLICIES:
            raise ParameterError(f"unknown scale policy {self.scale_policy!r}")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"non-finite values in {name}")

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_att(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.mlp_w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.mlp_w2.shape[0]

    @property
    def n_max(self) -> int:
        return self.pos_table.shape[0]

    @property
    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_att) if self.scale_policy == "scaled" else 1.0


@dataclass
class TokenFormerGrads:
    """Gradients mirroring TokenFormerParams, plus the input gradient."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    pos_table: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    d_input: np.ndarray


@dataclass
class TokenSequence:
    """K output token vectors in centroid spatial order."""

    tokens: np.ndarray
    source: Clustering

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ShapeError("tokens must be a (K, d_out) matrix")
        if self.tokens.shape[0] != self.source.k_clusters:
            raise ShapeError("token count does not match the clustering")
        if not np.all(np.isfinite(self.tokens)):
            raise ParameterError("non-finite token values")

    @property
    def k(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_out(self) -> int:
        return self.tokens.shape[1]


def init_params(
    d: int,
    d_att: int,
    d_hidden: int,
    d_out: int,
    n_max: int = DEFAULT_N_MAX,
    seed: int = 0,
    scale_policy: str = "scaled",
) -> TokenFormerParams:
    """Gaussian N(0, 0.02^2) weights and positional table, zero biases."""
    if min(d, d_att, d_hidden, d_out, n_max) < 1:
        raise ParameterError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    return TokenFormerParams(
        w_q=rng.normal(0.0, INIT_STD, (d_att, d)),
        w_k=rng.normal(0.0, INIT_STD, (d_att, d)),
        w_v=rng.normal(0.0, INIT_STD, (d_att, d)),
        pos_table=rng.normal(0.0, INIT_STD, (n_max, d)),
        mlp_w1=rng.normal(0.0, INIT_STD, (d_hidden, d_att)),
        mlp_b1=np.zeros(d_hidden),
        mlp_w2=rng.normal(0.0, INIT_STD, (d_out, d_hidden)),
        mlp_b2=np.zeros(d_out),
        scale_policy=scale_policy,
    )


def cluster_mask(cl: Clustering, n_patches: int) -> np.ndarray:
    """Dense (K, N) boolean membership mask; rows partition the columns."""
    mask = np.zeros((cl.k_clusters, n_patches), dtype=bool)
    mask[cl.assignment, np.arange(n_patches)] = True
    return mask


def _check_instance(ps: PatchSet, cl: Clustering, params: TokenFormerParams) -> None:
    if ps.dim != params.d:
        raise ShapeError(f"patch dim {ps.dim} != parameter dim {params.d}")
    if ps.n_patches > params.n_max:
        raise ShapeError(f"{ps.n_patches} patches exceed positional capacity {params.n_max}")
    if cl.assignment.size != ps.n_patches:
        raise ShapeError("clustering does not cover this patch set")
    if int(cl.centroids.max()) >= ps.n_patches:
        raise ShapeError("centroid index out of range for this patch set")


def _forward(ps: PatchSet, cl: Clustering, params: TokenFormerParams):
    _check_instance(ps, cl, params)
    x = ps.data
    n = ps.n_patches
    pos = params.pos_table[:n]
    queries = x[cl.centroids] @ params.w_q.T
    keys = x @ params.w_k.T
    vals = (x + pos) @ params.w_v.T
    scale = params.logit_scale
    k_clusters = cl.k_clusters
    weights = np.zeros((k_clusters, n))
    agg = np.empty((k_clusters, params.d_att))
    for k in range(k_clusters):
        m = cl.members(k)
        logits = scale * (keys[m] @ queries[k])
        shifted = np.exp(logits - logits.max())
        w = shifted / shifted.sum()
        weights[k, m] = w
        agg[k] = w @ vals[m]
    z1 = agg @ params.mlp_w1.T + params.mlp_b1
    hidden = gelu(z1)
    tokens = hidden @ params.mlp_w2.T + params.mlp_b2
    return tokens, weights, (x, pos, queries, keys, vals, agg, z1, hidden)


def form_tokens(ps: PatchSet, cl: Clustering, params: TokenFormerParams) -> TokenSequence:
    """Attend each centroid query over its own cluster and apply the MLP."""
    tokens, _, _ = _forward(ps, cl, params)
    return TokenSequence(tokens, cl)


def attention_weights(ps: PatchSet, cl: Clustering, params: TokenFormerParams) -> np.ndarray:
    """The (K, N) softmax weight matrix; zeros outside each row's cluster."""
    _, weights, _ = _forward(ps, cl, params)
    return weights


def backward(
    ps: PatchSet,
    cl: Clustering,
    params: TokenFormerParams,
    upstream: np.ndarray,
) -> TokenFormerGrads:
    """Exact gradients of form_tokens under ``upstream`` (K, d_out).

    Cluster assignments are fixed structure and carry no gradient. Rows of
    the positional table beyond this image's patches stay zero.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    tokens, weights, cache = _forward(ps, cl, params)
    if upstream.shape != tokens.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != tokens shape {tokens.shape}")
    x, pos, queries, keys, vals, agg, z1, hidden = cache
    n = ps.n_patches
    scale = params.logit_scale

    d_hidden_in = upstream @ params.mlp_w2
    d_w2 = upstream.T @ hidden
    d_b2 = upstream.sum(axis=0)
    d_z1 = d_hidden_in * gelu_prime(z1)
    d_w1 = d_z1.T @ agg
    d_b1 = d_z1.sum(axis=0)
    d_agg = d_z1 @ params.mlp_w1

    d_queries = np.zeros_like(queries)
    d_keys = np.zeros_like(keys)
    d_vals = np.zeros_like(vals)
    for k in range(cl.k_clusters):
        m = cl.members(k)
        w = weights[k, m]
        d_vals[m] += np.outer(w, d_agg[k])
        d_w = vals[m] @ d_agg[k]
        d_logits = w * (d_w - float(w @ d_w))
        d_queries[k] = scale * (d_logits @ keys[m])
        d_keys[m] += scale * np.outer(d_logits, queries[k])

    d_wq = d_queries.T @ x[cl.centroids]
    d_wk = d_keys.T @ x
    d_wv = d_vals.T @ (x + pos)

    d_x = d_keys @ params.w_k
    d_x[cl.centroids] += d_queries @ params.w_q
    d_xp = d_vals @ params.w_v
    d_x += d_xp
    d_pos = np.zeros_like(params.pos_table)
    d_pos[:n] = d_xp

    return TokenFormerGrads(
        w_q=d_wq,
        w_k=d_wk,
        w_v=d_wv,
        pos_table=d_pos,
        mlp_w1=d_w1,
        mlp_b1=d_b1,
        mlp_w2=d_w2,
        mlp_b2=d_b2,
        d_input=d_x,
    )


def params_to_vector(params) -> np.ndarray:
    """Flatten the eight parameter tensors (grads work too) into one vector."""
    return np.concatenate([np.ravel(getattr(params, name)) for name in PARAM_FIELDS])


def vector_to_params(vec: np.ndarray, like: TokenFormerParams) -> TokenFormerParams:
    """Rebuild params from a flat vector using ``like`` for shapes and policy."""
    vec = np.asarray(vec, dtype=np.float64)
    pieces = {}
    offset = 0
    for name in PARAM_FIELDS:
        shape = getattr(like, name).shape
        size = int(np.prod(shape))
        pieces[name] = vec[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != vec.size:
        raise ShapeError(f"vector of {vec.size} values, parameters need {offset}")
    return TokenFormerParams(scale_policy=like.scale_policy, **pieces)


def save_params(params: TokenFormerParams, path) -> None:
    """Write a DIVP parameter checkpoint."""
    header = _PARAMS_HEADER.pack(
        MAGIC_PARAMS,
        PARAMS_VERSION,
        params.d,
        params.d_att,
        params.d_hidden,
        params.d_out,
        params.n_max,
        SCALE_POLICIES.index(params.scale_policy),
    )
    body = b"".join(
        np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes()
        for name in PARAM_FIELDS
    )
    atomic_write_bytes(path, header + body)


def load_params(path) -> TokenFormerParams:
    """Read a DIVP parameter checkpoint, validating sizes exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PARAMS_HEADER.size:
        raise TruncatedPayloadError(f"{path}: shorter than the parameter header")
    magic, version, d, d_att, d_hidden, d_out, n_max, policy_code = _PARAMS_HEADER.unpack_from(
        blob
    )
    if magic != MAGIC_PARAMS:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC_PARAMS!r}")
    if version != PARAMS_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if policy_code >= len(SCALE_POLICIES):
        raise BadDtypeError(f"{path}: unknown scale policy code {policy_code}")
    if min(d, d_att, d_hidden, d_out, n_max) < 1:
        raise HeaderError(f"{path}: nonpositive dimension in header")
    shapes = {
        "w_q": (d_att, d),
        "w_k": (d_att, d),
        "w_v": (d_att, d),
        "pos_table": (n_max, d),
        "mlp_w1": (d_hidden, d_att),
        "mlp_b1": (d_hidden,),
        "mlp_w2": (d_out, d_hidden),
        "mlp_b2": (d_out,),
    }
    total = sum(int(np.prod(s)) for s in shapes.values())
    expected = _PARAMS_HEADER.size + total * 8
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise TrailingDataError(f"{path}: {len(blob) - expected} trailing bytes")
    flat = np.frombuffer(blob, dtype="<f8", offset=_PARAMS_HEADER.size)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteValueError(f"{path}: non-finite parameter value")
    pieces = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        pieces[name] = flat[offset : offset + size].astype(np.float64).reshape(shape)
        offset += size
    return TokenFormerParams(scale_policy=SCALE_POLICIES[policy_code], **pieces)
