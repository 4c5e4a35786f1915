"""Token-count statistics, threshold sweeps, and the KV-cache cost model.

Standard deviations are population (not sample) deviations; output metadata
notes this. The KV-cache model is purely analytic: bytes scale linearly in
token count, decoder depth, hidden width, scalar width, and the two cached
streams (keys and values). Wall-clock numbers are deliberately absent from
this module; the CLI ``bench`` command measures this artifact's own timings
instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering, GranularityConfig, cluster
from .embedding_io import PatchSet
from .errors import ParameterError
from .similarity import mean_pairwise_similarity
from .token_former import TokenSequence


@dataclass(frozen=True)
class ModelProfile:
    """Decoder dimensions that determine per-token KV-cache cost."""

    n_layers: int
    hidden_dim: int
    bytes_per_scalar: int
    kv_streams: int = 2

    def __post_init__(self):
        if min(self.n_layers, self.hidden_dim, self.bytes_per_scalar, self.kv_streams) < 1:
            raise ParameterError("all profile fields must be positive")


# 32 decoder layers, 4096 hidden, fp16 scalars: 0.5 MiB of KV-cache per token.
LLAMA_7B = ModelProfile(n_layers=32, hidden_dim=4096, bytes_per_scalar=2)

# Published full-scale anchors, kept for report context only; they are not
# reproducible from synthetic desk-scale corpora.
REFERENCE_TOKEN_COUNTS = {
    0.3: 13.5,
    0.4: 22.4,
    0.5: 35.7,
    0.62: 63.7,
    0.65: 74.1,
    0.75: 136.5,
    0.8: 175.3,
}
REFERENCE_MODALITY_SIMILARITY = {
    "language": 0.0378,
    "vision_mlp_projector": 0.3823,
    "vision_clustered": 0.3190,
}


def kv_cache_bytes(n_tokens: int, profile: ModelProfile) -> int:
    """Exact KV bytes a decoder keeps for ``n_tokens`` prefix tokens."""
    if n_tokens < 0:
        raise ParameterError("token count must be nonnegative")
    return (
        n_tokens
        * profile.n_layers
        * profile.kv_streams
        * profile.hidden_dim
        * profile.bytes_per_scalar
    )


def kv_cache_megabytes(n_tokens: int, profile: ModelProfile) -> float:
    return kv_cache_bytes(n_tokens, profile) / 2**20


@dataclass
class SweepRow:
    theta: float
    mean: float
    std: float
    min: int
    max: int
    per_image: list[int]

    def __post_init__(self):
        if any(c < 1 for c in self.per_image):
            raise ParameterError("every image must yield at least one token")
        if not self.min <= self.mean <= self.max:
            raise ParameterError("mean outside [min, max]")


@dataclass
class SweepReport:
    rows: list[SweepRow]
    image_ids: list[str]
    std_kind: str = "population"


def _counts_for_theta(
    corpus: list[PatchSet],
    theta: float,
    cache: dict[tuple[str, float], Clustering] | None,
) -> list[int]:
    cfg = GranularityConfig(theta)
    counts = []
    for ps in corpus:
        key = (ps.id, theta)
        if cache is not None and key in cache:
            cl = cache[key]
        else:
            cl = cluster(ps, cfg)
            if cache is not None:
                cache[key] = cl
        counts.append(int(cl.k_clusters))
    return counts


def token_count_stats(
    corpus: list[PatchSet],
    theta: float,
    cache: dict[tuple[str, float], Clustering] | None = None,
) -> tuple[float, float]:
    """(mean, population std) of per-image cluster counts at one threshold."""
    if not corpus:
        raise ParameterError("empty corpus")
    counts = np.asarray(_counts_for_theta(corpus, theta, cache), dtype=np.float64)
    return float(counts.mean()), float(counts.std())


def theta_sweep(
    corpus: list[PatchSet],
    thetas: list[float],
    cache: dict[tuple[str, float], Clustering] | None = None,
) -> SweepReport:
    """Token-count statistics per threshold; thetas are deduplicated and
    reported in ascending order."""
    if not corpus:
        raise ParameterError("empty corpus")
    if not thetas:
        raise ParameterError("empty theta list")
    rows = []
    for theta in sorted(set(float(t) for t in thetas)):
        counts = _counts_for_theta(corpus, theta, cache)
        arr = np.asarray(counts, dtype=np.float64)
        rows.append(
            SweepRow(
                theta=theta,
                mean=float(arr.mean()),
                std=float(arr.std()),
                min=int(arr.min()),
                max=int(arr.max()),
                per_image=counts,
            )
        )
    return SweepReport(rows, [ps.id for ps in corpus])


def sweep_csv(report: SweepReport) -> str:
    lines = ["theta,mean,std,min,max"]
    for row in report.rows:
        lines.append(f"{row.theta!r},{row.mean!r},{row.std!r},{row.min},{row.max}")
    return "\n".join(lines) + "\n"


def sweep_json_dict(report: SweepReport) -> dict:
    return {
        "std_kind": report.std_kind,
        "image_ids": report.image_ids,
        "rows": [
            {
                "theta": row.theta,
                "mean": row.mean,
                "std": row.std,
                "min": row.min,
                "max": row.max,
                "per_image": row.per_image,
            }
            for row in report.rows
        ],
    }


def token_similarity_report(tokens: TokenSequence) -> float | None:
    """Mean pairwise cosine similarity across token rows; None when K < 2."""
    if tokens.k < 2:
        return None
    return mean_pairwise_similarity(tokens.tokens)
