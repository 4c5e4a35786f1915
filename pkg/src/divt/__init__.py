"""Adaptive visual tokenization of patch embeddings.

Patch embeddings are clustered by a similarity threshold into a variable
number of semantically coherent groups, and each group is pooled into one
token by centroid-query cross-attention restricted to its own cluster.
The threshold is the single knob trading token budget against granularity,
and it can be changed at inference time without retraining.
"""

from .embedding_io import (
    LayerwiseEmbeddings,
    PatchSet,
    SynthSpec,
    load_layerwise,
    load_patch_set,
    save_layerwise,
    save_patch_set,
    synth_clustered,
    synth_corpus,
    synth_layerwise,
)
from .similarity import (
    SimMatrix,
    corpus_similarity_profile,
    cosine_matrix,
    layerwise_similarity_profile,
    mean_pairwise_similarity,
    neighbor_degrees,
)
from .clustering import (
    Clustering,
    GranularityConfig,
    cluster,
    order_centroids_spatial,
    refine_assignments,
    render_cluster_ppm,
    select_centroids,
)
from .token_former import (
    TokenFormerParams,
    TokenSequence,
    attention_weights,
    backward,
    form_tokens,
    init_params,
    load_params,
    save_params,
)
from .training import TrainConfig, corpus_loss, fit, surrogate_loss
from .metrics import (
    LLAMA_7B,
    ModelProfile,
    SweepReport,
    kv_cache_bytes,
    theta_sweep,
    token_count_stats,
    token_similarity_report,
)

__version__ = "0.1.0"

__all__ = [
    "LayerwiseEmbeddings",
    "PatchSet",
    "SynthSpec",
    "load_layerwise",
    "load_patch_set",
    "save_layerwise",
    "save_patch_set",
    "synth_clustered",
    "synth_corpus",
    "synth_layerwise",
    "SimMatrix",
    "corpus_similarity_profile",
    "cosine_matrix",
    "layerwise_similarity_profile",
    "mean_pairwise_similarity",
    "neighbor_degrees",
    "Clustering",
    "GranularityConfig",
    "cluster",
    "order_centroids_spatial",
    "refine_assignments",
    "render_cluster_ppm",
    "select_centroids",
    "TokenFormerParams",
    "TokenSequence",
    "attention_weights",
    "backward",
    "form_tokens",
    "init_params",
    "load_params",
    "save_params",
    "TrainConfig",
    "corpus_loss",
    "fit",
    "surrogate_loss",
    "LLAMA_7B",
    "ModelProfile",
    "SweepReport",
    "kv_cache_bytes",
    "theta_sweep",
    "token_count_stats",
    "token_similarity_report",
    "__version__",
]
