"""Desk-scale surrogate training for the token former.

The real system trains end to end against a language-model objective; here
a small regression surrogate stands in so that gradient flow through the
cluster-attention layer can be demonstrated and tested in isolation.

Two target modes exist. "cluster-mean" regresses each token onto a frozen
random linear map of its cluster's mean patch embedding. "teacher-pooling"
matches the tokens of a frozen, randomly initialized twin of the student.
Either way the target is fixed throughout a run, the optimizer is plain
gradient descent, and everything is deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .clustering import Clustering, GranularityConfig, cluster
from .embedding_io import PatchSet
from .errors import DivergenceError, ParameterError, ShapeError
from .token_former import (
    TokenFormerParams,
    TokenSequence,
    backward,
    form_tokens,
    init_params,
    params_to_vector,
    vector_to_params,
)

TARGET_MODES = ("cluster-mean", "teacher-pooling")

# Fixed seeds so the regression targets are stable across runs and processes.
_TARGET_MAP_SEED = 0x7D1F5EED
_TEACHER_SEED_OFFSET = 0x5EED0FF5E7


@dataclass
class TrainConfig:
    """Gradient-descent settings; ``theta_schedule`` is a fixed float or a
    tuple sampled uniformly per image."""

    steps: int
    learning_rate: float
    batch_size: int
    theta_schedule: float | tuple[float, ...]
    seed: int = 0
    target_mode: str = "cluster-mean"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ParameterError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if isinstance(self.theta_schedule, (int, float)):
            self.theta_schedule = float(self.theta_schedule)
            thetas = (self.theta_schedule,)
        else:
            self.theta_schedule = tuple(float(t) for t in self.theta_schedule)
            thetas = self.theta_schedule
            if not thetas:
                raise ParameterError("theta set must be nonempty")
        for t in thetas:
            if not -1.0 < t < 1.0:
                raise ParameterError(f"theta {t} outside (-1, 1)")
        if self.target_mode not in TARGET_MODES:
            raise ParameterError(f"unknown target mode {self.target_mode!r}")


@lru_cache(maxsize=None)
def _target_map(d: int, d_out: int) -> np.ndarray:
    rng = np.random.default_rng(_TARGET_MAP_SEED)
    return rng.normal(0.0, 1.0 / np.sqrt(d), (d_out, d))


def cluster_mean_targets(ps: PatchSet, cl: Clustering, d_out: int) -> np.ndarray:
    """Frozen random linear map applied to each cluster's mean embedding."""
    means = np.stack([ps.data[cl.members(k)].mean(axis=0) for k in range(cl.k_clusters)])
    return means @ _target_map(ps.dim, d_out).T


def surrogate_loss(tokens: TokenSequence, ps: PatchSet, cl: Clustering) -> float:
    """Mean squared error between tokens and the cluster-mean targets."""
    loss, _ = _loss_and_token_grad(tokens, cluster_mean_targets(ps, cl, tokens.d_out))
    return loss


def _loss_and_token_grad(tokens: TokenSequence, targets: np.ndarray):
    if targets.shape != tokens.tokens.shape:
        raise ShapeError(f"target shape {targets.shape} != token shape {tokens.tokens.shape}")
    diff = tokens.tokens - targets
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def _make_teacher(cfg: TrainConfig, params: TokenFormerParams) -> TokenFormerParams:
    return init_params(
        params.d,
        params.d_att,
        params.d_hidden,
        params.d_out,
        n_max=params.n_max,
        seed=(cfg.seed + _TEACHER_SEED_OFFSET) % 2**63,
        scale_policy=params.scale_policy,
    )


class _TargetSource:
    """Per-(image, theta) regression targets, frozen for a whole run."""

    def __init__(self, mode: str, teacher: TokenFormerParams | None, d_out: int):
        self.mode = mode
        self.teacher = teacher
        self.d_out = d_out

    def targets(self, ps: PatchSet, cl: Clustering) -> np.ndarray:
        if self.mode == "cluster-mean":
            return cluster_mean_targets(ps, cl, self.d_out)
        return form_tokens(ps, cl, self.teacher).tokens


def _draw_theta(cfg: TrainConfig, rng: np.random.Generator) -> float:
    if isinstance(cfg.theta_schedule, float):
        return cfg.theta_schedule
    return cfg.theta_schedule[int(rng.integers(len(cfg.theta_schedule)))]


def fit(
    corpus: list[PatchSet],
    cfg: TrainConfig,
    params: TokenFormerParams,
) -> tuple[TokenFormerParams, np.ndarray]:
    """Plain gradient descent on the surrogate objective.

    Batches cycle through the corpus round-robin; the threshold is drawn
    per image per step when the schedule is a set. Clusterings depend only
    on the frozen inputs, so they are cached per (image id, theta). The
    recorded trace holds the mean batch loss before each update. Raises
    DivergenceError (with the step index) if the loss goes non-finite.
    """
    if not corpus:
        raise ParameterError("empty corpus")
    rng = np.random.default_rng(cfg.seed)
    params = vector_to_params(params_to_vector(params), params)
    source = _TargetSource(
        cfg.target_mode,
        _make_teacher(cfg, params) if cfg.target_mode == "teacher-pooling" else None,
        params.d_out,
    )
    cluster_cache: dict[tuple[str, float], Clustering] = {}
    trace = np.empty(cfg.steps)
    n = len(corpus)
    for step in range(cfg.steps):
        grad_sum = np.zeros(params_to_vector(params).size)
        loss_sum = 0.0
        for j in range(cfg.batch_size):
            ps = corpus[(step * cfg.batch_size + j) % n]
            theta = _draw_theta(cfg, rng)
            key = (ps.id, theta)
            if key not in cluster_cache:
                cluster_cache[key] = cluster(ps, GranularityConfig(theta))
            cl = cluster_cache[key]
            tokens = form_tokens(ps, cl, params)
            loss, d_tokens = _loss_and_token_grad(tokens, source.targets(ps, cl))
            grads = backward(ps, cl, params, d_tokens)
            grad_sum += params_to_vector(grads)
            loss_sum += loss
        mean_loss = loss_sum / cfg.batch_size
        if not np.isfinite(mean_loss):
            raise DivergenceError(step)
        trace[step] = mean_loss
        updated = params_to_vector(params) - cfg.learning_rate * (grad_sum / cfg.batch_size)
        params = vector_to_params(updated, params)
    return params, trace


def corpus_loss(
    corpus: list[PatchSet],
    params: TokenFormerParams,
    theta: float,
    target_mode: str = "cluster-mean",
    teacher: TokenFormerParams | None = None,
) -> float:
    """Mean surrogate loss over a corpus at one fixed threshold."""
    if not corpus:
        raise ParameterError("empty corpus")
    if target_mode not in TARGET_MODES:
        raise ParameterError(f"unknown target mode {target_mode!r}")
    if target_mode == "teacher-pooling" and teacher is None:
        raise ParameterError("teacher-pooling evaluation needs the teacher params")
    source = _TargetSource(target_mode, teacher, params.d_out)
    cfg = GranularityConfig(theta)
    total = 0.0
    for ps in corpus:
        cl = cluster(ps, cfg)
        tokens = form_tokens(ps, cl, params)
        loss, _ = _loss_and_token_grad(tokens, source.targets(ps, cl))
        total += loss
    return total / len(corpus)
