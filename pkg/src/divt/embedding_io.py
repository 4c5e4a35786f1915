"""Patch-embedding containers, their on-disk formats, and synthetic corpora.

Embeddings are always ingested from files, never computed here; any vision
encoder can dump its per-patch features into the formats below and the rest
of the pipeline is agnostic to where they came from.

Patch-set file (extension ``.divt``), little-endian throughout::

    bytes  0-3   magic  0x44 0x49 0x56 0x54 ("DIVT")
    bytes  4-7   version   u32, currently 1
    bytes  8-11  dtype     u32, 0 = f32, 1 = f64
    bytes 12-15  n_patches u32 (N)
    bytes 16-19  dim       u32 (d)
    bytes 20-23  grid_h    u32
    bytes 24-27  grid_w    u32
    bytes 28-    N*d scalars, row-major; no padding, no trailing bytes

Layer-wise file (extension ``.divl``) stacks one patch grid per encoder
layer::

    magic "DIVL", version u32 = 1, dtype u32, n_layers u32 (L),
    n_patches u32, dim u32, grid_h u32, grid_w u32,
    then L contiguous N*d blocks.

In-memory arithmetic is float64 regardless of the file dtype; the stored
dtype is remembered so that save -> load round trips are bit-exact.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

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

MAGIC_PATCH_SET = b"DIVT"
MAGIC_LAYERWISE = b"DIVL"
FORMAT_VERSION = 1

_PATCH_HEADER = struct.Struct("<4sIIIIII")
_LAYER_HEADER = struct.Struct("<4sIIIIIII")

_DTYPE_CODE = {"f32": 0, "f64": 1}
_CODE_DTYPE = {0: "f32", 1: "f64"}
_NUMPY_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class PatchSet:
    """One image's patch embeddings plus grid geometry.

    ``data`` is an (N, d) float64 matrix, row i holding the embedding of
    patch i in row-major grid order. ``store_dtype`` is the on-disk scalar
    width; data must be exactly representable in it so round trips stay
    bit-exact.
    """

    data: np.ndarray
    grid_h: int
    grid_w: int
    id: str = ""
    store_dtype: str = "f64"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"patch data must be 2-D, got shape {self.data.shape}")
        n, d = self.data.shape
        if n < 1 or d < 1:
            raise ParameterError(f"need N >= 1 and d >= 1, got N={n}, d={d}")
        if self.grid_h < 1 or self.grid_w < 1 or self.grid_h * self.grid_w != n:
            raise ParameterError(
                f"grid {self.grid_h}x{self.grid_w} does not cover {n} patches"
            )
        if self.store_dtype not in _DTYPE_CODE:
            raise ParameterError(f"unknown store dtype {self.store_dtype!r}")
        if not np.all(np.isfinite(self.data)):
            r, c = np.argwhere(~np.isfinite(self.data))[0]
            raise NonFiniteValueError(f"non-finite value at row {r}, col {c}")
        if self.store_dtype == "f32":
            narrowed = self.data.astype(np.float32).astype(np.float64)
            if not np.array_equal(narrowed, self.data):
                raise ParameterError(
                    "data is not exactly representable in f32; "
                    "use store_dtype='f64' or round the data first"
                )

    @property
    def n_patches(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class LayerwiseEmbeddings:
    """Per-layer patch sets for one image, all sharing N, d and grid."""

    layers: list[PatchSet]
    id: str = ""

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("need at least one layer")
        first = self.layers[0]
        for i, layer in enumerate(self.layers):
            if (
                layer.n_patches != first.n_patches
                or layer.dim != first.dim
                or layer.grid_h != first.grid_h
                or layer.grid_w != first.grid_w
                or layer.store_dtype != first.store_dtype
            ):
                raise ShapeError(f"layer {i} geometry differs from layer 0")

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass
class SynthSpec:
    """Recipe for a synthetic patch set with known cluster structure.

    ``max_anchor_sim``, when set, rejection-samples the anchor directions
    until every pair has cosine similarity at most that bound, which makes
    the ground-truth clusters recoverable at any threshold above it.
    """

    n_true_clusters: int
    n_patches: int
    dim: int
    within_cluster_noise: float
    seed: int
    max_anchor_sim: float | None = None

    def __post_init__(self):
        if self.n_true_clusters < 1:
            raise ParameterError("need at least one cluster")
        if self.n_true_clusters > self.n_patches:
            raise ParameterError("more clusters than patches")
        if self.dim < 1:
            raise ParameterError("dim must be positive")
        if self.within_cluster_noise < 0:
            raise ParameterError("noise std must be nonnegative")
        if self.max_anchor_sim is not None and not -1.0 < self.max_anchor_sim < 1.0:
            raise ParameterError("max_anchor_sim must lie in (-1, 1)")


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename in the same dir."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".divt-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_payload(mat: np.ndarray, path) -> None:
    if not np.all(np.isfinite(mat)):
        r, c = np.argwhere(~np.isfinite(mat))[0]
        raise NonFiniteValueError(f"{path}: non-finite value at row {r}, col {c}")


def _parse_header(blob: bytes, header: struct.Struct, magic: bytes, path):
    if len(blob) < header.size:
        raise TruncatedPayloadError(f"{path}: shorter than the {header.size}-byte header")
    fields = header.unpack_from(blob)
    if fields[0] != magic:
        raise BadMagicError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported version {fields[1]}")
    if fields[2] not in _CODE_DTYPE:
        raise BadDtypeError(f"{path}: unknown dtype code {fields[2]}")
    return fields


def load_patch_set(path) -> PatchSet:
    """Load one ``.divt`` patch-set file, validating the format exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    _, _, dtype_code, n, d, grid_h, grid_w = _parse_header(
        blob, _PATCH_HEADER, MAGIC_PATCH_SET, path
    )
    if n < 1 or d < 1 or grid_h * grid_w != n:
        raise HeaderError(f"{path}: inconsistent dims N={n} d={d} grid={grid_h}x{grid_w}")
    store_dtype = _CODE_DTYPE[dtype_code]
    itemsize = _NUMPY_DTYPE[store_dtype].itemsize
    expected = _PATCH_HEADER.size + n * d * itemsize
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise TrailingDataError(f"{path}: {len(blob) - expected} trailing bytes")
    raw = np.frombuffer(blob, dtype=_NUMPY_DTYPE[store_dtype], offset=_PATCH_HEADER.size)
    mat = raw.astype(np.float64).reshape(n, d)
    _check_payload(mat, path)
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return PatchSet(mat, grid_h, grid_w, id=stem, store_dtype=store_dtype)


def save_patch_set(ps: PatchSet, path) -> None:
    """Write ``ps`` in the patch-set format; load_patch_set inverts it bit-exactly."""
    header = _PATCH_HEADER.pack(
        MAGIC_PATCH_SET,
        FORMAT_VERSION,
        _DTYPE_CODE[ps.store_dtype],
        ps.n_patches,
        ps.dim,
        ps.grid_h,
        ps.grid_w,
    )
    payload = np.ascontiguousarray(ps.data.astype(_NUMPY_DTYPE[ps.store_dtype])).tobytes()
    atomic_write_bytes(path, header + payload)


def load_layerwise(path) -> LayerwiseEmbeddings:
    """Load one ``.divl`` layer-wise embedding file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    _, _, dtype_code, n_layers, n, d, grid_h, grid_w = _parse_header(
        blob, _LAYER_HEADER, MAGIC_LAYERWISE, path
    )
    if n_layers < 1 or n < 1 or d < 1 or grid_h * grid_w != n:
        raise HeaderError(
            f"{path}: inconsistent dims L={n_layers} N={n} d={d} grid={grid_h}x{grid_w}"
        )
    store_dtype = _CODE_DTYPE[dtype_code]
    itemsize = _NUMPY_DTYPE[store_dtype].itemsize
    expected = _LAYER_HEADER.size + n_layers * n * d * itemsize
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise TrailingDataError(f"{path}: {len(blob) - expected} trailing bytes")
    raw = np.frombuffer(blob, dtype=_NUMPY_DTYPE[store_dtype], offset=_LAYER_HEADER.size)
    cube = raw.astype(np.float64).reshape(n_layers, n, d)
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    layers = []
    for idx in range(n_layers):
        _check_payload(cube[idx], path)
        layers.append(
            PatchSet(cube[idx], grid_h, grid_w, id=f"{stem}:{idx}", store_dtype=store_dtype)
        )
    return LayerwiseEmbeddings(layers, id=stem)


def save_layerwise(le: LayerwiseEmbeddings, path) -> None:
    first = le.layers[0]
    header = _LAYER_HEADER.pack(
        MAGIC_LAYERWISE,
        FORMAT_VERSION,
        _DTYPE_CODE[first.store_dtype],
        le.n_layers,
        first.n_patches,
        first.dim,
        first.grid_h,
        first.grid_w,
    )
    np_dtype = _NUMPY_DTYPE[first.store_dtype]
    blocks = b"".join(
        np.ascontiguousarray(layer.data.astype(np_dtype)).tobytes() for layer in le.layers
    )
    atomic_write_bytes(path, header + blocks)


def near_square_grid(n: int) -> tuple[int, int]:
    """Largest grid_h <= sqrt(n) that divides n, so grid_h * grid_w = n."""
    h = math.isqrt(n)
    while n % h:
        h -= 1
    return h, n // h


def _unit_anchors(rng: np.random.Generator, k: int, dim: int, max_sim: float | None):
    anchors = np.empty((k, dim))
    for i in range(k):
        for _ in range(100_000):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if max_sim is None or i == 0 or float(np.max(anchors[:i] @ v)) <= max_sim:
                anchors[i] = v
                break
        else:
            raise ParameterError(
                f"could not place {k} anchors with pairwise similarity <= {max_sim} in dim {dim}"
            )
    return anchors


def synth_clustered(spec: SynthSpec, id: str = "") -> tuple[PatchSet, np.ndarray]:
    """Generate a unit-norm patch set with known clusters.

    Draws ``n_true_clusters`` random unit anchor directions, assigns patches
    to them round-robin, adds isotropic Gaussian noise of the requested std,
    and re-normalizes each row to unit norm (so cosine similarity equals the
    dot product). Returns the patch set together with the ground-truth
    cluster label of every patch. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    anchors = _unit_anchors(rng, spec.n_true_clusters, spec.dim, spec.max_anchor_sim)
    labels = np.arange(spec.n_patches) % spec.n_true_clusters
    rows = anchors[labels]
    if spec.within_cluster_noise > 0:
        rows = rows + rng.normal(0.0, spec.within_cluster_noise, rows.shape)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    grid_h, grid_w = near_square_grid(spec.n_patches)
    name = id or f"synth-{spec.seed}"
    return PatchSet(rows, grid_h, grid_w, id=name, store_dtype="f64"), labels


def synth_corpus(
    n_images: int,
    n_patches: int,
    dim: int,
    seed: int,
    cluster_range: tuple[int, int] = (2, 8),
    noise_range: tuple[float, float] = (0.1, 0.35),
    max_anchor_sim: float | None = None,
) -> list[PatchSet]:
    """A list of synthetic patch sets with per-image cluster count and noise."""
    if n_images < 1:
        raise ParameterError("need at least one image")
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n_images):
        spec = SynthSpec(
            n_true_clusters=int(rng.integers(cluster_range[0], cluster_range[1] + 1)),
            n_patches=n_patches,
            dim=dim,
            within_cluster_noise=float(rng.uniform(*noise_range)),
            seed=int(rng.integers(0, 2**63 - 1)),
            max_anchor_sim=max_anchor_sim,
        )
        ps, _ = synth_clustered(spec, id=f"synth-{seed}-{i:04d}")
        corpus.append(ps)
    return corpus


def synth_layerwise(
    n_layers: int, n_patches: int, dim: int, seed: int, id: str = ""
) -> LayerwiseEmbeddings:
    """Layer stack whose rows blend per-patch noise into one shared direction.

    Layer l mixes weight w = l / (L - 1) of a common anchor with (1 - w) of
    per-patch noise, so mean pairwise similarity rises monotonically with
    depth: layer 0 is pure noise, the last layer is the anchor repeated.
    """
    if n_layers < 2:
        raise ParameterError("need at least two layers for a profile")
    rng = np.random.default_rng(seed)
    anchor = rng.normal(size=dim)
    anchor /= np.linalg.norm(anchor)
    noise = rng.normal(size=(n_patches, dim))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    grid_h, grid_w = near_square_grid(n_patches)
    layers = []
    for layer_idx in range(n_layers):
        w = layer_idx / (n_layers - 1)
        rows = w * anchor + (1.0 - w) * noise
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        layers.append(
            PatchSet(rows, grid_h, grid_w, id=f"{id or 'synthlw'}:{layer_idx}")
        )
    return LayerwiseEmbeddings(layers, id=id or f"synthlw-{seed}")
