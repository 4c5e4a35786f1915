import struct

import numpy as np
import pytest

from divt.embedding_io import (
    LayerwiseEmbeddings,
    PatchSet,
    SynthSpec,
    load_layerwise,
    load_patch_set,
    near_square_grid,
    save_layerwise,
    save_patch_set,
    synth_clustered,
    synth_corpus,
    synth_layerwise,
)
from divt.errors import (
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

HEADER = struct.Struct("<4sIIIIII")


def _write_raw(path, magic=b"DIVT", version=1, dtype=0, n=4, d=2, gh=2, gw=2, payload=None):
    if payload is None:
        payload = np.arange(n * d, dtype="<f4").tobytes()
    path.write_bytes(HEADER.pack(magic, version, dtype, n, d, gh, gw) + payload)


class TestPatchSetFormat:
    def test_small_header_roundtrip(self, tmp_path):
        # N=4, d=2, 2x2 grid, eight f32 values
        path = tmp_path / "a.divt"
        _write_raw(path)
        ps = load_patch_set(path)
        assert ps.n_patches == 4 and ps.dim == 2
        assert (ps.grid_h, ps.grid_w) == (2, 2)
        assert ps.store_dtype == "f32"
        np.testing.assert_array_equal(ps.data, np.arange(8.0).reshape(4, 2))

    @pytest.mark.parametrize("store_dtype", ["f32", "f64"])
    def test_save_load_bit_exact(self, tmp_path, store_dtype):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(6, 5))
        if store_dtype == "f32":
            data = data.astype(np.float32).astype(np.float64)
        ps = PatchSet(data, 2, 3, id="x", store_dtype=store_dtype)
        path = tmp_path / "x.divt"
        save_patch_set(ps, path)
        loaded = load_patch_set(path)
        assert loaded.store_dtype == store_dtype
        assert loaded.data.tobytes() == ps.data.tobytes()
        # and the file itself round trips byte-for-byte
        save_patch_set(loaded, tmp_path / "y.divt")
        assert (tmp_path / "y.divt").read_bytes() == path.read_bytes()

    def test_declared_file_size(self, tmp_path):
        data = np.zeros((576, 1024), dtype=np.float32).astype(np.float64)
        ps = PatchSet(data, 24, 24, store_dtype="f32")
        path = tmp_path / "big.divt"
        save_patch_set(ps, path)
        assert path.stat().st_size == HEADER.size + 576 * 1024 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, magic=b"XXXX")
        with pytest.raises(BadMagicError):
            load_patch_set(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, version=9)
        with pytest.raises(BadVersionError):
            load_patch_set(path)

    def test_bad_dtype_code(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, dtype=7)
        with pytest.raises(BadDtypeError):
            load_patch_set(path)

    def test_inconsistent_grid(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, gh=3, gw=2)
        with pytest.raises(HeaderError):
            load_patch_set(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, payload=np.arange(7, dtype="<f4").tobytes())
        with pytest.raises(TruncatedPayloadError):
            load_patch_set(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "bad.divt"
        _write_raw(path, payload=np.arange(8, dtype="<f4").tobytes() + b"\x00")
        with pytest.raises(TrailingDataError):
            load_patch_set(path)

    def test_nan_payload_names_position(self, tmp_path):
        values = np.arange(8, dtype="<f4")
        values[5] = np.nan  # row 2, col 1
        path = tmp_path / "bad.divt"
        _write_raw(path, payload=values.tobytes())
        with pytest.raises(NonFiniteValueError, match=r"row 2, col 1"):
            load_patch_set(path)

    def test_degenerate_dims_rejected(self):
        with pytest.raises((ParameterError, ShapeError)):
            PatchSet(np.zeros((3, 0)), 1, 3)
        with pytest.raises(ParameterError):
            PatchSet(np.zeros((4, 2)), 2, 3)  # grid does not cover N

    def test_f32_exactness_enforced(self):
        with pytest.raises(ParameterError):
            PatchSet(np.array([[0.1, 0.2]]), 1, 1, store_dtype="f32")


class TestLayerwiseFormat:
    def test_roundtrip(self, tmp_path):
        le = synth_layerwise(4, 9, 6, seed=11)
        path = tmp_path / "l.divl"
        save_layerwise(le, path)
        loaded = load_layerwise(path)
        assert loaded.n_layers == 4
        for a, b in zip(loaded.layers, le.layers):
            assert a.data.tobytes() == b.data.tobytes()
        save_layerwise(loaded, tmp_path / "m.divl")
        assert (tmp_path / "m.divl").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "l.divl"
        path.write_bytes(b"NOPE" + b"\x00" * 28)
        with pytest.raises(BadMagicError):
            load_layerwise(path)

    def test_mismatched_layers_rejected(self):
        a = PatchSet(np.eye(4), 2, 2)
        b = PatchSet(np.eye(3), 1, 3)
        with pytest.raises(ShapeError):
            LayerwiseEmbeddings([a, b])


class TestSynthClustered:
    def test_zero_noise_collapse(self):
        ps, labels = synth_clustered(SynthSpec(3, 9, 8, 0.0, seed=5))
        assert np.unique(ps.data, axis=0).shape[0] == 3
        for lab in range(3):
            group = ps.data[labels == lab]
            assert group.shape[0] == 3
            assert np.all(group == group[0])

    def test_unit_rows(self):
        ps, _ = synth_clustered(SynthSpec(4, 32, 12, 0.2, seed=6))
        np.testing.assert_allclose(np.linalg.norm(ps.data, axis=1), 1.0, atol=1e-6)

    def test_same_seed_identical(self, tmp_path):
        spec = SynthSpec(4, 16, 8, 0.1, seed=123)
        a, la = synth_clustered(spec)
        b, lb = synth_clustered(spec)
        assert a.data.tobytes() == b.data.tobytes()
        assert np.array_equal(la, lb)
        save_patch_set(a, tmp_path / "a.divt")
        save_patch_set(b, tmp_path / "b.divt")
        assert (tmp_path / "a.divt").read_bytes() == (tmp_path / "b.divt").read_bytes()

    def test_round_robin_labels(self):
        _, labels = synth_clustered(SynthSpec(3, 7, 4, 0.0, seed=1))
        assert labels.tolist() == [0, 1, 2, 0, 1, 2, 0]

    def test_anchor_separation_bound(self):
        ps, labels = synth_clustered(SynthSpec(6, 6, 16, 0.0, seed=9, max_anchor_sim=0.3))
        sims = ps.data @ ps.data.T
        off = sims[~np.eye(6, dtype=bool)]
        assert off.max() <= 0.3 + 1e-12

    def test_noisy_recovery_through_pipeline(self):
        # With anchors held below theta, clustering recovers the generator's
        # labels up to relabeling.
        from divt.clustering import GranularityConfig, cluster

        ps, labels = synth_clustered(SynthSpec(4, 64, 16, 0.05, seed=21, max_anchor_sim=0.4))
        cl = cluster(ps, GranularityConfig(0.65))
        assert cl.k_clusters == 4
        mapping = {}
        for got, truth in zip(cl.assignment, labels):
            assert mapping.setdefault(int(got), int(truth)) == int(truth)

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            SynthSpec(5, 4, 8, 0.1, seed=0)  # more clusters than patches
        with pytest.raises(ParameterError):
            SynthSpec(2, 4, 8, -0.1, seed=0)

    def test_corpus_determinism(self):
        a = synth_corpus(5, 16, 8, seed=77)
        b = synth_corpus(5, 16, 8, seed=77)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))
        assert [x.id for x in a] == [y.id for y in a]


def test_near_square_grid():
    assert near_square_grid(9) == (3, 3)
    assert near_square_grid(12) == (3, 4)
    assert near_square_grid(7) == (1, 7)
