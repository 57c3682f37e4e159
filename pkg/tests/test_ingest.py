import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xalign.errors import FormatError, InsufficientDataError, NumericError, ShapeError, ValidationError
from xalign.ingest import (
    VARIABLES,
    PhysicalRecord,
    join_dataset,
    load_dataset,
    load_embeddings,
    load_physicals,
    load_splits,
    make_splits,
    read_xaln,
    save_dataset,
    split_counts,
    synth_dataset,
    synth_driver,
    write_embedding_csv,
    write_physicals,
    write_xaln,
)
from xalign.numcore import make_rng


class TestEmbeddingFiles:
    def test_binary_round_trip_preserves_order(self, tmp_path):
        m = np.arange(12, dtype=np.float32).reshape(3, 4)
        write_xaln(tmp_path / "e.xaln", m, ["a", "b", "c"])
        ids, out = load_embeddings(tmp_path / "e.xaln", 4)
        assert ids == ["a", "b", "c"]
        np.testing.assert_array_equal(out, m)

    def test_header_layout(self, tmp_path):
        write_xaln(tmp_path / "e.xaln", np.ones((2, 3)), ["a", "b"])
        raw = (tmp_path / "e.xaln").read_bytes()
        assert raw[:4] == b"XALN"
        assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
        assert len(raw) == 16 + 2 * 3 * 4
        assert (tmp_path / "e.xaln.ids.csv").read_text().splitlines()[0] == "row,source_id"

    def test_round_trip_1000_random_vectors_bitwise(self, tmp_path):
        m = make_rng(0).standard_normal((1000, 16)).astype(np.float32)
        ids = [f"s{i}" for i in range(1000)]
        write_xaln(tmp_path / "r.xaln", m, ids)
        _, out = load_embeddings(tmp_path / "r.xaln")
        assert out.astype(np.float32).tobytes() == m.tobytes()

    def test_float64_version_is_lossless(self, tmp_path):
        m = make_rng(1).standard_normal((5, 7))
        write_xaln(tmp_path / "d.xaln", m, version=2)
        assert read_xaln(tmp_path / "d.xaln").tobytes() == m.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=40))
    def test_round_trip_arbitrary_finite_floats(self, tmp_path_factory, values):
        path = tmp_path_factory.mktemp("rt") / "v.xaln"
        m = np.array(values, dtype=np.float32)[None, :]
        write_xaln(path, m, ["x"])
        assert read_xaln(path).tobytes() == m.tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.xaln").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(FormatError, match="magic"):
            read_xaln(tmp_path / "bad.xaln")

    def test_bad_version(self, tmp_path):
        (tmp_path / "v.xaln").write_bytes(b"XALN" + struct.pack("<III", 9, 0, 0))
        with pytest.raises(FormatError, match="version"):
            read_xaln(tmp_path / "v.xaln")

    def test_truncated_payload(self, tmp_path):
        write_xaln(tmp_path / "t.xaln", np.ones((2, 2)))
        raw = (tmp_path / "t.xaln").read_bytes()
        (tmp_path / "t.xaln").write_bytes(raw[:-1])
        with pytest.raises(FormatError):
            read_xaln(tmp_path / "t.xaln")

    def test_dimension_mismatch(self, tmp_path):
        write_xaln(tmp_path / "e.xaln", np.ones((2, 3)), ["a", "b"])
        with pytest.raises(ShapeError):
            load_embeddings(tmp_path / "e.xaln", 4)

    def test_nan_row_is_named(self, tmp_path):
        m = np.ones((3, 2))
        m[2, 1] = np.nan
        write_xaln(tmp_path / "n.xaln", m, ["a", "b", "c"])
        with pytest.raises(NumericError, match="row 2"):
            load_embeddings(tmp_path / "n.xaln")

    def test_csv_short_row_cites_line(self, tmp_path):
        dim = 4608
        path = tmp_path / "t.csv"
        header = ",".join(["source_id", *(f"v{i}" for i in range(dim))])
        good = ",".join(["a", *["0.1"] * dim])
        short = ",".join(["b", *["0.1"] * (dim - 1)])
        path.write_text("\n".join([header, good, short]) + "\n")
        with pytest.raises(ShapeError, match=":3:"):
            load_embeddings(path, dim)

    def test_csv_round_trip(self, tmp_path):
        m = make_rng(2).standard_normal((4, 3))
        write_embedding_csv(tmp_path / "e.csv", list("abcd"), m)
        ids, out = load_embeddings(tmp_path / "e.csv", 3)
        assert ids == list("abcd")
        np.testing.assert_array_equal(out, m)

    def test_duplicate_ids_rejected(self, tmp_path):
        write_xaln(tmp_path / "e.xaln", np.ones((2, 2)), ["a", "a"])
        with pytest.raises(ValidationError):
            load_embeddings(tmp_path / "e.xaln")


class TestSplits:
    def test_exact_fractions(self):
        assert split_counts(100) == (69, 1, 15, 15)

    def test_full_catalog_scale_counts(self):
        # floor gives 7898 + 114 + 1717 + 1717 = 11446; the remainder goes to train
        assert split_counts(11447) == (7899, 114, 1717, 1717)

    def test_assignment_counts_and_determinism(self):
        ids = [f"s{i}" for i in range(100)]
        a = make_splits(ids, seed=4)
        assert a == make_splits(ids, seed=4)
        assert a != make_splits(ids, seed=5)
        labels = list(a.values())
        assert [labels.count(s) for s in ("train", "calibration", "validation", "test")] == [69, 1, 15, 15]

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            make_splits(["a", "b", "c"], 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(4, 3000), st.integers(0, 2**32))
    def test_partition_property(self, n, seed):
        ids = [str(i) for i in range(n)]
        s = make_splits(ids, seed)
        assert set(s) == set(ids)
        counts = split_counts(n)
        assert sum(counts) == n
        labels = list(s.values())
        for label, c in zip(("train", "calibration", "validation", "test"), counts):
            assert labels.count(label) == c

    def test_csv_round_trip(self, tmp_path):
        from xalign.ingest import write_splits

        s = make_splits([f"s{i}" for i in range(10)], 0)
        write_splits(tmp_path / "s.csv", s)
        assert load_splits(tmp_path / "s.csv") == s


class TestJoin:
    def _pairs(self, ids):
        m = np.ones((len(ids), 2))
        return (ids, m), (ids, m)

    def test_missing_physicals_reported(self):
        spec, text = self._pairs(["a", "b"])
        store = join_dataset(spec, text, [PhysicalRecord("a", {"hard_hs": 1.0})], {"a": "train", "b": "test"})
        assert store.missing_physicals == ("b",)

    def test_unknown_physical_id(self):
        spec, text = self._pairs(["a"])
        with pytest.raises(ValidationError):
            join_dataset(spec, text, [PhysicalRecord("z", {})], {"a": "train"})

    def test_empty(self):
        with pytest.raises(ValidationError):
            join_dataset(([], np.zeros((0, 2))), ([], np.zeros((0, 2))), [], {})

    def test_duplicates(self):
        with pytest.raises(ValidationError):
            join_dataset((["a", "a"], np.ones((2, 2))), (["a", "a"], np.ones((2, 2))), [], {"a": "train"})

    def test_split_missing_id(self):
        spec, text = self._pairs(["a", "b"])
        with pytest.raises(ValidationError):
            join_dataset(spec, text, [], {"a": "train"})

    def test_text_rows_realigned_to_spectral_order(self):
        store = join_dataset((["a", "b"], np.array([[1.0], [2.0]])), (["b", "a"], np.array([[20.0], [10.0]])),
                             [], {"a": "train", "b": "test"})
        np.testing.assert_array_equal(store.text[:, 0], [10.0, 20.0])

    def test_store_is_read_only(self, small_store):
        with pytest.raises(ValueError):
            small_store.spectral[0, 0] = 1.0


class TestPhysicals:
    def test_missing_cells_round_trip(self, tmp_path):
        recs = [PhysicalRecord("a", {v: (None if i % 3 == 0 else float(i)) for i, v in enumerate(VARIABLES)})]
        write_physicals(tmp_path / "p.csv", recs)
        header = (tmp_path / "p.csv").read_text().splitlines()[0]
        assert header == "source_id," + ",".join(VARIABLES)
        back = load_physicals(tmp_path / "p.csv")
        assert back == recs

    def test_unknown_variable(self, tmp_path):
        (tmp_path / "p.csv").write_text("source_id,mass\na,1\n")
        with pytest.raises(FormatError):
            load_physicals(tmp_path / "p.csv")


class TestSynth:
    def test_noise_free_embeddings_are_linear_in_latent(self):
        store = synth_dataset(64, latent_dim=4, noise_sigma=0.0, seed=2, text_dim=128)
        z = make_rng(2, 1).standard_normal((64, 4))
        for emb in (store.spectral, store.text):
            coef, *_ = np.linalg.lstsq(z, emb, rcond=None)
            assert np.abs(z @ coef - emb).max() < 1e-10

    def test_deterministic(self):
        a = synth_dataset(32, 4, 0.2, seed=9, text_dim=64)
        b = synth_dataset(32, 4, 0.2, seed=9, text_dim=64)
        assert a.spectral.tobytes() == b.spectral.tobytes()
        assert a.text.tobytes() == b.text.tobytes()
        assert a.physicals == b.physicals and a.splits == b.splits

    def test_variables_track_their_latent_coordinate(self):
        n, k = 2000, 8
        store = synth_dataset(n, k, noise_sigma=0.1, seed=4, text_dim=64)
        z = make_rng(4, 1).standard_normal((n, k))
        P = store.physical_matrix()
        for j, name in enumerate(VARIABLES):
            d = synth_driver(name, k)
            if d is not None:
                assert np.corrcoef(P[:, j], z[:, d])[0, 1] > 0.95, name

    def test_noise_free_oracle_map_matches_every_pair(self):
        store = synth_dataset(128, 8, 0.0, seed=6, text_dim=256)
        # least-squares map from spectral space to text space is exact at zero noise
        W, *_ = np.linalg.lstsq(store.spectral, store.text, rcond=None)
        mapped = store.spectral @ W
        d = ((mapped[:, None, :] - store.text[None, :, :]) ** 2).sum(-1)
        assert np.all(d.argmin(axis=1) == np.arange(128))

    def test_missing_rate(self):
        store = synth_dataset(200, 4, 0.1, seed=1, text_dim=16, missing_rate=0.3)
        frac = np.isnan(store.physical_matrix()).mean()
        assert 0.2 < frac < 0.4

    def test_parameter_validation(self):
        with pytest.raises(InsufficientDataError):
            synth_dataset(4)
        with pytest.raises(ValueError):
            synth_dataset(16, latent_dim=65)


def test_dataset_directory_round_trip(tmp_path, small_store):
    save_dataset(small_store, tmp_path)
    back = load_dataset(tmp_path, 16, 32)
    assert back.ids == small_store.ids
    assert back.spectral.tobytes() == small_store.spectral.tobytes()
    assert back.text.tobytes() == small_store.text.tobytes()
    assert back.splits == small_store.splits
    assert back.physicals == small_store.physicals
