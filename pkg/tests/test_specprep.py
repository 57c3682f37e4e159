import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xalign.errors import FormatError, ShapeError
from xalign.numcore import make_rng, mlp_forward
from xalign.specprep import (
    E_MAX,
    E_MIN,
    N_BINS,
    bin_edges,
    bin_events,
    encode_spectra,
    load_event_lists,
    load_raw_spectra,
    minmax_normalize,
    reconstruction_mae,
    train_autoencoder,
)

BIN_WIDTH = (E_MAX - E_MIN) / N_BINS


class TestBinEvents:
    def test_single_event_lowest_edge(self):
        s = bin_events([0.5], exposure_time=1.0)
        assert s.bins[0] == pytest.approx(1 / 0.01875)
        assert s.bins[0] == pytest.approx(53.333333333)
        assert np.count_nonzero(s.bins) == 1

    def test_top_edge_goes_to_last_bin(self):
        s = bin_events([8.0], 1.0)
        assert s.bins[399] > 0 and np.count_nonzero(s.bins) == 1

    def test_out_of_range_discarded(self):
        s = bin_events([0.1, 0.49, 3.0, 8.01, 12.0], 2.0)
        assert s.discarded == 4
        assert s.bins.sum() * BIN_WIDTH * 2.0 == pytest.approx(1.0)

    def test_empty_list_flags(self):
        s = bin_events([], 1.0)
        assert s.empty and not s.bins.any() and s.bins.size == 400

    def test_bad_exposure(self):
        with pytest.raises(ValueError):
            bin_events([1.0], 0.0)

    def test_matches_bruteforce_histogram(self):
        e = make_rng(3).uniform(E_MIN, E_MAX, 10_000)
        counts = np.zeros(N_BINS, dtype=int)
        for v in e:
            counts[min(int((v - E_MIN) // BIN_WIDTH), N_BINS - 1)] += 1
        s = bin_events(e, exposure_time=5.0)
        np.testing.assert_array_equal(np.rint(s.bins * 5.0 * BIN_WIDTH).astype(int), counts)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), max_size=300), st.floats(0.1, 1e4))
    def test_count_conservation(self, energies, exposure):
        s = bin_events(energies, exposure)
        in_range = sum(E_MIN <= e <= E_MAX for e in energies)
        widths = np.diff(bin_edges())
        assert round(float(np.sum(s.bins * widths * exposure))) == in_range

    def test_log_spacing_option(self):
        edges = bin_edges(spacing="log")
        assert edges[0] == pytest.approx(E_MIN) and edges[-1] == pytest.approx(E_MAX)
        assert np.all(np.diff(np.log(edges)) == pytest.approx(np.log(16) / 400))
        assert bin_events([8.0], 1.0, spacing="log").bins[-1] > 0


class TestMinMax:
    def test_definition(self):
        x = np.zeros(400)
        x[:3] = [1.0, 2.0, 3.0]
        x[3:] = 2.0
        out = minmax_normalize(x)
        np.testing.assert_allclose(out.bins[:3], [0.0, 0.5, 1.0])
        assert not out.degenerate

    def test_constant_is_degenerate(self):
        out = minmax_normalize(np.full(400, 7.0))
        assert out.degenerate and not out.bins.any()

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 400, elements=st.floats(0, 1e3)), st.floats(0.01, 100), st.floats(-50, 50))
    def test_affine_invariance_and_idempotence(self, x, a, b):
        base = minmax_normalize(x)
        if base.degenerate:
            return
        if (x.max() - x.min()) < 1e-6:
            return
        np.testing.assert_allclose(minmax_normalize(a * x + b).bins, base.bins, atol=1e-9)
        np.testing.assert_allclose(minmax_normalize(base.bins).bins, base.bins, atol=1e-12)
        assert base.bins.min() == 0.0 and base.bins.max() == 1.0


class TestAutoencoder:
    def test_mae_of_identical_vectors_is_zero(self):
        x = make_rng(0).random(400)
        assert reconstruction_mae(x, x) == 0.0

    def test_memorizes_one_repeated_spectrum(self):
        x = minmax_normalize(make_rng(0).gamma(2.0, 1.0, 400)).bins
        ae = train_autoencoder(np.tile(x, (8, 1)), epochs=100, hidden_dims=(64,), batch_size=8, seed=0)
        assert ae.loss_curve[-1] < 0.02

    def test_loss_curve_finite_and_decreasing(self):
        X = np.array([minmax_normalize(make_rng(i).gamma(2.0, 1.0, 400)).bins for i in range(40)])
        ae = train_autoencoder(X, epochs=20, hidden_dims=(64,), seed=1)
        assert len(ae.loss_curve) == 21
        assert np.all(np.isfinite(ae.loss_curve))
        assert ae.loss_curve[-1] <= ae.loss_curve[0]

    @pytest.mark.parametrize("hidden", [(32,), (128, 96)])
    def test_bottleneck_is_64(self, hidden):
        X = make_rng(2).random((4, 400))
        ae = train_autoencoder(X, hidden_dims=hidden, epochs=1)
        assert encode_spectra(ae, X).shape == (4, 64)

    def test_encoding_deterministic_and_matches_forward(self):
        X = make_rng(3).random((100, 400))
        ae = train_autoencoder(X[:10], hidden_dims=(32,), epochs=2, seed=5)
        emb = encode_spectra(ae, X)
        np.testing.assert_array_equal(emb, encode_spectra(ae, X))
        h = np.maximum(X @ ae.encoder["0.weight"].T + ae.encoder["0.bias"], 0)
        direct = h @ ae.encoder["1.weight"].T + ae.encoder["1.bias"]
        np.testing.assert_allclose(emb, direct, atol=1e-12)
        via_forward, _ = mlp_forward(ae.encoder_spec, ae.encoder, X)
        np.testing.assert_array_equal(emb, via_forward)

    def test_zero_encoder_gives_zero_embedding(self):
        ae = train_autoencoder(make_rng(4).random((2, 400)), epochs=0, hidden_dims=(16,))
        ae.encoder = {k: np.zeros_like(v) for k, v in ae.encoder.items()}
        np.testing.assert_array_equal(encode_spectra(ae, np.zeros(400)), np.zeros((1, 64)))

    def test_shape_error(self):
        ae = train_autoencoder(make_rng(4).random((2, 400)), epochs=0, hidden_dims=(16,))
        with pytest.raises(ShapeError):
            encode_spectra(ae, np.zeros(399))

    def test_needs_two_spectra(self):
        with pytest.raises(ValueError):
            train_autoencoder(np.zeros((1, 400)))


class TestReaders:
    def test_raw_spectra(self, tmp_path):
        p = tmp_path / "s.csv"
        rows = ["source_id," + ",".join(f"b{i}" for i in range(400))]
        rows += [f"s{k}," + ",".join(str(float(i % 7)) for i in range(400)) for k in range(3)]
        p.write_text("\n".join(rows) + "\n")
        ids, X = load_raw_spectra(p)
        assert ids == ["s0", "s1", "s2"] and X.shape == (3, 400)

    def test_raw_spectra_negative_value(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("source_id," + ",".join(f"b{i}" for i in range(400)) + "\n"
                     + "a," + ",".join(["-1"] * 400) + "\n")
        with pytest.raises(FormatError, match=":2:"):
            load_raw_spectra(p)

    def test_events(self, tmp_path):
        (tmp_path / "e.csv").write_text("source_id,energy_kev\na,1.0\na,2.0\nb,9.0\n")
        (tmp_path / "x.csv").write_text("source_id,exposure_s\na,10\nb,5\n")
        ids, events, exp = load_event_lists(tmp_path / "e.csv", tmp_path / "x.csv")
        assert ids == ["a", "b"] and events["a"] == [1.0, 2.0] and exp["b"] == 5.0
