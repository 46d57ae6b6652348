import numpy as np
import pytest
from scipy import stats

from quatflow.errors import IndexOutOfRange, InsufficientData
from quatflow.tokens import (
    TokenVocab3D,
    decode,
    encode,
    encode_box,
    encode_point,
    fit_vocab,
    init_embeddings,
    render_token,
    usage_histogram,
)


@pytest.fixture(scope="module")
def normal_vocab():
    rng = np.random.default_rng(0)
    return fit_vocab(rng.standard_normal(1_000_000), n_bins=1024), rng


class TestFitVocab:
    def test_normal_quantile_range(self, normal_vocab):
        # Oracle: 1st/99th percentile of N(0,1) = -/+ 2.3263.
        vocab, _ = normal_vocab
        q = stats.norm.ppf(0.99)
        assert abs(vocab.z_min + q) < 0.02
        assert abs(vocab.z_max - q) < 0.02

    def test_uniform_edges_oracle(self):
        # Oracle: in-range quantiles of U(0, 1) clipped at 1%/99%.
        rng = np.random.default_rng(1)
        vocab = fit_vocab(rng.uniform(0, 1, 1_000_000), n_bins=4)
        want = np.array([0.01, 0.2575, 0.505, 0.7525, 0.99])
        np.testing.assert_allclose(vocab.edges, want, atol=0.01)

    def test_constant_samples_rejected(self):
        with pytest.raises(InsufficientData):
            fit_vocab(np.ones(100_000), n_bins=4)

    def test_too_few_samples_rejected(self):
        with pytest.raises(InsufficientData):
            fit_vocab(np.random.default_rng(2).standard_normal(100), n_bins=1024)

    def test_edges_strictly_ascending_centers_inside(self, normal_vocab):
        vocab, _ = normal_vocab
        assert np.all(np.diff(vocab.edges) > 0)
        assert np.all(vocab.centers > vocab.edges[:-1])
        assert np.all(vocab.centers < vocab.edges[1:])


class TestEncodeDecode:
    def test_clamping(self, normal_vocab):
        vocab, _ = normal_vocab
        assert encode(vocab.z_min - 10, vocab) == 0
        assert encode(vocab.z_max + 10, vocab) == vocab.n_bins - 1

    def test_centers_map_to_own_bin(self, normal_vocab):
        vocab, _ = normal_vocab
        np.testing.assert_array_equal(encode(vocab.centers, vocab), np.arange(vocab.n_bins))

    def test_roundtrip_within_bin_width(self, normal_vocab):
        vocab, _ = normal_vocab
        rng = np.random.default_rng(3)
        v = rng.uniform(vocab.z_min, vocab.z_max, 50_000)
        idx = encode(v, vocab)
        err = np.abs(decode(idx, vocab) - v)
        width = vocab.edges[idx + 1] - vocab.edges[idx]
        assert np.all(err <= width)

    def test_mean_roundtrip_error_below_uniform_bin_width(self, normal_vocab):
        # Equal-mass bins concentrate width where mass is, so the average
        # roundtrip error beats the uniform-width budget.
        vocab, _ = normal_vocab
        rng = np.random.default_rng(4)
        v = rng.standard_normal(200_000)
        v = v[(v >= vocab.z_min) & (v <= vocab.z_max)]
        err = np.abs(decode(encode(v, vocab), vocab) - v)
        assert err.mean() < (vocab.z_max - vocab.z_min) / vocab.n_bins

    def test_decode_encode_identity(self, normal_vocab):
        vocab, _ = normal_vocab
        k = np.arange(vocab.n_bins)
        np.testing.assert_array_equal(encode(decode(k, vocab), vocab), k)

    def test_decode_out_of_range(self, normal_vocab):
        vocab, _ = normal_vocab
        with pytest.raises(IndexOutOfRange):
            decode(vocab.n_bins, vocab)

    def test_encode_monotone(self, normal_vocab):
        vocab, _ = normal_vocab
        v = np.linspace(vocab.z_min - 1, vocab.z_max + 1, 10_000)
        idx = encode(v, vocab)
        assert np.all(np.diff(idx) >= 0)


class TestPointAndBox:
    def test_point_at_centers(self, normal_vocab):
        vocab, _ = normal_vocab
        a, b, c = 10, 500, 1000
        p = np.array([vocab.centers[a], vocab.centers[b], vocab.centers[c]])
        np.testing.assert_array_equal(encode_point(p, vocab), [a, b, c])

    def test_box_token_arity_and_reorder_invariance(self, normal_vocab):
        from quatflow.rotation import axis_angle_quat, quat_to_matrix
        from quatflow.scene import OrientedBox3D

        vocab, _ = normal_vocab
        axes = quat_to_matrix(axis_angle_quat([0, 0, 1], 0.4))
        box = OrientedBox3D(center=np.array([0.0, 0.1, 0.5]), axes=axes, extents=np.array([0.4, 0.2, 0.3]))
        toks = encode_box(box, vocab)
        assert toks.shape == (24,)
        # Same geometric box, axes permuted and flipped.
        perm = axes[:, [1, 0, 2]] * np.array([1.0, -1.0, 1.0])
        box2 = OrientedBox3D(
            center=box.center, axes=perm, extents=np.array([0.2, 0.4, 0.3])
        )
        np.testing.assert_array_equal(encode_box(box2, vocab), toks)


class TestUsage:
    def test_fit_data_ratio(self, normal_vocab):
        vocab, _ = normal_vocab
        rng = np.random.default_rng(0)
        fit_samples = rng.standard_normal(1_000_000)
        inside = fit_samples[(fit_samples >= vocab.z_min) & (fit_samples <= vocab.z_max)]
        _, ratio = usage_histogram(vocab, inside)
        assert ratio < 2

    def test_two_bin_median_split(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal(100_000)
        vocab = fit_vocab(data, n_bins=2)
        counts, _ = usage_histogram(vocab, data[(data >= vocab.z_min) & (data <= vocab.z_max)])
        assert abs(counts[0] - counts[1]) / counts.sum() < 0.01

    def test_heldout_ratio(self, normal_vocab):
        vocab, _ = normal_vocab
        held = np.random.default_rng(6).standard_normal(1_000_000)
        held = held[(held >= vocab.z_min) & (held <= vocab.z_max)]
        _, ratio = usage_histogram(vocab, held)
        assert ratio < 3

    def test_uniform_binning_is_nonuniform_on_normals(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal(200_000)
        vocab = fit_vocab(data, n_bins=64, strategy="uniform")
        inside = data[(data >= vocab.z_min) & (data <= vocab.z_max)]
        _, ratio = usage_histogram(vocab, inside)
        assert ratio > 2  # tails starve under equal-width bins


class TestSerialization:
    def test_roundtrip_bit_identical(self, normal_vocab):
        vocab, _ = normal_vocab
        back = TokenVocab3D.from_json(vocab.to_json())
        assert np.array_equal(back.edges, vocab.edges)
        assert np.array_equal(back.centers, vocab.centers)
        assert back.n_bins == vocab.n_bins

    def test_render(self):
        assert render_token(437) == "<loc3d_0437>"


class TestInitEmbeddings:
    def test_mean_matches_law_of_large_numbers(self):
        rng = np.random.default_rng(8)
        sigma = 0.3
        mu = np.array([2.0, -1.0, 0.5, 3.0])
        existing = mu + sigma * rng.standard_normal((500, 4))
        new = init_embeddings(existing, 100_000, np.random.default_rng(9))
        np.testing.assert_allclose(new.mean(axis=0), existing.mean(axis=0), atol=0.01 * sigma)

    def test_covariance_matches_monte_carlo(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((4, 4))
        existing = rng.standard_normal((2000, 4)) @ a
        new = init_embeddings(existing, 100_000, np.random.default_rng(11))
        fitted = np.cov(existing, rowvar=False)
        got = np.cov(new, rowvar=False)
        rel = np.linalg.norm(got - fitted) / np.linalg.norm(fitted)
        assert rel < 0.05

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        existing = rng.standard_normal((100, 6))
        a = init_embeddings(existing, 50, np.random.default_rng(13))
        b = init_embeddings(existing, 50, np.random.default_rng(13))
        assert np.array_equal(a, b)

    def test_rank_deficient_shrinkage(self):
        # Fewer rows than dims forces the shrinkage path.
        rng = np.random.default_rng(14)
        existing = rng.standard_normal((5, 8))
        new = init_embeddings(existing, 1000, np.random.default_rng(15))
        assert np.all(np.isfinite(new)) and new.shape == (1000, 8)
