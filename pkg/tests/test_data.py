"""Dataset generation, transforms, splitting, and file-format tests.

Planted attributes are verified with oracles that bypass the package's own
models: an FFT peak detector for the frequency class and a per-segment
std+mean threshold for the amplitude class.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obfusion import data as D
from obfusion.errors import ConfigError, DataFormatError, SchemaError, ShapeError


@pytest.fixture(scope="module")
def corpus():
    return D.generate_synthetic(D.SynthSpec())


class TestGenerateSynthetic:
    def test_grid_count(self, corpus):
        assert len(corpus) == 4 * 2 * 64
        assert corpus.values.shape == (512, 3, 64)

    def test_deterministic(self, corpus):
        again = D.generate_synthetic(D.SynthSpec())
        np.testing.assert_array_equal(corpus.values, again.values)
        for k in corpus.labels:
            np.testing.assert_array_equal(corpus.labels[k], again.labels[k])

    def test_schema_roles(self, corpus):
        assert corpus.public_attribute == D.PUBLIC_ATTR
        assert corpus.private_attributes == [D.PRIVATE_ATTR]
        assert corpus.cardinality(D.PUBLIC_ATTR) == 4
        assert corpus.cardinality(D.PRIVATE_ATTR) == 2

    def test_frequency_class_recoverable_by_fft(self):
        ds = D.generate_synthetic(D.SynthSpec(noise_std=0.1, seed=3))
        mag = np.abs(np.fft.rfft(ds.values.astype(np.float64), axis=2)).mean(axis=1)
        pred = mag[:, 1:5].argmax(axis=1)
        assert (pred == ds.labels[D.PUBLIC_ATTR]).mean() >= 0.95

    def test_amplitude_class_recoverable_by_threshold(self):
        ds = D.generate_synthetic(D.SynthSpec(noise_std=0.1, seed=3))
        feat = ds.values.std(axis=(1, 2)) + ds.values.mean(axis=(1, 2))
        s = ds.labels[D.PRIVATE_ATTR]
        thr = (feat[s == 0].mean() + feat[s == 1].mean()) / 2
        assert ((feat > thr).astype(int) == s).mean() >= 0.95

    def test_attributes_independent_by_construction(self, corpus):
        u = corpus.labels[D.PUBLIC_ATTR]
        s = corpus.labels[D.PRIVATE_ATTR]
        joint = np.zeros((4, 2))
        for ui, si in zip(u, s):
            joint[ui, si] += 1
        np.testing.assert_array_equal(joint, np.full((4, 2), 64))

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            D.generate_synthetic(D.SynthSpec(n_public_classes=0))
        with pytest.raises(ConfigError):
            D.generate_synthetic(D.SynthSpec(noise_std=-0.1))

    def test_segment_accessor_routes_labels_by_role(self, corpus):
        seg = corpus.segment(0)
        assert seg.values.shape == (3, 64)
        assert seg.public_label == corpus.labels[D.PUBLIC_ATTR][0]
        assert seg.private_labels == {D.PRIVATE_ATTR: corpus.labels[D.PRIVATE_ATTR][0]}
        assert seg.unspecified_labels == {}


class TestSegmentSeries:
    @pytest.mark.parametrize("length,window,stride,expected",
                             [(128, 128, 10, 1), (208, 128, 10, 9),
                              (138, 128, 10, 2)])
    def test_counts(self, length, window, stride, expected):
        out = D.segment_series(np.zeros((3, length)), window, stride)
        assert out.shape == (expected, 3, window)

    def test_window_content_and_offsets(self):
        series = np.arange(40, dtype=np.float64).reshape(2, 20)
        out = D.segment_series(series, 8, 3)
        for i in range(out.shape[0]):
            np.testing.assert_array_equal(out[i], series[:, 3 * i:3 * i + 8])

    def test_too_short_rejected(self):
        with pytest.raises(ShapeError):
            D.segment_series(np.zeros((1, 10)), 11, 1)

    def test_bad_stride_rejected(self):
        with pytest.raises(ConfigError):
            D.segment_series(np.zeros((1, 10)), 5, 0)

    @given(length=st.integers(1, 300), window=st.integers(1, 300),
           stride=st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_count_formula_property(self, length, window, stride):
        if length < window:
            return
        out = D.segment_series(np.zeros((1, length)), window, stride)
        assert out.shape[0] == (length - window) // stride + 1


class TestStandardize:
    def test_z_score_simple_channel(self):
        values = np.array([1.0, 2.0, 3.0], dtype=np.float32).reshape(3, 1, 1)
        ds = D.Dataset(values=values,
                       labels={"a": np.zeros(3, dtype=np.int64)},
                       schema=[D.AttributeSpec("a", 1, "public")])
        out = D.standardize(ds)
        x = out.values[:, 0, 0].astype(np.float64)
        assert abs(x.mean()) < 1e-7
        assert abs(x.std() - 1.0) < 1e-6

    def test_postconditions_on_corpus(self, corpus):
        out = D.standardize(corpus)
        x = out.values.astype(np.float64)
        assert np.abs(x.mean(axis=(0, 2))).max() <= 1e-6
        assert np.abs(x.std(axis=(0, 2)) - 1.0).max() <= 1e-4

    def test_constant_channel_zeroed_and_flagged(self):
        values = np.ones((4, 2, 5), dtype=np.float32)
        values[:, 1] = np.random.default_rng(0).normal(size=(4, 5))
        ds = D.Dataset(values=values,
                       labels={"a": np.zeros(4, dtype=np.int64)},
                       schema=[D.AttributeSpec("a", 1, "public")])
        out = D.standardize(ds)
        assert out.channel_stats.degenerate.tolist() == [True, False]
        assert not out.values[:, 0].any()

    def test_stored_stats_reproduce_transform(self, corpus):
        train = D.standardize(corpus)
        reapplied = D.apply_stats(corpus, train.channel_stats)
        np.testing.assert_array_equal(train.values, reapplied.values)

    def test_idempotent_at_tolerance(self, corpus):
        once = D.standardize(corpus)
        twice = D.standardize(once)
        assert np.abs(twice.values - once.values).max() <= 1e-6

    def test_stats_present_iff_standardized(self, corpus):
        assert corpus.channel_stats is None
        assert D.standardize(corpus).channel_stats is not None


class TestSplit:
    def test_sizes_512_at_80(self, corpus):
        train, test = D.split(corpus, 0.8, seed=1)
        assert (len(train), len(test)) in ((410, 102), (409, 103))

    def test_stratified_within_one(self, corpus):
        train, _ = D.split(corpus, 0.8, seed=1)
        u_tr = train.labels[D.PUBLIC_ATTR]
        per_class = len(train) / 4
        for c in range(4):
            assert abs((u_tr == c).sum() - per_class) <= 1.0

    def test_deterministic(self, corpus):
        a = D.split(corpus, 0.8, seed=7)
        b = D.split(corpus, 0.8, seed=7)
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[1].values, b[1].values)

    def test_partition_property(self, corpus):
        train, test = D.split(corpus, 0.8, seed=2)
        combined = np.concatenate([train.values, test.values]).reshape(len(corpus), -1)
        original = corpus.values.reshape(len(corpus), -1)
        order_c = np.lexsort(combined.T[:3])
        order_o = np.lexsort(original.T[:3])
        np.testing.assert_array_equal(combined[order_c], original[order_o])

    def test_every_class_in_both_sides(self, corpus):
        train, test = D.split(corpus, 0.98, seed=0)
        for side in (train, test):
            assert len(np.unique(side.labels[D.PUBLIC_ATTR])) == 4

    def test_tiny_class_rejected(self):
        values = np.zeros((3, 1, 4), dtype=np.float32)
        ds = D.Dataset(values=values,
                       labels={"a": np.array([0, 0, 1])},
                       schema=[D.AttributeSpec("a", 2, "public")])
        with pytest.raises(ConfigError):
            D.split(ds, 0.5, seed=0)

    def test_bad_ratio_rejected(self, corpus):
        for r in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                D.split(corpus, r, seed=0)


class TestFileFormat:
    def test_roundtrip_bitwise(self, corpus, tmp_path):
        ds = D.standardize(corpus)
        path = tmp_path / "d.clk"
        digest = D.save_dataset(path, ds)
        back = D.load_dataset(path)
        np.testing.assert_array_equal(back.values, ds.values)
        for k in ds.labels:
            np.testing.assert_array_equal(back.labels[k], ds.labels[k])
        assert back.schema == ds.schema
        np.testing.assert_array_equal(back.channel_stats.mean, ds.channel_stats.mean)
        np.testing.assert_array_equal(back.channel_stats.std, ds.channel_stats.std)
        assert D.save_dataset(tmp_path / "d2.clk", back) == digest

    def test_roundtrip_without_stats(self, corpus, tmp_path):
        path = tmp_path / "d.clk"
        D.save_dataset(path, corpus)
        assert D.load_dataset(path).channel_stats is None

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.clk"
        path.write_bytes(b"WHAT" + b"\x00" * 32)
        with pytest.raises(DataFormatError):
            D.load_dataset(path)

    def test_unknown_version_rejected(self, corpus, tmp_path):
        path = tmp_path / "d.clk"
        D.save_dataset(path, corpus)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(SchemaError, match="version"):
            D.load_dataset(path)

    def test_truncated_rejected(self, corpus, tmp_path):
        path = tmp_path / "d.clk"
        D.save_dataset(path, corpus)
        blob = path.read_bytes()
        path.write_bytes(blob[:-40])
        with pytest.raises(DataFormatError):
            D.load_dataset(path)


class TestValidation:
    def test_out_of_range_label_rejected(self):
        ds = D.Dataset(values=np.zeros((2, 1, 4), dtype=np.float32),
                       labels={"a": np.array([0, 5])},
                       schema=[D.AttributeSpec("a", 2, "public")])
        with pytest.raises(SchemaError):
            ds.validate()

    def test_schema_label_mismatch_rejected(self):
        ds = D.Dataset(values=np.zeros((2, 1, 4), dtype=np.float32),
                       labels={"a": np.zeros(2, dtype=np.int64),
                               "ghost": np.zeros(2, dtype=np.int64)},
                       schema=[D.AttributeSpec("a", 2, "public")])
        with pytest.raises(SchemaError):
            ds.validate()

    def test_exactly_one_public_required(self):
        ds = D.Dataset(values=np.zeros((2, 1, 4), dtype=np.float32),
                       labels={"a": np.zeros(2, dtype=np.int64)},
                       schema=[D.AttributeSpec("a", 2, "private")])
        with pytest.raises(SchemaError):
            ds.validate()

    def test_unknown_role_rejected(self):
        with pytest.raises(ConfigError):
            D.AttributeSpec("a", 2, "secret")

    def test_with_values_requires_matching_count(self, corpus):
        with pytest.raises(ShapeError):
            corpus.with_values(np.zeros((3, 3, 64), dtype=np.float32))
