import dataclasses
import json
import struct

import numpy as np
import pytest

import lrcl.data as data
from lrcl.errors import ConfigError, CorruptionError, DataError, ParameterError
from lrcl.tensor_core import Rng


def tiny_dataset(n_pairs=6, t=8, n_classes=3, seed=0):
    rng = Rng(seed)
    pairs = [
        data.WindowPair(
            left=rng.normal(size=(3, t)).astype(np.float32),
            right=rng.normal(size=(3, t)).astype(np.float32),
            label=i % n_classes,
            subject=i % 2,
            t0=i * t,
        )
        for i in range(n_pairs)
    ]
    return data.WindowedDataset(
        pairs=pairs,
        sample_rate_hz=10.0,
        window_len=t,
        class_names=[f"c{i}" for i in range(n_classes)],
        provenance="test",
    )


class TestWindowStream:
    def test_counts_and_offsets(self):
        stream = np.zeros((3, 500), dtype=np.float32)
        windows = data.window_stream(stream, 2.0, 1.0, 100.0)
        assert len(windows) == 4
        assert [start for start, _ in windows] == [0, 100, 200, 300]
        assert windows[0][1].shape == (3, 200)

    @pytest.mark.parametrize("rate,expected_t", [(100.0, 200), (30.0, 60)])
    def test_two_second_windows(self, rate, expected_t):
        stream = np.zeros((3, int(rate * 5)), dtype=np.float32)
        windows = data.window_stream(stream, 2.0, 1.0, rate)
        assert windows[0][1].shape == (3, expected_t)

    def test_count_formula_randomized(self):
        rng = Rng(1)
        for _ in range(50):
            length = int(rng.integers(10, 500))
            window = int(rng.integers(2, 9))
            step = int(rng.integers(1, 7))
            stream = np.zeros((3, length), dtype=np.float32)
            if length < window:
                with pytest.raises(DataError):
                    data.window_stream(stream, float(window), float(step), 1.0)
                continue
            windows = data.window_stream(stream, float(window), float(step), 1.0)
            assert len(windows) == (length - window) // step + 1

    def test_too_short(self):
        with pytest.raises(DataError, match="shorter"):
            data.window_stream(np.zeros((3, 5), dtype=np.float32), 2.0, 1.0, 10.0)


class TestLabelWindow:
    def test_unanimous(self):
        assert data.label_window(np.full(10, 3)) == 3

    def test_majority(self):
        labels = np.array([1] * 6 + [0] * 4)
        assert data.label_window(labels) == 1

    def test_tie_breaks_low(self):
        labels = np.array([5] * 5 + [2] * 5)
        assert data.label_window(labels) == 2


class TestCanonicalFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        ds = tiny_dataset()
        p1, p2 = tmp_path / "a.lrw", tmp_path / "b.lrw"
        data.write_canonical(ds, p1)
        back = data.read_canonical(p1)
        assert back.class_names == ds.class_names
        assert back.sample_rate_hz == ds.sample_rate_hz
        for orig, loaded in zip(ds.pairs, back.pairs):
            assert np.array_equal(orig.left, loaded.left)
            assert np.array_equal(orig.right, loaded.right)
            assert (orig.label, orig.subject, orig.t0) == (
                loaded.label, loaded.subject, loaded.t0)
        data.write_canonical(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset(self, tmp_path):
        ds = data.WindowedDataset(pairs=[], sample_rate_hz=30.0, window_len=60,
                                  class_names=["a", "b"])
        path = tmp_path / "empty.lrw"
        data.write_canonical(ds, path)
        back = data.read_canonical(path)
        assert len(back) == 0 and back.window_len == 60

    def test_file_size_formula(self, tmp_path):
        ds = tiny_dataset(n_pairs=5, t=8)
        path = tmp_path / "a.lrw"
        data.write_canonical(ds, path)
        header = {
            "class_names": ds.class_names,
            "count": 5,
            "provenance": ds.provenance,
            "sample_rate_hz": ds.sample_rate_hz,
            "window_len": 8,
        }
        header_bytes = len(json.dumps(header, sort_keys=True,
                                      separators=(",", ":")).encode())
        expected = 4 + 4 + header_bytes + 5 * (12 + 2 * 3 * 8 * 4)
        assert path.stat().st_size == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.lrw"
        data.write_canonical(tiny_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError, match="magic"):
            data.read_canonical(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "a.lrw"
        data.write_canonical(tiny_dataset(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CorruptionError):
            data.read_canonical(path)


class TestSynthGenerate:
    def test_noiseless_mirror_identity(self):
        cfg = data.SynthConfig(noise_sigma=0.0, phase_jitter=0.0,
                               windows_per_class=10, window_len=30)
        ds = data.synth_generate(cfg, Rng(3))
        mirror = np.array(cfg.mirror, dtype=np.float32)[:, None]
        for pair in ds.pairs:
            assert np.array_equal(pair.right, mirror * pair.left)

    def test_same_seed_bitwise_identical(self):
        cfg = data.SynthConfig(windows_per_class=5)
        a = data.synth_generate(cfg, Rng(9))
        b = data.synth_generate(cfg, Rng(9))
        for pa, pb in zip(a.pairs, b.pairs):
            assert np.array_equal(pa.left, pb.left)
            assert np.array_equal(pa.right, pb.right)

    def test_unmirrored_axis_correlation(self):
        # axis 2 is unmirrored under diag(-1, 1, 1): left and right stay
        # positively correlated despite noise and phase jitter.
        cfg = data.SynthConfig(noise_sigma=0.1, windows_per_class=40)
        ds = data.synth_generate(cfg, Rng(4))
        sines = [p for p in ds.pairs if p.label > 0]
        assert len(sines) >= 100
        corr = [
            np.corrcoef(p.left[2], p.right[2])[0, 1] for p in sines
        ]
        assert np.mean(corr) > 0.9

    def test_class_zero_is_low_amplitude(self):
        ds = data.synth_generate(data.SynthConfig(windows_per_class=20), Rng(5))
        null_power = np.mean([p.left.std() for p in ds.pairs if p.label == 0])
        sine_power = np.mean([p.left.std() for p in ds.pairs if p.label > 0])
        assert null_power < sine_power / 2

    def test_one_class_rejected(self):
        with pytest.raises(ConfigError):
            data.SynthConfig(n_classes=1)

    def test_labels_and_metadata(self):
        cfg = data.SynthConfig(n_classes=4, windows_per_class=3, subjects=2)
        ds = data.synth_generate(cfg, Rng(6))
        assert len(ds) == 12
        assert sorted(set(p.label for p in ds.pairs)) == [0, 1, 2, 3]
        assert set(p.subject for p in ds.pairs) == {0, 1}
        assert ds.class_names[0] == "no_activity"


class TestSubsampleLabels:
    def test_full_size_keeps_all(self):
        ds = tiny_dataset(n_pairs=6, n_classes=3)  # 2 per class
        out = data.subsample_labels(ds, 2, Rng(0))
        assert np.array_equal(out.labels(), ds.labels())

    def test_one_per_class(self):
        ds = tiny_dataset(n_pairs=9, n_classes=3)
        out = data.subsample_labels(ds, 1, Rng(1))
        assert (out.labels() >= 0).sum() == 3

    def test_deterministic(self):
        ds = tiny_dataset(n_pairs=12, n_classes=3)
        a = data.subsample_labels(ds, 2, Rng(7)).labels()
        b = data.subsample_labels(ds, 2, Rng(7)).labels()
        assert np.array_equal(a, b)

    def test_insufficient_population_names_class(self):
        ds = tiny_dataset(n_pairs=6, n_classes=3)
        with pytest.raises(DataError, match="class 0"):
            data.subsample_labels(ds, 3, Rng(0))

    def test_pretraining_pool_unchanged(self):
        ds = tiny_dataset(n_pairs=9, n_classes=3)
        out = data.subsample_labels(ds, 1, Rng(2))
        assert len(out) == len(ds)

    def test_bad_count(self):
        with pytest.raises(ParameterError):
            data.subsample_labels(tiny_dataset(), 0, Rng(0))


class TestSplitSpec:
    def test_disjoint_roles_enforced(self):
        with pytest.raises(ConfigError, match="subject 1"):
            data.SplitSpec(roles={"train": [1, 2], "test": [1]})

    def test_split_by_subject(self):
        ds = tiny_dataset(n_pairs=8)
        spec = data.SplitSpec(roles={"train": [0], "test": [1]})
        train = data.split_by_subject(ds, spec, "train")
        test = data.split_by_subject(ds, spec, "test")
        assert len(train) + len(test) == len(ds)
        assert all(p.subject == 0 for p in train.pairs)
        assert all(p.subject == 1 for p in test.pairs)
        with pytest.raises(ConfigError):
            data.split_by_subject(ds, spec, "validation")


class TestDatasetValidation:
    def test_mismatched_sides_rejected(self):
        pair = data.WindowPair(
            left=np.zeros((3, 8), dtype=np.float32),
            right=np.zeros((3, 9), dtype=np.float32),
        )
        with pytest.raises(DataError):
            data.WindowedDataset(pairs=[pair], sample_rate_hz=1.0, window_len=8,
                                 class_names=["a", "b"])

    def test_label_without_class_name(self):
        pair = data.WindowPair(
            left=np.zeros((3, 8), dtype=np.float32),
            right=np.zeros((3, 8), dtype=np.float32),
            label=5,
        )
        with pytest.raises(DataError):
            data.WindowedDataset(pairs=[pair], sample_rate_hz=1.0, window_len=8,
                                 class_names=["a", "b"])

    def test_labeled_subset(self):
        ds = tiny_dataset(n_pairs=6)
        ds.pairs[0] = dataclasses.replace(ds.pairs[0], label=-1)
        assert len(ds.labeled()) == 5
