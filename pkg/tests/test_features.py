import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sxlnet.features import (CmvnStats, FeatureFormatError, FeatureSequence, apply_cmvn, compute_global_cmvn,
                             gen_synthetic, load_features, load_labels, save_features, save_labels, stack_frames)


def make_corpus(rng, n=3, dim=5):
    return [FeatureSequence(rng.normal(size=(int(rng.integers(1, 30)), dim)).astype(np.float32), f"utt{i}")
            for i in range(n)]


class TestSxlf:
    def test_round_trip(self, tmp_path, rng):
        corpus = make_corpus(rng)
        save_features(corpus, tmp_path / "a.sxlf")
        loaded = load_features(tmp_path / "a.sxlf")
        assert [s.utterance_id for s in loaded] == ["utt0", "utt1", "utt2"]
        for a, b in zip(corpus, loaded):
            assert a.frames.tobytes() == b.frames.tobytes()

    def test_empty_file_bad_magic(self, tmp_path):
        (tmp_path / "e.sxlf").write_bytes(b"")
        with pytest.raises(FeatureFormatError, match="bad magic"):
            load_features(tmp_path / "e.sxlf")

    def test_truncated_payload(self, tmp_path):
        uid = b"u0"
        blob = b"SXLF" + struct.pack("<II", 1, 1) + struct.pack("<I", len(uid)) + uid + struct.pack("<II", 5, 40)
        header_len = len(blob)
        blob += np.zeros(100, dtype="<f4").tobytes()  # 200 declared
        (tmp_path / "t.sxlf").write_bytes(blob)
        with pytest.raises(FeatureFormatError, match="truncated") as exc:
            load_features(tmp_path / "t.sxlf")
        assert exc.value.offset == header_len

    def test_non_finite_reports_offset(self, tmp_path):
        seq = FeatureSequence(np.zeros((2, 3), np.float32), "x")
        save_features([seq], tmp_path / "n.sxlf")
        raw = bytearray((tmp_path / "n.sxlf").read_bytes())
        payload_start = len(raw) - 24
        raw[payload_start + 16:payload_start + 20] = struct.pack("<f", float("nan"))
        (tmp_path / "n.sxlf").write_bytes(bytes(raw))
        with pytest.raises(FeatureFormatError, match="non-finite") as exc:
            load_features(tmp_path / "n.sxlf")
        assert exc.value.offset == payload_start + 16

    def test_labels_round_trip(self, tmp_path):
        labels = [np.array([0, 1, 1, 2]), np.array([5])]
        save_labels(labels, tmp_path / "l.sxll")
        back = load_labels(tmp_path / "l.sxll")
        assert [b.tolist() for b in back] == [[0, 1, 1, 2], [5]]

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_round_trip_random(self, seed, tmp_path_factory):
        r = np.random.default_rng(seed)
        corpus = make_corpus(r, n=int(r.integers(1, 5)), dim=int(r.integers(1, 9)))
        path = tmp_path_factory.mktemp("rt") / "c.sxlf"
        save_features(corpus, path)
        assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(corpus, load_features(path)))


class TestCmvn:
    def test_single_frame(self):
        stats = compute_global_cmvn([FeatureSequence(np.ones((1, 4)), "a")])
        assert stats.mean.tolist() == [1.0] * 4
        assert stats.variance.tolist() == [0.0] * 4
        assert stats.frame_count == 1

    def test_two_frames(self):
        stats = compute_global_cmvn([FeatureSequence([[0.0]], "a"), FeatureSequence([[2.0]], "b")])
        assert stats.mean.tolist() == [1.0]
        assert stats.variance.tolist() == [1.0]

    def test_matches_two_pass_oracle(self, rng):
        corpus = [FeatureSequence(rng.normal(3.0, 2.0, size=(int(rng.integers(1, 40)), 6)), f"u{i}")
                  for i in range(20)]
        allx = np.concatenate([s.frames for s in corpus])
        mean = allx.sum(axis=0) / len(allx)
        var = ((allx - mean) ** 2).sum(axis=0) / len(allx)
        stats = compute_global_cmvn(corpus)
        np.testing.assert_allclose(stats.mean, mean, atol=1e-10, rtol=0)
        np.testing.assert_allclose(stats.variance, var, atol=1e-10, rtol=0)
        assert stats.frame_count == len(allx)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            compute_global_cmvn([])

    def test_identity_stats(self, rng):
        seq = FeatureSequence(rng.normal(size=(4, 3)), "a")
        out = apply_cmvn(seq, CmvnStats(np.zeros(3), np.ones(3), 4))
        np.testing.assert_array_equal(out.frames, seq.frames)

    def test_scalar_case(self):
        out = apply_cmvn(FeatureSequence([[3.0]], "a"), CmvnStats(np.array([1.0]), np.array([4.0]), 1))
        assert out.frames.tolist() == [[1.0]]

    def test_floored_dimension_stays_finite(self, rng):
        frames = rng.normal(size=(10, 3))
        frames[:, 1] = 7.0
        corpus = [FeatureSequence(frames, "c")]
        out = apply_cmvn(corpus[0], compute_global_cmvn(corpus), variance_floor=1e-10)
        assert np.all(np.isfinite(out.frames))

    def test_normalized_corpus_statistics(self, rng):
        corpus = [FeatureSequence(rng.normal(5.0, 3.0, size=(50, 4)), f"u{i}") for i in range(8)]
        stats = compute_global_cmvn(corpus)
        normed = [apply_cmvn(s, stats) for s in corpus]
        allx = np.concatenate([s.frames for s in normed])
        assert np.all(np.abs(allx.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(allx.var(axis=0) - 1.0) < 1e-4)
        # idempotent once normalized
        again = compute_global_cmvn(normed)
        np.testing.assert_allclose(again.mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(again.variance, 1.0, atol=1e-4)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            apply_cmvn(FeatureSequence(np.ones((2, 3)), "a"), CmvnStats(np.zeros(2), np.ones(2), 1))


class TestStacking:
    def test_identity(self, rng):
        seq = FeatureSequence(rng.normal(size=(7, 3)), "a")
        np.testing.assert_array_equal(stack_frames(seq, 1, 1).frames, seq.frames)

    def test_three_by_three(self, rng):
        seq = FeatureSequence(rng.normal(size=(9, 40)), "a")
        out = stack_frames(seq, 3, 3)
        assert out.frames.shape == (3, 120)
        np.testing.assert_array_equal(out.frames[1], seq.frames[3:6].reshape(-1))

    def test_tail_padding_repeats_last_frame(self):
        frames = np.arange(4, dtype=float)[:, None]
        out = stack_frames(FeatureSequence(frames, "a"), 3, 3)
        assert out.frames.tolist() == [[0.0, 1.0, 2.0], [3.0, 3.0, 3.0]]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 100), st.integers(1, 5), st.integers(1, 5))
    def test_length_formula(self, t, stack, skip):
        out = stack_frames(FeatureSequence(np.zeros((t, 2)), "a"), stack, skip)
        assert out.frames.shape == (math.ceil(t / skip), 2 * stack)


class TestSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(5, (10, 20), 8, 3, seed=4)
        b = gen_synthetic(5, (10, 20), 8, 3, seed=4)
        for sa, sb, la, lb in zip(a.sequences, b.sequences, a.labels, b.labels):
            assert sa.frames.tobytes() == sb.frames.tobytes()
            assert la.tolist() == lb.tolist()

    def test_single_class(self):
        c = gen_synthetic(4, (5, 9), 4, 1, seed=0)
        assert all(set(lab.tolist()) == {0} for lab in c.labels)

    def test_labels_aligned(self):
        c = gen_synthetic(6, (3, 12), 4, 5, seed=1)
        assert all(len(lab) == s.num_frames and 3 <= s.num_frames <= 12 for s, lab in zip(c.sequences, c.labels))
        assert all(lab.min() >= 0 and lab.max() < 5 for lab in c.labels)

    def test_nearest_centroid_learnable(self):
        train = gen_synthetic(100, (20, 60), 40, 6, seed=10)
        test = gen_synthetic(50, (20, 60), 40, 6, seed=11)
        x = np.concatenate([s.frames for s in train.sequences])
        y = np.concatenate(train.labels)
        centroids = np.stack([x[y == c].mean(axis=0) for c in range(6)])
        xt = np.concatenate([s.frames for s in test.sequences])
        yt = np.concatenate(test.labels)
        pred = ((xt[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(axis=1)
        assert (pred == yt).mean() > 0.8

    def test_neighbours_correlated(self):
        c = gen_synthetic(30, (30, 40), 4, 6, seed=2)
        same = np.mean([np.mean(lab[1:] == lab[:-1]) for lab in c.labels])
        assert same > 0.8
