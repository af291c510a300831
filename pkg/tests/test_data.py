import numpy as np
import pytest

from hanet.data import (FeatureSequence, FormatError, LabelTrack, SynthSpec, check_pair,
                        class_means, load_dataset, load_features, load_labels, read_manifest,
                        save_features, save_labels, split, synth_generate, window_sequence,
                        write_manifest)
from hanet.model import ModelConfig


def test_feature_round_trip(tmp_path):
    frames = np.random.default_rng(0).standard_normal((7, 3)).astype(np.float32)
    save_features(tmp_path / "a.feat", FeatureSequence(frames, "a"))
    seq = load_features(tmp_path / "a.feat")
    np.testing.assert_array_equal(seq.frames, frames)
    assert seq.source_id == "a"


def test_feature_size_mismatch_names_bytes(tmp_path):
    save_features(tmp_path / "a.feat", FeatureSequence(np.zeros((4, 2)), "a"))
    raw = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "b.feat").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="28 bytes, expected 32"):
        load_features(tmp_path / "b.feat")


def test_feature_bad_magic(tmp_path):
    (tmp_path / "a.feat").write_bytes(b"XXXXX" + bytes(20))
    with pytest.raises(FormatError, match="magic"):
        load_features(tmp_path / "a.feat")


def test_labels(tmp_path):
    save_labels(tmp_path / "a.labels", [0, 2, 1])
    np.testing.assert_array_equal(load_labels(tmp_path / "a.labels", 3).labels, [0, 2, 1])
    with pytest.raises(FormatError, match=":2: label 2 outside"):
        load_labels(tmp_path / "a.labels", 2)
    (tmp_path / "b.labels").write_text("0\nx\n")
    with pytest.raises(FormatError, match=":2:"):
        load_labels(tmp_path / "b.labels", 2)


def test_length_mismatch_names_both():
    with pytest.raises(FormatError, match="5 feature frames but 4 labels"):
        check_pair(FeatureSequence(np.zeros((5, 2)), "s"), LabelTrack([0] * 4))


def test_manifest_relative_paths(tmp_path):
    data = synth_generate(SynthSpec(num_sequences=2, min_len=5, max_len=8), 0)
    (tmp_path / "d").mkdir()
    pairs = []
    for seq, track in data:
        f, l = tmp_path / "d" / f"{seq.source_id}.feat", tmp_path / "d" / f"{seq.source_id}.labels"
        save_features(f, seq)
        save_labels(l, track.labels)
        pairs.append((f, l))
    write_manifest(tmp_path / "m.tsv", pairs)
    assert (tmp_path / "m.tsv").read_text().startswith("d/seq0000.feat\td/seq0000.labels")
    loaded = load_dataset(tmp_path / "m.tsv", 3)
    for (a, ta), (b, tb) in zip(data, loaded):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(ta.labels, tb.labels)


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("only-one-column\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "e.tsv").write_text("\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "e.tsv")


class TestWindows:
    cfg = ModelConfig.reference()

    def test_exact_fit(self):
        seq = FeatureSequence(np.ones((250, 4)))
        ws = window_sequence(seq, None, self.cfg.replace(D_feat=4))
        assert len(ws) == 1 and ws[0].mask.all()

    def test_padding(self):
        seq = FeatureSequence(np.ones((300, 4)))
        ws = window_sequence(seq, LabelTrack(np.zeros(300)), self.cfg.replace(D_feat=4))
        assert len(ws) == 2
        assert (~ws[1].mask).sum() == 200
        assert (ws[1].labels[50:] == self.cfg.C).all()
        assert (ws[1].feats[50:] == 0).all()

    def test_short_sequence(self):
        ws = window_sequence(FeatureSequence(np.ones((3, 2))), None, ModelConfig(4, 2, 2, 2, 2))
        assert len(ws) == 1 and ws[0].n_real == 3


class TestSynth:
    def test_deterministic(self):
        a = synth_generate(SynthSpec(), 4)
        b = synth_generate(SynthSpec(), 4)
        for (sa, ta), (sb, tb) in zip(a, b):
            np.testing.assert_array_equal(sa.frames, sb.frames)
            np.testing.assert_array_equal(ta.labels, tb.labels)

    def test_shapes_and_ranges(self):
        spec = SynthSpec(C=4, D_feat=8, num_sequences=5, min_len=30, max_len=40)
        for seq, track in synth_generate(spec, 0):
            assert 30 <= len(seq) <= 40 and seq.frames.shape[1] == 8
            assert track.labels.min() >= 0 and track.labels.max() < 4

    def test_noiseless_frames_equal_class_means(self):
        spec = SynthSpec(C=3, D_feat=7, num_sequences=2)
        means = class_means(3, 7)
        np.testing.assert_allclose(means @ means.T, np.eye(3), atol=1e-12)
        for seq, track in synth_generate(spec, 1):
            np.testing.assert_allclose(seq.frames, means[track.labels], atol=1e-6)

    def test_mean_action_length(self):
        spec = SynthSpec(num_sequences=20, min_len=500, max_len=500, mean_action_len=10)
        lengths = []
        for _, track in synth_generate(spec, 0):
            change = np.flatnonzero(np.diff(track.labels)) + 1
            lengths += list(np.diff(change))
        assert 8 < np.mean(lengths) < 12

    def test_second_order_is_predictable(self):
        spec = SynthSpec(C=4, num_sequences=30, order=2, peak=1.0)
        for _, track in synth_generate(spec, 0):
            change = np.flatnonzero(np.diff(track.labels)) + 1
            acts = track.labels[np.r_[0, change]]
            assert all(a != b for a, b in zip(acts, acts[1:]))
        # with peak 1 the third action is a function of the previous two
        seen = {}
        for _, track in synth_generate(spec, 0):
            change = np.flatnonzero(np.diff(track.labels)) + 1
            acts = list(track.labels[np.r_[0, change]])
            for a, b, c in zip(acts, acts[1:], acts[2:]):
                assert seen.setdefault((a, b), c) == c

    @pytest.mark.parametrize("bad", [{"C": 1}, {"D_feat": 2, "C": 3}, {"min_len": 0},
                                     {"noise_sigma": -1}, {"order": 1}, {"peak": 0}])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            SynthSpec(**bad)


def test_split():
    tr, va = split(list(range(8)), 0.25)
    assert tr == list(range(6)) and va == [6, 7]
    with pytest.raises(ValueError):
        split([1], 0.5)
