import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hanet.metrics import (F1Counts, Segment, ScoredSegment, aggregate, edit_score,
                           evaluate_sequence, f1_at_k, frame_accuracy, labels_to_segments,
                           levenshtein, map_at_mid, score_segments, write_reports)

import oracles


def segs(labels, mask=None):
    return labels_to_segments(labels, mask)


class TestSegments:
    def test_runs(self):
        assert segs([0, 0, 1, 1, 1, 0]) == [Segment(0, 0, 2), Segment(1, 2, 5), Segment(0, 5, 6)]

    def test_mask_splits_runs(self):
        assert segs([1, 1, 1, 1], [True, False, True, True]) == [Segment(1, 0, 1), Segment(1, 2, 4)]

    def test_midpoint_rounds_down(self):
        assert Segment(0, 2, 6).midpoint == 3
        assert Segment(0, 2, 5).midpoint == 3

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            segs([])


class TestAccuracy:
    def test_examples(self):
        assert frame_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 100.0
        assert frame_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 50.0

    def test_mask(self):
        assert frame_accuracy([0, 1, 9], [0, 1, 3], [True, True, False]) == 100.0

    def test_length_mismatch_names_lengths(self):
        with pytest.raises(ValueError, match="3.*4"):
            frame_accuracy([0, 0, 0], [0, 0, 0, 0])


class TestF1:
    def test_perfect(self):
        s = segs([0, 0, 1, 1, 2, 2])
        for k in (10, 25, 50):
            assert f1_at_k(s, s, k) == 100.0

    def test_over_segmentation(self):
        pred, gt = segs([0, 0, 1, 0, 0, 0]), segs([0] * 6)
        # IoU of first piece = 2/6, second = 3/6
        assert f1_at_k(pred, gt, 50) == pytest.approx(100 * 2 * (1 / 3) * 1 / (1 / 3 + 1))

    def test_iou_threshold_boundary(self):
        pred, gt = [Segment(0, 0, 5)], [Segment(0, 0, 10)]
        assert f1_at_k(pred, gt, 50) == 100.0
        assert f1_at_k(pred, gt, 51) == 0.0

    def test_class_must_match(self):
        assert f1_at_k([Segment(1, 0, 5)], [Segment(0, 0, 5)], 10) == 0.0

    def test_background_ignored(self):
        pred, gt = segs([0, 0, 1, 1]), segs([2, 2, 1, 1])
        assert f1_at_k(pred, gt, 50, background=None) < 100
        assert f1_at_k(segs([0, 1, 1, 1]), segs([0, 0, 1, 1]), 50, background=0) == 100.0

    def test_no_segments_warns(self):
        with pytest.warns(RuntimeWarning):
            assert f1_at_k([], [], 50) == 0.0

    def test_k_range(self):
        with pytest.raises(ValueError):
            f1_at_k([], [], 0)

    def test_counts_f1(self):
        assert F1Counts(0, 3, 2).f1() == 0.0
        assert F1Counts(2, 0, 0).f1() == 100.0


class TestEdit:
    def test_levenshtein(self):
        assert levenshtein("kitten", "sitting") == 3
        assert levenshtein([], [1, 2]) == 2

    def test_examples(self):
        assert edit_score(segs([0, 1, 2]), segs([0, 1, 2])) == 100.0
        assert edit_score(segs([0, 1, 2]), segs([0, 2])) == pytest.approx(100 * (1 - 1 / 3))

    def test_both_empty(self):
        assert edit_score([], []) == 100.0

    def test_one_empty(self):
        assert edit_score([], segs([0, 1])) == 0.0


class TestMap:
    def test_perfect_detection(self):
        gt = [Segment(0, 0, 4), Segment(1, 4, 8)]
        dets = [ScoredSegment(0, 0, 4, 0.9), ScoredSegment(1, 4, 8, 0.8)]
        assert map_at_mid([dets], [gt], 2) == 100.0

    def test_false_positive_ranked_first(self):
        gt = [Segment(0, 0, 4)]
        dets = [ScoredSegment(0, 5, 9, 0.9), ScoredSegment(0, 0, 4, 0.5)]
        assert map_at_mid([dets], [gt], 1) == pytest.approx(50.0)

    def test_duplicates_count_once(self):
        gt = [Segment(0, 0, 10)]
        dets = [ScoredSegment(0, 0, 5, 0.9), ScoredSegment(0, 5, 10, 0.8)]
        assert map_at_mid([dets], [gt], 1) == 100.0

    def test_missed_class_scores_zero(self):
        gt = [Segment(0, 0, 4), Segment(1, 4, 8)]
        dets = [ScoredSegment(0, 0, 4, 0.9)]
        assert map_at_mid([dets], [gt], 2) == 50.0

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            map_at_mid([[]], [[]], 2)

    def test_scores_are_mean_probability(self):
        probs = np.array([[0.2, 0.8], [0.4, 0.6], [0.9, 0.1]], dtype=np.float32)
        (s,) = score_segments([Segment(1, 0, 2)], probs)
        assert s.score == pytest.approx(0.7)


@st.composite
def instance(draw):
    F = draw(st.integers(1, 30))
    C = draw(st.integers(1, 4))
    lab = st.lists(st.integers(0, C - 1), min_size=F, max_size=F)
    return np.array(draw(lab)), np.array(draw(lab)), C


class TestInvariants:
    @settings(max_examples=300, deadline=None)
    @given(instance())
    def test_ranges(self, inst):
        pred, gt, C = inst
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for k in (10, 25, 50):
                assert 0 <= f1_at_k(segs(pred), segs(gt), k) <= 100
        assert 0 <= edit_score(segs(pred), segs(gt)) <= 100
        assert 0 <= frame_accuracy(pred, gt) <= 100

    @settings(max_examples=300, deadline=None)
    @given(instance())
    def test_identity_scores_full(self, inst):
        _, gt, _ = inst
        s = segs(gt)
        assert frame_accuracy(gt, gt) == 100.0
        assert edit_score(s, s) == 100.0
        assert f1_at_k(s, s, 50) == 100.0

    @settings(max_examples=300, deadline=None)
    @given(instance())
    def test_f1_monotone_in_k(self, inst):
        pred, gt, _ = inst
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            vals = [f1_at_k(segs(pred), segs(gt), k) for k in (10, 25, 50)]
        assert vals[0] >= vals[1] >= vals[2]

    @settings(max_examples=200, deadline=None)
    @given(instance())
    def test_greedy_never_beats_optimal_matching(self, inst):
        pred, gt, _ = inst
        ps, gs = segs(pred), segs(gt)
        if len(ps) > 6 or len(gs) > 6:
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for k in (10, 25, 50):
                assert f1_at_k(ps, gs, k) <= oracles.max_matching_f1(ps, gs, k) + 1e-9


def random_instance(rng):
    F = int(rng.integers(1, 31))
    C = int(rng.integers(1, 5))
    mean = rng.uniform(1, 6)

    def track():
        out, c = [], int(rng.integers(C))
        while len(out) < F:
            out += [c] * int(rng.geometric(1 / mean))
            c = int(rng.integers(C))
        return np.array(out[:F])

    mask = np.ones(F, dtype=bool)
    if rng.random() < 0.3:
        mask[int(rng.integers(1, F + 1)):] = False
        mask[0] = True
    probs = rng.dirichlet(np.ones(C), size=F).astype(np.float32)
    bg = int(rng.integers(C)) if rng.random() < 0.3 else None
    return track(), track(), probs, C, mask, bg


def check_against_oracles(rng) -> None:
    pred, gt, probs, C, mask, bg = random_instance(rng)
    ev = evaluate_sequence(pred, gt, C, probs, mask, bg)
    assert ev.report.accuracy == oracles.accuracy(pred, gt, mask)
    for k in (10, 25, 50):
        assert ev.report.f1[k] == oracles.f1(pred, gt, k, mask, bg)
    assert ev.report.edit == oracles.edit(pred, gt, mask, bg)
    if ev.gt_segs:
        assert ev.report.map_mid == oracles.map_mid([pred], [gt], [probs], C, [mask], bg)


def test_oracle_equivalence_sample():
    rng = np.random.default_rng(11)
    for _ in range(200):
        check_against_oracles(rng)


def test_pooled_map_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        insts = [random_instance(rng) for _ in range(3)]
        C = max(i[3] for i in insts)
        evals = [evaluate_sequence(p, g, C, pr, m) for p, g, pr, _, m, _ in insts]
        if not any(e.gt_segs for e in evals):
            continue
        probs = [np.pad(pr, ((0, 0), (0, C - pr.shape[1]))) for _, _, pr, _, _, _ in insts]
        ours = aggregate(evals, C, "pooled").map_mid
        ref = oracles.map_mid([i[0] for i in insts], [i[1] for i in insts], probs, C,
                              [i[4] for i in insts])
        assert ours == pytest.approx(ref, abs=1e-12)


class TestAggregate:
    def make(self):
        a = evaluate_sequence([0, 0, 1, 1], [0, 0, 1, 1], 2)
        b = evaluate_sequence([0] * 8, [0] * 4 + [1] * 4, 2)
        return [a, b]

    def test_per_video_is_mean(self):
        r = aggregate(self.make(), 2, "per-video")
        assert r.accuracy == 75.0

    def test_pooled_counts_frames(self):
        r = aggregate(self.make(), 2, "pooled")
        assert r.accuracy == pytest.approx(100 * 8 / 12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            aggregate(self.make(), 2, "median")

    def test_write_reports(self, tmp_path):
        doc = write_reports(tmp_path / "r", self.make(), 2)
        assert set(doc["aggregate"]) == {"per-video", "pooled"}
        assert json.loads((tmp_path / "r.json").read_text()) == doc
        text = (tmp_path / "r.txt").read_text()
        assert "pooled.accuracy=" in text and "per-video.f1@50=" in text
