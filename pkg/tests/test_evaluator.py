import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mil_anomaly.corpus import ClipFeatureMatrix, Manifest, VideoRecord, load_bag, write_clip_features
from mil_anomaly.evaluator import (
    EvaluationError,
    SegmentScores,
    evaluate,
    expand_scores_to_frames,
    export_series,
    far_from_scores,
    false_alarm_rate,
    predict_video,
    roc_auc,
    roc_curve,
    trapezoid_auc,
)
from mil_anomaly.scorer import init_params, score_bag
from mil_anomaly.synth import oracle_auc


def _zero_model(dim):
    p = init_params(dim, 0, [dim, 3, 2, 1])
    return p.zeros_like()


def _tta_corpus(tmp_path, first, second):
    write_clip_features(str(tmp_path / "v0.csv"), ClipFeatureMatrix("v", np.asarray(first)))
    write_clip_features(str(tmp_path / "v1.csv"), ClipFeatureMatrix("v", np.asarray(second)))
    rec = VideoRecord("v", "test", "normal", 64, (), ("v0.csv", "v1.csv"))
    return Manifest((rec,), np.asarray(first).shape[1], str(tmp_path)), rec


class TestPredictVideo:
    def test_single_variant_is_score_bag(self, small_corpus):
        rec = next(r for r in small_corpus.records if len(r.feature_paths) >= 1)
        params = init_params(small_corpus.dim, 1, [small_corpus.dim, 5, 3, 1])
        single = Manifest((VideoRecord(rec.video_id, rec.split, rec.label, rec.n_frames, rec.intervals,
                                       rec.feature_paths[:1]),), small_corpus.dim, small_corpus.root)
        got = predict_video(params, single.records[0], single, 8).scores
        want = score_bag(params, load_bag(small_corpus, rec, 8))
        assert np.array_equal(got, want)

    def test_identical_variants_idempotent(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(4, 3))
        manifest, rec = _tta_corpus(tmp_path, x, x)
        params = init_params(3, 2, [3, 4, 2, 1])
        np.testing.assert_allclose(predict_video(params, rec, manifest, 4).scores, score_bag(params, x), rtol=1e-15)

    def test_mean_of_variants(self, tmp_path):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        manifest, rec = _tta_corpus(tmp_path, a, b)
        params = init_params(3, 2, [3, 4, 2, 1])
        want = (score_bag(params, a) + score_bag(params, b)) / 2
        np.testing.assert_allclose(predict_video(params, rec, manifest, 4).scores, want, rtol=1e-15)


class TestExpand:
    def test_constant(self):
        assert np.all(expand_scores_to_frames(np.full(32, 0.3), 100) == 0.3)

    def test_even_division(self):
        s = np.zeros(32)
        s[3] = 0.9
        frames = expand_scores_to_frames(SegmentScores("v", s), 320)
        assert np.all(frames[30:40] == 0.9) and frames.sum() == pytest.approx(9.0)

    def test_floor_mapping_tail(self):
        s = np.arange(32) / 100
        frames = expand_scores_to_frames(s, 33)
        assert frames.size == 33 and frames[32] == s[31]

    def test_fewer_frames_than_segments(self):
        # empty segment ranges are skipped, every frame still covered
        frames = expand_scores_to_frames(np.arange(32.0), 5)
        assert frames.size == 5 and np.all(np.isfinite(frames))

    def test_bad_frame_count(self):
        with pytest.raises(EvaluationError):
            expand_scores_to_frames(np.ones(4), 0)


class TestAuc:
    def test_examples(self):
        assert roc_auc([0.9, 0.4, 0.1, 0.6], [1, 1, 0, 0]) == 0.75
        assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1, 0, 1])

    def test_curve_shape(self):
        pts = roc_curve([0.9, 0.4, 0.4, 0.1], [1, 0, 1, 0])
        assert len(pts) == 3 + 2
        assert (pts[0].false_positive_rate, pts[0].true_positive_rate) == (0.0, 0.0)
        assert (pts[-1].false_positive_rate, pts[-1].true_positive_rate) == (1.0, 1.0)
        assert pts[0].threshold == np.inf and pts[-1].threshold == -np.inf

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=60))
    def test_matches_oracle_and_trapezoid(self, rows):
        s = np.array([r[0] / 6 for r in rows])
        y = np.array([r[1] for r in rows], dtype=int)
        if y.all() or not y.any():
            return
        auc = roc_auc(s, y)
        assert abs(auc - oracle_auc(s, y)) < 1e-12
        assert abs(auc - trapezoid_auc(roc_curve(s, y))) < 1e-12
        assert abs(auc + roc_auc(-s, y) - 1.0) < 1e-12
        # strictly increasing transform
        assert abs(auc - roc_auc(np.exp(3 * s) - 2, y)) < 1e-12


class TestFalseAlarm:
    def test_examples(self):
        assert far_from_scores([np.array([0.6, 0.3, 0.51, 0.49])]) == 50.0
        assert far_from_scores([np.array([0.1, 0.2]), np.array([0.49])]) == 0.0
        assert far_from_scores([np.array([0.5])]) == 0.0  # strictly above

    def test_monotone_in_threshold(self):
        s = [np.random.default_rng(2).random(200)]
        rates = [far_from_scores(s, t) for t in np.linspace(0, 1, 41)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_needs_normal_videos(self, small_corpus):
        anomalous = [r for r in small_corpus.records if r.is_anomalous]
        with pytest.raises(EvaluationError):
            false_alarm_rate(_zero_model(small_corpus.dim), anomalous, small_corpus, n_segments=8)


class TestEvaluate:
    def test_zero_model_auc_half(self, small_corpus):
        rep = evaluate(_zero_model(small_corpus.dim), small_corpus, n_segments=8)
        assert rep.auc == 0.5
        assert rep.far_percent == 0.0  # every score is exactly 0.5
        assert rep.n_videos == len(small_corpus.split("test"))
        assert rep.n_frames == sum(r.n_frames for r in small_corpus.split("test"))

    def test_jobs_do_not_change_report(self, small_corpus):
        params = init_params(small_corpus.dim, 4, [small_corpus.dim, 6, 3, 1])
        a = evaluate(params, small_corpus, n_segments=8, jobs=1)
        b = evaluate(params, small_corpus, n_segments=8, jobs=4)
        assert a.auc == b.auc and [v.video_id for v in a.videos] == [v.video_id for v in b.videos]
        assert all(np.array_equal(x.frame_scores, y.frame_scores) for x, y in zip(a.videos, b.videos))

    def test_export(self, small_corpus, tmp_path):
        params = init_params(small_corpus.dim, 4, [small_corpus.dim, 6, 3, 1])
        rep = evaluate(params, small_corpus, n_segments=8)
        files = export_series(rep, str(tmp_path / "a"))
        export_series(rep, str(tmp_path / "b"))
        for f in files:
            rel = os.path.relpath(f, tmp_path / "a")
            assert open(f, "rb").read() == open(tmp_path / "b" / rel, "rb").read()
        v = rep.videos[0]
        lines = (tmp_path / "a" / "series" / f"{v.video_id}.csv").read_text().splitlines()
        assert lines[0] == "frame,score,label" and len(lines) == v.frame_scores.size + 1
        roc_lines = (tmp_path / "a" / "roc.csv").read_text().splitlines()
        n_distinct = np.unique(np.concatenate([x.frame_scores for x in rep.videos])).size
        assert roc_lines[0] == "fpr,tpr,threshold" and len(roc_lines) == n_distinct + 2 + 1
        summary = json.loads((tmp_path / "a" / "report.json").read_text())
        assert set(summary) == {"auc", "far_percent", "n_videos", "n_frames"}

    def test_empty_split(self, small_corpus):
        with pytest.raises(EvaluationError):
            evaluate(_zero_model(small_corpus.dim), small_corpus, n_segments=8, split="validation")
