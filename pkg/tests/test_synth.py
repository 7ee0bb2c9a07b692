import os

import numpy as np
import pytest

from mil_anomaly.corpus import load_bag, load_clip_features, load_manifest, segment_frame_range
from mil_anomaly.scorer import ModelParams, init_params
from mil_anomaly.synth import SynthSpec, generate, gradcheck, oracle_auc, oracle_grad, split_counts


def _tree(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


SMALL = SynthSpec(dim=6, n_videos_normal=5, n_videos_anom=7, n_segments=8, anomalous_segments=(1, 4), seed=11)


def test_same_seed_byte_identical(tmp_path):
    generate(SMALL, str(tmp_path / "a"))
    generate(SMALL, str(tmp_path / "b"))
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    from dataclasses import replace

    generate(SMALL, str(tmp_path / "a"))
    generate(replace(SMALL, seed=12), str(tmp_path / "b"))
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_round_trip_and_counts(tmp_path):
    m = load_manifest(generate(SMALL, str(tmp_path)), expected_dim=6, check_train=True)
    for label, count in (("normal", 5), ("anomalous", 7)):
        recs = [r for r in m.records if r.label == label]
        n_train, n_test = split_counts(count)
        assert len(recs) == count
        assert sum(r.split == "train" for r in recs) == n_train
        assert sum(r.split == "test" for r in recs) == n_test
    for r in m.records:
        assert r.n_frames == 16 * 8
        assert load_clip_features(m.resolve(r.feature_paths[0]), 6).n_clips == 8


def test_annotations_mark_shifted_segments(tmp_path):
    spec = SynthSpec(dim=6, n_videos_normal=2, n_videos_anom=6, n_segments=8, anomalous_segments=(2, 5),
                     separation=40.0, seed=3)
    m = load_manifest(generate(spec, str(tmp_path)))
    for r in m.records:
        bag = load_bag(m, r, 8)
        norms = np.linalg.norm(bag.segments, axis=1)
        marked = np.zeros(8, bool)
        for i in range(8):
            lo, hi = segment_frame_range(i, r.n_frames, 8)
            marked[i] = any(a <= lo and hi - 1 <= b for a, b in r.intervals)
        assert np.array_equal(norms > 20, marked)
        if r.is_anomalous:
            assert 2 <= marked.sum() <= 5


@pytest.mark.parametrize("kw", [{"dim": 0}, {"separation": -1.0}, {"anomalous_segments": (0, 3)},
                                {"anomalous_segments": (3, 9)}, {"n_videos_normal": 0}])
def test_invalid_spec(kw):
    from dataclasses import replace

    with pytest.raises(ValueError):
        replace(SMALL, **kw)


class TestOracles:
    def test_auc_examples(self):
        assert oracle_auc([0.9, 0.4, 0.1, 0.6], [1, 1, 0, 0]) == 0.75
        assert oracle_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert oracle_auc([0.3] * 4, [1, 0, 0, 1]) == 0.5
        with pytest.raises(ValueError):
            oracle_auc([0.1, 0.2], [0, 0])

    def test_grad_square(self):
        p = ModelParams([np.array([[3.0]])], [np.array([0.0])])
        g = oracle_grad(lambda q: float(q.weights[0][0, 0] ** 2), p, h=1e-4)
        assert abs(g.weights[0][0, 0] - 6.0) < 1e-7
        assert g.biases[0][0] == 0.0

    def test_grad_constant(self):
        p = init_params(3, 0, [3, 2, 1])
        g = oracle_grad(lambda q: 1.25, p)
        assert all(not a.any() for a in g.arrays())

    def test_grad_non_finite(self):
        p = ModelParams([np.array([[1.0]])], [np.array([0.0])])
        with pytest.raises(ValueError):
            oracle_grad(lambda q: float("nan"), p)

    def test_gradcheck_small_run(self):
        assert gradcheck(dim=5, seed=3, n_configs=4) < 1e-4
