"""Frame-level ROC-AUC, false alarm rate, TTA averaging and score-series export."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import DEFAULT_SEGMENTS, Manifest, VideoRecord, frame_labels, load_bag, segment_frame_range
from .scorer import ModelParams, score_bag


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentScores:
    video_id: str
    scores: np.ndarray


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    true_positive_rate: float
    false_positive_rate: float


@dataclass
class VideoSeries:
    video_id: str
    label: str
    segment_scores: np.ndarray
    frame_scores: np.ndarray
    frame_labels: np.ndarray


@dataclass
class EvalReport:
    auc: float
    roc: list[RocPoint]
    videos: list[VideoSeries] = field(default_factory=list)
    far_percent: float | None = None

    @property
    def n_videos(self) -> int:
        return len(self.videos)

    @property
    def n_frames(self) -> int:
        return int(sum(v.frame_scores.size for v in self.videos))

    def summary(self) -> dict:
        return {"auc": self.auc, "far_percent": self.far_percent, "n_videos": self.n_videos, "n_frames": self.n_frames}


def predict_video(params: ModelParams, record: VideoRecord, manifest: Manifest,
                  n_segments: int = DEFAULT_SEGMENTS) -> SegmentScores:
    """Inference scores averaged element-wise over every feature variant of the video."""
    per_variant = [
        score_bag(params, load_bag(manifest, record, n_segments, variant=k))
        for k in range(len(record.feature_paths))
    ]
    return SegmentScores(record.video_id, np.mean(per_variant, axis=0))


def expand_scores_to_frames(scores, n_frames: int) -> np.ndarray:
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if n_frames < 1:
        raise EvaluationError("n_frames must be positive")
    n = s.size
    out = np.empty(n_frames)
    for i in range(n):
        lo, hi = segment_frame_range(i, n_frames, n)
        out[lo:hi] = s[i]
    return out


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError(f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    if not np.all((y == 0) | (y == 1)):
        raise EvaluationError("labels must be 0/1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise EvaluationError("ROC needs both positive and negative frames")
    return s, y


def roc_auc(frame_scores, frame_labels) -> float:
    """Mann-Whitney AUC from mid-ranks; tied pos/neg pairs count one half."""
    s, y = _check_binary(frame_scores, frame_labels)
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    mid_rank = np.cumsum(counts) - (counts - 1) / 2.0
    ranks = mid_rank[inverse]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(frame_scores, frame_labels) -> list[RocPoint]:
    """Sweep of ``score >= t`` over distinct scores, plus the two endpoints.

    Endpoints carry thresholds ``+inf`` (nothing flagged) and ``-inf``
    (everything flagged), so there are ``#distinct + 2`` points.
    """
    s, y = _check_binary(frame_scores, frame_labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    thresholds, first = np.unique(-s_sorted, return_index=True)
    ends = np.append(first[1:], s_sorted.size)
    tp = np.cumsum(y_sorted)[ends - 1]
    fp = ends - tp
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    points = [RocPoint(np.inf, 0.0, 0.0)]
    points += [RocPoint(float(-t), float(a / n_pos), float(b / n_neg)) for t, a, b in zip(thresholds, tp, fp)]
    points.append(RocPoint(-np.inf, 1.0, 1.0))
    return points


def trapezoid_auc(points: list[RocPoint]) -> float:
    fpr = np.array([p.false_positive_rate for p in points])
    tpr = np.array([p.true_positive_rate for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def far_from_scores(segment_scores, threshold: float = 0.5) -> float:
    """Percentage of normal segments scored strictly above ``threshold``."""
    flat = np.concatenate([np.ravel(getattr(s, "scores", s)) for s in segment_scores]) if segment_scores else np.empty(0)
    if flat.size == 0:
        raise EvaluationError("no normal segments to compute a false alarm rate")
    return float(100.0 * np.count_nonzero(flat > threshold) / flat.size)


def false_alarm_rate(params: ModelParams, records, manifest: Manifest, threshold: float = 0.5,
                     n_segments: int = DEFAULT_SEGMENTS) -> float:
    normal = [r for r in records if not r.is_anomalous]
    if not normal:
        raise EvaluationError("false alarm rate needs at least one normal video")
    return far_from_scores([predict_video(params, r, manifest, n_segments) for r in normal], threshold)


def evaluate(params: ModelParams, manifest: Manifest, n_segments: int = DEFAULT_SEGMENTS,
             threshold: float = 0.5, jobs: int = 1, split: str = "test") -> EvalReport:
    """Corpus-level AUC over the concatenated frames of every video in ``split``."""
    records = manifest.split(split)
    if not records:
        raise EvaluationError(f"no {split} videos in manifest")

    def one(record):
        return predict_video(params, record, manifest, n_segments)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            predictions = list(pool.map(one, records))  # map keeps manifest order
    else:
        predictions = [one(r) for r in records]

    videos = [
        VideoSeries(r.video_id, r.label, p.scores, expand_scores_to_frames(p, r.n_frames), frame_labels(r))
        for r, p in zip(records, predictions)
    ]
    all_scores = np.concatenate([v.frame_scores for v in videos])
    all_labels = np.concatenate([v.frame_labels for v in videos])
    normal_scores = [p for r, p in zip(records, predictions) if not r.is_anomalous]
    return EvalReport(
        auc=roc_auc(all_scores, all_labels),
        roc=roc_curve(all_scores, all_labels),
        videos=videos,
        far_percent=far_from_scores(normal_scores, threshold) if normal_scores else None,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def export_series(report: EvalReport, out_dir: str) -> list[str]:
    """Write per-video ``frame,score,label`` CSVs, ``roc.csv`` and ``report.json``."""
    series_dir = os.path.join(out_dir, "series")
    os.makedirs(series_dir, exist_ok=True)
    written = []
    for v in report.videos:
        path = os.path.join(series_dir, f"{v.video_id}.csv")
        with open(path, "w") as fh:
            fh.write("frame,score,label\n")
            for f, (score, lab) in enumerate(zip(v.frame_scores, v.frame_labels)):
                fh.write(f"{f},{_fmt(score)},{int(lab)}\n")
        written.append(path)
    roc_path = os.path.join(out_dir, "roc.csv")
    with open(roc_path, "w") as fh:
        fh.write("fpr,tpr,threshold\n")
        for p in report.roc:
            fh.write(f"{_fmt(p.false_positive_rate)},{_fmt(p.true_positive_rate)},{_fmt(p.threshold)}\n")
    written.append(roc_path)
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(json_path)
    return written
