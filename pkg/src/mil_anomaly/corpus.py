"""Feature bags, manifests and the clip/segment/frame index mappings.

File formats
------------
Manifest CSV, header ``video_id,split,label,n_frames,intervals,feature_paths``.
``intervals`` holds ``;``-separated ``start-end`` pairs (0-based, half-open),
``feature_paths`` holds ``;``-separated paths relative to the manifest.

Feature CSV: first line ``video_id,dim,n_clips``, then one line of ``dim``
comma-separated floats per 16-frame clip.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NORMAL = "normal"
ANOMALOUS = "anomalous"
LABELS = (NORMAL, ANOMALOUS)
SPLITS = ("train", "test")
MANIFEST_HEADER = ["video_id", "split", "label", "n_frames", "intervals", "feature_paths"]
MAX_TEST_INTERVALS = 10
DEFAULT_SEGMENTS = 32


class CorpusError(ValueError):
    """Raised for malformed manifests, feature files or index arguments."""


@dataclass(frozen=True)
class ClipFeatureMatrix:
    video_id: str
    clips: np.ndarray  # (n_clips, dim), float64

    def __post_init__(self):
        clips = np.asarray(self.clips, dtype=np.float64)
        if clips.ndim != 2 or clips.shape[0] < 1 or clips.shape[1] < 1:
            raise CorpusError(f"{self.video_id}: clip matrix must be non-empty 2-D, got shape {clips.shape}")
        if not np.all(np.isfinite(clips)):
            raise CorpusError(f"{self.video_id}: non-finite feature value")
        clips.setflags(write=False)
        object.__setattr__(self, "clips", clips)

    @property
    def dim(self) -> int:
        return self.clips.shape[1]

    @property
    def n_clips(self) -> int:
        return self.clips.shape[0]


@dataclass(frozen=True)
class FeatureBag:
    """One video as a bag of ``n`` segment feature vectors."""

    video_id: str
    label: str
    segments: np.ndarray  # (n, dim), float64

    def __post_init__(self):
        if self.label not in LABELS:
            raise CorpusError(f"unknown label {self.label!r}")
        segments = np.asarray(self.segments, dtype=np.float64)
        if segments.ndim != 2 or segments.shape[0] < 1:
            raise CorpusError(f"{self.video_id}: bag must be a non-empty 2-D array")
        if not np.all(np.isfinite(segments)):
            raise CorpusError(f"{self.video_id}: non-finite segment value")
        segments.setflags(write=False)
        object.__setattr__(self, "segments", segments)

    @property
    def n(self) -> int:
        return self.segments.shape[0]

    @property
    def dim(self) -> int:
        return self.segments.shape[1]


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    split: str
    label: str
    n_frames: int
    intervals: tuple[tuple[int, int], ...] = ()
    feature_paths: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple((int(s), int(e)) for s, e in self.intervals))
        object.__setattr__(self, "feature_paths", tuple(str(p) for p in self.feature_paths))
        validate_record(self)

    @property
    def is_anomalous(self) -> bool:
        return self.label == ANOMALOUS


def validate_record(record: VideoRecord) -> None:
    if not record.video_id:
        raise CorpusError("empty video_id")
    if record.split not in SPLITS:
        raise CorpusError(f"{record.video_id}: unknown split {record.split!r}")
    if record.label not in LABELS:
        raise CorpusError(f"{record.video_id}: unknown label {record.label!r}")
    if record.n_frames < 1:
        raise CorpusError(f"{record.video_id}: n_frames must be positive")
    if not record.feature_paths:
        raise CorpusError(f"{record.video_id}: no feature paths")
    if record.label == NORMAL and record.intervals:
        raise CorpusError(f"{record.video_id}: normal video with anomaly intervals")
    if record.label == ANOMALOUS and record.split == "test":
        if not 1 <= len(record.intervals) <= MAX_TEST_INTERVALS:
            raise CorpusError(
                f"{record.video_id}: anomalous test video needs 1-{MAX_TEST_INTERVALS} intervals, "
                f"got {len(record.intervals)}"
            )
    prev_end = 0
    for start, end in record.intervals:
        if start >= end:
            raise CorpusError(f"{record.video_id}: interval start >= end ({start}-{end})")
        if start < 0 or end > record.n_frames:
            raise CorpusError(f"{record.video_id}: interval {start}-{end} outside [0, {record.n_frames})")
        if start < prev_end:
            raise CorpusError(f"{record.video_id}: intervals overlapping or unsorted")
        prev_end = end


@dataclass(frozen=True)
class Manifest:
    records: tuple[VideoRecord, ...]
    dim: int
    root: str = "."  # directory feature paths are relative to

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.dim < 1:
            raise CorpusError("manifest dim must be positive")
        seen = set()
        for r in self.records:
            if r.video_id in seen:
                raise CorpusError(f"duplicate video_id {r.video_id!r}")
            seen.add(r.video_id)

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self, video_id: str) -> VideoRecord:
        for r in self.records:
            if r.video_id == video_id:
                return r
        raise KeyError(video_id)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def check_trainable(self) -> None:
        labels = {r.label for r in self.split("train")}
        missing = [lab for lab in LABELS if lab not in labels]
        if missing:
            raise CorpusError(f"train split has no {' or '.join(missing)} videos")


def _parse_intervals(text: str) -> list[tuple[int, int]]:
    text = text.strip()
    if not text:
        return []
    out = []
    for chunk in text.split(";"):
        start, sep, end = chunk.strip().partition("-")
        if not sep:
            raise CorpusError(f"bad interval {chunk!r}")
        out.append((int(start), int(end)))
    return out


def format_intervals(intervals: Iterable[tuple[int, int]]) -> str:
    return ";".join(f"{s}-{e}" for s, e in intervals)


def read_feature_header(path: str) -> tuple[str, int, int]:
    with open(path, newline="") as fh:
        first = fh.readline()
    parts = first.strip().split(",")
    if len(parts) != 3:
        raise CorpusError(f"{path}: empty file or bad header line")
    try:
        video_id, dim, n_clips = parts[0], int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise CorpusError(f"{path}: bad header line: {exc}") from exc
    return video_id, dim, n_clips


def load_manifest(path: str, expected_dim: int | None = None, check_train: bool = False) -> Manifest:
    """Parse and validate a manifest CSV.

    Every feature file must exist and all files must declare the same ``dim``
    (only header lines are read here). ``check_train`` additionally requires
    both labels in the train split, which pair sampling needs.
    """
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise CorpusError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise CorpusError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            video_id, split, label, n_frames, intervals, paths = (c.strip() for c in row)
            try:
                records.append(
                    VideoRecord(
                        video_id=video_id,
                        split=split,
                        label=label,
                        n_frames=int(n_frames),
                        intervals=tuple(_parse_intervals(intervals)),
                        feature_paths=tuple(p.strip() for p in paths.split(";") if p.strip()),
                    )
                )
            except (CorpusError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise CorpusError(f"{path}: manifest has no records")

    dim = expected_dim
    for rec in records:
        for fp in rec.feature_paths:
            full = fp if os.path.isabs(fp) else os.path.join(root, fp)
            if not os.path.isfile(full):
                raise CorpusError(f"{rec.video_id}: missing feature file {fp}")
            _, file_dim, _ = read_feature_header(full)
            if dim is None:
                dim = file_dim
            elif file_dim != dim:
                raise CorpusError(f"{rec.video_id}: feature dim {file_dim} in {fp}, expected {dim}")
    manifest = Manifest(records=tuple(records), dim=dim, root=root)
    if check_train:
        manifest.check_trainable()
    return manifest


def write_manifest(path: str, records: Sequence[VideoRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow(
                [r.video_id, r.split, r.label, r.n_frames, format_intervals(r.intervals), ";".join(r.feature_paths)]
            )


def load_clip_features(path: str, expected_dim: int | None = None) -> ClipFeatureMatrix:
    video_id, dim, n_clips = read_feature_header(path)
    if expected_dim is not None and dim != expected_dim:
        raise CorpusError(f"{path}: dimension mismatch, file declares {dim}, expected {expected_dim}")
    if n_clips < 1:
        raise CorpusError(f"{path}: no clips")
    try:
        clips = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise CorpusError(f"{path}: {exc}") from exc
    if clips.shape != (n_clips, dim):
        raise CorpusError(f"{path}: expected {n_clips}x{dim} values, found {clips.shape[0]}x{clips.shape[1]}")
    if not np.all(np.isfinite(clips)):
        raise CorpusError(f"{path}: non-finite feature value")
    return ClipFeatureMatrix(video_id, clips)


def write_clip_features(path: str, matrix: ClipFeatureMatrix) -> None:
    # repr() round-trips float64 exactly
    with open(path, "w") as fh:
        fh.write(f"{matrix.video_id},{matrix.dim},{matrix.n_clips}\n")
        for row in matrix.clips:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def concat_features(matrices: Sequence[ClipFeatureMatrix]) -> ClipFeatureMatrix:
    if not matrices:
        raise CorpusError("nothing to concatenate")
    first = matrices[0]
    for m in matrices[1:]:
        if m.video_id != first.video_id:
            raise CorpusError(f"video_id mismatch: {first.video_id!r} vs {m.video_id!r}")
        if m.n_clips != first.n_clips:
            raise CorpusError(f"{first.video_id}: n_clips mismatch ({first.n_clips} vs {m.n_clips})")
    if len(matrices) == 1:
        return first
    return ClipFeatureMatrix(first.video_id, np.concatenate([m.clips for m in matrices], axis=1))


def segment_bounds(i: int, total: int, n: int) -> tuple[int, int]:
    """Floor-proportional split of ``range(total)`` into ``n`` parts; part ``i``."""
    return (i * total) // n, ((i + 1) * total) // n


def pool_segments(clips: ClipFeatureMatrix, n: int = DEFAULT_SEGMENTS, label: str = NORMAL) -> FeatureBag:
    """Average consecutive clip features into ``n`` segments.

    When a video has fewer clips than segments, an empty range reuses the clip
    at its start index, so segment ``i`` is clip ``floor(i * n_clips / n)``.
    """
    if n < 1:
        raise CorpusError("segment count must be >= 1")
    out = np.empty((n, clips.dim), dtype=np.float64)
    for i in range(n):
        lo, hi = segment_bounds(i, clips.n_clips, n)
        if hi > lo:
            out[i] = clips.clips[lo:hi].mean(axis=0)
        else:
            out[i] = clips.clips[lo]
    return FeatureBag(clips.video_id, label, out)


def segment_frame_range(segment_index: int, n_frames: int, n: int = DEFAULT_SEGMENTS) -> tuple[int, int]:
    if not 0 <= segment_index < n:
        raise CorpusError(f"segment index {segment_index} out of range [0, {n})")
    if n_frames < 1:
        raise CorpusError("n_frames must be positive")
    return segment_bounds(segment_index, n_frames, n)


def frame_labels(record: VideoRecord) -> np.ndarray:
    labels = np.zeros(record.n_frames, dtype=np.int8)
    for start, end in record.intervals:
        labels[start:end] = 1
    return labels


def load_bag(manifest: Manifest, record: VideoRecord, n: int = DEFAULT_SEGMENTS, variant: int = 0) -> FeatureBag:
    matrix = load_clip_features(manifest.resolve(record.feature_paths[variant]), manifest.dim)
    if matrix.video_id != record.video_id:
        raise CorpusError(f"feature file for {record.video_id} declares video_id {matrix.video_id}")
    return pool_segments(matrix, n, record.label)


def summarize(manifest: Manifest) -> dict:
    """Per-split label counts, for the ``ingest`` command."""
    stats: dict = {"dim": manifest.dim, "n_videos": len(manifest.records)}
    for split in SPLITS:
        recs = manifest.split(split)
        stats[split] = {lab: sum(r.label == lab for r in recs) for lab in LABELS}
        stats[split]["frames"] = int(sum(r.n_frames for r in recs))
        stats[split]["tta_variants"] = int(sum(len(r.feature_paths) - 1 for r in recs))
    return stats

