"""Synthetic MIL corpora with known segment-level ground truth, plus test oracles."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .corpus import (
    ANOMALOUS,
    NORMAL,
    ClipFeatureMatrix,
    VideoRecord,
    segment_frame_range,
    write_clip_features,
    write_manifest,
)
from .objective import LossConfig, pair_objective, weight_norm_term
from .scorer import ModelParams, backward, forward_batch, init_params

CLIP_FRAMES = 16
TRAIN_FRACTION = 0.7


@dataclass(frozen=True)
class SynthSpec:
    """Corpus recipe.

    Anomalous segments are shifted by ``separation * noise_sigma`` along a
    fixed unit direction. ``noisy_normal_fraction`` of normal-video segments
    get a label-free partial shift of ``noisy_shift * separation * noise_sigma``
    along the same direction, mimicking normal events that look suspicious.
    """

    dim: int = 64
    n_videos_normal: int = 40
    n_videos_anom: int = 40
    n_segments: int = 32
    anomalous_segments: tuple[int, int] = (1, 10)
    max_runs: int = 3
    separation: float = 3.0
    noise_sigma: float = 1.0
    noisy_normal_fraction: float = 0.0
    noisy_shift: float = 0.5
    tta_variants: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_segments < 1:
            raise ValueError("dim and n_segments must be >= 1")
        if self.n_videos_normal < 2 or self.n_videos_anom < 2:
            raise ValueError("need >= 2 videos per label so both splits are populated")
        lo, hi = self.anomalous_segments
        if not 1 <= lo <= hi <= self.n_segments:
            raise ValueError(f"anomalous_segments range {self.anomalous_segments} invalid for n={self.n_segments}")
        if self.max_runs < 1:
            raise ValueError("max_runs must be >= 1")
        if self.separation < 0 or self.noise_sigma <= 0:
            raise ValueError("separation must be >= 0 and noise_sigma > 0")
        if not 0.0 <= self.noisy_normal_fraction <= 1.0:
            raise ValueError("noisy_normal_fraction must be in [0, 1]")
        if self.tta_variants < 1:
            raise ValueError("tta_variants must be >= 1")


def split_counts(count: int) -> tuple[int, int]:
    n_train = min(count - 1, max(1, round(TRAIN_FRACTION * count)))
    return n_train, count - n_train


def _place_runs(rng: np.random.Generator, n: int, n_anom: int, max_runs: int) -> list[tuple[int, int]]:
    """Split ``n_anom`` segments into separated contiguous runs inside ``range(n)``."""
    n_runs = int(rng.integers(1, min(n_anom, max_runs, n - n_anom + 1) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n_anom), size=n_runs - 1, replace=False)) if n_runs > 1 else []
    lengths = np.diff(np.concatenate([[0], cuts, [n_anom]])).astype(int)
    spare = n - n_anom - (n_runs - 1)  # slack beyond the mandatory 1-segment gaps
    gaps = rng.multinomial(spare, np.full(n_runs + 1, 1.0 / (n_runs + 1)))
    runs, pos = [], int(gaps[0])
    for k, length in enumerate(lengths):
        runs.append((pos, pos + int(length)))
        pos += int(length) + 1 + int(gaps[k + 1])
    return runs


def generate(spec: SynthSpec, out_dir: str) -> str:
    """Write feature files and ``manifest.csv`` under ``out_dir``; return the manifest path.

    Each video has ``n_segments`` clips of 16 frames, so clip, segment and
    frame index mappings coincide exactly.
    """
    rng = np.random.default_rng(spec.seed)
    direction = rng.standard_normal(spec.dim)
    direction /= np.linalg.norm(direction)
    shift = spec.separation * spec.noise_sigma * direction
    n = spec.n_segments
    n_frames = CLIP_FRAMES * n
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)

    records = []
    for label, count in ((NORMAL, spec.n_videos_normal), (ANOMALOUS, spec.n_videos_anom)):
        n_train, _ = split_counts(count)
        for v in range(count):
            video_id = f"{label}_{v:04d}"
            split = "train" if v < n_train else "test"
            offsets = np.zeros((n, spec.dim))
            intervals = []
            if label == ANOMALOUS:
                n_anom = int(rng.integers(spec.anomalous_segments[0], spec.anomalous_segments[1] + 1))
                for s, e in _place_runs(rng, n, n_anom, spec.max_runs):
                    offsets[s:e] = shift
                    intervals.append((segment_frame_range(s, n_frames, n)[0], segment_frame_range(e - 1, n_frames, n)[1]))
            elif spec.noisy_normal_fraction > 0:
                noisy = rng.random(n) < spec.noisy_normal_fraction
                offsets[noisy] = spec.noisy_shift * shift
            paths = []
            for k in range(spec.tta_variants):
                clips = offsets + spec.noise_sigma * rng.standard_normal((n, spec.dim))
                suffix = "" if k == 0 else f"_tta{k}"
                rel = os.path.join("features", f"{video_id}{suffix}.csv")
                write_clip_features(os.path.join(out_dir, rel), ClipFeatureMatrix(video_id, clips))
                paths.append(rel)
            records.append(VideoRecord(video_id, split, label, n_frames, tuple(intervals), tuple(paths)))

    path = os.path.join(out_dir, "manifest.csv")
    write_manifest(path, records)
    return path


def oracle_auc(scores, labels) -> float:
    """Exhaustive pairwise Mann-Whitney count (ties score 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("oracle_auc needs both classes")
    wins = 0.0
    for p in pos:
        wins += np.count_nonzero(p > neg) + 0.5 * np.count_nonzero(p == neg)
    return wins / (pos.size * neg.size)


def oracle_grad(fn, params: ModelParams, h: float = 1e-4) -> ModelParams:
    """Central-difference gradient of ``fn(params) -> float`` w.r.t. every entry."""
    probe = params.copy()
    grad = params.zeros_like()
    for arr, g in zip(probe.arrays(), grad.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn(probe)
            flat[j] = orig - h
            down = fn(probe)
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(f"non-finite evaluation at entry {j}")
            gflat[j] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: ModelParams, numeric: ModelParams, floor: float = 1e-8) -> float:
    worst = 0.0
    for a, b in zip(analytic.arrays(), numeric.arrays()):
        err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _smooth_point(params: ModelParams, bags, variant: str, kink_guard: float) -> bool:
    for bag in bags:
        _, trace = forward_batch(params, bag)
        if any(np.min(np.abs(z)) < kink_guard for z in trace.pre_activations[:-1]):
            return False
    s_a = forward_batch(params, bags[0])[0]
    s_n = forward_batch(params, bags[1])[0]
    top_a = np.sort(s_a)[::-1]
    agg_n = s_n.max() if variant == "original" else s_n.mean()
    if abs(1.0 - top_a[0] + agg_n) <= 0.05:
        return False
    if s_a.size > 1 and top_a[0] - top_a[1] <= 0.01:
        return False
    if variant == "original" and s_n.size > 1:
        top_n = np.sort(s_n)[::-1]
        if top_n[0] - top_n[1] <= 0.01:
            return False
    return True


def gradcheck(dim: int = 5, seed: int = 0, n_configs: int = 20, n_segments: int = 8,
              hidden: tuple[int, ...] = (4, 3), h: float = 1e-4) -> float:
    """Worst relative error between backprop and central differences of the pair objective.

    Random networks, bags, loss variants and weights are drawn until each
    configuration sits away from ReLU kinks, the hinge corner and argmax ties.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_configs:
        params = init_params(dim, int(rng.integers(2**31)), [dim, *hidden, 1])
        for b in params.biases:
            b[:] = rng.normal(0.0, 0.3, b.shape)
        bags = (rng.normal(0.5, 1.0, (n_segments, dim)), rng.normal(0.0, 1.0, (n_segments, dim)))
        cfg = LossConfig(
            variant=("original", "mean_normal")[done % 2],
            lambda1=float(rng.uniform(0.0, 0.5)),
            lambda2=float(rng.uniform(0.0, 0.5)),
            lambda3=float(rng.uniform(0.0, 0.1)),
        )
        if not _smooth_point(params, bags, cfg.variant, 1e-3):
            continue

        def objective(p):
            return pair_objective(forward_batch(p, bags[0])[0], forward_batch(p, bags[1])[0], p, cfg).total

        s_a, t_a = forward_batch(params, bags[0])
        s_n, t_n = forward_batch(params, bags[1])
        res = pair_objective(s_a, s_n, params, cfg)
        analytic = backward(params, [t_a, t_n], [res.d_scores_anom, res.d_scores_norm])
        _, d_w = weight_norm_term(params)
        for g, dw in zip(analytic.weights, d_w.weights):
            g += cfg.lambda3 * dw
        worst = max(worst, max_relative_error(analytic, oracle_grad(objective, params, h)))
        done += 1
    return worst
