"""MIL training loop over (anomalous, normal) bag pairs."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import optim
from .corpus import DEFAULT_SEGMENTS, FeatureBag, Manifest, VideoRecord, load_bag
from .objective import LossConfig, pair_objective, weight_norm_term
from .scorer import (
    DEFAULT_HIDDEN,
    ModelParams,
    ScorerError,
    backward,
    forward_batch,
    init_params,
    save_checkpoint,
    load_checkpoint,
    strip_crc,
    with_crc,
)

log = logging.getLogger(__name__)

STATE_MAGIC = b"MILSTATE1"
LOG_HEADER = ["iteration", "total", "rank", "smooth", "sparse", "weightnorm", "elapsed_ms"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_segments: int = DEFAULT_SEGMENTS
    iterations: int = 100_000
    pairs_per_step: int = 1
    optimizer: str = "adam"
    learning_rate: float | None = None  # None -> optimizer default
    beta1: float | None = None
    beta2: float | None = None
    rho: float | None = None
    epsilon: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    dropout_rate: float = 0.6
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pairs_per_step < 1:
            raise ValueError("pairs_per_step must be >= 1")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.optimizer not in optim.KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def optimizer_hyperparams(self) -> dict:
        keys = ("learning_rate", "beta1", "beta2", "epsilon") if self.optimizer == "adam" else (
            "learning_rate", "rho", "epsilon")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}

    def resolved(self) -> dict:
        """All settings with defaults materialized, for run manifests."""
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        hp = dict(optim.KINDS[self.optimizer])
        hp.update(self.optimizer_hyperparams())
        out["optimizer_hyperparams"] = hp
        return out


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    rank: list[float] = field(default_factory=list)
    smooth: list[float] = field(default_factory=list)
    sparse: list[float] = field(default_factory=list)
    weightnorm: list[float] = field(default_factory=list)
    elapsed_ms: list[float] = field(default_factory=list)
    # (anomalous scores, normal scores) per pair, only when requested
    scores: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)

    def append(self, iteration, total, rank, smooth, sparse, wnorm, elapsed_ms):
        if self.iterations and iteration <= self.iterations[-1]:
            raise TrainingError("log iterations must increase")
        self.iterations.append(iteration)
        self.total.append(total)
        self.rank.append(rank)
        self.smooth.append(smooth)
        self.sparse.append(sparse)
        self.weightnorm.append(wnorm)
        self.elapsed_ms.append(elapsed_ms)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for row in zip(self.iterations, self.total, self.rank, self.smooth, self.sparse, self.weightnorm,
                           self.elapsed_ms):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:6]), f"{row[6]:.3f}"])


@dataclass
class TrainState:
    params: ModelParams
    opt_state: optim.OptimizerState
    rng: np.random.Generator
    iteration: int = 0
    loss_variant: str = "original"


def sample_pair(anomalous: list[VideoRecord], normal: list[VideoRecord], rng: np.random.Generator):
    """Uniform draw with replacement from each label class."""
    if not anomalous or not normal:
        raise TrainingError("need at least one anomalous and one normal training video")
    return anomalous[int(rng.integers(len(anomalous)))], normal[int(rng.integers(len(normal)))]


def load_training_bags(manifest: Manifest, n_segments: int) -> dict[str, FeatureBag]:
    return {r.video_id: load_bag(manifest, r, n_segments) for r in manifest.split("train")}


def training_rng(seed: int) -> np.random.Generator:
    # separate stream from init_params, which seeds with the bare seed
    return np.random.default_rng([seed, 1])


def fresh_state(dim: int, cfg: TrainConfig) -> TrainState:
    params = init_params(dim, cfg.seed, [dim, *cfg.hidden, 1])
    opt_state = optim.make_state(cfg.optimizer, cfg.optimizer_hyperparams(), params)
    return TrainState(params, opt_state, training_rng(cfg.seed), 0, cfg.loss.variant)


def train_step(state: TrainState, pairs, cfg: TrainConfig, keep_scores: bool = False):
    """One optimizer update on the mean objective over ``pairs`` of bags."""
    k = len(pairs)
    traces, upstreams = [], []
    terms = np.zeros(5)
    kept = []
    for bag_a, bag_n in pairs:
        s_a, t_a = forward_batch(state.params, bag_a.segments, cfg.dropout_rate, state.rng)
        s_n, t_n = forward_batch(state.params, bag_n.segments, cfg.dropout_rate, state.rng)
        res = pair_objective(s_a, s_n, state.params, cfg.loss)
        terms += (res.total, res.rank_term, res.smooth_term, res.sparse_term, res.weightnorm_term)
        traces += [t_a, t_n]
        upstreams += [res.d_scores_anom / k, res.d_scores_norm / k]
        if keep_scores:
            kept.append((s_a, s_n))
    terms /= k
    if not np.all(np.isfinite(terms)):
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration + 1}: total={terms[0]}, rank={terms[1]}, "
            f"smooth={terms[2]}, sparse={terms[3]}, weightnorm={terms[4]}"
        )
    grads = backward(state.params, traces, upstreams)
    if cfg.loss.lambda3 > 0:
        _, d_w = weight_norm_term(state.params)
        for g, dw in zip(grads.weights, d_w.weights):
            g += cfg.loss.lambda3 * dw
    try:
        state.params, state.opt_state = optim.step(state.params, grads, state.opt_state)
    except optim.OptimizerError as exc:
        raise TrainingError(f"iteration {state.iteration + 1}: {exc}") from exc
    state.iteration += 1
    return terms, kept


def run(
    state: TrainState,
    manifest: Manifest,
    cfg: TrainConfig,
    out_dir: str | None = None,
    bags: dict[str, FeatureBag] | None = None,
    keep_scores: bool = False,
) -> tuple[TrainState, TrainLog]:
    """Advance ``state`` by ``cfg.iterations`` steps."""
    if state.params.dim != manifest.dim:
        raise TrainingError(f"model dim {state.params.dim} does not match corpus dim {manifest.dim}")
    if bags is None:
        bags = load_training_bags(manifest, cfg.n_segments)
    train = manifest.split("train")
    anomalous = [r for r in train if r.is_anomalous]
    normal = [r for r in train if not r.is_anomalous]
    if not anomalous or not normal:
        raise TrainingError("train split needs at least one anomalous and one normal video")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    state.loss_variant = cfg.loss.variant
    train_log = TrainLog()
    t0 = time.perf_counter()
    for _ in range(cfg.iterations):
        pairs = []
        for _ in range(cfg.pairs_per_step):
            rec_a, rec_n = sample_pair(anomalous, normal, state.rng)
            pairs.append((bags[rec_a.video_id], bags[rec_n.video_id]))
        terms, kept = train_step(state, pairs, cfg, keep_scores)
        train_log.append(state.iteration, *map(float, terms), 1000.0 * (time.perf_counter() - t0))
        if keep_scores:
            train_log.scores.append(kept)
        if out_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_training_checkpoint(state, os.path.join(out_dir, f"iter_{state.iteration:07d}.ckpt"))
        if state.iteration % 1000 == 0:
            log.info("iteration %d  loss %.5f", state.iteration, terms[0])
    if out_dir:
        save_training_checkpoint(state, os.path.join(out_dir, "final.ckpt"))
        train_log.write_csv(os.path.join(out_dir, "train_log.csv"))
    return state, train_log


def train(manifest: Manifest, cfg: TrainConfig, out_dir: str | None = None, keep_scores: bool = False):
    """Train from scratch. Returns ``(params, log)``."""
    state = fresh_state(manifest.dim, cfg)
    state, train_log = run(state, manifest, cfg, out_dir, keep_scores=keep_scores)
    return state.params, train_log


def resume(checkpoint_path: str, manifest: Manifest, cfg: TrainConfig, out_dir: str | None = None):
    """Continue training for ``cfg.iterations`` more steps from a training checkpoint."""
    state = load_training_checkpoint(checkpoint_path)
    if state.params.dim != manifest.dim:
        raise TrainingError(f"checkpoint dim {state.params.dim} does not match corpus dim {manifest.dim}")
    if tuple(state.params.layer_dims[1:-1]) != tuple(cfg.hidden):
        raise TrainingError(f"checkpoint hidden sizes {state.params.layer_dims[1:-1]} != config {list(cfg.hidden)}")
    if state.opt_state.kind != cfg.optimizer:
        raise TrainingError(f"checkpoint optimizer {state.opt_state.kind} != config {cfg.optimizer}")
    if state.loss_variant != cfg.loss.variant:
        log.warning("resuming %s-loss checkpoint with loss variant %s", state.loss_variant, cfg.loss.variant)
    state, train_log = run(state, manifest, cfg, out_dir)
    return state.params, train_log


# training checkpoint = scorer checkpoint at `path` + optimizer/rng sidecar at `path.state`

def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return buf[off : off + n].decode(), off + n


def state_bytes(state: TrainState) -> bytes:
    opt = state.opt_state
    parts = [STATE_MAGIC, struct.pack("<Q", state.iteration), _pack_str(state.loss_variant), _pack_str(opt.kind),
             struct.pack("<Q", opt.step_count), struct.pack("<I", len(opt.hyperparams))]
    for key in sorted(opt.hyperparams):
        parts += [_pack_str(key), struct.pack("<d", opt.hyperparams[key])]
    for slot in opt.slots:
        for arr in slot:
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    bg = state.rng.bit_generator.state
    if bg["bit_generator"] != "PCG64":
        raise TrainingError("only PCG64 rng state can be saved")
    mask = (1 << 64) - 1
    s, inc = bg["state"]["state"], bg["state"]["inc"]
    parts.append(struct.pack("<4Q", s >> 64, s & mask, inc >> 64, inc & mask))
    parts.append(struct.pack("<II", bg["has_uint32"], bg["uinteger"]))
    return with_crc(b"".join(parts))


def state_from_bytes(blob: bytes, params: ModelParams) -> TrainState:
    buf = strip_crc(blob)
    if not buf.startswith(STATE_MAGIC):
        raise TrainingError("not a training-state file (bad magic / version)")
    try:
        off = len(STATE_MAGIC)
        (iteration,) = struct.unpack_from("<Q", buf, off)
        variant, off = _unpack_str(buf, off + 8)
        kind, off = _unpack_str(buf, off)
        step_count, n_hp = struct.unpack_from("<QI", buf, off)
        off += 12
        hp = {}
        for _ in range(n_hp):
            key, off = _unpack_str(buf, off)
            (hp[key],) = struct.unpack_from("<d", buf, off)
            off += 8
        slots = ([], [])
        for slot in slots:
            for arr in params.arrays():
                slot.append(np.frombuffer(buf, "<f8", arr.size, off).reshape(arr.shape).astype(np.float64))
                off += 8 * arr.size
        hi_s, lo_s, hi_i, lo_i = struct.unpack_from("<4Q", buf, off)
        has32, uint = struct.unpack_from("<II", buf, off + 32)
        off += 40
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise TrainingError(f"corrupt training state: {exc}") from exc
    if off != len(buf):
        raise TrainingError("training state size does not match checkpoint shapes")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (hi_s << 64) | lo_s, "inc": (hi_i << 64) | lo_i},
        "has_uint32": has32,
        "uinteger": uint,
    }
    opt_state = optim.OptimizerState(kind, hp, step_count, slots)
    return TrainState(params, opt_state, rng, iteration, variant)


def save_training_checkpoint(state: TrainState, path: str) -> None:
    save_checkpoint(state.params, path)
    with open(path + ".state", "wb") as fh:
        fh.write(state_bytes(state))


def load_training_checkpoint(path: str) -> TrainState:
    params = load_checkpoint(path)
    state_path = path + ".state"
    if not os.path.isfile(state_path):
        raise TrainingError(f"{path}: no optimizer/rng state alongside checkpoint ({state_path})")
    with open(state_path, "rb") as fh:
        blob = fh.read()
    try:
        return state_from_bytes(blob, params)
    except ScorerError as exc:
        raise TrainingError(f"{state_path}: {exc}") from exc


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def first_crossing(values, window: int, level: float) -> float:
    """First iteration (1-based) at which the trailing ``window``-step mean drops below ``level``."""
    ma = moving_average(values, window)
    hits = np.nonzero(ma < level)[0]
    return float(hits[0] + window) if hits.size else math.inf
