"""Feed-forward segment scorer: D -> 512 -> 32 -> 1, ReLU hidden, sigmoid output.

Everything is float64. Each row of a segment matrix is scored on its own, so
a segment's score is bitwise the same whatever bag it sits in.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

DEFAULT_HIDDEN = (512, 32)
CHECKPOINT_MAGIC = b"MILTHROW1"


class ScorerError(ValueError):
    pass


@dataclass
class ModelParams:
    weights: list[np.ndarray]  # layer l: (dims[l+1], dims[l])
    biases: list[np.ndarray]  # layer l: (dims[l+1],)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ScorerError("need one bias vector per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ScorerError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ScorerError(f"layer {l}: input width {w.shape[1]} != previous output {self.weights[l - 1].shape[0]}")
        if self.weights[-1].shape[0] != 1:
            raise ScorerError("output layer must have width 1")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat view ``[W0, b0, W1, b1, ...]`` shared with the optimizer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "ModelParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def equals(self, other: "ModelParams") -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


@dataclass
class ForwardTrace:
    """Activations kept for backprop. ``activations[0]`` is the input batch."""

    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]
    masks: list[np.ndarray | None]  # inverted-dropout multipliers per hidden layer
    scores: np.ndarray


def init_params(dim: int, seed: int, layer_dims: list[int] | None = None) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    if dim < 1:
        raise ScorerError(f"input dim must be >= 1, got {dim}")
    dims = list(layer_dims) if layer_dims is not None else [dim, *DEFAULT_HIDDEN, 1]
    if dims[0] != dim:
        raise ScorerError(f"layer_dims[0]={dims[0]} does not match dim={dim}")
    if any(d < 1 for d in dims) or dims[-1] != 1:
        raise ScorerError(f"invalid layer_dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


_SCORE_LO = np.finfo(np.float64).tiny
_SCORE_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep scores inside the open interval even when float64 rounds to 0 or 1
    return np.clip(out, _SCORE_LO, _SCORE_HI)


def _affine(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one gemv per row: a row's result never depends on the rest of the batch
    out = np.empty((a.shape[0], w.shape[0]))
    for i in range(a.shape[0]):
        out[i] = w @ np.ascontiguousarray(a[i])
    return out + b


def forward_batch(
    params: ModelParams,
    x: np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ScorerError(f"input width {x.shape[-1] if x.ndim else 0} does not match model dim {params.dim}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ScorerError("dropout_rate must be in [0, 1)")
    if dropout_rate > 0 and rng is None:
        raise ScorerError("dropout requires an rng")
    activations, pre, masks = [x], [], []
    a = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _affine(a, w, b)
        pre.append(z)
        if l == last:
            break
        a = np.maximum(z, 0.0)
        mask = None
        if dropout_rate > 0:
            mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            a = a * mask
        masks.append(mask)
        activations.append(a)
    scores = _sigmoid(pre[-1][:, 0])
    return scores, ForwardTrace(activations, pre, masks, scores)


def forward(params, x, dropout_rate=0.0, rng=None) -> tuple[float, ForwardTrace]:
    """Score a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ScorerError("forward expects one feature vector; use forward_batch for matrices")
    scores, trace = forward_batch(params, x[None, :], dropout_rate, rng)
    return float(scores[0]), trace


def score_bag(params: ModelParams, bag) -> np.ndarray:
    """Inference-mode scores, one per segment, in segment order."""
    segments = bag.segments if hasattr(bag, "segments") else bag
    if segments.shape[1] != params.dim:
        raise ScorerError(f"bag dim {segments.shape[1]} does not match model dim {params.dim}")
    scores, _ = forward_batch(params, segments)
    return scores


def backward(params: ModelParams, traces, upstreams) -> ModelParams:
    """Gradient of a loss w.r.t. all weights and biases.

    ``traces`` and ``upstreams`` are parallel sequences: each upstream holds
    d(loss)/d(score) for every row of the matching trace. Contributions add.
    """
    grad = params.zeros_like()
    for trace, up in zip(traces, upstreams, strict=True):
        up = np.asarray(up, dtype=np.float64)
        if up.shape != trace.scores.shape:
            raise ScorerError(f"upstream shape {up.shape} != scores shape {trace.scores.shape}")
        s = trace.scores
        delta = (up * s * (1.0 - s))[:, None]
        for l in range(len(params.weights) - 1, -1, -1):
            grad.weights[l] += delta.T @ trace.activations[l]
            grad.biases[l] += delta.sum(axis=0)
            if l == 0:
                break
            da = delta @ params.weights[l]
            mask = trace.masks[l - 1]
            if mask is not None:
                da = da * mask
            # relu'(0) := 0
            delta = da * (trace.pre_activations[l - 1] > 0)
    return grad


def _pack_params(params: ModelParams) -> bytes:
    dims = params.layer_dims
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.weights)), struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_params(payload: bytes, offset: int = 0) -> tuple[ModelParams, int]:
    m = len(CHECKPOINT_MAGIC)
    if payload[offset : offset + m] != CHECKPOINT_MAGIC:
        raise ScorerError("not a scorer checkpoint (bad magic / version)")
    offset += m
    try:
        (n_layers,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        dims = struct.unpack_from(f"<{n_layers + 1}I", payload, offset)
        offset += 4 * (n_layers + 1)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            count = fan_in * fan_out
            w = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(fan_out, fan_in)
            offset += 8 * count
            b = np.frombuffer(payload, dtype="<f8", count=fan_out, offset=offset)
            offset += 8 * fan_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise ScorerError(f"corrupt checkpoint: {exc}") from exc
    return ModelParams(weights, biases), offset


def with_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload))


def strip_crc(blob: bytes) -> bytes:
    if len(blob) < 4:
        raise ScorerError("checkpoint truncated")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ScorerError("checkpoint CRC mismatch (truncated or corrupted)")
    return payload


def checkpoint_bytes(params: ModelParams) -> bytes:
    return with_crc(_pack_params(params))


def params_from_bytes(blob: bytes) -> ModelParams:
    payload = strip_crc(blob)
    params, end = _unpack_params(payload)
    if end != len(payload):
        raise ScorerError(f"checkpoint has {len(payload) - end} trailing bytes")
    return params


def save_checkpoint(params: ModelParams, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
