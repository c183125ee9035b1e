"""Pair-scoring MLP with hand-written backprop, Adam, and binary checkpoints.

Weights are float64 throughout. A network maps one driver-order feature
vector to a scalar score; a driver's candidate scores become a distribution
through a masked softmax.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class NoFeasibleAction(ValueError):
    """The driver has no candidate order this step."""


class CheckpointError(ValueError):
    pass


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


@dataclass
class Mlp:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]  # layer k maps sizes[k] -> sizes[k+1], shape (in, out)
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """Uniform fan-in (He) initialization."""
        sizes = tuple(int(s) for s in sizes)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "Mlp":
        sizes = tuple(int(s) for s in sizes)
        return cls(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for p in self.params():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _check_input(params: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match network input {params.input_dim}")
    return x


def forward(params: Mlp, features: np.ndarray) -> np.ndarray:
    """Scores for a (N, d) batch (or a single d-vector, giving shape (1,))."""
    h = _check_input(params, features)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = leaky_relu(h)
    return h[:, 0]


def _forward_cache(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = leaky_relu(z) if k < last else z
    return h[:, 0], inputs, pre


def backward(params: Mlp, features: np.ndarray, dscores: np.ndarray) -> Mlp:
    """Gradient of ``sum(dscores * forward(features))`` w.r.t. every parameter.

    Returned as an Mlp-shaped container so it can be fed straight to Adam.
    """
    x = _check_input(params, features)
    dscores = np.asarray(dscores, dtype=np.float64).reshape(-1)
    if dscores.shape[0] != x.shape[0]:
        raise ValueError("one score gradient per feature row is required")
    _, inputs, pre = _forward_cache(params, x)
    grads_w: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    delta = dscores[:, None]
    for k in range(len(params.weights) - 1, -1, -1):
        grads_w[k] = inputs[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * np.where(pre[k - 1] > 0, 1.0, LEAKY_SLOPE)
    return Mlp(params.sizes, grads_w, grads_b)


def masked_softmax(scores: np.ndarray, feasible: np.ndarray | None = None) -> np.ndarray:
    """Softmax over feasible entries; infeasible entries get probability exactly 0."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape, bool) if feasible is None else np.asarray(feasible, bool)
    if not mask.any():
        raise NoFeasibleAction("driver has no action this step")
    shifted = np.where(mask, scores - scores[mask].max(), 0.0)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum()


@dataclass(frozen=True)
class CandidateBatch:
    """Stacked candidate rows of several decisions.

    Decision k owns rows ``offsets[k]:offsets[k+1]`` of ``features`` and chose
    row ``offsets[k] + chosen[k]``.
    """

    features: np.ndarray
    offsets: np.ndarray
    chosen: np.ndarray

    @classmethod
    def stack(cls, groups: Sequence[np.ndarray], chosen: Sequence[int]) -> "CandidateBatch":
        sizes = [len(g) for g in groups]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        return cls(np.concatenate(groups, axis=0), offsets, np.asarray(chosen, dtype=np.intp))

    def __len__(self) -> int:
        return len(self.chosen)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))

    @property
    def chosen_rows(self) -> np.ndarray:
        return self.offsets[:-1] + self.chosen


def segment_softmax(logits: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Softmax within each contiguous segment."""
    starts = offsets[:-1]
    seg = np.repeat(np.arange(len(starts)), np.diff(offsets))
    mx = np.maximum.reduceat(logits, starts)
    e = np.exp(logits - mx[seg])
    return e / np.add.reduceat(e, starts)[seg]


def policy_probs(params: Mlp, batch: CandidateBatch) -> np.ndarray:
    return segment_softmax(forward(params, batch.features), batch.offsets)


def logprob_backward(params: Mlp, batch: CandidateBatch, dlogp: np.ndarray) -> Mlp:
    """Gradient of ``sum_k dlogp[k] * log pi(chosen_k)`` w.r.t. the parameters."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    probs = policy_probs(params, batch)
    seg = batch.segment_ids
    dlogits = -probs * np.asarray(dlogp)[seg]
    dlogits[batch.chosen_rows] += dlogp
    return backward(params, batch.features, dlogits)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    base_lr: float = 1e-4
    decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mlp, lr: float = 1e-4, decay: float = 0.99) -> "AdamState":
        return cls([np.zeros_like(p) for p in params.params()], [np.zeros_like(p) for p in params.params()], 0, lr, lr, decay)

    def decay_lr(self) -> None:
        """Called once per training episode."""
        self.lr *= self.decay

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.step, self.lr, self.base_lr, self.decay, self.beta1, self.beta2, self.eps)


def adam_step(params: Mlp, grads: Mlp, state: AdamState) -> tuple[Mlp, AdamState]:
    """Bias-corrected Adam descent step, applied in place; returns the same objects."""
    plist, glist = params.params(), grads.params()
    if len(plist) != len(glist) or any(p.shape != g.shape for p, g in zip(plist, glist)):
        raise ValueError("gradient shapes do not match parameters")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(plist, glist, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- checkpoints
#
# Layout, all little-endian:
#   8s   magic  b"RPOOLCK\0"
#   u32  format version
#   u32  number of layer sizes L, then L x u32 sizes
#   f64  parameters: for each layer, weight (in*out, row-major) then bias
#   u8   optimizer present flag
#        if set: u64 step, f64 lr, base_lr, decay, beta1, beta2, eps,
#        then first moments and second moments in parameter order
#   u32  metadata length, then UTF-8 JSON (sorted keys)

MAGIC = b"RPOOLCK\x00"
FORMAT_VERSION = 1


def _f64(arrays: Sequence[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def checkpoint_bytes(params: Mlp, state: AdamState | None = None, meta: dict[str, Any] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(params.sizes))]
    parts.append(struct.pack(f"<{len(params.sizes)}I", *params.sizes))
    parts.append(_f64(params.params()))
    if state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(struct.pack("<Q6d", state.step, state.lr, state.base_lr, state.decay, state.beta1, state.beta2, state.eps))
        parts.append(_f64(state.m))
        parts.append(_f64(state.v))
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def save_checkpoint(path: str | Path, params: Mlp, state: AdamState | None = None, meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params, state, meta))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
        out = []
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
        return out


def parse_checkpoint(data: bytes, expect_sizes: Sequence[int] | None = None) -> tuple[Mlp, AdamState | None, dict[str, Any]]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic header; not a ridepool checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_sizes,) = r.unpack("<I")
    sizes = tuple(r.unpack(f"<{n_sizes}I"))
    if expect_sizes is not None and tuple(expect_sizes) != sizes:
        raise CheckpointError(f"checkpoint layer sizes {sizes} do not match expected {tuple(expect_sizes)}")
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes += [(a, b), (b,)]
    flat = r.arrays(shapes)
    params = Mlp(sizes, flat[0::2], flat[1::2])
    state = None
    if r.take(1) == b"\x01":
        step, lr, base_lr, decay, b1, b2, eps = r.unpack("<Q6d")
        m = r.arrays(shapes)
        v = r.arrays(shapes)
        state = AdamState(m, v, step, lr, base_lr, decay, b1, b2, eps)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after metadata block")
    return params, state, meta


def load_checkpoint(path: str | Path, expect_sizes: Sequence[int] | None = None) -> tuple[Mlp, AdamState | None, dict[str, Any]]:
    return parse_checkpoint(Path(path).read_bytes(), expect_sizes)


def policy_sizes(feature_dim: int, hidden: int = 128) -> tuple[int, ...]:
    """Four weight layers: input -> hidden -> hidden -> hidden -> score."""
    return (feature_dim, hidden, hidden, hidden, 1)


def critic_sizes(feature_dim: int, hidden: int = 128) -> tuple[int, ...]:
    return (feature_dim, hidden, hidden, 1)
