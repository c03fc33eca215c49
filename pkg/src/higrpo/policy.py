"""Linear-softmax autoregressive token policy over hashed context features.

One weight matrix per generation phase maps a sparse signed feature vector to
logits. Log-probabilities and their gradients are analytic, so the optimizer
never needs autodiff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .rng import Stream, combine, combine_np

MAGIC = b"HGPO"
FORMAT_VERSION = 1
REASON_VOCAB = 16
END_TOKEN = REASON_VOCAB - 1

_TAG_PROMPT = 0x11
_TAG_POS = 0x22
_TAG_GRAM = 0x33
_TAG_COND = 0x44


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class Phase(IntEnum):
    SEMANTIC = 0
    COARSE = 1
    VISUAL = 2
    REFINED = 3

    @property
    def is_reasoning(self) -> bool:
        return self in (Phase.SEMANTIC, Phase.VISUAL)


@dataclass(frozen=True)
class Dims:
    side: int = 4
    colors: int = 7
    context: int = 4  # K previous tokens
    features: int = 512  # D
    len_s: int = 8
    len_v: int = 8

    @property
    def cells(self) -> int:
        return self.side ** 3

    @property
    def num_features(self) -> int:
        """Contributions per context: prompt, position, K k-grams, conditioning."""
        return self.context + 3

    def vocab(self, phase: Phase) -> int:
        return REASON_VOCAB if Phase(phase).is_reasoning else self.colors + 1

    def max_len(self, phase: Phase) -> int:
        phase = Phase(phase)
        if phase == Phase.SEMANTIC:
            return self.len_s
        if phase == Phase.VISUAL:
            return self.len_v
        return self.cells


@dataclass(frozen=True)
class Context:
    prompt_digest: int
    phase: Phase
    position: int
    prev_tokens: tuple[int, ...]  # oldest first, zero-padded on the left
    conditioning_digest: int = 0


@dataclass
class PolicyParams:
    dims: Dims
    weights: list[np.ndarray] = field(default_factory=list)
    version: int = 0

    def __post_init__(self):
        if not self.weights:
            self.weights = [np.zeros((self.dims.vocab(p), self.dims.features)) for p in Phase]
        for p, w in zip(Phase, self.weights):
            if w.shape != (self.dims.vocab(p), self.dims.features):
                raise ValueError(f"phase {p.name} weight shape {w.shape} does not match dims")

    @classmethod
    def initial(cls, dims: Dims, stream: Stream | None = None, scale: float = 0.0) -> "PolicyParams":
        params = cls(dims)
        if stream is not None and scale > 0:
            for p in Phase:
                u = stream.child("init", int(p)).uniforms(params.weights[p].size)
                params.weights[p] = ((u - 0.5) * (2.0 * scale)).reshape(params.weights[p].shape)
        return params

    def __getitem__(self, phase) -> np.ndarray:
        return self.weights[int(phase)]

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights)


def snapshot(params: PolicyParams) -> PolicyParams:
    return PolicyParams(params.dims, [w.copy() for w in params.weights], params.version)


def assign(dst: PolicyParams, src: PolicyParams) -> None:
    if dst.dims != src.dims:
        raise ValueError("cannot assign params with different dims")
    dst.weights = [w.copy() for w in src.weights]
    dst.version = src.version


# --- features -----------------------------------------------------------------

def feature_index(prompt_digest, phase: int, positions, prev, cond, dims: Dims):
    """Bucket indices and signs, each (N, K + 3), for a batch of contexts.

    Column order: prompt, (phase, position), 1-gram ... K-gram, conditioning.
    """
    positions = np.atleast_1d(np.asarray(positions, dtype=np.int64))
    n = positions.shape[0]
    prompt_digest = np.broadcast_to(np.asarray(prompt_digest, dtype=np.uint64), (n,))
    cond = np.broadcast_to(np.asarray(cond, dtype=np.uint64), (n,))
    prev = np.asarray(prev, dtype=np.int64).reshape(n, dims.context)
    keys = np.empty((n, dims.num_features), dtype=np.uint64)
    keys[:, 0] = combine_np(np.full(n, _TAG_PROMPT, dtype=np.uint64), prompt_digest)
    keys[:, 1] = combine_np(np.full(n, combine(_TAG_POS, int(phase)), dtype=np.uint64), positions)
    h = np.full(n, _TAG_GRAM, dtype=np.uint64)
    for k in range(1, dims.context + 1):
        h = combine_np(h, prev[:, dims.context - k])
        keys[:, 1 + k] = combine_np(h, np.full(n, k))
    keys[:, -1] = combine_np(np.full(n, _TAG_COND, dtype=np.uint64), cond)
    idx = (keys % np.uint64(dims.features)).astype(np.int64)
    sgn = np.where((keys >> np.uint64(32)) & np.uint64(1), 1.0, -1.0)
    return idx, sgn


def _context_arrays(ctx: Context, dims: Dims):
    if len(ctx.prev_tokens) != dims.context:
        raise ValueError(f"context needs {dims.context} previous tokens")
    if not 0 <= ctx.position < dims.max_len(ctx.phase):
        raise ValueError(f"position {ctx.position} out of range for phase {Phase(ctx.phase).name}")
    return feature_index(ctx.prompt_digest, int(ctx.phase), [ctx.position],
                         [list(ctx.prev_tokens)], ctx.conditioning_digest, dims)


def features(ctx: Context, dims: Dims) -> np.ndarray:
    idx, sgn = _context_arrays(ctx, dims)
    phi = np.zeros(dims.features)
    np.add.at(phi, idx[0], sgn[0])
    return phi


def prev_window(tokens, position: int, k: int) -> tuple[int, ...]:
    """The ``k`` tokens before ``position``, zero-padded on the left."""
    window = list(tokens[max(0, position - k):position])
    return tuple([0] * (k - len(window)) + [int(t) for t in window])


# --- log-probabilities ----------------------------------------------------------

def batch_logits(weight: np.ndarray, idx: np.ndarray, sgn: np.ndarray) -> np.ndarray:
    wt = weight.T
    logits = sgn[:, 0, None] * wt[idx[:, 0]]
    for j in range(1, idx.shape[1]):
        logits = logits + sgn[:, j, None] * wt[idx[:, j]]
    return logits


def batch_logprobs(weight: np.ndarray, idx: np.ndarray, sgn: np.ndarray) -> np.ndarray:
    """(N, V) log-probabilities.

    Row reductions are written as explicit column loops so a row's result
    never depends on the batch it was computed in.
    """
    logits = batch_logits(weight, idx, sgn)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    m = logits[:, 0].copy()
    for v in range(1, logits.shape[1]):
        m = np.maximum(m, logits[:, v])
    shifted = logits - m[:, None]
    e = np.exp(shifted)
    s = e[:, 0].copy()
    for v in range(1, e.shape[1]):
        s = s + e[:, v]
    return shifted - np.log(s)[:, None]


def logprobs(params: PolicyParams, ctx: Context) -> np.ndarray:
    idx, sgn = _context_arrays(ctx, params.dims)
    return batch_logprobs(params[ctx.phase], idx, sgn)[0]


def inverse_cdf(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draws by walking the CDF in token-index order."""
    p = np.exp(logp)
    cdf = np.cumsum(p, axis=1)
    tok = (u[:, None] >= cdf).sum(axis=1)
    last = p.shape[1] - 1 - np.argmax(p[:, ::-1] > 0, axis=1)
    return np.minimum(tok, last)


def sample_token(params: PolicyParams, ctx: Context, stream: Stream) -> int:
    lp = logprobs(params, ctx)
    return int(inverse_cdf(lp[None, :], np.array([stream.uniform()]))[0])


def sequence_logprobs(params: PolicyParams, contexts, tokens) -> np.ndarray:
    contexts = list(contexts)
    tokens = list(tokens)
    if len(contexts) != len(tokens):
        raise ValueError(f"{len(contexts)} contexts for {len(tokens)} tokens")
    return np.array([logprobs(params, c)[t] for c, t in zip(contexts, tokens)])


# --- gradients --------------------------------------------------------------------

def accumulate_grad(grad: np.ndarray, idx, sgn, probs, tokens, coef) -> None:
    """grad[v, d] += sum_t coef_t * (1[v = a_t] - p_t[v]) * phi_t[d], in place."""
    rows = -probs * coef[:, None]
    rows[np.arange(len(tokens)), tokens] += coef
    gt = grad.T  # view; scatter into columns of grad
    for j in range(idx.shape[1]):
        np.add.at(gt, idx[:, j], sgn[:, j, None] * rows)


def zero_grads(dims: Dims) -> list[np.ndarray]:
    return [np.zeros((dims.vocab(p), dims.features)) for p in Phase]


def logprob_grad(params: PolicyParams, ctx: Context, token: int) -> list[np.ndarray]:
    """d log pi(token | ctx) / dW for every phase (zero outside ``ctx.phase``)."""
    idx, sgn = _context_arrays(ctx, params.dims)
    probs = np.exp(batch_logprobs(params[ctx.phase], idx, sgn))
    grads = zero_grads(params.dims)
    accumulate_grad(grads[ctx.phase], idx, sgn, probs, np.array([token]), np.ones(1))
    return grads


# --- checkpoints -------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQIIIIIII")


def save_checkpoint(params: PolicyParams, path) -> None:
    d = params.dims
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, params.version, d.side, d.colors, d.context,
                           d.features, d.len_s, d.len_v, len(params.weights))]
    chunks += [struct.pack("<I", w.shape[0]) for w in params.weights]
    chunks += [np.ascontiguousarray(w, dtype="<f8").tobytes() for w in params.weights]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> PolicyParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    magic, fmt, version, side, colors, k, dfeat, ls, lv, nphase = _HEADER.unpack_from(raw)
    if fmt != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {fmt}")
    dims = Dims(side, colors, k, dfeat, ls, lv)
    off = _HEADER.size
    vocab = struct.unpack_from(f"<{nphase}I", raw, off)
    off += 4 * nphase
    weights = []
    for v in vocab:
        n = v * dfeat
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated weights")
        weights.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(v, dfeat).astype(np.float64))
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    return PolicyParams(dims, weights, version)

