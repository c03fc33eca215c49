"""Group-relative advantages, the clipped surrogate loss family and Adam.

``step_loss`` covers the GRPO/DAPO/GSPO variants through ``LossConfig``:
asymmetric clip bounds, token- or sequence-mean aggregation, token- or
sequence-level ratios and an optional KL penalty toward the reference policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import NumericError, PolicyParams, accumulate_grad, batch_logprobs, zero_grads

AGGREGATIONS = ("token_mean", "sequence_mean")
RATIO_LEVELS = ("token", "sequence")


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    mean: float
    std: float
    eps: float
    step: int = 0


def group_advantages(rewards, eps: float = 1e-4, step: int = 0) -> AdvantageSet:
    """(R - mean) / (population std + eps) within one prompt group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("a group needs at least two rewards")
    if not eps > 0:
        raise ValueError("eps must be positive")
    mu = r.mean()
    mu += (r - mu).mean()  # second pass: constant groups give exact zeros
    sigma = np.sqrt(np.mean((r - mu) ** 2))
    return AdvantageSet((r - mu) / (sigma + eps), float(mu), float(sigma), eps, step)


def token_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def sequence_ratio(logp_new, logp_old, mask) -> float:
    """Length-normalized sequence likelihood ratio (geometric mean of token ratios)."""
    mask = np.asarray(mask, dtype=np.float64)
    t = mask.sum()
    if t == 0:
        raise ValueError("sequence has no masked-in tokens")
    diff = (np.asarray(logp_new) - np.asarray(logp_old)) * mask
    return float(np.exp(diff.sum() / t))


def kl_term(logp_ref, logp_cur):
    """Per-token estimator x - ln x - 1 with x = pi_ref / pi_cur."""
    log_x = np.asarray(logp_ref) - np.asarray(logp_cur)
    return np.exp(log_x) - log_x - 1.0


@dataclass
class LossConfig:
    clip_low: float = 0.2
    clip_high: float = 0.28
    beta: float = 0.01
    aggregation: str = "token_mean"
    ratio_level: str = "token"
    kl_enabled: bool = True
    lam: float = 1.0
    inner_epochs: int = 1

    def __post_init__(self):
        if self.clip_low < 0 or self.clip_high < 0:
            raise ValueError("clip bounds must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.ratio_level not in RATIO_LEVELS:
            raise ValueError(f"ratio_level must be one of {RATIO_LEVELS}")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")


@dataclass
class GradAccum:
    """Unnormalized loss/gradient sums; divide by ``token_count`` once at the end."""

    grads: list[np.ndarray]
    token_count: float = 0.0
    loss_value: float = 0.0
    stats: dict = field(default_factory=dict)

    def merge(self, other: "GradAccum") -> "GradAccum":
        stats = {k: self.stats.get(k, 0.0) + other.stats.get(k, 0.0) for k in set(self.stats) | set(other.stats)}
        return GradAccum([a + b for a, b in zip(self.grads, other.grads)],
                         self.token_count + other.token_count, self.loss_value + other.loss_value, stats)

    def loss(self) -> float:
        return self.loss_value / self.token_count if self.token_count else 0.0

    def gradient(self) -> list[np.ndarray]:
        if not self.token_count:
            return [np.zeros_like(g) for g in self.grads]
        return [g / self.token_count for g in self.grads]


def aggregate(objective: np.ndarray, mask: np.ndarray, mode: str) -> float:
    """Mean objective under token-level or per-sequence-first averaging."""
    objective = np.asarray(objective, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    t = mask.sum(axis=1)
    if mode == "token_mean":
        return float((objective * mask).sum() / t.sum())
    if mode == "sequence_mean":
        return float(((objective * mask).sum(axis=1) / t).mean())
    raise ValueError(mode)


def _stack(rollouts, name):
    return np.stack([getattr(r, name) for r in rollouts])


def step_loss(rollouts, adv: AdvantageSet, params: PolicyParams, cfg: LossConfig):
    """Clipped-surrogate loss of one group and its gradient.

    Returns ``(loss, GradAccum)``. The gradient of a token is zero where the
    clipped branch binds, including exactly at the clip boundary.
    """
    rollouts = list(rollouts)
    a = np.asarray(adv.advantages, dtype=np.float64)
    if len(rollouts) != a.shape[0]:
        raise ValueError(f"{a.shape[0]} advantages for {len(rollouts)} rollouts")
    tokens, mask, phases = _stack(rollouts, "tokens"), _stack(rollouts, "mask"), _stack(rollouts, "phases")
    idx, sgn = _stack(rollouts, "feat_idx"), _stack(rollouts, "feat_sign")
    lo, lr = _stack(rollouts, "logp_old"), _stack(rollouts, "logp_ref")
    t_i = mask.sum(axis=1)
    if np.any(t_i == 0):
        raise ValueError("rollout with no masked-in tokens")
    sel = mask > 0

    lc = np.zeros(tokens.shape)
    blocks = []
    for phase in np.unique(phases[sel]):
        where = sel & (phases == phase)
        lp = batch_logprobs(params[int(phase)], idx[where], sgn[where])
        lc[where] = lp[np.arange(lp.shape[0]), tokens[where]]
        blocks.append((int(phase), where, np.exp(lp)))

    diff = np.where(sel, lc - lo, 0.0)
    if cfg.ratio_level == "token":
        ratio = np.exp(diff)
    else:
        ratio = np.broadcast_to(np.exp(diff.sum(axis=1) / t_i)[:, None], tokens.shape)
    lo_b, hi_b = 1.0 - cfg.clip_low, 1.0 + cfg.clip_high
    A = a[:, None]
    surr = np.minimum(ratio * A, np.clip(ratio, lo_b, hi_b) * A)
    binding = ((A > 0) & (ratio >= hi_b)) | ((A < 0) & (ratio <= lo_b))

    if cfg.aggregation == "token_mean":
        w = mask
        norm = float(t_i.sum())
    else:
        w = mask / t_i[:, None]
        norm = float(len(rollouts))

    obj = surr
    kl = np.zeros(tokens.shape)
    if cfg.kl_enabled:
        log_x = np.where(sel, lr - lc, 0.0)
        x = np.exp(log_x)
        kl = x - log_x - 1.0
        obj = surr - cfg.beta * kl

    # d(objective)/d(log pi_t) coefficients
    val = np.where(binding, 0.0, w * A * ratio) * mask
    if cfg.ratio_level == "token":
        coef = val
    else:
        coef = (val.sum(axis=1) / t_i)[:, None] * mask
    if cfg.kl_enabled:
        coef = coef - cfg.beta * w * (1.0 - x)

    loss_sum = -float((w * obj).sum())
    grads = zero_grads(params.dims)
    for phase, where, probs in blocks:
        accumulate_grad(grads[phase], idx[where], sgn[where], probs, tokens[where], -coef[where])
    if not np.isfinite(loss_sum) or not all(np.isfinite(g).all() for g in grads):
        raise NumericError("non-finite loss or gradient")
    n_tok = float(t_i.sum())
    stats = {
        "tokens": n_tok,
        "clipped": float((binding & sel).sum()),
        "kl_sum": float((kl * mask).sum()),
        "ratio_sum": float((np.asarray(ratio) * mask).sum()),
        "ratio_dev_max": float(np.abs(np.where(sel, ratio - 1.0, 0.0)).max()),
    }
    acc = GradAccum(grads, norm, loss_sum, stats)
    return acc.loss(), acc


def total_loss(step1_result, step2_result):
    """L = L1 + L2 with gradients merged by addition; either step may be ``None``."""
    parts = [r for r in (step1_result, step2_result) if r is not None]
    loss = 0.0
    grads = None
    for value, acc in parts:
        loss = loss + value
        g = acc.gradient() if isinstance(acc, GradAccum) else acc
        grads = g if grads is None else [x + y for x, y in zip(grads, g)]
    return loss, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "AdamState":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(w) for w in params.weights])


def apply_update(params: PolicyParams, grads, state: AdamState, lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """One Adam step minimizing the loss; returns ``(new_params, new_state)``."""
    if not all(np.isfinite(g).all() for g in grads):
        bad = [i for i, g in enumerate(grads) if not np.isfinite(g).all()]
        raise NumericError(f"non-finite gradient in phases {bad}")
    t = state.t + 1
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(params.weights, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_w.append(w - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return PolicyParams(params.dims, new_w, params.version + 1), AdamState(new_m, new_v, t)
