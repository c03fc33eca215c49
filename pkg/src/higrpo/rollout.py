"""Two-step group rollouts and dynamic group filtering.

Step 1 samples semantic reasoning tokens and then one coarse token per cell.
Step 2 member ``i`` continues from step-1 member ``i``: it samples visual
reasoning conditioned on the member's semantic tokens, then refined cell
tokens conditioned on the visual tokens.

Every draw comes from the counter-based stream
``rng.child(prompt.id, member, phase)`` at counter ``position``, so a member's
tokens do not depend on how many members or prompts are sampled together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import PromptSpec, VoxelShape, decode_tokens
from .policy import END_TOKEN, Context, Phase, PolicyParams, batch_logprobs, feature_index, inverse_cdf
from .rng import Stream, digest_ints, uniforms_np

log = logging.getLogger(__name__)


def reasoning_digest(tag: str, parent: int, tokens) -> int:
    return digest_ints(tag, [parent, *tokens])


EMPTY_SEMANTIC = reasoning_digest("s", 0, [])


@dataclass
class Rollout:
    prompt_id: int
    member: int
    step: int
    reasoning_slots: int
    tokens: np.ndarray
    mask: np.ndarray
    phases: np.ndarray
    feat_idx: np.ndarray
    feat_sign: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    shape: VoxelShape
    prompt_digest: int
    semantic_digest: int  # digest of s_i (the lineage root for both steps)
    reasoning_digest: int  # digest the object tokens were conditioned on
    parent: int | None = None  # step-1 member this step-2 rollout continues

    @property
    def token_count(self) -> int:
        return int(self.mask.sum())

    @property
    def reasoning_tokens(self) -> list[int]:
        r = self.reasoning_slots
        return self.tokens[:r][self.mask[:r] > 0].tolist()

    @property
    def object_tokens(self) -> np.ndarray:
        return self.tokens[self.reasoning_slots:]

    def contexts(self, dims) -> list[Context | None]:
        """Rebuild each token's context from the lineage digests (``None`` where masked out)."""
        out = []
        r = self.reasoning_slots
        reason_phase, obj_phase = (Phase.SEMANTIC, Phase.COARSE) if self.step == 1 else (Phase.VISUAL, Phase.REFINED)
        reason_cond = 0 if self.step == 1 else self.semantic_digest
        for t in range(len(self.tokens)):
            if self.mask[t] == 0:
                out.append(None)
                continue
            if t < r:
                seg, pos, phase, cond = self.tokens[:r], t, reason_phase, reason_cond
            else:
                seg, pos, phase, cond = self.tokens[r:], t - r, obj_phase, self.reasoning_digest
            window = list(seg[max(0, pos - dims.context):pos])
            prev = tuple([0] * (dims.context - len(window)) + [int(x) for x in window])
            out.append(Context(self.prompt_digest, phase, pos, prev, cond))
        return out


@dataclass
class GroupBatch:
    prompt: PromptSpec
    target: VoxelShape
    step1: list[Rollout] | None
    step2: list[Rollout]
    rewards1: list | None = None
    rewards2: list = field(default_factory=list)
    full_totals: list = field(default_factory=list)  # full-ensemble refined reward, for reporting

    @property
    def group_size(self) -> int:
        return len(self.step2)

    def step2_totals(self) -> np.ndarray:
        return np.array([r.total for r in self.rewards2], dtype=np.float64)


@dataclass
class FilterResult:
    batches: list[GroupBatch]
    dropped: int
    short: bool
    attempts: int


# --- sampling core ------------------------------------------------------------------

def _segment(params: PolicyParams, phase: Phase, digests, conds, keys, length: int,
             stop_at_end: bool, greedy: bool):
    dims = params.dims
    rows = len(keys)
    f = dims.num_features
    tokens = np.zeros((rows, length), dtype=np.int64)
    mask = np.zeros((rows, length))
    idx = np.zeros((rows, length, f), dtype=np.int64)
    sgn = np.zeros((rows, length, f))
    logp = np.zeros((rows, length))
    alive = np.ones(rows, dtype=bool)
    weight = params[phase]
    k = dims.context
    for pos in range(length):
        prev = np.zeros((rows, k), dtype=np.int64)
        take = min(pos, k)
        if take:
            prev[:, k - take:] = tokens[:, pos - take:pos]
        i, s = feature_index(digests, int(phase), np.full(rows, pos), prev, conds, dims)
        lp = batch_logprobs(weight, i, s)
        if greedy:
            tok = np.argmax(lp, axis=1)
        else:
            tok = inverse_cdf(lp, uniforms_np(keys, np.full(rows, pos)))
        tok = np.where(alive, tok, 0)
        tokens[:, pos] = tok
        mask[:, pos] = alive
        idx[:, pos] = i
        sgn[:, pos] = s
        logp[:, pos] = np.where(alive, lp[np.arange(rows), tok], 0.0)
        if stop_at_end:
            alive = alive & (tok != END_TOKEN)
    return tokens, mask, idx, sgn, logp


def _ref_logprobs(ref: PolicyParams, tokens, mask, phases, idx, sgn) -> np.ndarray:
    out = np.zeros(tokens.shape)
    for phase in np.unique(phases):
        where = (phases == phase) & (mask > 0)
        if not where.any():
            continue
        lp = batch_logprobs(ref[int(phase)], idx[where], sgn[where])
        out[where] = lp[np.arange(lp.shape[0]), tokens[where]]
    return out


def _generate(params, ref, prompts, members_per_prompt, stream, step, reasoning, greedy,
              semantic_digests):
    dims = params.dims
    reason_phase, obj_phase = (Phase.SEMANTIC, Phase.COARSE) if step == 1 else (Phase.VISUAL, Phase.REFINED)
    slots = (dims.len_s if step == 1 else dims.len_v) if reasoning else 0
    rows = [(p, i) for p in prompts for i in range(members_per_prompt)]
    digests = np.array([p.digest for p, _ in rows], dtype=np.uint64)

    def keys(phase):
        return np.array([stream.child(p.id, i, int(phase)).key for p, i in rows], dtype=np.uint64)

    sem = np.array(semantic_digests, dtype=object)
    if slots:
        reason_cond = np.zeros(len(rows), dtype=np.uint64) if step == 1 else sem.astype(np.uint64)
        r_tok, r_mask, r_idx, r_sgn, r_lp = _segment(params, reason_phase, digests, reason_cond,
                                                     keys(reason_phase), slots, True, greedy)
    else:
        f = dims.num_features
        r_tok = np.zeros((len(rows), 0), dtype=np.int64)
        r_mask, r_lp = np.zeros((len(rows), 0)), np.zeros((len(rows), 0))
        r_idx, r_sgn = np.zeros((len(rows), 0, f), dtype=np.int64), np.zeros((len(rows), 0, f))
    kept = [r_tok[j][r_mask[j] > 0].tolist() for j in range(len(rows))]
    if step == 1:
        sem = [reasoning_digest("s", 0, kept[j]) for j in range(len(rows))]
        obj_cond = list(sem)
    else:
        obj_cond = [reasoning_digest("v", int(sem[j]), kept[j]) for j in range(len(rows))]
    o_tok, o_mask, o_idx, o_sgn, o_lp = _segment(params, obj_phase, digests, np.array(obj_cond, dtype=np.uint64),
                                                 keys(obj_phase), dims.cells, False, greedy)
    tokens = np.concatenate([r_tok, o_tok], axis=1)
    mask = np.concatenate([r_mask, o_mask], axis=1)
    phases = np.concatenate([np.full(r_tok.shape, int(reason_phase)), np.full(o_tok.shape, int(obj_phase))], axis=1)
    idx = np.concatenate([r_idx, o_idx], axis=1)
    sgn = np.concatenate([r_sgn, o_sgn], axis=1)
    lp_old = np.concatenate([r_lp, o_lp], axis=1)
    lp_ref = _ref_logprobs(ref or params, tokens, mask, phases, idx, sgn)
    out = []
    for j, (p, i) in enumerate(rows):
        out.append(Rollout(
            prompt_id=p.id, member=i, step=step, reasoning_slots=slots,
            tokens=tokens[j], mask=mask[j], phases=phases[j], feat_idx=idx[j], feat_sign=sgn[j],
            logp_old=lp_old[j], logp_ref=lp_ref[j],
            shape=decode_tokens(o_tok[j], dims.side, dims.colors),
            prompt_digest=p.digest, semantic_digest=int(sem[j]), reasoning_digest=int(obj_cond[j]),
            parent=None if step == 1 else i,
        ))
    m = members_per_prompt
    return [out[b * m:(b + 1) * m] for b in range(len(prompts))]


# --- public operations ----------------------------------------------------------------

def rollout_step1_batch(old_params: PolicyParams, prompts, group_size: int, stream: Stream,
                        ref_params: PolicyParams | None = None, reasoning: bool = True,
                        greedy: bool = False) -> list[list[Rollout]]:
    if group_size < 1 or (group_size < 2 and not greedy):
        raise ValueError("group size must be at least 2")
    prompts = list(prompts)
    sem = [0] * (len(prompts) * group_size)
    return _generate(old_params, ref_params, prompts, group_size, stream, 1, reasoning, greedy, sem)


def rollout_step2_batch(old_params: PolicyParams, prompts, step1_groups, stream: Stream,
                        ref_params: PolicyParams | None = None, reasoning: bool = True,
                        greedy: bool = False, group_size: int | None = None) -> list[list[Rollout]]:
    """Refined-step rollouts; ``step1_groups=None`` runs a single-step (non-hierarchical) generation."""
    prompts = list(prompts)
    if step1_groups is None:
        if group_size is None:
            raise ValueError("group_size is required without step-1 rollouts")
        sem = [EMPTY_SEMANTIC] * (len(prompts) * group_size)
    else:
        group_size = len(step1_groups[0])
        for p, group in zip(prompts, step1_groups):
            if len(group) != group_size or any(r.prompt_id != p.id or r.member != i for i, r in enumerate(group)):
                raise ValueError("step-1 rollouts do not line up with prompts/members")
        sem = [r.semantic_digest for group in step1_groups for r in group]
    return _generate(old_params, ref_params, prompts, group_size, stream, 2, reasoning, greedy, sem)


def rollout_step1(old_params: PolicyParams, prompt: PromptSpec, group_size: int, stream: Stream,
                  ref_params: PolicyParams | None = None, reasoning: bool = True,
                  greedy: bool = False) -> list[Rollout]:
    return rollout_step1_batch(old_params, [prompt], group_size, stream, ref_params, reasoning, greedy)[0]


def rollout_step2(old_params: PolicyParams, prompt: PromptSpec, step1_rollouts, stream: Stream,
                  ref_params: PolicyParams | None = None, reasoning: bool = True,
                  greedy: bool = False) -> list[Rollout]:
    return rollout_step2_batch(old_params, [prompt], [list(step1_rollouts)], stream, ref_params,
                               reasoning, greedy)[0]


def dynamic_filter(batches, tau: float, budget: int, max_retries: int,
                   resample: Callable[[int, int], list[GroupBatch]] | None = None) -> FilterResult:
    """Drop groups whose refined-step rewards have population std below ``tau``.

    ``resample(k, attempt)`` must return ``k`` fresh groups (new prompts) with
    rewards attached; it is called until ``budget`` groups survive or
    ``max_retries`` attempts are used up.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")

    def keep(bs):
        return [b for b in bs if np.std(b.step2_totals()) >= tau]

    batches = list(batches)
    kept = keep(batches)
    dropped = len(batches) - len(kept)
    attempts = 0
    while len(kept) < budget and attempts < max_retries and resample is not None:
        fresh = resample(budget - len(kept), attempts)
        survivors = keep(fresh)
        dropped += len(fresh) - len(survivors)
        kept += survivors
        attempts += 1
    kept = kept[:budget] if budget else kept
    short = len(kept) < budget
    if short:
        log.warning("dynamic sampling kept %d of %d groups after %d retries", len(kept), budget, attempts)
    return FilterResult(kept, dropped, short, attempts)
