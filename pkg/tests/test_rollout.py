import numpy as np
import pytest

from higrpo.env import VoxelShape, rasterize_prompt, sample_prompt
from higrpo.policy import END_TOKEN, Phase, PolicyParams, logprobs, sequence_logprobs
from higrpo.reward import RewardBreakdown
from higrpo.rng import Stream
from higrpo.rollout import (EMPTY_SEMANTIC, GroupBatch, dynamic_filter, reasoning_digest, rollout_step1,
                            rollout_step1_batch, rollout_step2, rollout_step2_batch)


def prompts(dims, k=3, seed=0):
    s = Stream.from_seed(seed)
    return [sample_prompt(s, "hard", dims.side, dims.colors) for _ in range(k)]


def test_shapes_masks_and_logprobs(tiny_params):
    dims = tiny_params.dims
    p = prompts(dims, 1)[0]
    g1 = rollout_step1(tiny_params, p, 4, Stream(1))
    g2 = rollout_step2(tiny_params, p, g1, Stream(1))
    for r1, r2 in zip(g1, g2):
        for r in (r1, r2):
            assert r.tokens.shape == (dims.len_s + dims.cells,)
            r_part = r.mask[:r.reasoning_slots]
            # masked out strictly after the first END token
            ends = np.flatnonzero(r.tokens[:r.reasoning_slots] == END_TOKEN)
            if len(ends):
                assert r_part[:ends[0] + 1].all() and not r_part[ends[0] + 1:].any()
            else:
                assert r_part.all()
            assert r.mask[r.reasoning_slots:].all()
            assert isinstance(r.shape, VoxelShape)
            assert np.array_equal(r.shape.cells, r.object_tokens)
            # stored logprobs equal recomputation through rebuilt contexts
            ctxs = r.contexts(dims)
            live = [i for i, c in enumerate(ctxs) if c is not None]
            lp = sequence_logprobs(tiny_params, [ctxs[i] for i in live], r.tokens[live])
            assert np.array_equal(lp, r.logp_old[live])
            assert np.array_equal(r.logp_old, r.logp_ref)
        assert r2.parent == r1.member and r2.semantic_digest == r1.semantic_digest
        assert r1.semantic_digest == reasoning_digest("s", 0, r1.reasoning_tokens)
        assert r2.reasoning_digest == reasoning_digest("v", r1.semantic_digest, r2.reasoning_tokens)


def test_batch_composition_independent(tiny_params):
    dims = tiny_params.dims
    ps = prompts(dims, 3)
    together = rollout_step1_batch(tiny_params, ps, 3, Stream(5))
    alone = rollout_step1(tiny_params, ps[1], 3, Stream(5))
    for a, b in zip(together[1], alone):
        assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.logp_old, b.logp_old)
    # a smaller group reproduces the first members of a bigger one
    small = rollout_step1(tiny_params, ps[1], 2, Stream(5))
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(small, alone))


def test_semantic_changes_visual_distribution(tiny_params):
    dims = tiny_params.dims
    p = prompts(dims, 1)[0]
    g1 = rollout_step1(tiny_params, p, 6, Stream(2))
    digests = {r.semantic_digest for r in g1}
    assert len(digests) > 1
    from higrpo.policy import Context
    a = logprobs(tiny_params, Context(p.digest, Phase.VISUAL, 0, (0, 0), g1[0].semantic_digest))
    b = logprobs(tiny_params, Context(p.digest, Phase.VISUAL, 0, (0, 0), g1[0].semantic_digest ^ 1))
    assert not np.array_equal(a, b)


def test_flat_and_no_reasoning(tiny_params):
    dims = tiny_params.dims
    ps = prompts(dims, 2)
    flat = rollout_step2_batch(tiny_params, ps, None, Stream(3), reasoning=False, group_size=3)
    assert len(flat) == 2 and len(flat[0]) == 3
    r = flat[0][0]
    assert r.reasoning_slots == 0 and r.tokens.shape == (dims.cells,)
    assert r.semantic_digest == EMPTY_SEMANTIC
    with pytest.raises(ValueError):
        rollout_step2_batch(tiny_params, ps, None, Stream(3))


def test_step2_requires_aligned_step1(tiny_params):
    dims = tiny_params.dims
    ps = prompts(dims, 2)
    g1 = rollout_step1_batch(tiny_params, ps, 2, Stream(4))
    with pytest.raises(ValueError):
        rollout_step2_batch(tiny_params, ps[::-1], g1, Stream(4))


def test_greedy_is_argmax_and_deterministic(tiny_params):
    dims = tiny_params.dims
    p = prompts(dims, 1)[0]
    a = rollout_step1(tiny_params, p, 1, Stream(1), greedy=True)[0]
    b = rollout_step1(tiny_params, p, 1, Stream(99), greedy=True)[0]
    assert np.array_equal(a.tokens, b.tokens)
    ctxs = a.contexts(dims)
    for c, tok in zip(ctxs, a.tokens):
        if c is not None:
            assert tok == int(np.argmax(logprobs(tiny_params, c)))
    with pytest.raises(ValueError):
        rollout_step1(tiny_params, p, 1, Stream(1))


def _batch(p, totals):
    rewards = [RewardBreakdown(2, total=t) for t in totals]
    return GroupBatch(p, rasterize_prompt(p), None, [None] * len(totals), None, rewards)


def test_dynamic_filter():
    ps = prompts(PolicyParams(__import__("higrpo").Dims()).dims, 4)
    batches = [_batch(ps[0], [1, 1, 1]), _batch(ps[1], [1, 2, 3]), _batch(ps[2], [2, 2, 2])]
    calls = []

    def resample(k, attempt):
        calls.append((k, attempt))
        return [_batch(ps[3], [0, 5, 1])] * k

    out = dynamic_filter(batches, 1e-3, 3, 3, resample)
    assert len(out.batches) == 3 and not out.short and out.dropped == 2
    assert calls == [(2, 0)]
    out = dynamic_filter(batches, 1e-3, 3, 2, lambda k, a: [_batch(ps[0], [4, 4, 4])] * k)
    assert out.short and len(out.batches) == 1 and out.attempts == 2
    assert dynamic_filter(batches, 0.0, 3, 0).batches == batches
