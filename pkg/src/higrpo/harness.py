"""Training loop, evaluation, ablation grids and scaling sweeps.

One iteration: sample prompts, roll out both steps from the old-policy
snapshot, score each step with its reward ensemble, fold the refined reward
back into the coarse one, optionally drop zero-signal groups, compute
per-step group advantages and losses, and take one optimizer step on their
sum. Everything emitted is a function of the config alone.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, format_value
from .env import DIFFICULTIES, PromptSpec, rasterize_prompt, sample_prompt
from .optim import AdamState, apply_update, group_advantages, step_loss, total_loss
from .policy import CheckpointError, NumericError, PolicyParams, save_checkpoint, snapshot
from .reward import (ALL_MEMBERS, PartScorer, RemoteJudge, fold_back, occupancy_iou, score_step1,
                     score_step2)
from .rng import Stream
from .rollout import GroupBatch, dynamic_filter, rollout_step1_batch, rollout_step2_batch

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict]
    ledger: list[dict] = field(default_factory=list)
    out_dir: Path | None = None

    def train_reward(self, window: float = 0.2) -> float:
        """Mean full-ensemble refined reward over the last ``window`` of iterations."""
        vals = [m["r_low_full_mean"] for m in self.metrics if m.get("groups")]
        if not vals:
            return float("nan")
        k = max(1, int(round(len(vals) * window)))
        return float(np.mean(vals[-k:]))


# --- prompts -------------------------------------------------------------------------

def training_prompt(cfg: Config, stream: Stream) -> PromptSpec:
    weights = cfg.difficulty_weights()
    names = list(weights)
    difficulty = names[stream.choice([weights[n] for n in names])]
    return sample_prompt(stream, difficulty, cfg.side, cfg.colors)


def eval_prompts(cfg: Config, count: int | None = None) -> list[PromptSpec]:
    """Held-out prompts, balanced over difficulties, drawn from a stream training never uses."""
    root = Stream.from_seed(cfg.eval_seed).child("eval")
    count = cfg.eval_prompts if count is None else count
    return [sample_prompt(root.child(j), DIFFICULTIES[j % len(DIFFICULTIES)], cfg.side, cfg.colors)
            for j in range(count)]


# --- scoring ---------------------------------------------------------------------------

class Scorer:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.members = cfg.members()
        self.parts = PartScorer(cfg.part_scorer, cfg.density, cfg.cell_size, cfg.colors)
        self.judge = None
        if cfg.remote_judge:
            self.judge = RemoteJudge(cfg.remote_judge, cfg.remote_slot_set(), cfg.remote_timeout,
                                     cfg.remote_max_inflight)
        self.full_needed = self.members != ALL_MEMBERS or self.judge is not None or not cfg.hierarchical

    def _member(self, job):
        prompt, target, r1, r2, stream = job
        out1 = score_step1(prompt, target, r1.shape, self.members, self.judge) if r1 is not None else None
        cloud_stream = stream.child("cloud", prompt.id, r2.member)
        if self.cfg.hierarchical or self.cfg.flat_reward == "step2":
            out2 = score_step2(prompt, target, r2.shape, self.members, self.judge, self.parts, cloud_stream)
        else:
            out2 = score_step1(prompt, target, r2.shape, self.members, self.judge)
        if self.full_needed:
            full = score_step2(prompt, target, r2.shape, ALL_MEMBERS, None, self.parts, cloud_stream).total
        else:
            full = out2.total
        if out1 is not None:
            out1.folded = fold_back(out1.total, out2.total, self.cfg.lam)
        return out1, out2, full

    def score_groups(self, groups: list[GroupBatch], stream: Stream, pool) -> None:
        jobs = []
        for g in groups:
            for i, r2 in enumerate(g.step2):
                jobs.append((g.prompt, g.target, g.step1[i] if g.step1 is not None else None, r2, stream))
        results = list(pool.map(self._member, jobs)) if pool else [self._member(j) for j in jobs]
        k = 0
        for g in groups:
            n = g.group_size
            chunk = results[k:k + n]
            k += n
            g.rewards1 = [c[0] for c in chunk] if g.step1 is not None else None
            g.rewards2 = [c[1] for c in chunk]
            g.full_totals = [c[2] for c in chunk]


def make_groups(cfg: Config, old: PolicyParams, ref: PolicyParams, slots, it_stream: Stream,
                scorer: Scorer, pool) -> list[GroupBatch]:
    prompts = [training_prompt(cfg, it_stream.child("prompt", s)) for s in slots]
    if not prompts:
        return []
    roll = it_stream.child("rollout")
    if cfg.hierarchical:
        s1 = rollout_step1_batch(old, prompts, cfg.group_size, roll, ref, cfg.reasoning)
        s2 = rollout_step2_batch(old, prompts, s1, roll, ref, cfg.reasoning)
    else:
        s1 = [None] * len(prompts)
        s2 = rollout_step2_batch(old, prompts, None, roll, ref, cfg.reasoning, group_size=cfg.group_size)
    groups = [GroupBatch(p, rasterize_prompt(p), a, b) for p, a, b in zip(prompts, s1, s2)]
    scorer.score_groups(groups, it_stream, pool)
    return groups


# --- metrics ------------------------------------------------------------------------------

def _stat(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _iteration_metrics(it, groups, filt, results, adv1, adv2, losses, cfg) -> dict:
    rec = {"iteration": it, "groups": len(groups)}
    rec["groups_dropped"] = filt.dropped if filt else 0
    rec["filter_short"] = bool(filt.short) if filt else False
    r1 = [r for g in groups if g.rewards1 for r in g.rewards1]
    r2 = [r for g in groups for r in g.rewards2]
    for key, rows in (("s1", r1), ("s2", r2)):
        for member in ("hpm", "unified", "consist", "part"):
            if key == "s1" and member == "part":
                continue
            mean, std = _stat([getattr(r, member) for r in rows])
            rec[f"{key}_{member}_mean"], rec[f"{key}_{member}_std"] = mean, std
    rec["r_high_mean"], rec["r_high_std"] = _stat([r.total for r in r1])
    rec["r_high_folded_mean"], rec["r_high_folded_std"] = _stat([r.folded for r in r1])
    rec["r_low_mean"], rec["r_low_std"] = _stat([r.total for r in r2])
    rec["r_low_full_mean"], _ = _stat([v for g in groups for v in g.full_totals])
    rec["adv1_abs_mean"] = _stat([abs(a) for s in adv1 for a in s.advantages])[0]
    rec["adv2_abs_mean"] = _stat([abs(a) for s in adv2 for a in s.advantages])[0]
    rec["loss1"], rec["loss2"], rec["loss"] = losses
    tokens = sum(acc.stats["tokens"] for acc in results)
    rec["clip_frac"] = sum(acc.stats["clipped"] for acc in results) / tokens if tokens else 0.0
    rec["kl_mean"] = sum(acc.stats["kl_sum"] for acc in results) / tokens if tokens else 0.0
    rec["ratio_mean"] = sum(acc.stats["ratio_sum"] for acc in results) / tokens if tokens else 1.0
    rec["ratio_dev_max"] = max((acc.stats["ratio_dev_max"] for acc in results), default=0.0)
    return rec


def _ledger_row(it, groups) -> dict:
    out = []
    for g in groups:
        row = {"prompt_id": g.prompt.id}
        if g.rewards1 is not None:
            row["step1"] = [[r.hpm, r.unified, r.consist, r.total, r.folded] for r in g.rewards1]
        row["step2"] = [[r.step, r.hpm, r.unified, r.consist, r.part, r.total] for r in g.rewards2]
        out.append(row)
    return {"iteration": it, "groups": out}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=False, separators=(",", ":"))


# --- training --------------------------------------------------------------------------------

def _mean_grads(grad_list, n):
    out = None
    for g in grad_list:
        out = list(g) if out is None else [a + b for a, b in zip(out, g)]
    return [x / n for x in out] if out is not None else None


def _losses(cfg, loss_cfg, groups, params, adv1, adv2):
    """Per-step losses averaged over groups, plus the per-group accumulators."""
    accs = []
    l1s, g1s, l2s, g2s = [], [], [], []
    for g, a1, a2 in zip(groups, adv1 or [None] * len(groups), adv2):
        if a1 is not None:
            loss, acc = step_loss(g.step1, a1, params, loss_cfg)
            l1s.append(loss)
            g1s.append(acc.gradient())
            accs.append(acc)
        loss, acc = step_loss(g.step2, a2, params, loss_cfg)
        l2s.append(loss)
        g2s.append(acc.gradient())
        accs.append(acc)
    n = len(groups)
    step1 = (float(np.sum(l1s)) / n, _mean_grads(g1s, n)) if l1s else None
    step2 = (float(np.sum(l2s)) / n, _mean_grads(g2s, n)) if l2s else None
    loss, grads = total_loss(step1, step2)
    return (step1[0] if step1 else 0.0, step2[0] if step2 else 0.0, loss), grads, accs


def _iteration(cfg, it, root, params, ref, opt, loss_cfg, scorer, pool):
    """Sample, score, filter and update once; returns the new params/state and the metrics record."""
    old = snapshot(params)
    it_stream = root.child("iter", it)
    budget = cfg.prompts_per_iteration
    groups = make_groups(cfg, old, ref, range(budget), it_stream, scorer, pool)
    filt = None
    if cfg.dynamic_sampling:
        next_slot = [budget]

        def resample(k, attempt):
            slots = range(next_slot[0], next_slot[0] + k)
            next_slot[0] += k
            return make_groups(cfg, old, ref, slots, it_stream, scorer, pool)

        filt = dynamic_filter(groups, cfg.tau_ds, budget, cfg.max_retries, resample)
        groups = filt.batches
    adv1 = None
    if cfg.hierarchical:
        adv1 = [group_advantages([r.folded for r in g.rewards1], cfg.eps_adv, 1) for g in groups]
    adv2 = [group_advantages(g.step2_totals(), cfg.eps_adv, 2) for g in groups]
    record = None
    for epoch in range(cfg.inner_epochs):
        if not groups:
            break
        losses, grads, accs = _losses(cfg, loss_cfg, groups, params, adv1, adv2)
        if not np.isfinite(losses[2]):
            raise NumericError(f"non-finite loss {losses[2]}")
        if epoch == 0:
            record = _iteration_metrics(it, groups, filt, accs, adv1 or [], adv2, losses, cfg)
        params, opt = apply_update(params, grads, opt, cfg.lr)
    if record is None:
        record = _iteration_metrics(it, groups, filt, [], adv1 or [], adv2, (0.0, 0.0, 0.0), cfg)
    return params, opt, groups, filt, record


def train(cfg: Config, out_dir=None, progress=None) -> TrainResult:
    dims = cfg.dims()
    root = Stream.from_seed(cfg.run_seed)
    params = PolicyParams.initial(dims, root.child("init"), cfg.init_scale)
    ref = snapshot(params)
    opt = AdamState.zeros_like(params)
    loss_cfg = cfg.loss_config()
    scorer = Scorer(cfg)
    out = Path(out_dir) if out_dir else None
    metrics_fh = ledger_fh = timing_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        metrics_fh = open(out / "metrics.jsonl", "w", newline="\n")
        ledger_fh = open(out / "rewards.jsonl", "w", newline="\n")
        timing_fh = open(out / "timings.jsonl", "w", newline="\n")
    metrics, ledger = [], []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            if cfg.ref_refresh and it and it % cfg.ref_refresh == 0:
                ref = snapshot(params)
            try:
                params, opt, groups, filt, record = _iteration(cfg, it, root, params, ref, opt, loss_cfg,
                                                               scorer, pool)
            except NumericError as exc:
                rec = {"iteration": it, "aborted": True, "reason": str(exc)}
                if metrics_fh:
                    metrics_fh.write(_dumps(rec) + "\n")
                raise TrainingAborted(str(exc), rec) from exc
            metrics.append(record)
            row = _ledger_row(it, groups)
            ledger.append(row)
            if metrics_fh:
                metrics_fh.write(_dumps(record) + "\n")
                ledger_fh.write(_dumps(row) + "\n")
                timing_fh.write(_dumps({"iteration": it, "wall_time": time.perf_counter() - t0}) + "\n")
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    (out / "checkpoints").mkdir(exist_ok=True)
                    save_checkpoint(params, out / "checkpoints" / f"ckpt_{it + 1:06d}.bin")
            if progress:
                progress(record)
    finally:
        if pool:
            pool.shutdown()
        for fh in (metrics_fh, ledger_fh, timing_fh):
            if fh:
                fh.close()
    if out:
        save_checkpoint(params, out / "final.bin")
    return TrainResult(params, metrics, ledger, out)


def initial_params(cfg: Config) -> PolicyParams:
    return PolicyParams.initial(cfg.dims(), Stream.from_seed(cfg.run_seed).child("init"), cfg.init_scale)


# --- evaluation --------------------------------------------------------------------------------

def evaluate(params: PolicyParams, cfg: Config, prompts=None) -> dict:
    """Decode both steps per prompt (greedy unless ``eval_sample``) and score the final shape."""
    if params.dims != cfg.dims():
        raise CheckpointError(f"checkpoint dims {params.dims} do not match config dims {cfg.dims()}")
    prompts = eval_prompts(cfg) if prompts is None else list(prompts)
    greedy = not cfg.eval_sample
    stream = Stream.from_seed(cfg.eval_seed).child("eval-sample")
    if cfg.hierarchical:
        s1 = rollout_step1_batch(params, prompts, 1, stream, None, cfg.reasoning, greedy)
        s2 = rollout_step2_batch(params, prompts, s1, stream, None, cfg.reasoning, greedy)
    else:
        s1 = None
        s2 = rollout_step2_batch(params, prompts, None, stream, None, cfg.reasoning, greedy, group_size=1)
    parts = PartScorer(cfg.part_scorer, cfg.density, cfg.cell_size, cfg.colors)
    rows = []
    for j, p in enumerate(prompts):
        target = rasterize_prompt(p)
        shape = s2[j][0].shape
        r = score_step2(p, target, shape, ALL_MEMBERS, None, parts, stream.child("cloud", p.id))
        row = {"difficulty": p.difficulty, "r_low": r.total, "hpm": r.hpm, "unified": r.unified,
               "consist": r.consist, "part": r.part, "iou": occupancy_iou(shape, target)}
        if s1 is not None:
            row["r_high"] = score_step1(p, target, s1[j][0].shape).total
        rows.append(row)
    report = {"prompts": len(rows), "mean_r_low": float(np.mean([r["r_low"] for r in rows]))}
    for key in ("hpm", "unified", "consist", "part", "iou", "r_high"):
        report[f"mean_{key}"] = _stat([r.get(key) for r in rows])[0]
    report["by_difficulty"] = {}
    for d in DIFFICULTIES:
        sub = [r for r in rows if r["difficulty"] == d]
        if sub:
            report["by_difficulty"][d] = {"prompts": len(sub),
                                          "mean_r_low": float(np.mean([r["r_low"] for r in sub])),
                                          "mean_iou": float(np.mean([r["iou"] for r in sub]))}
    return report


# --- ablations -----------------------------------------------------------------------------------

_STEP_MEMBERS = ("hpm1", "unified1", "consist1", "hpm2", "unified2", "consist2", "part2")


def _rl_row(clip, sampling, token_avg, kl_removal, seq_opt):
    overrides = {
        "decoupled_clip": bool(clip),
        "dynamic_sampling": bool(sampling),
        "aggregation": "token_mean" if token_avg else "sequence_mean",
        "kl_enabled": not kl_removal,
        "ratio_level": "sequence" if seq_opt else "token",
    }
    toggles = {"clip": clip, "sampling": sampling, "token_avg": token_avg, "kl_removal": kl_removal,
               "seq_opt": seq_opt}
    return toggles, overrides


def _reward_row(*enabled):
    toggles = {m: int(m in enabled) for m in _STEP_MEMBERS}
    return toggles, {"reward_members": ",".join(enabled) or "none"}


def named_grid(name: str) -> list[tuple[str, dict, dict]]:
    """(label, toggle columns, config overrides) rows for the built-in ablation tables."""
    if name == "rl":
        rows = [(0, 0, 0, 0, 0), (0, 1, 0, 0, 0), (0, 1, 0, 0, 1), (0, 1, 1, 0, 0), (0, 1, 1, 1, 0),
                (1, 1, 1, 0, 0)]
        labels = ["grpo", "+sampling", "+sampling+seq_opt", "+sampling+token_avg",
                  "+sampling+token_avg+kl_removal", "+clip+sampling+token_avg"]
        return [(label, *_rl_row(*r)) for label, r in zip(labels, rows)]
    if name == "reward":
        rows = [
            ("hpm2", "unified2"),
            ("hpm2", "unified2", "consist2"),
            ("hpm1", "unified1", "hpm2", "unified2", "consist2"),
            ("hpm1", "unified1", "consist1", "hpm2", "unified2", "consist2"),
            ("hpm1", "unified1", "hpm2", "unified2", "consist2", "part2"),
            _STEP_MEMBERS,
        ]
        return [("+".join(r), *_reward_row(*r)) for r in rows]
    if name == "reward-models":
        rows = [(), ("hpm",), ("unified",), ("consist",), ("hpm", "unified"), ("hpm", "unified", "consist")]
        out = []
        for r in rows:
            toggles = {m: int(m in r) for m in ("hpm", "unified", "consist")}
            overrides = {"hierarchical": False, "flat_reward": "step2",
                         "reward_members": ",".join(f"{m}2" for m in r) or "none"}
            out.append(("+".join(r) or "none", toggles, overrides))
        return out
    if name == "paradigm":
        flat = {"hierarchical": False}
        s2 = "hpm2,unified2,consist2"
        rows = [
            ("base", (0, 0, 0, 0, 0), {**flat, "iterations": 0}),
            ("grpo", (1, 0, 0, 0, 0), {**flat, "reasoning": False, "flat_reward": "step2", "reward_members": s2}),
            ("grpo+reasoning", (1, 1, 0, 0, 0), {**flat, "reasoning": True, "flat_reward": "step2",
                                                 "reward_members": s2}),
            ("grpo+reasoning+step1_reward", (1, 1, 1, 0, 0),
             {**flat, "reasoning": True, "flat_reward": "step1", "reward_members": "hpm1,unified1,consist1"}),
            ("grpo+reasoning+step2_reward", (1, 1, 0, 1, 0),
             {**flat, "reasoning": True, "flat_reward": "step2", "reward_members": s2 + ",part2"}),
            ("hi-grpo", (0, 0, 0, 0, 1), {"hierarchical": True, "reasoning": True, "reward_members": "all"}),
        ]
        cols = ("grpo", "reasoning", "step1_reward", "step2_reward", "hi_grpo")
        return [(label, dict(zip(cols, t)), o) for label, t, o in rows]
    raise ConfigError(f"unknown ablation grid {name!r}")


def parse_grid_text(text: str) -> list[tuple[str, dict, dict]]:
    """Custom grid: one ``label: key=value, key=value`` row per line."""
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        label, _, rest = line.partition(":")
        overrides = {}
        for item in filter(None, (s.strip() for s in rest.split(";" if ";" in rest else ","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"bad grid entry {item!r}")
            overrides[key.strip()] = value.strip()
        rows.append((label.strip(), {}, overrides))
    return rows


def run_entry(cfg: Config, out_dir=None) -> dict:
    result = train(cfg, out_dir)
    report = evaluate(result.params, cfg)
    return {"train_reward": result.train_reward(), "eval_mean_r_low": report["mean_r_low"],
            "eval_mean_iou": report["mean_iou"]}


METRIC_COLUMNS = ("train_reward", "eval_mean_r_low", "eval_mean_iou")


def ablate(base: Config, grid, out_dir=None) -> list[dict]:
    rows = []
    for j, (label, toggles, overrides) in enumerate(grid):
        row = {"row": j, "label": label, **toggles}
        try:
            cfg = base.replace(**overrides)
            sub = Path(out_dir) / f"row{j:02d}" if out_dir else None
            row.update(run_entry(cfg, sub))
            row["status"] = "ok"
        except (ConfigError, TrainingAborted, NumericError, ValueError) as exc:
            log.warning("ablation row %d (%s) failed: %s", j, label, exc)
            row.update({k: None for k in METRIC_COLUMNS})
            row["status"] = "failed"
        rows.append(row)
    return rows


def scaling_run(base: Config, data_factors, iteration_factors, out_dir=None) -> list[dict]:
    """One run per factor on each axis; identical spawned configs are run once."""
    cache: dict[tuple[int, int], dict] = {}
    rows = []
    for axis, factors in (("data", data_factors), ("iterations", iteration_factors)):
        for f in factors:
            if f < 1:
                raise ConfigError(f"scaling factors must be >= 1, got {f}")
            ppi = base.prompts_per_iteration * (f if axis == "data" else 1)
            iters = base.iterations * (f if axis == "iterations" else 1)
            key = (int(round(ppi)), int(round(iters)))
            if key not in cache:
                cfg = base.replace(prompts_per_iteration=key[0], iterations=key[1])
                sub = Path(out_dir) / f"ppi{key[0]}_it{key[1]}" if out_dir else None
                cache[key] = run_entry(cfg, sub)
            rows.append({"axis": axis, "factor": f, "prompts_per_iteration": key[0], "iterations": key[1],
                         **cache[key]})
    return rows


def write_csv(rows: list[dict], path) -> None:
    columns = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else format_value(r[k]) for k in columns})
