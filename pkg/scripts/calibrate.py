"""Calibration run for the toy training check: writes tests/fixtures/calibration.json.

Trains with seed 42 at the acceptance settings and records held-out mean R_low
of the untrained and trained policies. The committed margin is half the
measured gain, which leaves room for last-bit float differences across
platforms while still demanding a clearly positive improvement.
"""

import json
import sys
import time
from pathlib import Path

from higrpo.config import load_config
from higrpo.harness import evaluate, initial_params, train

SETTINGS = {"run_seed": "42", "side": "4", "group_size": "8", "prompts_per_iteration": "8", "iterations": "300"}


def main(out="tests/fixtures/calibration.json"):
    cfg = load_config(None, SETTINGS)
    t0 = time.time()
    before = evaluate(initial_params(cfg), cfg)
    result = train(cfg)
    after = evaluate(result.params, cfg)
    gain = after["mean_r_low"] - before["mean_r_low"]
    record = {
        "settings": SETTINGS,
        "eval_prompts": cfg.eval_prompts,
        "untrained_mean_r_low": before["mean_r_low"],
        "trained_mean_r_low": after["mean_r_low"],
        "gain": gain,
        "margin": gain / 2,
        "train_reward": result.train_reward(),
        "seconds": round(time.time() - t0, 1),
    }
    Path(out).write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record, indent=2))


if __name__ == "__main__":
    main(*sys.argv[1:])
