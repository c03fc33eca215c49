"""Command line entry point: ``higrpo train|eval|ablate|scale|mesh-sample``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .policy import CheckpointError, NumericError, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("higrpo")


def _on_off(text: str) -> str:
    low = text.lower()
    if low not in ("on", "off", "true", "false", "1", "0"):
        raise argparse.ArgumentTypeError("expected on or off")
    return "true" if low in ("on", "true", "1") else "false"


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config")
    g.add_argument("--config", help="key = value config file (defaults to $HIGRPO_CONFIG)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g.add_argument("--seed", dest="run_seed", type=int)
    g.add_argument("--group-size", dest="group_size", type=int)
    g.add_argument("--iterations", type=int)
    g.add_argument("--prompts-per-iteration", dest="prompts_per_iteration", type=int)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--clip-low", dest="clip_low", type=float)
    g.add_argument("--clip-high", dest="clip_high", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--aggregation", choices=("token", "sequence"))
    g.add_argument("--ratio-level", dest="ratio_level", choices=("token", "sequence"))
    g.add_argument("--no-kl", dest="kl_enabled", action="store_const", const="false")
    g.add_argument("--dynamic-sampling", dest="dynamic_sampling", type=_on_off, nargs="?", const="true")
    g.add_argument("--reasoning", type=_on_off)
    g.add_argument("--hierarchical", type=_on_off)
    g.add_argument("--reward-members", dest="reward_members")
    g.add_argument("--remote-judge", dest="remote_judge", metavar="URL")
    g.add_argument("--workers", type=int)


_FLAG_KEYS = ("run_seed", "group_size", "iterations", "prompts_per_iteration", "lam", "beta", "clip_low",
              "clip_high", "lr", "aggregation", "ratio_level", "kl_enabled", "dynamic_sampling", "reasoning",
              "hierarchical", "reward_members", "remote_judge", "workers")


def _build_config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value if isinstance(value, str) else str(value)
    return load_config(args.config, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_train(args) -> int:
    from .harness import evaluate, train
    from .plotting import plot_training

    cfg = _build_config(args)
    out = Path(args.out)

    def progress(rec):
        if args.verbose and rec["iteration"] % 10 == 0:
            log.info("iter %d  r_low %.4f  loss %.5f", rec["iteration"], rec["r_low_mean"] or 0.0, rec["loss"])

    result = train(cfg, out, progress)
    summary = {"iterations": len(result.metrics), "train_reward": result.train_reward(),
               "checkpoint": str(out / "final.bin")}
    if args.eval:
        summary["eval"] = evaluate(result.params, cfg)
        (out / "eval.json").write_text(json.dumps(summary["eval"], indent=2) + "\n")
    if args.plot:
        plot_training(result.metrics, out / "training.png")
    _print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate, initial_params

    cfg = _build_config(args)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else initial_params(cfg)
    report = evaluate(params, cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _print(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablate, named_grid, parse_grid_text, write_csv
    from .plotting import plot_ablation

    cfg = _build_config(args)
    grid = parse_grid_text(Path(args.grid_file).read_text()) if args.grid_file else named_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate(cfg, grid, out if args.keep_runs else None)
    name = Path(args.grid_file).stem if args.grid_file else args.grid
    write_csv(rows, out / f"ablation_{name}.csv")
    plot_ablation(rows, out / f"ablation_{name}.png")
    for r in rows:
        print(f"{r['row']:2d} {r['label']:<40s} {r['status']:<6s} train={r['train_reward']} "
              f"eval={r['eval_mean_r_low']}")
    return EXIT_OK


def _factors(text: str) -> list[float]:
    out = []
    for s in text.split(","):
        f = float(s)
        out.append(int(f) if f.is_integer() else f)
    return out


def cmd_scale(args) -> int:
    from .harness import scaling_run, write_csv
    from .plotting import plot_scaling

    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = scaling_run(cfg, _factors(args.data_factors), _factors(args.iteration_factors),
                       out if args.keep_runs else None)
    write_csv(rows, out / "scaling.csv")
    plot_scaling(rows, out / "scaling.png")
    for r in rows:
        print(f"{r['axis']:<10s} x{r['factor']:<4} eval={r['eval_mean_r_low']:.4f}")
    return EXIT_OK


def cmd_mesh_sample(args) -> int:
    from .meshsample import mesh_to_pointcloud, read_obj, read_ppm, write_ply
    from .rng import Stream

    mesh = read_obj(args.obj, read_ppm(args.texture))
    cloud = mesh_to_pointcloud(mesh, args.density, Stream.from_seed(args.seed))
    write_ply(cloud, args.out)
    print(f"{len(cloud.points)} points -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="higrpo", description="Hierarchical two-step GRPO on a voxel world")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and write metrics and checkpoints")
    _config_flags(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--eval", action="store_true", help="evaluate the final policy on held-out prompts")
    p.add_argument("--plot", action="store_true", help="write training.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the untrained policy) on held-out prompts")
    _config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a toggle grid and write CSV plus a bar chart")
    _config_flags(p)
    p.add_argument("--grid", default="rl", choices=("rl", "reward", "reward-models", "paradigm"))
    p.add_argument("--grid-file", help="custom grid, one 'label: key=value, ...' row per line")
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--keep-runs", action="store_true", help="keep per-row metrics and checkpoints")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scale", help="data and iteration scaling sweeps")
    _config_flags(p)
    p.add_argument("--data-factors", default="1,1.5,2,3")
    p.add_argument("--iteration-factors", default="1,2,3")
    p.add_argument("--out", default="runs/scale")
    p.add_argument("--keep-runs", action="store_true")
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("mesh-sample", help="sample a textured OBJ mesh into a colored PLY point cloud")
    p.add_argument("obj")
    p.add_argument("texture", help="P6 PPM texture")
    p.add_argument("--density", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="points.ply")
    p.set_defaults(func=cmd_mesh_sample)
    return parser


def main(argv=None) -> int:
    from .harness import TrainingAborted
    from .meshsample import MeshError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, MeshError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
