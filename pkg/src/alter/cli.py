"""Command line entry point: ``alter {pretrain,train,sample,bench,analyze}``.

Exit codes: 0 success, 1 usage error, 2 invalid input or failed validation,
3 numeric failure. Run directories default to ``$ALTER_RUNS`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import export
from .config import ConfigError, dump_config, load_config
from .cost import profile_costs
from .data import ring_of_gaussians
from .sampling import bench, mmd_squared, sample
from .trainer import VARIANTS, Trainer, TrainConfig, pretrain_config

log = logging.getLogger("alter")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
RUNS_ENV = "ALTER_RUNS"
DEFAULT_TEACHER_MMD = 1e-3


class ValidationFailure(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_dir(args, kind, seed) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        path = root / f"{kind}-{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(run_dir: Path, args, config: TrainConfig):
    if args.config:
        (run_dir / "config.source.txt").write_text(Path(args.config).read_text())
    (run_dir / "config.txt").write_text(dump_config(config))


def _check_finite_model(model, what):
    for name, p in model.state_dict().items():
        if not torch.all(torch.isfinite(p)):
            raise NumericFailure(f"{what} parameter {name} is not finite")


def _check_finite_metrics(metrics):
    for row in metrics:
        if not math.isfinite(row["L_total"]):
            raise NumericFailure(f"non-finite loss at step {row['step']} ({row['phase']} phase)")


def _heldout(config: TrainConfig, n=2000):
    return ring_of_gaussians(n, np.random.default_rng(config.data_seed + 1))


# -- commands -------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    overrides = {"seed": args.seed, "total_steps": args.steps}
    config = load_config(args.config, base=pretrain_config(), **overrides)
    run_dir = _run_dir(args, "pretrain", config.seed)
    _echo_config(run_dir, args, config)
    trainer = Trainer(config)
    trainer.run(callback=_progress(args))
    _check_finite_metrics(trainer.metrics)
    _check_finite_model(trainer.student, "teacher")
    export.write_metrics_csv(run_dir / "metrics.csv", trainer.metrics)
    ckpt.save_model(run_dir / "teacher.npz", trainer.student, trainer.schedule, config.to_dict())
    n_eval = min(args.eval_steps, config.total_timesteps)
    x = sample(trainer.student, None, trainer.schedule, n_eval, 2000,
               np.random.default_rng(config.seed))
    mmd = mmd_squared(x, _heldout(config))
    (run_dir / "teacher_eval.json").write_text(json.dumps(
        {"mmd2": mmd, "threshold": args.mmd_threshold, "n_steps": n_eval}, indent=1))
    print(f"teacher written to {run_dir / 'teacher.npz'}; held-out MMD^2 {mmd:.6f}")
    if not math.isfinite(mmd):
        raise NumericFailure("teacher samples are not finite")
    if mmd > args.mmd_threshold:
        raise ValidationFailure(
            f"teacher MMD^2 {mmd:.6f} exceeds threshold {args.mmd_threshold}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        trainer = ckpt.load_trainer(args.resume)
        config = trainer.config
        if args.variant and args.variant != config.variant:
            raise ValidationFailure(
                f"--variant {args.variant} conflicts with resumed variant {config.variant}")
    else:
        if not args.teacher:
            raise ValidationFailure("--teacher is required unless --resume is given")
        teacher, schedule, _, meta = ckpt.load_model(args.teacher)
        config = load_config(args.config, variant=args.variant, seed=args.seed)
        if teacher.config != config.denoiser_config:
            raise ValidationFailure("teacher architecture does not match the config")
        if len(schedule) != config.total_timesteps:
            raise ValidationFailure("teacher schedule length does not match total_timesteps")
        trainer = Trainer(config, teacher)
    run_dir = _run_dir(args, f"train-{config.variant}", config.seed)
    _echo_config(run_dir, args, config)
    trainer.run(until=args.stop_at, callback=_progress(args))
    _check_finite_metrics(trainer.metrics)
    _check_finite_model(trainer.student, "student")
    ckpt.save_trainer(run_dir / "state.npz", trainer)
    export.write_metrics_csv(run_dir / "metrics.csv", trainer.metrics)
    export.write_masks_csv(run_dir / "masks.csv", trainer.mask_set)
    export.write_routing_csv(run_dir / "routing.csv", trainer.mask_set)
    if trainer.done:
        ckpt.save_model(run_dir / "student.npz", trainer.student, trainer.schedule,
                        config.to_dict(), trainer.mask_set)
    print(f"step {trainer.step}/{trainer.n_steps}, mean sparsity "
          f"{trainer.mean_sparsity():.4f} (target {config.target_sparsity}); run dir {run_dir}")
    return EXIT_OK


def _load_for_inference(args):
    model, schedule, mask_set, meta = ckpt.load_model(args.checkpoint)
    if args.masks or args.routing:
        if not (args.masks and args.routing):
            raise ValidationFailure("--masks and --routing must be given together")
        mask_set = export.read_mask_set(args.masks, args.routing)
        if mask_set.n_layers != model.n_layers:
            raise ValidationFailure("mask width does not match the checkpoint")
    if args.dense:
        mask_set = None
    if mask_set is not None and len(mask_set.routing_table) != schedule.total_timesteps:
        raise ValidationFailure("routing table does not cover the schedule")
    return model, schedule, mask_set


def cmd_sample(args) -> int:
    model, schedule, mask_set = _load_for_inference(args)
    x = sample(model, mask_set, schedule, args.steps, args.n, np.random.default_rng(args.seed),
               hard_prune=args.hard)
    if not np.all(np.isfinite(x)):
        raise NumericFailure("samples are not finite")
    out = Path(args.out) if args.out else _run_dir(args, "sample", args.seed) / "samples.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    export.write_samples_csv(out, x, args.seed)
    print(f"{len(x)} samples ({args.steps} steps, hard={args.hard}) written to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, schedule, mask_set = _load_for_inference(args)
    if mask_set is None:
        raise ValidationFailure("bench needs a mask set (checkpoint masks or --masks/--routing)")
    dtype = torch.float64 if args.fp64 else torch.float32
    reports = [bench(model, mask_set, schedule, n, repetitions=args.repetitions,
                     n_samples=args.n, seed=args.seed, dtype=dtype) for n in args.steps]
    out = Path(args.out) if args.out else _run_dir(args, "bench", args.seed) / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    export.write_bench_csv(out, reports)
    for r in reports:
        print(f"{r.steps:>4} steps: MAC speedup {r.mac_speedup:.3f}, "
              f"wall {r.dense_ms:.2f} ms -> {r.pruned_ms:.2f} ms ({r.wall_speedup:.3f}x)")
    print(f"bench report written to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ValidationFailure(f"{run_dir}: not a directory")
    mask_set = export.read_mask_set(run_dir / "masks.csv", run_dir / "routing.csv")
    cfg_path = run_dir / "config.txt"
    config = load_config(cfg_path if cfg_path.exists() else None)
    if config.n_layers != mask_set.n_layers:
        raise ValidationFailure("masks.csv width does not match config.txt n_layers")
    costs = profile_costs(config.denoiser_config).costs
    summary = export.summarize(mask_set, costs, config.target_sparsity)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    print(export.format_summary(summary))
    if args.svg:
        for p in export.write_heatmaps(run_dir, mask_set):
            print(f"wrote {p}")
    return EXIT_OK


def _progress(args):
    every = getattr(args, "log_every", 0)
    if not every:
        return None

    def report(trainer, rows):
        if trainer.step % every == 0:
            row = rows[-1]
            log.info("step %d/%d %s L_total=%.4g S=%.3f", trainer.step, trainer.n_steps,
                     row["phase"], row["L_total"], trainer.mean_sparsity())
    return report


# -- parser ---------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--run-dir", help="output directory (default: new dir under $ALTER_RUNS)")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("pretrain", help="train the dense teacher")
    sp.add_argument("--config")
    sp.add_argument("--steps", type=_positive_int)
    sp.add_argument("--eval-steps", type=_positive_int, default=50)
    sp.add_argument("--mmd-threshold", type=float, default=DEFAULT_TEACHER_MMD)
    sp.add_argument("--log-every", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train the routed pruned student")
    sp.add_argument("--config")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--teacher")
    sp.add_argument("--resume", help="train_state checkpoint (state.npz) to continue from")
    sp.add_argument("--stop-at", type=_positive_int, help="stop after this step")
    sp.add_argument("--log-every", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func in (("sample", cmd_sample), ("bench", cmd_bench)):
        sp = sub.add_parser(name, help=f"{name} a trained checkpoint")
        sp.add_argument("checkpoint")
        sp.add_argument("--masks")
        sp.add_argument("--routing")
        sp.add_argument("--dense", action="store_true", help="ignore masks")
        sp.add_argument("--out")
        common(sp, seed=False)
        sp.add_argument("--seed", type=int, default=0)
        if name == "sample":
            sp.add_argument("--steps", type=_positive_int, default=50)
            sp.add_argument("--n", type=_positive_int, default=2000)
            sp.add_argument("--hard", action="store_true", help="physically skip pruned blocks")
        else:
            sp.add_argument("--steps", type=_positive_int, nargs="+", default=[10, 15, 20, 50])
            sp.add_argument("--n", type=_positive_int, default=256)
            sp.add_argument("--repetitions", type=_positive_int, default=20)
            sp.add_argument("--fp64", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("analyze", help="summarise a training run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--svg", action="store_true", help="also write heatmaps")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ckpt.CheckpointError, ValidationFailure, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericFailure, FloatingPointError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
