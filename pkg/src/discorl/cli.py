"""Command-line entry point (``discorl <verb>``).

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import container
from .arena import TASKS
from .distill import LOSS_PRESETS, DistillDataset, StudentPolicy, compare_losses
from .evaluation import evaluate
from .nn import ConfigError
from .pipeline import (EVAL_HEADER, MemoryReport, PipelineConfig, StageFailed, distill_student, learn_encoder,
                       make_distill_dataset, memory_report, report_rows, run_checkpoint_distill_sweep,
                       run_discorl, run_finetune_baseline, stage_seed, write_csv)
from .ppo import Teacher, train_teacher
from .srl import SrlModel

log = logging.getLogger("discorl")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _common(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML pipeline config")
    parser.add_argument("--seed", type=int, default=d, help="root seed (overrides the config)")
    parser.add_argument("--out", default=d, help="output directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discorl", description="Continual RL by policy distillation in a 2D arena.")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    sp = verb("srl-train", "collect random data and train an SRL encoder")
    sp.add_argument("--task", choices=TASKS, required=True)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--epochs", type=int)

    sp = verb("rl-train", "train a PPO teacher")
    sp.add_argument("--task", choices=TASKS, required=True)
    sp.add_argument("--encoder", help="SRL model file (required for encoded input)")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--checkpoints", action="store_true", help="save teacher_<task>_ep<episode>.bin files")

    sp = verb("gen-distill", "generate a distillation dataset from a teacher")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--mode", choices=("on_policy", "grid_walker", "random_walker"))
    sp.add_argument("--samples", type=int)

    sp = verb("distill", "train a student on one or more distillation datasets")
    sp.add_argument("datasets", nargs="+")
    sp.add_argument("--loss", choices=("kl", "mse"))
    sp.add_argument("--tau", type=float)
    sp.add_argument("--epochs", type=int)

    sp = verb("eval", "evaluate a teacher or student greedily on a task")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--task", choices=TASKS, required=True)
    sp.add_argument("--episodes", type=int)

    verb("pipeline", "run the full sequential pipeline")

    sp = verb("finetune-baseline", "fine-tune one policy TR -> TC and record forgetting")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--eval-every", type=int, default=20480)

    sp = verb("checkpoint-sweep", "distill every teacher checkpoint into a fresh student")
    sp.add_argument("--task", choices=TASKS, default="TC")
    sp.add_argument("--student-seeds", type=int, default=8)
    sp.add_argument("--samples", type=int, default=15000)

    sp = verb("compare-losses", "compare MSE and tempered-KL distillation on kept datasets")
    sp.add_argument("datasets", nargs="+", help="one distillation dataset per task")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--losses", nargs="+", choices=tuple(LOSS_PRESETS), default=list(LOSS_PRESETS))

    sp = verb("memory-report", "bytes on disk per artifact class")
    sp.add_argument("--dir", help="run directory (defaults to --out)")
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    cfg.validate()
    return cfg


def _need_file(path):
    if not Path(path).is_file():
        raise ConfigError(f"no such file: {path}")
    return path


def _load_policy(path):
    header, _ = container.load(_need_file(path))
    if header["kind"] == "teacher":
        return Teacher.load(path)
    if header["kind"] == "student":
        return StudentPolicy.load(path)
    raise ConfigError(f"{path} holds a {header['kind']!r}, not a policy")


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_srl_train(cfg, args, out):
    srl = cfg.srl
    if args.samples:
        srl.n_samples = args.samples
    if args.epochs is not None:
        srl.epochs = args.epochs
    i = cfg.tasks.index(args.task) if args.task in cfg.tasks else 0
    model = learn_encoder(cfg.arena_config(args.task), srl, stage_seed(cfg.seed, i, "srl_data"),
                          stage_seed(cfg.seed, i, "srl"))
    path = model.save(out / f"srl_{args.task}.bin", meta={"task": args.task})
    _print({"model": str(path), "bytes": path.stat().st_size})


def cmd_rl_train(cfg, args, out):
    encoder = SrlModel.load(_need_file(args.encoder)) if args.encoder else None
    if cfg.rl.input_mode == "encoded" and encoder is None:
        raise ConfigError("--encoder is required for encoded input (or set rl.input_mode: raw_pixels)")
    i = cfg.tasks.index(args.task) if args.task in cfg.tasks else 0
    run = train_teacher(cfg.arena_config(args.task), encoder, args.budget or cfg.rl.budget_steps,
                        stage_seed(cfg.seed, i, "rl"), cfg.rl.ppo_config(), input_mode=cfg.rl.input_mode)
    path = run.teacher.save(out / f"teacher_{args.task}.bin")
    write_csv(out / f"teacher_curve_{args.task}.csv", ("step", "episode", "mean_reward"), run.curve)
    if args.checkpoints:
        for ck in run.checkpoints:
            ck.teacher.save(out / f"teacher_{args.task}_ep{ck.episode}.bin")
    _print({"teacher": str(path), "checkpoints": len(run.checkpoints),
            "final_mean_reward": run.curve[-1][2] if run.curve else None})


def cmd_gen_distill(cfg, args, out):
    teacher = Teacher.load(_need_file(args.teacher))
    task = args.task or teacher.task
    mode = args.mode or cfg.distill.mode
    i = cfg.tasks.index(task) if task in cfg.tasks else 0
    ds = make_distill_dataset(cfg, task, teacher, stage_seed(cfg.seed, i, "gen"), mode, args.samples)
    path = ds.save(out / f"distill_{task}_{mode}.bin")
    _print({"dataset": str(path), "size": len(ds), "val": int(ds.is_val.sum())})


def cmd_distill(cfg, args, out):
    d = cfg.distill
    if args.loss:
        d.loss = args.loss
    if args.tau is not None:
        d.tau = args.tau
    if args.epochs is not None:
        d.epochs = args.epochs
    cfg.validate()
    datasets = [DistillDataset.load(_need_file(p)) for p in args.datasets]
    student, stats = distill_student(cfg, datasets, stage_seed(cfg.seed, 0, "distill"))
    path = student.save(out / "student.bin")
    write_csv(out / "student_losses.csv", ("epoch", "train_loss", "val_loss"),
              [(e, stats.train_loss[e], stats.val_loss[e]) for e in range(len(stats.train_loss))])
    _print({"student": str(path), "tasks": student.tasks, "best_epoch": stats.best_epoch,
            "val_loss": stats.val_loss})


def cmd_eval(cfg, args, out):
    policy = _load_policy(args.policy)
    rep = evaluate(policy, cfg.arena_config(args.task), args.episodes or cfg.eval.n_episodes, cfg.eval.seed,
                   name=Path(args.policy).stem)
    write_csv(out / f"eval_{Path(args.policy).stem}_{args.task}.csv", EVAL_HEADER, report_rows("eval", rep))
    _print({k: getattr(rep, k) for k in ("task", "policy", "mean", "std", "min", "max", "raw_mean")})


def cmd_pipeline(cfg, args, out):
    res = run_discorl(cfg, out)
    final = res.final_report()
    _print({"out_dir": str(res.out_dir), "final": {t: r.mean for t, r in final.items()},
            "teachers": {t: r.mean for t, r in res.teacher_reports.items()}})


def cmd_finetune(cfg, args, out):
    res = run_finetune_baseline(cfg, args.seeds, args.eval_every, out_dir=out)
    _print(res["summary"])


def cmd_sweep(cfg, args, out):
    rows = run_checkpoint_distill_sweep(cfg, args.task, range(args.student_seeds), args.samples, out_dir=out)
    _print(rows)


def cmd_compare(cfg, args, out):
    datasets = [DistillDataset.load(_need_file(p)) for p in args.datasets]
    configs = [cfg.arena_config(t) for t in dict.fromkeys(d.task_id for d in datasets)]
    rows = compare_losses(lambda s: datasets, configs, args.losses, args.seeds, cfg.distill.epochs,
                          cfg.eval.n_episodes, cfg.eval.seed)
    write_csv(out / "compare_losses.csv", ("loss", "tau", "mean", "std", "paper_mean", "paper_std"),
              [(r["loss"], r["tau"], r["mean"], r["std"], r["paper_mean"], r["paper_std"]) for r in rows])
    _print(rows)


def cmd_memory(cfg, args, out):
    rep: MemoryReport = memory_report(args.dir or out)
    for name, value, paper in rep.rows():
        print(f"{name:24s} {value!s:>14}  paper: {paper}")


COMMANDS = {"srl-train": cmd_srl_train, "rl-train": cmd_rl_train, "gen-distill": cmd_gen_distill,
            "distill": cmd_distill, "eval": cmd_eval, "pipeline": cmd_pipeline, "finetune-baseline": cmd_finetune,
            "checkpoint-sweep": cmd_sweep, "compare-losses": cmd_compare, "memory-report": cmd_memory}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        out = Path(cfg.out_dir)
        if args.verb != "memory-report":
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.verb](cfg, args, out)
    except (ConfigError, container.ContainerError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
