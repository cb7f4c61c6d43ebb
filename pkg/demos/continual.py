"""The full continual sequence TR -> TC -> TE with one label-free student.

After each task only its distillation dataset is kept; the student is
re-distilled from every dataset kept so far and evaluated on all tasks
seen. The table at the end shows how the student tracks each teacher and
the single-task students distilled from one dataset alone.

    python demos/continual.py --out runs/demo --seed 42
"""
import argparse
import logging

from discorl.pipeline import PipelineConfig, memory_report, run_discorl


def main():
    ap = argparse.ArgumentParser(description="continual distillation over the three tasks")
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--config", help="YAML config (defaults to the built-in settings)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.replace(seed=args.seed, out_dir=args.out)
    res = run_discorl(cfg)

    print(f"{'after':8s}" + "".join(f"{t:>8s}" for t in cfg.tasks))
    for task, reps in zip(cfg.tasks, res.stage_reports):
        print(f"{task:8s}" + "".join(f"{reps[t].mean:8.2f}" if t in reps else f"{'':8s}" for t in cfg.tasks))
    print(f"{'teacher':8s}" + "".join(f"{res.teacher_reports[t].mean:8.2f}" for t in cfg.tasks))
    if res.single_task_reports:
        print(f"{'single':8s}" + "".join(f"{res.single_task_reports[t].mean:8.2f}" for t in cfg.tasks))

    mem = memory_report(res.out_dir)
    print("\npersistent learning state:", ", ".join(mem.learning_state))
    print(f"datasets {mem.bytes['distill_datasets'] / 1e6:.1f} MB, student {mem.bytes['student'] / 1e6:.2f} MB, "
          f"teacher (deleted) {mem.teacher_reference_bytes / 1e6:.3f} MB")


if __name__ == "__main__":
    main()
