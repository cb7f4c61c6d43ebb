"""Fine-tuning forgets, distillation remembers.

A single PPO policy is trained on TR and then trained further on TC; its TR
score is tracked throughout. The DisCoRL student of a TR -> TC pipeline run
is shown next to it. Both go to one CSV in the forgetting layout.

    python demos/forgetting.py --out runs/forgetting --seeds 0 1
"""
import argparse
import logging
from pathlib import Path

from discorl.pipeline import (FORGETTING_HEADER, PipelineConfig, forgetting_rows_for_student, run_discorl,
                              run_finetune_baseline, write_csv)


def main():
    ap = argparse.ArgumentParser(description="catastrophic forgetting versus distillation")
    ap.add_argument("--out", default="runs/forgetting")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--eval-every", type=int, default=40960)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = PipelineConfig(tasks=["TR", "TC"], out_dir=str(out / "discorl"))
    ft = run_finetune_baseline(cfg, args.seeds, args.eval_every)
    res = run_discorl(cfg)
    rows = ft["rows"] + forgetting_rows_for_student(res)
    write_csv(out / "forgetting.csv", FORGETTING_HEADER, rows)

    for s in ft["summary"]:
        print(f"fine-tuning seed {s['seed']}: TR {s['tr_before']:.2f} -> {s['tr_after']:.2f} "
              f"({s['retained']:.0%} kept), TC {s['tc_after']:.2f}")
    tr1, tr2 = res.stage_reports[0]["TR"].mean, res.stage_reports[1]["TR"].mean
    print(f"distilled student: TR {tr1:.2f} -> {tr2:.2f} after adding TC, TC {res.stage_reports[1]['TC'].mean:.2f}")
    print(f"curves in {out / 'forgetting.csv'}")


if __name__ == "__main__":
    main()
