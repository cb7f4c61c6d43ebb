"""One task end to end: SRL encoder, PPO teacher, distilled student.

The walk-through mirrors what the pipeline does for each task, but keeps
everything in memory and prints each step's outcome:

1. random-policy frames train the encoder (reconstruction + inverse model);
2. PPO trains a small policy on the encoded states;
3. the teacher generates on-policy frames labelled with its action
   probabilities;
4. a fresh pixel-input student is fitted to those labels and both policies
   are evaluated greedily against the scripted oracle.

    python demos/single_task.py --task TR
    python demos/single_task.py --task TC --budget 100000   # quicker, weaker teacher
"""
import argparse
import logging
import time

from discorl.arena import TASKS
from discorl.distill import generate_onpolicy, train_student
from discorl.evaluation import RandomPolicy, evaluate
from discorl.pipeline import PipelineConfig, learn_encoder, stage_seed
from discorl.ppo import train_teacher
from discorl.srl import collect_random_dataset, inverse_accuracy


def main():
    ap = argparse.ArgumentParser(description="single-task SRL -> PPO -> distillation walk-through")
    ap.add_argument("--task", choices=TASKS, default="TR")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=int, default=None, help="PPO steps (default: pipeline setting)")
    ap.add_argument("--samples", type=int, default=15000, help="distillation tuples")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = PipelineConfig(tasks=[args.task], seed=args.seed)
    env = cfg.arena_config(args.task)
    t0 = time.time()

    encoder = learn_encoder(env, cfg.srl, stage_seed(args.seed, 0, "srl_data"), stage_seed(args.seed, 0, "srl"))
    held_out = collect_random_dataset(env, 1000, seed=stage_seed(args.seed, 0, "eval"))
    print(f"[{time.time() - t0:5.0f}s] encoder: held-out inverse-model accuracy "
          f"{inverse_accuracy(encoder, held_out):.2f} (chance 0.25)")

    run = train_teacher(env, encoder, args.budget or cfg.rl.budget_steps, stage_seed(args.seed, 0, "rl"),
                        cfg.rl.ppo_config())
    teacher = evaluate(run.teacher, env, name="teacher")
    print(f"[{time.time() - t0:5.0f}s] teacher: last training return {run.curve[-1][2]:.1f}, "
          f"greedy normalised {teacher.mean:.2f}")

    data = generate_onpolicy(env, run.teacher, args.samples, stage_seed(args.seed, 0, "gen"))
    print(f"[{time.time() - t0:5.0f}s] dataset: {len(data)} frames, {data.nbytes() / 1e6:.1f} MB, "
          f"{int(data.is_val.sum())} held out for validation")
    # the encoder and the teacher are not needed past this point
    del encoder, run

    student, stats = train_student([data], epochs=cfg.distill.epochs, seed=args.seed)
    rep = evaluate(student, env, name="student")
    rnd = evaluate(RandomPolicy(args.seed), env)
    print(f"[{time.time() - t0:5.0f}s] student: best epoch {stats.best_epoch}, "
          f"action agreement {stats.val_accuracy[stats.best_epoch][args.task]:.2f}")
    print(f"normalised reward  teacher {teacher.mean:.2f}  student {rep.mean:.2f}  random {rnd.mean:.2f}")


if __name__ == "__main__":
    main()
