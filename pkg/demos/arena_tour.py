"""A look at the three arena tasks.

Renders one frame per task, rolls the scripted oracle and a random policy
from the same starts, and prints their returns. Frames are written as PPM
images next to the output directory so they can be opened with any viewer.

    python demos/arena_tour.py --out /tmp/tour
"""
import argparse
from pathlib import Path

import numpy as np

from discorl.arena import TASKS, ArenaConfig, initial_state, render
from discorl.evaluation import RandomPolicy, evaluate, evaluate_oracle


def write_ppm(path, frame, scale=8):
    img = np.repeat(np.repeat(np.round(frame * 255).astype(np.uint8), scale, 0), scale, 1)
    h, w, _ = img.shape
    # row 0 of the frame is y = -1; flip so up is up
    path.write_bytes(f"P6 {w} {h} 255\n".encode() + img[::-1].tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tour")
    ap.add_argument("--episodes", type=int, default=5)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in TASKS:
        cfg = ArenaConfig(task=task)
        write_ppm(out / f"{task}.ppm", render(initial_state((-0.5, 0.2), cfg), cfg))
        oracle = evaluate_oracle(cfg, args.episodes)
        rnd = evaluate(RandomPolicy(0), cfg, args.episodes)
        print(f"{task}: oracle raw {np.mean(oracle.raw):8.1f}   random raw {rnd.raw_mean:8.1f}"
              f"   random normalised {rnd.mean:.2f}")
    print(f"frames written to {out}/")


if __name__ == "__main__":
    main()
