"""Watch catastrophic forgetting happen, then watch replay hold the line.

Runs three methods on the same 4-2-2 class-incremental protocol and prints
the per-step class IoUs side by side:

  ft       plain fine-tuning on each step's data, nothing else
  recall+  web-style replay with filtering and both self-inpaintings
  joint    all classes trained at once (upper reference)

Fine-tuning wipes out the first four classes the moment step 1 starts;
replay keeps them alive at a small fraction of joint's cost.
"""

import argparse
from dataclasses import replace

from shapereplay.config import ExperimentConfig
from shapereplay.trainer import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--pool", type=int, default=150, help="web pool per class")
    args = ap.parse_args()

    base = ExperimentConfig(seed=args.seed, pool_per_class=args.pool)
    runs = {}
    for method in ("ft", "recall+", "joint"):
        print(f"running {method} ...", flush=True)
        report, state = run_pipeline(replace(base, method=method))
        runs[method] = (report, state.per_step_eval)

    classes = sorted({c for _, evs in runs.values() for ev in evs
                      for c in ev["class_iou"]})
    for method in ("ft", "recall+"):
        print(f"\n=== {method}: per-step class IoU (percent)")
        print("step  " + " ".join(f" c{c}" for c in classes))
        for ev in runs[method][1]:
            cells = []
            for c in classes:
                v = ev["class_iou"].get(c)
                cells.append("  . " if v is None else f"{100 * v:3.0f} ")
            print(f"  {ev['step']}   " + " ".join(cells))

    print("\n=== final all-classes mIoU")
    joint_all = runs["joint"][0].group_miou["all"]
    for method in ("ft", "recall+", "joint"):
        rep = runs[method][0]
        gap = joint_all - rep.group_miou["all"]
        print(f"{method:8s} initial {rep.group_miou['initial']:.3f}  "
              f"incremental {rep.group_miou['incremental']:.3f}  "
              f"all {rep.group_miou['all']:.3f}  gap vs joint {gap:+.3f}")
    ft_old = runs["ft"][0].group_miou["initial"]
    rp_old = runs["recall+"][0].group_miou["initial"]
    print(f"\nold-class retention: ft {ft_old:.3f} vs recall+ {rp_old:.3f} "
          f"(joint {runs['joint'][0].group_miou['initial']:.3f})")


if __name__ == "__main__":
    main()
