"""Tour of the replay filter cascade with the oracle's answer key.

The simulated image search returns a mix of usable photos and junk (the
query class missing, wrong, tiny, or buried in clutter). The pipeline
never sees those tags; the filters have to find the junk from pixels
alone. This script runs one full experiment, then grades every filter
decision against the hidden tags and prints where each stage earned its
keep. With --out it also dumps a handful of kept and rejected images as
PPM files for eyeballing.
"""

import argparse
import os
from collections import Counter, defaultdict

from shapereplay.config import ExperimentConfig
from shapereplay.pixelio import write_ppm
from shapereplay.seeds import seed_for
from shapereplay.shapeworld import web_query
from shapereplay.trainer import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--pool", type=int, default=150, help="web pool per class")
    ap.add_argument("--out", help="directory for sample PPM dumps")
    args = ap.parse_args()

    cfg = ExperimentConfig(seed=args.seed, pool_per_class=args.pool)
    print("running recall+ ...", flush=True)
    report, state = run_pipeline(cfg)

    pools = {}
    for c in sorted(state.replay.classes):
        pools[c] = web_query(state.world, c, cfg.pool_per_class, cfg.web_profile,
                             seed_for(cfg.seed, "web", c))

    stage_pass = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    kept = Counter()
    total = 0
    for rec in state.replay.audit:
        tag = pools[rec["class"]][rec["pool_index"]].tag
        for stage in ("adversarial", "semantic"):
            if stage in rec:
                stage_pass[stage][tag][1] += 1
                stage_pass[stage][tag][0] += bool(rec[stage])
        if rec["kept"]:
            kept[tag] += 1
            total += 1

    order = ("clean", "style_shifted", "missing_class", "wrong_class",
             "too_small", "non_dominant", "near_duplicate")
    print("\ntag             adversarial   size-rule   kept")
    for tag in order:
        a = stage_pass["adversarial"][tag]
        s = stage_pass["semantic"][tag]
        print(f"{tag:15s} {a[0]:4d}/{a[1]:4d}    {s[0]:4d}/{s[1]:4d}   {kept[tag]:4d}")
    good = kept["clean"] + kept["style_shifted"]
    print(f"\nsurvivors {total}: clean or style-shifted {good / total:.1%}, "
          f"query class missing {kept['missing_class'] / total:.1%}")
    print(f"per-class kept counts: {state.replay.class_counts()}")
    print(f"final all-classes mIoU: {report.group_miou['all']:.3f}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        shown = Counter()
        for rec in state.replay.audit:
            tag = pools[rec["class"]][rec["pool_index"]].tag
            verdict = "kept" if rec["kept"] else "dropped"
            if shown[(tag, verdict)] >= 2:
                continue
            shown[(tag, verdict)] += 1
            name = f"{verdict}_{tag}_c{rec['class']}_{rec['pool_index']:03d}.ppm"
            write_ppm(os.path.join(args.out, name),
                      pools[rec["class"]][rec["pool_index"]].image)
        print(f"wrote {sum(shown.values())} sample images to {args.out}")


if __name__ == "__main__":
    main()
