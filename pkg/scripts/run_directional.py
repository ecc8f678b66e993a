#!/usr/bin/env python3
"""Train the full pipeline against its two coarse ablations on one dataset.

Arms: "full" (division + rematch + all three stages), "clean_only"
(division, but only the confident subset ever trains), and "no_division"
(everything treated as clean). Prints per-arm Rsum and exits nonzero if the
expected ordering full > clean_only > no_division does not hold.

    python scripts/run_directional.py
    python scripts/run_directional.py --seed 7 --out directional.json
"""

import argparse
import json
import sys

from pcsr.experiments import run_directional


def main():
    ap = argparse.ArgumentParser(description="directional comparison: "
                                 "full pipeline vs clean-only vs no-division")
    ap.add_argument("--seed", type=int, default=42,
                    help="dataset and training seed (default 42)")
    ap.add_argument("--out", default=None,
                    help="also write per-arm results to this JSON file")
    args = ap.parse_args()

    results = run_directional(seed=args.seed, log=print)

    summary = {}
    for arm, res in results.items():
        summary[arm] = {"rsum": res["rsum"],
                        "division_precision": res["division_precision"],
                        "division_recall": res["division_recall"],
                        "final_sizes": res["final_sizes"],
                        "test": res["test"]}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        print(f"wrote {args.out}")

    rsums = {arm: summary[arm]["rsum"] for arm in summary}
    print(json.dumps(rsums, sort_keys=True))
    ordered = rsums["full"] > rsums["clean_only"] > rsums["no_division"]
    print("ordering full > clean_only > no_division:",
          "holds" if ordered else "VIOLATED")
    return 0 if ordered else 1


if __name__ == "__main__":
    sys.exit(main())
