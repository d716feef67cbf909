"""Compute ground-truth contrasts for the simulation design and save them as JSON.

    python scripts/compute_truth.py --scenario 1 --draws 1e7 --out truth_s1.json
"""

import argparse
import json

from reenroll.simgen import SimConfig, truth_oracle


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", type=int, default=1, choices=(1, 2))
    p.add_argument("--draws", type=lambda s: int(float(s)), default=10**7)
    p.add_argument("--log-scale", choices=("sd", "variance"), default="sd")
    p.add_argument("--truncation-method", choices=("reject", "clamp"), default="reject")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="truth.json")
    args = p.parse_args()
    cfg = SimConfig(scenario=args.scenario, log_scale=args.log_scale, truncation_method=args.truncation_method)
    truth = truth_oracle(cfg, args.draws, workers=args.workers)
    for (comp, scope), v in truth.values.items():
        print(f"{comp:<5}{scope:<10}{v:>9.4f}  (MC SE {truth.se[(comp, scope)]:.5f})")
    with open(args.out, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
