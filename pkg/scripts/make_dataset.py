"""Write one simulated trial as CSV plus matching schema and scheme files.

    python scripts/make_dataset.py --outdir sim_data --n 600 --scenario 1 --seed 7 --rep 0
"""

import argparse
import json
from pathlib import Path

from reenroll.scheme import scheme_to_dict
from reenroll.simgen import SCHEMA_DICT, SimConfig, generate_trial, simplify_scheme
from reenroll.trial_data import Schema, write_records


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--outdir", default="sim_data")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--scenario", type=int, default=1, choices=(1, 2))
    p.add_argument("--seed", type=int, default=SimConfig().seed)
    p.add_argument("--rep", type=int, default=0)
    args = p.parse_args()
    cfg = SimConfig(n=args.n, scenario=args.scenario, seed=args.seed)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    rs = generate_trial(cfg, args.rep).records
    with open(out / "data.csv", "w", newline="") as fh:
        write_records(rs, fh, Schema.from_dict(SCHEMA_DICT))
    (out / "schema.json").write_text(json.dumps(SCHEMA_DICT, indent=2) + "\n")
    (out / "scheme.json").write_text(json.dumps(scheme_to_dict(simplify_scheme(cfg)), indent=2) + "\n")
    print(f"wrote {len(rs)} records for {rs.n} participants to {out}/")


if __name__ == "__main__":
    main()
