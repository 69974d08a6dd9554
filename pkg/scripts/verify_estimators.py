"""Monte Carlo check of the IPS and DR bias/variance formulas on random instances.

    python scripts/verify_estimators.py --instances 20 --draws 100000
"""
import argparse
import sys
from pathlib import Path

from escmlab import analysis, experiments


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--draws", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/verify.csv"))
    args = ap.parse_args()

    rows = experiments.verify_estimators(args.instances, args.seed, args.draws)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_csv(rows, args.out)
    for r in rows:
        ips_z = (r["ips_empirical_bias"] - r["ips_analytic_bias"]) / r["ips_bias_se"]
        dr_z = (r["dr_empirical_bias"] - r["dr_analytic_bias"]) / r["dr_bias_se"]
        print(f"instance {r['instance']:2d} n={r['size']:3d} ips z={ips_z:+.2f} dr z={dr_z:+.2f} "
              f"{'ok' if r['passed'] else 'FAILED'}")
    return 0 if all(r["passed"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
