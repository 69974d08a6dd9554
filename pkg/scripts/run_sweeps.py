"""Sweep the CVR and CTCVR loss weights for the ESCM2 variants.

    python scripts/run_sweeps.py --seeds 1-5 --out results/sweeps
"""
import argparse
import logging
from pathlib import Path

from escmlab import analysis, experiments
from run_benchmark import seed_range

log = logging.getLogger("sweeps")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=seed_range("1-5"))
    ap.add_argument("--grid", default=",".join(f"{x:g}" for x in experiments.DEFAULT_GRID))
    ap.add_argument("--out", type=Path, default=Path("results/sweeps"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    grid = [float(x) for x in args.grid.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)

    for param in ("lambda_c", "lambda_g"):
        cells = experiments.run_sweep(args.seeds, param=param, grid=grid, log=log.info)
        rows = [r.row() | {param: c.value} for c in cells for r in c.results]
        analysis.write_csv(rows, args.out / f"{param}_runs.csv")
        means = [
            {"variant": c.variant, param: c.value, "cvr_auc": c.mean("cvr_auc"), "ctcvr_auc": c.mean("ctcvr_auc")}
            for c in cells
        ]
        analysis.write_csv(means, args.out / f"{param}.csv")
        for m in means:
            log.info("%s %s=%g: cvr_auc %.4f ctcvr_auc %.4f", m["variant"], param, m[param], m["cvr_auc"], m["ctcvr_auc"])


if __name__ == "__main__":
    main()
