"""Show how propensity spread inflates the product-form CVR estimate.

    python scripts/jensen_demo.py
"""
import numpy as np

from escmlab.analysis import jensen_gap


def main():
    rng = np.random.default_rng(0)
    c_hat = rng.uniform(0.001, 0.02, 10_000)
    print(f"{'logit sd':>8} {'lhs':>9} {'rhs':>9} {'gap':>9}")
    for sd in (0.0, 0.25, 0.5, 1.0, 1.5):
        o_hat = 1.0 / (1.0 + np.exp(-(-2.5 + sd * rng.standard_normal(c_hat.size))))
        g = jensen_gap(c_hat, o_hat)
        print(f"{sd:8.2f} {g.lhs:9.4f} {g.rhs:9.4f} {g.gap:9.4f}")


if __name__ == "__main__":
    main()
