"""Huber contamination: clipped likelihood ratios and the breakdown point.

Under eps-contamination the LFDs clip the nominal likelihood ratio at two
levels.  As eps grows the clip levels approach each other; at the breakdown
point the two sets share a distribution and no test can do better than
guessing.
"""
import numpy as np

from robust_detect.lfd import breakdown_point, solve_contamination_lfds
from robust_detect.scenarios import gaussian_nominals


def main():
    p0, p1 = gaussian_nominals()
    print("  eps    lower clip   upper clip   breakdown")
    for eps in (0.0, 0.05, 0.1, 0.2, 0.25, 0.27, 0.29):
        pair = solve_contamination_lfds(p0, p1, eps, eps)
        llr = pair.llr.values[np.isfinite(pair.llr.values)]
        print(f"  {eps:4.2f}   {llr.min():10.4f}   {llr.max():10.4f}   {pair.breakdown}")
    eps = breakdown_point(p0, p1)
    closed = 1 - 1 / float(p0.grid.weights @ np.maximum(p0.values, p1.values))
    print(f"\nbreakdown point by bisection: {eps:.4f}; closed form 1 - 1/int max(p0, p1): {closed:.4f}")


if __name__ == "__main__":
    main()
