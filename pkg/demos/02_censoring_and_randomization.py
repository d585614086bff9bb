"""Censoring and the need for randomized decisions.

With bands 0.7 p <= q <= 3 p around N(-2, 4) and N(2, 4) the two LFD
constants coincide at one, so every observation in an interval around zero
is ignored: its log-likelihood ratio is exactly zero.  That interval carries
a point mass of the test statistic, and the false-alarm rate jumps across it
when the threshold passes zero.  The ROC is a straight line across the jump,
which only a randomized test can reach.
"""
import numpy as np

from robust_detect import detector as de
from robust_detect.lfd import solve_band_lfds
from robust_detect.scenarios import censoring_bands


def main():
    b0, b1 = censoring_bands()
    pair = solve_band_lfds(b0, b1)
    const = pair.const_mask()
    x = pair.grid.x
    print(f"c0 = {pair.c0:.8f}, c1 = {pair.c1:.8f}")
    print(f"censored interval: [{x[const].min():.3f}, {x[const].max():.3f}]")

    d0, d1 = de.pair_llr_distributions(pair, pair.q0, pair.q1)
    (v, m), = [a for a in d0.atoms if abs(a[0]) < 1e-9]
    print(f"point mass of the llr at {v:.1e} under Q0: {m:.4f}")

    print("\nfalse-alarm probability at threshold 0 as the coin bias gamma grows")
    for g in (0.0, 0.25, 0.5, 0.75, 1.0):
        alpha, beta = de.test_error_probs(d0, d1, de.RandomizedTest(0.0, g))
        print(f"  gamma = {g:4.2f}: alpha = {alpha:.4f}, miss = {beta:.4f}")

    print("\npower at alpha = 0.3 for growing sample sizes (randomized tests included)")
    for n in (1, 2, 5, 10):
        roc = de.roc_from_distributions(de.convolve_n(d0, n), de.convolve_n(d1, n), n)
        print(f"  N = {n:2d}: power = {float(roc.power_at(0.3)):.4f}")

    roc = de.roc_from_distributions(d0, d1, 1)
    a0 = de.test_error_probs(d0, d1, de.RandomizedTest(0.0, 0.0))[0]
    a1 = de.test_error_probs(d0, d1, de.RandomizedTest(0.0, 1.0))[0]
    grid = np.linspace(a0, a1, 5)
    power = roc.power_at(grid)
    print("\nsingle-sample ROC across the jump (a straight line):")
    for a, p in zip(grid, power):
        print(f"  alpha = {a:.4f}: power = {p:.4f}")


if __name__ == "__main__":
    main()
