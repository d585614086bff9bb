"""The sequential designer reduces to an SPRT for two simple hypotheses.

Taking the run-length distribution equal to H1 leaves a single likelihood
ratio axis.  The designed policy stops on two half-lines, so it is an SPRT,
and its trajectories match a plain SPRT with the same thresholds draw for
draw.  Wald's approximate thresholds for the same error rates are printed for
comparison; they ignore overshoot and are therefore conservative.
"""
import math

import numpy as np

from robust_detect import sequential as sq
from robust_detect.scenarios import sprt_pair


def main():
    p1, p2 = sprt_pair()
    lam = (20.0, 300.0)
    d = sq.design((p1, p1, p2), lam, sq.ZGrid(1, L=15, m=151))
    upper, lower = sq.sprt_thresholds(d)
    print(f"designed thresholds on log z: upper {upper:.3f}, lower {lower:.3f}")

    runs = 20000
    res = sq.simulate(d, [p1, p2], runs, seed=1)
    err = res.error_rates
    print(f"errors: under H1 {err[0]:.4f}, under H2 {err[1]:.4f}; mean sample size {np.round(res.mean_tau, 2).tolist()}")

    same = True
    for h, truth in ((1, p1), (2, p2)):
        tau, dec = sq.simulate_sprt(p1, p2, upper, lower, truth, runs, 1, stream_key=h)
        same &= np.array_equal(res.tau[h - 1], tau) and np.array_equal(res.decision[h - 1], dec + 1)
    print(f"trajectories identical to a plain SPRT with those thresholds: {same}")

    la, lb = sq.design_sprt(p1, p2, err[0], err[1])
    print(f"Wald thresholds for the same errors: upper {la:.3f}, lower {lb:.3f} "
          f"(log 99 = {math.log(99):.3f} for 1% each)")


if __name__ == "__main__":
    main()
