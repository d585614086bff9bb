"""A minimax sequential test for three hypotheses on [-1, 1].

H1 and H2 are density bands around exponential shapes that lean left and
right; H3 is the uniform density, which also serves as the run-length
distribution.  The state is the pair of likelihood ratios (z1, z2) against
the uniform.  The printed map shows the policy on the log-z plane:
'.' continue, '1'/'2'/'3' stop and decide.  The test then runs against an
adversary that always plays the state's least favorable densities.

Pass --calibrate to search for weights that bring every error near 1% on a
coarser grid (a few minutes).
"""
import argparse
import time

import numpy as np

from robust_detect import sequential as sq
from robust_detect.scenarios import THREE_HYPOTHESIS_LAMBDA, exp_band_coefficient, three_hypothesis_sets


def policy_map(d, step=4):
    lab = np.where(d.stop_mask, d.decision, 0)
    u = np.concatenate(([-np.inf], d.zgrid.log_axis))
    rows = []
    for i in range(d.zgrid.mt - 1, -1, -step):
        rows.append(f"{u[i]:7.2f} " + "".join(".123"[lab[j, i]] for j in range(0, d.zgrid.mt, step // 2)))
    last = range(0, d.zgrid.mt, step // 2)[-1]
    rows.append(f"        columns: log z1 from -inf to {u[last]:.0f}; rows: log z2")
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=61, help="log-z nodes per axis")
    ap.add_argument("--nx", type=int, default=101, help="grid points on [-1, 1]")
    ap.add_argument("--runs", type=int, default=4000)
    ap.add_argument("--calibrate", action="store_true")
    args = ap.parse_args()

    print(f"band shape coefficient a = {exp_band_coefficient():.5f}")
    sets = three_hypothesis_sets(args.nx)
    t = time.perf_counter()
    d = sq.design(sets, THREE_HYPOTHESIS_LAMBDA, sq.ZGrid(2, L=15, m=args.m))
    print(f"design: {d.alternations} alternations, {d.sweeps} sweeps, {time.perf_counter() - t:.1f} s\n")
    print(policy_map(d))

    res = sq.simulate(d, [sq.ADVERSARY] * 3, args.runs, seed=3)
    print(f"\nerrors under the adversary: {np.round(100 * res.error_rates, 2).tolist()} %")
    print(f"mean sample sizes: {np.round(res.mean_tau, 1).tolist()}, censored runs: {res.censored.tolist()}")

    if args.calibrate:
        cal = sq.calibrate_weights(sets if args.nx == 51 else three_hypothesis_sets(51), sq.ZGrid(2, 15, 41),
                                   (0.01, 0.01, 0.01), runs=2000, seed=1, horizon=2000, budget=30)
        print(f"\ncalibrated weights {np.round(cal.lam, 2).tolist()} after {cal.evaluations} designs, "
              f"errors {np.round(100 * cal.errors, 2).tolist()} %, converged {cal.converged}")


if __name__ == "__main__":
    main()
