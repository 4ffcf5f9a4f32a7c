"""One-time Monte Carlo calibration of the k-sample Anderson-Darling p-value
interpolation table in the distribution body.

The published table covers significance levels 0.25 ... 0.001 (upper tail).
For approximately uniform p-values under the null, the inverse interpolation
needs anchors in the body as well.  This script simulates the null for a grid
of m = k-1 values, extracts standardized-statistic quantiles at body levels,
and fits t_m(a) = z_{1-a} + b1/sqrt(m) + b2/m per level (the same functional
form as the tail rows, with the asymptote pinned to the normal quantile).

Output: b1/b2 rows to paste into voxharm.metrics.
"""

import sys
import time

import numpy as np
from scipy import stats

BODY_LEVELS = [0.50, 0.75, 0.90, 0.95]
M_GRID = [1, 2, 3, 4, 6, 9]
N_PER_SAMPLE = 175
TRIALS = int(sys.argv[1]) if len(sys.argv) > 1 else 60_000
CHUNK = 1500
SEED = 20240817


def batch_statistics(k: int, n: int, trials: int, rng) -> np.ndarray:
    """Standardized midrank statistics for `trials` null simulations (no ties)."""
    total = k * n
    labels = np.repeat(np.arange(k), n)
    bj = np.arange(total) + 0.5
    denom = bj * (total - bj) - total / 4.0
    out = np.empty(trials)
    done = 0
    while done < trials:
        batch = min(CHUNK, trials - done)
        values = rng.standard_normal((batch, total))
        order = np.argsort(values, axis=1)
        sorted_labels = labels[order]
        a2 = np.zeros(batch)
        for i in range(k):
            ind = (sorted_labels == i).astype(np.float64)
            mij = np.cumsum(ind, axis=1) - 0.5 * ind
            a2 += ((total * mij - bj * n) ** 2 / denom).sum(axis=1) / (n * total)
        a2 *= (total - 1.0) / total
        out[done : done + batch] = a2
        done += batch
    # the variance formula from the published test
    big_h = k / n
    idx = np.arange(1, total)
    small_h = (1.0 / idx).sum()
    partial = np.cumsum(1.0 / np.arange(total - 1, 1, -1))
    g = (partial / np.arange(2, total)).sum()
    a = (4 * g - 6) * (k - 1) + (10 - 6 * g) * big_h
    b = (2 * g - 4) * k**2 + 8 * small_h * k + (2 * g - 14 * small_h - 4) * big_h - 8 * small_h + 4 * g - 6
    c = (6 * small_h + 2 * g - 2) * k**2 + (4 * small_h - 4 * g + 6) * k + (2 * small_h - 6) * big_h + 4 * small_h
    d = (2 * small_h + 6) * k**2 - 4 * small_h * k
    sigmasq = (a * total**3 + b * total**2 + c * total + d) / ((total - 1.0) * (total - 2.0) * (total - 3.0))
    return (out - (k - 1)) / np.sqrt(sigmasq)


def main():
    rng = np.random.default_rng(SEED)
    quantiles = {}
    for m in M_GRID:
        t0 = time.time()
        stats_m = batch_statistics(m + 1, N_PER_SAMPLE, TRIALS, rng)
        qs = np.quantile(stats_m, [1.0 - lvl for lvl in BODY_LEVELS])
        quantiles[m] = qs
        print(f"m={m}: quantiles {dict(zip(BODY_LEVELS, np.round(qs, 4)))} ({time.time()-t0:.0f}s)", flush=True)

    print("\nfitted rows (b0 pinned to the normal quantile):")
    design = np.array([[1.0 / np.sqrt(m), 1.0 / m] for m in M_GRID])
    for j, lvl in enumerate(BODY_LEVELS):
        z = stats.norm.ppf(1.0 - lvl)
        resid = np.array([quantiles[m][j] - z for m in M_GRID])
        coef, *_ = np.linalg.lstsq(design, resid, rcond=None)
        fitted = z + design @ coef
        err = np.abs(fitted - np.array([quantiles[m][j] for m in M_GRID])).max()
        print(f"level={lvl:4.2f}: b0={z:+.4f} b1={coef[0]:+.4f} b2={coef[1]:+.4f} (max fit err {err:.4f})")


if __name__ == "__main__":
    main()
