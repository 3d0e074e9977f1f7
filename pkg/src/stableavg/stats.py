"""Heavy-tail-robust summaries shared by the estimators and reports."""

import numpy as np

IQR_TO_SIGMA = 1.0 / 1.3489795003921634  # IQR of a standard normal


def robust_spread(samples, axis=0):
    """IQR-based scale estimate, consistent with the std for Gaussian data."""
    q75, q25 = np.percentile(samples, [75, 25], axis=axis)
    return (q75 - q25) * IQR_TO_SIGMA


def robust_stderr(samples, axis=0):
    n = np.shape(samples)[axis]
    return robust_spread(samples, axis=axis) / np.sqrt(n)


def loglog_slope(x, y):
    """Least-squares slope of log y on log x over strictly positive pairs; nan if < 2 pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def quantile_se(samples, p):
    """Asymptotic standard error of the sample p-quantile, density from a local histogram."""
    samples = np.sort(np.asarray(samples, dtype=float))
    n = samples.size
    h = 0.5 * n ** (-1.0 / 3.0)
    lo, hi = np.quantile(samples, [max(p - h, 0.0), min(p + h, 1.0)])
    dens = (min(p + h, 1.0) - max(p - h, 0.0)) / max(hi - lo, 1e-300)
    return np.sqrt(p * (1 - p) / n) / dens
