"""Frozen fast dynamics dY = (A Y + F(x, Y)) dt + dZ at a fixed slow state x.

Covers pathwise contraction, ergodic estimation of the averaged drift
B_bar(x) = int B(x, y) mu^x(dy), mixing of the transition semigroup, and a
Holder probe of x -> B_bar(x).
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .integrator import StepCoefficients, Trajectory, integrate, run_steps, steps_for
from .spectral import analyze, synthesize
from .stable_noise import SeedLineage, generate_noise_path, increment_scales, standard_sas
from .stats import loglog_slope, robust_stderr

log = logging.getLogger(__name__)


def default_burn_in(spectrum, F):
    """10 / (lambda_1 - L_F): leaves an e^-10 memory of the initial state."""
    return 10.0 / F.check_dissipative(spectrum)


@dataclass
class FrozenConfig:
    x: np.ndarray
    y0: np.ndarray
    t_burn: float
    t_avg: float
    dt: float = 0.1
    n_replicas: int = 8

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y0 = np.asarray(self.y0, dtype=float)
        if not (self.t_burn > 0 and self.t_avg > 0):
            raise ParameterError("t_burn and t_avg must be positive")
        if self.x.shape[-1] != self.y0.shape[-1]:
            raise ParameterError("x and y0 dimensions disagree")
        if self.n_replicas < 1:
            raise ParameterError("need at least one replica")


@dataclass
class AveragedDriftEstimate:
    value: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)
    reliable: bool = True


def fast_increments(spectrum, alpha, dt, shape, rng):
    """Standard frozen-equation noise increments (rate 1), shape (steps, *batch, n)."""
    scales = increment_scales(spectrum, "fast", alpha, dt, epsilon=1.0)
    return standard_sas(alpha, tuple(shape) + (spectrum.n_modes,), rng) * scales


def frozen_noise(spectrum, alpha, dt, steps, lineage):
    """NoisePath for the frozen equation (fast amplitudes gamma_n, unit time scale)."""
    return generate_noise_path(spectrum, "fast", dt, steps, lineage, alpha, epsilon=1.0)


def simulate_frozen(spectrum, alpha, cfg, F, noise=None, lineage=None, T=None, save_stride=1):
    """Trajectory of Y^{x,y0} on [0, T] (default t_burn + t_avg)."""
    F.check_dissipative(spectrum)
    T = cfg.t_burn + cfg.t_avg if T is None else T
    steps, dt = steps_for(T, cfg.dt)
    if noise is None:
        if lineage is None:
            raise ParameterError("pass a noise path or a seed lineage")
        noise = frozen_noise(spectrum, alpha, dt, steps, lineage)
    return integrate(spectrum, cfg.y0, F.frozen(cfg.x), T, dt, noise, save_stride=save_stride)


@dataclass
class ContractionRecord:
    times: np.ndarray
    diff_norm: np.ndarray      # (n_saved, ...) |Y1 - Y2|
    envelope: np.ndarray       # e^{-(lambda_1 - L_F) t} |Y1_0 - Y2_0|
    gap: float
    tol: float

    @property
    def final_ratio(self):
        return self.diff_norm[-1] / np.where(self.envelope[-1] > 0, self.envelope[-1], 1.0)

    @property
    def ok(self):
        return bool(np.all(self.diff_norm[-1] <= self.envelope[-1] * (1 + self.tol)))

    @property
    def monotone(self):
        d = self.diff_norm
        return bool(np.all(d[1:] <= d[:-1] * (1 + 1e-12) + 1e-300))


def contraction_check(spectrum, alpha, F, x1, x2, y1, y2, T, dt, lineage, tol=0.05,
                      save_stride=1):
    """Two frozen solutions driven by one shared noise path.

    With x1 == x2 the noise cancels in the difference, which must satisfy
    |dY_T| <= e^{-(lambda_1 - L_F) T} |dY_0| (1 + tol) on every path. Batch
    axes of y1, y2 are treated as independent paths.
    """
    gap = F.check_dissipative(spectrum)
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    steps, dt = steps_for(T, dt)
    batch = np.broadcast_shapes(y1.shape, y2.shape)[:-1]
    inc = fast_increments(spectrum, alpha, dt, (steps,) + batch, lineage.rng())
    coeffs = StepCoefficients(spectrum, dt)
    s1 = run_steps(coeffs, y1, inc, F.frozen(x1), save_stride)
    s2 = run_steps(coeffs, y2, inc, F.frozen(x2), save_stride)
    diff = np.linalg.norm(s1 - s2, axis=-1)
    times = np.arange(diff.shape[0]) * dt * save_stride
    env = np.exp(-gap * times).reshape((-1,) + (1,) * (diff.ndim - 1)) * diff[0]
    return ContractionRecord(times, diff, env, gap, tol)


# -- averaged drift ------------------------------------------------------------


def _window_averages(spectrum, alpha, xs, B, F, cfg, rngs):
    """Per-(state, replica) time averages of B(x, Y_s) over the averaging window.

    xs has shape (K, n); rngs supplies one generator per state. Returns (K, R, n).
    """
    K = xs.shape[0]
    R = cfg.n_replicas
    n_burn, _ = steps_for(cfg.t_burn, cfg.dt)
    n_avg, dt = steps_for(cfg.t_avg, cfg.dt)
    steps = n_burn + n_avg
    inc = np.stack([fast_increments(spectrum, alpha, dt, (steps, R), g) for g in rngs], axis=1)
    coeffs = StepCoefficients(spectrum, dt)
    x = np.broadcast_to(xs[:, None, :], (K, R, spectrum.n_modes))
    y = np.broadcast_to(np.asarray(cfg.y0, dtype=float), (K, R, spectrum.n_modes)).copy()
    # slow arguments enter only through their physical values; compute them once
    F_of = _frozen_pointwise(F, x)
    B_of = _frozen_pointwise(B, x)
    acc = np.zeros((K, R, spectrum.n_modes))
    for k in range(steps):
        if k >= n_burn:
            acc += B_of(y)
        y = coeffs(y, F_of(y), inc[k])
    return acc / n_avg


def _frozen_pointwise(drift, x):
    """drift(x, .) with the synthesis of x cached."""
    if drift.kind == "zero":
        return lambda y: 0.0
    xv = synthesize(x, drift.n_points) if drift.depends_on_x else 0.0
    if not drift.depends_on_y:
        const = drift(x)
        return lambda y: const

    def f(y):
        yv = synthesize(y, drift.n_points)
        return analyze(drift.pointwise(xv, yv), drift.n_modes)
    return f


def state_seed(x, tag, master_seed):
    """Deterministic lineage for an estimate at state x (bytes of x hashed)."""
    h = hashlib.blake2b(np.ascontiguousarray(x, dtype="<f8").tobytes(), digest_size=8,
                        key=str(tag).encode()[:64])
    return SeedLineage(master_seed, int.from_bytes(h.digest(), "little"), f"bbar/{tag}")


def estimate_averaged_drift_batch(spectrum, alpha, xs, B, F, cfg, master_seed, tag="est",
                                  max_stderr=None):
    """Estimates of B_bar at each row of xs; each row uses its own derived stream.

    Returns (values (K, n), stderr (K, n)). A y-independent B is returned
    exactly with zero spread.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if not B.depends_on_y:
        vals = B(xs)
        return vals, np.zeros_like(vals)
    F.check_dissipative(spectrum)
    rngs = [state_seed(x, tag, master_seed).rng() for x in xs]
    avgs = _window_averages(spectrum, alpha, xs, B, F, cfg, rngs)
    value = avgs.mean(axis=1)
    stderr = robust_stderr(avgs, axis=1) if cfg.n_replicas > 1 else np.full_like(value, np.inf)
    return value, stderr


def estimate_averaged_drift(spectrum, alpha, x, B, F, cfg, master_seed=0, tag="est",
                            max_stderr=None):
    """B_bar(x) by time averaging over [t_burn, t_burn + t_avg] and over replicas.

    The spread is IQR-based across replica window averages. An estimate whose
    largest per-mode stderr exceeds ``max_stderr`` is returned flagged
    unreliable, with a warning.
    """
    vals, err = estimate_averaged_drift_batch(spectrum, alpha, x, B, F, cfg, master_seed, tag)
    est = AveragedDriftEstimate(vals[0], err[0], meta={
        "t_burn": cfg.t_burn, "t_avg": cfg.t_avg, "n_replicas": cfg.n_replicas,
        "dt": cfg.dt, "tag": tag, "master_seed": master_seed})
    if max_stderr is not None and np.max(err[0]) > max_stderr:
        est.reliable = False
        warnings.warn(f"averaged-drift estimate unreliable: stderr {np.max(err[0]):.3g} "
                      f"> {max_stderr}", RuntimeWarning, stacklevel=2)
    return est


def stationary_scales(spectrum, alpha):
    """Per-mode SaS scale of the stationary linear frozen equation, gamma_n (alpha lam_n)**(-1/alpha)."""
    return spectrum.gamma * (alpha * spectrum.lam) ** (-1.0 / alpha)


def closed_form_averaged_drift(spectrum, alpha, x, B, F):
    """Exact B_bar for trig B when F does not depend on y.

    Then mu^x is the law of m + S with m_n = F_n(x) / lam_n and S the
    stationary linear solution; S(xi) is SaS with scale
    (sum_n (s_n |e_n(xi)|)**alpha)**(1/alpha), so E sin/cos(m(xi) + S(xi)) =
    sin/cos(m(xi)) exp(-scale(xi)**alpha).
    """
    if F.depends_on_y:
        raise ParameterError("closed form needs F independent of y")
    if B.kind not in ("trig", "zero"):
        raise ParameterError("closed form is available for trig drifts only")
    x = np.asarray(x, dtype=float)
    if B.kind == "zero":
        return np.zeros_like(x)
    m = F(x) / spectrum.lam
    N = B.n_points
    s = stationary_scales(spectrum, alpha)
    basis = synthesize(np.eye(spectrum.n_modes), N)          # (n, N): e_n at nodes
    damp = np.exp(-np.sum((s[:, None] * np.abs(basis)) ** alpha, axis=0))
    xv = synthesize(x, N)
    mv = synthesize(m, N)
    p = B.params
    vals = (p["sx"] * np.sin(xv) + p["cx"] * np.cos(xv)
            + damp * (p["sy"] * np.sin(mv) + p["cy"] * np.cos(mv)))
    return analyze(vals, spectrum.n_modes)


# -- mixing -----------------------------------------------------------------------


@dataclass
class MixingRow:
    y_label: str
    t: float
    estimate: float
    stderr: float
    reference: float
    ref_stderr: float

    @property
    def gap(self):
        return abs(self.estimate - self.reference)

    @property
    def tolerance(self):
        return 3.0 * math.hypot(self.stderr, self.ref_stderr)

    @property
    def within(self):
        return self.gap <= self.tolerance


def stationary_reference(spectrum, alpha, x, phi, F, dt, t_burn, t_avg, n_chains, lineage):
    """Long-run average of phi under mu^x: time averages over independent chains."""
    cfg = FrozenConfig(x, np.zeros(spectrum.n_modes), t_burn, t_avg, dt, n_chains)
    n_burn, _ = steps_for(t_burn, dt)
    n_avg, _ = steps_for(t_avg, dt)
    inc = fast_increments(spectrum, alpha, dt, (n_burn + n_avg, n_chains), lineage.rng())
    coeffs = StepCoefficients(spectrum, dt)
    y = np.zeros((n_chains, spectrum.n_modes))
    Fx = F.frozen(x)
    acc = np.zeros(n_chains)
    for k in range(n_burn + n_avg):
        if k >= n_burn:
            acc += phi(y)
        y = coeffs(y, Fx(y), inc[k])
    means = acc / n_avg
    return float(means.mean()), float(np.std(means, ddof=1) / math.sqrt(n_chains)), cfg


def mixing_check(spectrum, alpha, x, phi, F, y_starts, t_grid, dt, n_paths, lineage,
                 ref_t_avg=200.0, ref_chains=16):
    """Monte Carlo P^x_t phi(y) on t_grid for each start y, against the long-run average.

    y_starts maps a label to a starting vector. All starts share one noise
    array, so rankings between starts are not blurred by independent noise.
    """
    gap = F.check_dissipative(spectrum)
    t_grid = sorted(float(t) for t in t_grid)
    ref, ref_se, _ = stationary_reference(
        spectrum, alpha, x, phi, F, dt, 10.0 / gap, ref_t_avg, ref_chains,
        lineage.child("reference"))
    steps, dt = steps_for(t_grid[-1], dt)
    save_at = {round(t / dt): t for t in t_grid}
    inc = fast_increments(spectrum, alpha, dt, (steps, n_paths), lineage.child("paths").rng())
    coeffs = StepCoefficients(spectrum, dt)
    Fx = F.frozen(x)
    rows = []
    for label, y0 in y_starts.items():
        y = np.broadcast_to(np.asarray(y0, dtype=float), (n_paths, spectrum.n_modes)).copy()
        for k in range(steps + 1):
            if k in save_at:
                vals = phi(y)
                rows.append(MixingRow(label, save_at[k], float(vals.mean()),
                                      float(np.std(vals, ddof=1) / math.sqrt(n_paths)),
                                      ref, ref_se))
            if k < steps:
                y = coeffs(y, Fx(y), inc[k])
    return rows


def fit_decay_rate(rows):
    """Rate c in gap ~ exp(-c t) from the rows of one start, by log-linear fit."""
    t = np.array([r.t for r in rows])
    g = np.array([r.gap for r in rows])
    ok = g > 0
    if ok.sum() < 2:
        return float("nan")
    return float(-np.polyfit(t[ok], np.log(g[ok]), 1)[0])


# -- Holder probe -------------------------------------------------------------------


def averaged_drift_holder_probe(spectrum, alpha, pairs, B, F, cfg, master_seed=0):
    """Table of (|x1 - x2|, |B_bar(x1) - B_bar(x2)|, combined stderr) plus fitted slope.

    Both members of a pair are estimated with the same noise stream (common
    random numbers), so equal states give identical estimates.
    """
    rows = []
    for i, (x1, x2) in enumerate(pairs):
        xs = np.stack([np.asarray(x1, float), np.asarray(x2, float)])
        rng_tag = SeedLineage(master_seed, i, "holder")
        rngs = [rng_tag.rng(), rng_tag.rng()]
        if B.depends_on_y:
            avgs = _window_averages(spectrum, alpha, xs, B, F, cfg, rngs)
            v = avgs.mean(axis=1)
            se = robust_stderr(avgs[0] - avgs[1], axis=0) if cfg.n_replicas > 1 else np.zeros(spectrum.n_modes)
        else:
            v = B(xs)
            se = np.zeros(spectrum.n_modes)
        rows.append((float(np.linalg.norm(xs[0] - xs[1])), float(np.linalg.norm(v[0] - v[1])),
                     float(np.linalg.norm(se))))
    dist = [r[0] for r in rows]
    diff = [r[1] for r in rows]
    return rows, loglog_slope(dist, diff)
