"""Slow-fast simulation, averaged equation, Khasminskii auxiliary process and strong-error studies.

Coupling contract: for replica i the slow noise path is drawn from the
lineage (master_seed, i, "slow") on the macro grid and is the same array for
X^eps (every eps) and for X_bar. The fast noise of X^eps comes from
(master_seed, i, "fast/eps=<eps>") on the micro grid.

Discretization: the fast equation takes kappa micro steps per unit of eps
(dt_fast <= eps / kappa) with the slow state frozen at the last macro node;
the slow equation steps on the macro grid with the drift B averaged over the
fast micro states of the step.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ParameterError, ResourceError
from .frozen import (FrozenConfig, _frozen_pointwise, closed_form_averaged_drift,
                     estimate_averaged_drift_batch)
from .integrator import StepCoefficients, Trajectory, micro_steps, steps_for
from .stable_noise import DEFAULT_MEMORY_BUDGET, SeedLineage, generate_noise_path
from .stats import loglog_slope

P_COLUMNS = {0.5: "moment_p05", 1.0: "moment_p1", 2.0: "moment_p2"}


@dataclass
class EstimatorSettings:
    t_burn: float | None = None      # None: 10 / (lambda_1 - L_F)
    t_avg: float = 20.0
    dt: float = 0.1
    n_replicas: int = 8
    quantum: float = 1e-3
    max_stderr: float = 0.25
    tag: str = "bbar"


@dataclass
class SlowFastConfig:
    spectrum: object
    alpha: float
    B: object
    F: object
    x: np.ndarray
    y: np.ndarray
    epsilon: float
    T: float = 1.0
    dt_macro: float = 0.01
    delta: float | None = None
    kappa: int = 10
    master_seed: int = 0
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not 0 < self.epsilon <= 1:
            raise ParameterError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0 < self.dt_macro <= self.T:
            raise ParameterError("need 0 < dt_macro <= T")
        steps_for(self.T, self.dt_macro)
        if self.delta is not None and not (self.dt_macro <= self.delta):
            raise ParameterError("delta must be at least dt_macro")

    @property
    def n_macro(self):
        return steps_for(self.T, self.dt_macro)[0]

    @property
    def n_micro(self):
        """Fast sub-steps per macro step."""
        return micro_steps(self.dt_macro, self.epsilon, self.kappa)

    @property
    def dt_fast(self):
        return self.dt_macro / self.n_micro

    @property
    def delta_eff(self):
        """Khasminskii block: eps**(1/2) by default, floored onto the macro grid, capped at T."""
        d = math.sqrt(self.epsilon) if self.delta is None else self.delta
        blocks = max(1, int(math.floor(d / self.dt_macro + 1e-9)))
        return min(blocks * self.dt_macro, self.T)

    @property
    def delta_blocks(self):
        return max(1, round(self.delta_eff / self.dt_macro))

    def estimator_config(self):
        e = self.estimator
        t_burn = 10.0 / self.F.check_dissipative(self.spectrum) if e.t_burn is None else e.t_burn
        return FrozenConfig(np.zeros(self.spectrum.n_modes), np.zeros(self.spectrum.n_modes),
                            t_burn, e.t_avg, e.dt, e.n_replicas)

    def with_epsilon(self, eps):
        return replace(self, epsilon=eps)


# -- noise -------------------------------------------------------------------


def slow_lineage(cfg, replica):
    return SeedLineage(cfg.master_seed, replica, "slow")


def fast_lineage(cfg, replica):
    return SeedLineage(cfg.master_seed, replica, f"fast/eps={cfg.epsilon!r}")


def check_budget(cfg, n_replicas):
    need = 8 * 3 * cfg.n_macro * cfg.n_micro * cfg.spectrum.n_modes * n_replicas
    if need > cfg.memory_budget:
        raise ResourceError(
            f"eps={cfg.epsilon} needs {cfg.n_macro * cfg.n_micro} fast steps per replica "
            f"(~{need} bytes for {n_replicas} replicas); budget is {cfg.memory_budget} bytes")


def slow_increments(cfg, replicas):
    """Stacked slow noise (n_macro, R, n) for the given replica indices."""
    paths = [generate_noise_path(cfg.spectrum, "slow", cfg.dt_macro, cfg.n_macro,
                                 slow_lineage(cfg, i), cfg.alpha, memory_budget=cfg.memory_budget)
             for i in replicas]
    return np.stack([p.increments for p in paths], axis=1)


def fast_increments(cfg, replicas):
    """Stacked fast noise (n_macro * n_micro, R, n) at step dt_fast."""
    check_budget(cfg, len(replicas))
    steps = cfg.n_macro * cfg.n_micro
    paths = [generate_noise_path(cfg.spectrum, "fast", cfg.dt_fast, steps, fast_lineage(cfg, i),
                                 cfg.alpha, epsilon=cfg.epsilon, memory_budget=cfg.memory_budget)
             for i in replicas]
    return np.stack([p.increments for p in paths], axis=1)


# -- dynamics ----------------------------------------------------------------------


def run_slow_fast(cfg, slow_inc, fast_inc, fast_save="macro", slow_override=None):
    """Coupled (X^eps, Y^eps) for a batch of replicas.

    slow_inc: (n_macro, R, n); fast_inc: (n_macro * n_micro, R, n). Returns
    (X trajectory on the macro grid, Y trajectory on the macro or micro grid).
    ``slow_override`` replaces the slow path by a given macro path (used by
    the Khasminskii construction, where the fast drift reads a frozen X).
    """
    sp = cfg.spectrum
    m = cfg.n_micro
    n_macro = cfg.n_macro
    R = slow_inc.shape[1]
    if fast_inc.shape[0] < n_macro * m:
        raise ParameterError("fast noise does not cover the horizon")
    slow = StepCoefficients(sp, cfg.dt_macro)
    fast = StepCoefficients(sp, cfg.dt_fast, 1.0 / cfg.epsilon)
    X = np.broadcast_to(cfg.x, (R, sp.n_modes)).astype(float)
    Y = np.broadcast_to(cfg.y, (R, sp.n_modes)).astype(float)
    Xs = np.empty((n_macro + 1, R, sp.n_modes))
    Xs[0] = X
    micro = fast_save == "micro"
    Ys = np.empty(((n_macro * m if micro else n_macro) + 1, R, sp.n_modes))
    Ys[0] = Y
    B_y = cfg.B.depends_on_y
    for k in range(n_macro):
        Xf = X if slow_override is None else slow_override[k]
        F_x = _frozen_pointwise(cfg.F, Xf)
        B_x = _frozen_pointwise(cfg.B, X)
        acc = 0.0
        for j in range(m):
            if B_y:
                acc = acc + B_x(Y)
            Y = fast(Y, F_x(Y), fast_inc[k * m + j])
            if micro:
                Ys[k * m + j + 1] = Y
        bval = acc / m if B_y else B_x(None)
        X = slow(X, bval, slow_inc[k])
        Xs[k + 1] = X
        if not micro:
            Ys[k + 1] = Y
    return (Trajectory(cfg.dt_macro, 1, Xs),
            Trajectory(cfg.dt_fast if micro else cfg.dt_macro, 1, Ys))


class BbarCache:
    """B_bar estimates keyed by the state rounded to a quantum.

    The estimate for a key is computed at the quantized state from a stream
    derived from the key alone, so values do not depend on visit order or on
    which worker computes them. Writers hold the lock; a reader sees either
    no entry or a complete one.
    """

    def __init__(self, cfg, source="estimator"):
        self.cfg = cfg
        self.source = source
        self.settings = cfg.estimator
        self._est_cfg = cfg.estimator_config() if cfg.B.depends_on_y and source == "estimator" else None
        self._store = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.max_stderr_seen = 0.0

    def _keys(self, xs):
        q = self.settings.quantum
        return [tuple(int(v) for v in row) for row in np.rint(xs / q).astype(np.int64)]

    def __call__(self, xs):
        xs = np.asarray(xs, dtype=float)
        B, F = self.cfg.B, self.cfg.F
        if not B.depends_on_y:
            return B(xs)
        if self.source == "closed_form":
            return closed_form_averaged_drift(self.cfg.spectrum, self.cfg.alpha, xs, B, F)
        flat = xs.reshape(-1, xs.shape[-1])
        keys = self._keys(flat)
        missing = list(dict.fromkeys(k for k in keys if k not in self._store))
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)
        if missing:
            xq = np.array(missing, dtype=float) * self.settings.quantum
            vals, errs = estimate_averaged_drift_batch(
                self.cfg.spectrum, self.cfg.alpha, xq, B, F, self._est_cfg,
                self.cfg.master_seed, tag=self.settings.tag)
            worst = np.max(errs, axis=1)
            self.max_stderr_seen = max(self.max_stderr_seen, float(worst.max()))
            bad = np.nonzero(worst > self.settings.max_stderr)[0]
            if bad.size:
                i = int(bad[0])
                raise NumericalError(
                    f"averaged-drift estimate unreliable (stderr {worst[i]:.3g} > "
                    f"{self.settings.max_stderr})",
                    {"state": xq[i].tolist(), "stderr": errs[i].tolist()})
            with self._lock:
                for key, v, e in zip(missing, vals, errs):
                    self._store.setdefault(key, (v, e))
        out = np.stack([self._store[k][0] for k in keys])
        return out.reshape(xs.shape)

    def stats(self):
        return {"entries": len(self._store), "hits": self.hits, "misses": self.misses,
                "max_stderr": self.max_stderr_seen}


def run_averaged(cfg, drift_source, slow_inc):
    """X_bar on the macro grid driven by the given slow increments (n_macro, R, n).

    drift_source: a BbarCache, the string "estimator" / "closed_form", or any
    callable state batch -> coefficients.
    """
    if isinstance(drift_source, str):
        drift_source = BbarCache(cfg, drift_source)
    sp = cfg.spectrum
    slow = StepCoefficients(sp, cfg.dt_macro)
    R = slow_inc.shape[1]
    X = np.broadcast_to(cfg.x, (R, sp.n_modes)).astype(float)
    Xs = np.empty((cfg.n_macro + 1, R, sp.n_modes))
    Xs[0] = X
    for k in range(cfg.n_macro):
        X = slow(X, drift_source(X), slow_inc[k])
        Xs[k + 1] = X
    return Trajectory(cfg.dt_macro, 1, Xs)


def khasminskii_auxiliary(cfg, X_macro, fast_inc, delta=None):
    """Y_hat on the micro grid: the fast drift reads X at the start of each delta block.

    X_macro: macro-grid states (n_macro + 1, R, n); fast_inc as for run_slow_fast.
    """
    blocks = cfg.delta_blocks if delta is None else _blocks_for(cfg, delta)
    states = X_macro.states if isinstance(X_macro, Trajectory) else np.asarray(X_macro)
    idx = (np.arange(cfg.n_macro) // blocks) * blocks
    frozen_path = states[idx]
    zero_slow = np.zeros((cfg.n_macro,) + states.shape[1:])
    no_B = replace(cfg, B=_ZeroDrift(cfg.B))
    _, Yhat = run_slow_fast(no_B, zero_slow, fast_inc, fast_save="micro", slow_override=frozen_path)
    return Yhat


class _ZeroDrift:
    """Stand-in slow drift that skips B evaluation in the auxiliary run."""

    kind = "zero"
    depends_on_y = False
    depends_on_x = False

    def __init__(self, like):
        self.n_modes = like.n_modes

    def __call__(self, x, y=None):
        return np.zeros(np.shape(x))


def _blocks_for(cfg, delta):
    ratio = delta / cfg.dt_macro
    b = round(ratio)
    if b < 1 or abs(ratio - b) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"delta={delta} is not a multiple of dt_macro={cfg.dt_macro}")
    return b


def fast_gap_integrals(Y, Yhat):
    """Per-replica int_0^T |Y - Y_hat| dt on the micro grid (left Riemann sum)."""
    d = np.linalg.norm(Y.states[:-1] - Yhat.states[:-1], axis=-1)
    return Y.dt * d.sum(axis=0)


def delta_sensitivity(cfg, deltas, replicas):
    """Median over replicas of int_0^T |Y^eps - Y_hat| dt for each delta."""
    replicas = list(replicas)
    s_inc = slow_increments(cfg, replicas)
    f_inc = fast_increments(cfg, replicas)
    X, Y = run_slow_fast(cfg, s_inc, f_inc, fast_save="micro")
    rows = []
    for d in deltas:
        Yhat = khasminskii_auxiliary(cfg, X, f_inc, delta=d)
        vals = fast_gap_integrals(Y, Yhat)
        rows.append({"delta": float(d), "median": float(np.median(vals)),
                     "mean": float(np.mean(vals)), "values": vals})
    return rows


# -- error reports ------------------------------------------------------------------


@dataclass
class ErrorReport:
    epsilon: float
    delta: float
    sup_errors: np.ndarray
    moments: dict
    median: float
    quantiles: dict
    theta_tilde: float | None = None
    ceiling: float | None = None

    @property
    def replicas(self):
        return int(self.sup_errors.size)

    @property
    def within_ceiling(self):
        return self.ceiling is None or bool(np.all(self.sup_errors <= self.ceiling))


def strong_error(X, Xbar, p_set=(0.5, 1.0, 2.0), epsilon=float("nan"), delta=float("nan"),
                 theta_tilde=None, ceiling=None):
    """Per-replica sup over the macro grid of |X - X_bar|, with moments and quantiles.

    Moments with p above alpha are meaningful: the difference is bounded.
    """
    if X.states.shape != Xbar.states.shape or abs(X.spacing - Xbar.spacing) > 1e-15:
        raise ParameterError("trajectories are not on the same grid")
    diff = np.linalg.norm(X.states - Xbar.states, axis=-1)
    sup = diff.max(axis=0)
    sup = np.atleast_1d(sup)
    qs = np.quantile(sup, [0.05, 0.25, 0.5, 0.75, 0.95])
    return ErrorReport(
        epsilon=epsilon, delta=delta, sup_errors=sup,
        moments={float(p): float(np.mean(sup**p)) for p in p_set},
        median=float(qs[2]),
        quantiles={"q05": float(qs[0]), "q25": float(qs[1]), "q75": float(qs[3]),
                   "q95": float(qs[4])},
        theta_tilde=theta_tilde, ceiling=ceiling)


def error_ceiling(cfg):
    """Sanity ceiling for sup |X^eps - X_bar| from the drift bound alone."""
    M = cfg.B.bound
    return 2.0 * M / cfg.spectrum.lam[0] + 2.0 * M * cfg.T


def nominal_theta_tilde(theta, theta_prime, eta1, eta2, eta3, gamma_index):
    """theta * min(eta1, eta2 eta3, gamma + theta' - 1) / 2, at user-chosen theta, theta'."""
    return theta * min(eta1, eta2 * eta3, gamma_index + theta_prime - 1.0) / 2.0


# -- convergence study ----------------------------------------------------------------


def _chunks(n, size):
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def _chunk_errors(base, epsilons, replicas, source, p_set):
    """Sup errors for one replica chunk at every eps; X_bar is shared across eps."""
    s_inc = slow_increments(base, replicas)
    cache = BbarCache(base, source)
    Xbar = run_averaged(base, cache, s_inc)
    out = {}
    for eps in epsilons:
        cfg = base.with_epsilon(eps)
        try:
            f_inc = fast_increments(cfg, replicas)
            X, _ = run_slow_fast(cfg, s_inc, f_inc)
            diff = np.linalg.norm(X.states - Xbar.states, axis=-1)
            out[eps] = ("ok", diff.max(axis=0))
        except (ResourceError, NumericalError) as exc:
            out[eps] = ("failed", f"{type(exc).__name__}: {exc}")
    return out, cache.stats()


@dataclass
class StudyResult:
    reports: list
    failures: dict
    fitted_slope: float
    monotone: bool
    strict_endpoints: bool
    cache_stats: list
    rate_nominal: float | None = None

    def rows(self):
        out = []
        for r in self.reports:
            row = {"epsilon": r.epsilon, "delta": r.delta, "replicas": r.replicas,
                   "median_sup_err": r.median, **r.quantiles}
            for p, col in P_COLUMNS.items():
                row[col] = r.moments.get(p, float("nan"))
            row["theta_tilde"] = r.theta_tilde
            row["fitted_slope"] = self.fitted_slope
            out.append(row)
        return out


def convergence_study(base, epsilons, n_replicas, p_set=(0.5, 1.0, 2.0), jobs=1,
                      chunk_size=8, source="estimator", theta_tilde=None):
    """Strong errors for a strictly decreasing eps list with delta = eps**(1/2).

    Replicas run in fixed chunks (independent of ``jobs``), results merge in
    chunk order, so output is identical for any worker count.
    """
    epsilons = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ParameterError("epsilon list must be strictly decreasing")
    chunks = _chunks(n_replicas, chunk_size)
    args = [(base, epsilons, c, source, p_set) for c in chunks]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_chunk_errors_star, args))
    else:
        results = [_chunk_errors(*a) for a in args]
    reports, failures = [], {}
    ceiling = error_ceiling(base)
    for eps in epsilons:
        parts = [r[0][eps] for r in results]
        bad = [p[1] for p in parts if p[0] != "ok"]
        if bad:
            failures[eps] = bad[0]
            continue
        sup = np.concatenate([p[1] for p in parts])
        cfg = base.with_epsilon(eps)
        X = Trajectory(1.0, 1, sup[None, :, None])
        rep = strong_error(X, Trajectory(1.0, 1, np.zeros_like(X.states)), p_set,
                           epsilon=eps, delta=cfg.delta_eff, theta_tilde=theta_tilde,
                           ceiling=ceiling)
        reports.append(rep)
    meds = [r.median for r in reports]
    slope = loglog_slope([r.epsilon for r in reports], meds) if len(reports) > 1 else float("nan")
    monotone = all(b <= a for a, b in zip(meds, meds[1:]))
    strict = len(meds) > 1 and meds[-1] < meds[0]
    rate = None if theta_tilde is None else min(theta_tilde / 2.0, 0.25)
    return StudyResult(reports, failures, slope, monotone, strict, [r[1] for r in results], rate)


def _chunk_errors_star(args):
    return _chunk_errors(*args)
