"""Symmetric alpha-stable variates and exact-in-law stochastic-convolution noise.

Normalization: a standard SaS variable has characteristic function
``exp(-|u|**alpha)``; a variable with scale ``s`` is ``s`` times a standard one.
Mode ``n`` of the cylindrical noise ``L = sum_n beta_n L^n e_n`` therefore has
SaS scale ``beta_n * t**(1/alpha)`` at time ``t``, which fixes the Levy-measure
constant to :func:`levy_constant`.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize

from .errors import ParameterError, ResourceError

_MASK64 = (1 << 64) - 1

DEFAULT_MEMORY_BUDGET = 512 * 2**20  # bytes


def _check_alpha(alpha):
    if not (1.0 < alpha <= 2.0):
        raise ParameterError(f"alpha must lie in (1, 2], got {alpha}")


@dataclass(frozen=True)
class StableParams:
    alpha: float
    scale: float = 1.0

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True, eq=False)
class ModeSpectrum:
    """Eigenvalues of -A and noise amplitudes on a truncated basis."""

    lam: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ParameterError("lam must be a non-empty 1-d sequence")
        if beta.shape != lam.shape or gamma.shape != lam.shape:
            raise ParameterError("lam, beta and gamma must have equal length")
        if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise ParameterError("eigenvalues must be positive and strictly increasing")
        if np.any(beta <= 0) or np.any(gamma <= 0):
            raise ParameterError("noise amplitudes must be positive")
        for name, arr in (("lam", lam), ("beta", beta), ("gamma", gamma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_modes(self):
        return self.lam.size

    @classmethod
    def heat(cls, n_modes=8, r=0.35, C=1.0):
        """Dirichlet Laplacian on [0, pi]: lam_n = n**2, beta_n = gamma_n = C lam_n**-r."""
        n = np.arange(1, n_modes + 1, dtype=float)
        lam = n**2
        amp = C * lam ** (-r)
        return cls(lam, amp, amp.copy())

    def truncate(self, n_modes):
        return ModeSpectrum(self.lam[:n_modes], self.beta[:n_modes], self.gamma[:n_modes])


# -- seeding -----------------------------------------------------------------


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(master_seed, replica):
    """64-bit per-replica seed derived from (master_seed, replica)."""
    return splitmix64((master_seed & _MASK64) ^ splitmix64(replica & _MASK64))


def stream_code(tag):
    return zlib.crc32(str(tag).encode("utf-8"))


@dataclass(frozen=True)
class SeedLineage:
    """Where a random stream comes from: master seed, replica index, stream tag.

    Distinct tags give independent streams within a replica (``"slow"``,
    ``"fast"``, ``"estimator"``, ...).
    """

    master_seed: int
    replica: int = 0
    stream: str = "main"

    @property
    def replica_seed(self):
        return mix_seed(self.master_seed, self.replica)

    def rng(self):
        ss = np.random.SeedSequence([self.replica_seed, stream_code(self.stream)])
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream):
        return SeedLineage(self.master_seed, self.replica, f"{self.stream}/{stream}")

    def as_dict(self):
        return {"master_seed": self.master_seed, "replica": self.replica,
                "stream": self.stream, "replica_seed": self.replica_seed}


# -- variates ------------------------------------------------------------------


def cms_transform(u_angle, u_exp, alpha):
    """Chambers-Mallows-Stuck map from two uniforms on [0, 1) to standard SaS."""
    V = np.pi * (np.asarray(u_angle) - 0.5)
    W = -np.log1p(-np.asarray(u_exp))
    if alpha == 2.0:
        return 2.0 * np.sin(V) * np.sqrt(W)
    return (np.sin(alpha * V) / np.cos(V) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * V) / W) ** ((1.0 - alpha) / alpha))


def standard_sas(alpha, shape, rng):
    """Standard SaS array; uniforms drawn as one block with trailing axis (angle, exp)."""
    _check_alpha(alpha)
    shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    u = rng.random(shape + (2,))
    return cms_transform(u[..., 0], u[..., 1], alpha)


def sample_sas(params, count, rng):
    if count < 0:
        raise ParameterError("count must be non-negative")
    if count == 0:
        return np.empty(0)
    return params.scale * standard_sas(params.alpha, (count,), rng)


def levy_constant(alpha):
    """c_alpha such that c_alpha |z|^{-1-alpha} dz is the Levy measure of a standard SaS."""
    _check_alpha(alpha)
    if alpha == 2.0:
        return 0.0
    return math.gamma(alpha + 1.0) * math.sin(math.pi * alpha / 2.0) / math.pi


def tail_constant(alpha):
    """P(S > x) ~ tail_constant * x**-alpha for a standard SaS, alpha < 2."""
    return levy_constant(alpha) / alpha


def sas_cdf(x, alpha, scale=1.0):
    """CDF by Gil-Pelaez inversion of exp(-|scale u|^alpha)."""
    x = float(x) / scale
    if x == 0.0:
        return 0.5
    u_max = 45.0 ** (1.0 / alpha)
    val, _ = integrate.quad(lambda u: math.exp(-u**alpha) * math.sin(u * x) / u,
                            0.0, u_max, limit=500, epsabs=1e-13, epsrel=1e-11)
    return 0.5 + val / math.pi


def sas_quantile(p, alpha, scale=1.0):
    """Inverse of :func:`sas_cdf` by bracketing root search."""
    if not 0.0 < p < 1.0:
        raise ParameterError("p must lie in (0, 1)")
    if p == 0.5:
        return 0.0
    sign = 1.0 if p > 0.5 else -1.0
    q = p if p > 0.5 else 1.0 - p
    hi = 1.0
    while sas_cdf(hi, alpha) < q:
        hi *= 2.0
    root = optimize.brentq(lambda x: sas_cdf(x, alpha) - q, 0.0, hi, xtol=1e-12)
    return sign * root * scale


def hill_estimator(samples, k):
    """Hill tail index from the k largest values of |samples|."""
    a = np.abs(np.asarray(samples, dtype=float))
    n = a.size
    if not 1 <= k < n:
        raise ParameterError(f"k must lie in [1, {n - 1}]")
    top = np.partition(a, n - k - 1)[n - k - 1:]
    top.sort()
    threshold = top[0]
    return 1.0 / np.mean(np.log(top[1:] / threshold))


# -- OU convolution ------------------------------------------------------------


def ou_increment_scale(lam, amplitude, alpha, dt):
    """SaS scale of int_0^dt exp(-lam (dt - s)) amplitude dL_s."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ParameterError("lam must be positive")
    if not dt > 0:
        raise ParameterError("dt must be positive")
    _check_alpha(alpha)
    x = alpha * lam * dt
    # -expm1(-x)/x stays accurate as x -> 0
    ratio = np.where(x > 0, -np.expm1(-x) / np.where(x > 0, x, 1.0), 1.0)
    return amplitude * (ratio * dt) ** (1.0 / alpha)


@dataclass(frozen=True, eq=False)
class NoisePath:
    dt: float
    increments: np.ndarray
    lineage: SeedLineage | None = None
    which: str = "slow"
    epsilon: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        inc = np.ascontiguousarray(self.increments, dtype=float)
        if inc.ndim != 2:
            raise ParameterError("increments must be a (steps, n_modes) matrix")
        if not np.all(np.isfinite(inc)):
            raise ParameterError("noise increments must be finite")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def steps(self):
        return self.increments.shape[0]

    @property
    def n_modes(self):
        return self.increments.shape[1]

    # binary layout: 8s magic, u32 version, u32 pad, u32 steps, u32 n_modes, f64 dt
    _MAGIC = b"SASNOISE"
    _VERSION = 1
    _HEADER = struct.Struct("<8sIIIId")

    def to_bytes(self):
        header = self._HEADER.pack(self._MAGIC, self._VERSION, 0,
                                   self.steps, self.n_modes, float(self.dt))
        body = self.increments.astype("<f8", copy=False).tobytes(order="C")
        return header + body

    @classmethod
    def from_bytes(cls, data):
        if len(data) < cls._HEADER.size:
            raise ParameterError("noise dump truncated")
        magic, version, _, steps, n_modes, dt = cls._HEADER.unpack_from(data)
        if magic != cls._MAGIC or version != cls._VERSION:
            raise ParameterError("not a noise dump (bad magic or version)")
        body = np.frombuffer(data, dtype="<f8", offset=cls._HEADER.size)
        if body.size != steps * n_modes:
            raise ParameterError("noise dump size does not match header")
        return cls(dt, body.reshape(steps, n_modes).astype(float))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def increment_scales(spectrum, which, alpha, dt, epsilon=1.0):
    """Per-mode SaS scale of one noise increment of length dt.

    For the fast noise the convolution of eps**(-1/alpha) dZ against
    exp(-lam t / eps) has scale eps**(-1/alpha) * ou_increment_scale(lam/eps, ...),
    so its stationary scale gamma_n (alpha lam_n)**(-1/alpha) is free of eps.
    """
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    if which == "slow":
        if epsilon != 1.0:
            raise ParameterError("slow noise requires epsilon == 1")
        return ou_increment_scale(spectrum.lam, spectrum.beta, alpha, dt)
    if which == "fast":
        return epsilon ** (-1.0 / alpha) * ou_increment_scale(
            spectrum.lam / epsilon, spectrum.gamma, alpha, dt)
    raise ParameterError(f"which must be 'slow' or 'fast', got {which!r}")


def generate_noise_path(spectrum, which, dt, steps, lineage, alpha, epsilon=1.0,
                        memory_budget=DEFAULT_MEMORY_BUDGET):
    """Independent exact-in-law convolution increments, one row per step.

    Uniforms are consumed from ``lineage.rng()`` step by step, mode by mode
    within a step, each variate taking an (angle, exponential) pair.
    """
    if steps < 0:
        raise ParameterError("steps must be non-negative")
    need = 3 * 8 * steps * spectrum.n_modes
    if need > memory_budget:
        raise ResourceError(
            f"noise path needs ~{need} bytes ({steps} steps x {spectrum.n_modes} modes), "
            f"budget is {memory_budget}")
    scales = increment_scales(spectrum, which, alpha, dt, epsilon)
    if steps == 0:
        inc = np.empty((0, spectrum.n_modes))
    else:
        inc = standard_sas(alpha, (steps, spectrum.n_modes), lineage.rng()) * scales
    return NoisePath(dt, inc, lineage, which, epsilon)


def stochastic_convolution(spectrum, noise, v0=None, rate_scale=1.0):
    """Run v_{k+1} = exp(-lam rate_scale dt) v_k + w_k; returns all states (steps+1, n)."""
    decay = np.exp(-spectrum.lam * rate_scale * noise.dt)
    out = np.empty((noise.steps + 1, spectrum.n_modes))
    out[0] = 0.0 if v0 is None else v0
    for k in range(noise.steps):
        out[k + 1] = decay * out[k] + noise.increments[k]
    return out


# -- sampler diagnostics -------------------------------------------------------

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


def sampler_check(alpha, n, rng, k=None, probs=DECILES):
    """Hill index from the top k = floor(sqrt(n)) and sample quantiles against the exact ones."""
    x = standard_sas(alpha, n, rng)
    k = int(math.isqrt(n)) if k is None else k
    rows = []
    for p in probs:
        exact = sas_quantile(p, alpha)
        got = float(np.quantile(x, p))
        rel = abs(got - exact) / abs(exact) if exact != 0 else float("nan")
        rows.append({"p": p, "exact": exact, "sample": got, "rel_err": rel,
                     "abs_err": abs(got - exact)})
    return {"alpha": alpha, "n": n, "k": k, "hill": float(hill_estimator(x, k)),
            "quantiles": rows}


def split_step_check(spectrum, alpha, dt, n, rng, probs=None):
    """One exact increment over dt against two dt/2 increments composed through the decay.

    Returns one row per (mode, quantile) with the two sample quantiles and a
    3-sigma tolerance from the quantile standard errors.
    """
    from .stats import quantile_se

    probs = np.round(np.arange(0.05, 0.951, 0.05), 2) if probs is None else probs
    full = increment_scales(spectrum, "slow", alpha, dt)
    half = increment_scales(spectrum, "slow", alpha, dt / 2)
    direct = standard_sas(alpha, (n, spectrum.n_modes), rng) * full
    w1 = standard_sas(alpha, (n, spectrum.n_modes), rng) * half
    w2 = standard_sas(alpha, (n, spectrum.n_modes), rng) * half
    composed = np.exp(-spectrum.lam * dt / 2) * w1 + w2
    rows = []
    for m in range(spectrum.n_modes):
        qa = np.quantile(direct[:, m], probs)
        qb = np.quantile(composed[:, m], probs)
        for p, a, b in zip(probs, qa, qb):
            se = math.hypot(quantile_se(direct[:, m], p), quantile_se(composed[:, m], p))
            rows.append({"mode": m + 1, "p": float(p), "direct": float(a),
                         "composed": float(b), "tolerance": 3 * se,
                         "ok": bool(abs(a - b) <= 3 * se)})
    return rows


# -- assumptions ---------------------------------------------------------------


@dataclass
class AssumptionReport:
    alpha: float
    n_modes: int
    sum_beta_alpha: float
    sum_gamma_alpha: float
    sum_inv_lambda: float
    r: float
    gamma_index: float
    kappa1: float
    kappa1_max: float
    t_grid: list
    lambda1: list
    lambda2: list
    lambda3: list
    flags: dict
    notes: list = field(default_factory=list)

    @property
    def integrals_finite(self):
        return {k: v for k, v in self.flags.items() if k.startswith("integral")}

    @property
    def ok(self):
        return all(self.flags.values())

    def as_dict(self):
        d = {k: getattr(self, k) for k in (
            "alpha", "n_modes", "sum_beta_alpha", "sum_gamma_alpha", "sum_inv_lambda",
            "r", "gamma_index", "kappa1", "kappa1_max", "flags", "notes")}
        d["ok"] = self.ok
        d["lambda_fn_bounds"] = {"t": self.t_grid, "Lambda1": self.lambda1,
                                 "Lambda2": self.lambda2, "Lambda3_kappa1": self.lambda3}
        return d


def _decay_exponent(n, values):
    """Least-squares p in values ~ n**-p over the upper half of the modes."""
    if n.size < 2:
        return float("nan")
    lo = n.size // 2 if n.size >= 4 else 0
    slope = np.polyfit(np.log(n[lo:]), np.log(values[lo:]), 1)[0]
    return -slope


def lambda_functions(spectrum, alpha, kappa1, t):
    t = np.asarray(t, dtype=float)[:, None]
    lam = spectrum.lam[None, :]
    damp = np.exp(-lam * t) * lam ** (1.0 / alpha)
    l1 = np.max(damp / spectrum.beta, axis=1)
    l2 = np.max(damp / spectrum.gamma, axis=1)
    l3 = np.max(damp * lam**kappa1 / spectrum.beta, axis=1)
    return l1, l2, l3


def check_assumptions(spectrum, alpha, kappa1=None, r_hint=None, t_grid=None,
                      holder_min=None):
    """Truncated-spectrum diagnostics for the standing assumptions.

    Series convergence is judged from the fitted power-law decay of the
    summands; integrability of the Lambda functions from the envelope
    Lambda_t <= C t**-(r + 1/alpha). ``holder_min`` (min of eta1 and
    eta2*eta3) is optionally checked against its admissible window.
    """
    _check_alpha(alpha)
    n = np.arange(1, spectrum.n_modes + 1, dtype=float)
    notes = []
    flags = {}
    flags["eigenvalues_increasing"] = bool(np.all(np.diff(spectrum.lam) > 0)
                                           and spectrum.lam[0] > 0)
    q_beta = _decay_exponent(n, spectrum.beta)
    q_gamma = _decay_exponent(n, spectrum.gamma)
    p_lam = -_decay_exponent(n, spectrum.lam)
    flags["sum_beta_alpha_converges"] = bool(alpha * q_beta > 1.0)
    flags["sum_gamma_alpha_converges"] = bool(alpha * q_gamma > 1.0)
    flags["sum_inv_lambda_converges"] = bool(p_lam > 1.0)

    if r_hint is None:
        slope = np.polyfit(np.log(spectrum.lam), np.log(spectrum.beta), 1)[0]
        r = float(-slope)
        notes.append("r fitted from beta_n against lam_n")
    else:
        r = float(r_hint)
    envelope = r + 1.0 / alpha
    gamma_index = alpha / (alpha * r + 1.0)
    kappa1_max = (alpha - alpha * r - 1.0) / alpha
    if kappa1 is None:
        kappa1 = kappa1_max / 2.0
        notes.append("kappa1 set to half its upper bound")
    flags["gamma_index_admissible"] = bool(1.0 < gamma_index <= alpha)
    # for gamma' < gamma the exponent gamma' * envelope stays below gamma * envelope
    flags["integral_Lambda_pow_finite"] = bool(gamma_index * envelope <= 1.0 + 1e-12)
    flags["kappa1_in_range"] = bool(0.0 < kappa1 < 0.5)
    flags["integral_Lambda3_finite"] = bool(envelope + kappa1 < 1.0)
    if holder_min is not None:
        lower = 1.0 + alpha / 2.0 - gamma_index
        flags["holder_window"] = bool(lower < holder_min < 1.0)

    if t_grid is None:
        t_grid = np.logspace(-4, 1, 26)
    l1, l2, l3 = lambda_functions(spectrum, alpha, kappa1, t_grid)
    return AssumptionReport(
        alpha=alpha, n_modes=spectrum.n_modes,
        sum_beta_alpha=float(np.sum(spectrum.beta**alpha)),
        sum_gamma_alpha=float(np.sum(spectrum.gamma**alpha)),
        sum_inv_lambda=float(np.sum(1.0 / spectrum.lam)),
        r=r, gamma_index=gamma_index, kappa1=kappa1, kappa1_max=kappa1_max,
        t_grid=[float(t) for t in t_grid], lambda1=l1.tolist(), lambda2=l2.tolist(),
        lambda3=l3.tolist(), flags=flags, notes=notes)
