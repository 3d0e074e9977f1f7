"""Exponential-Euler stepping of dV = (A V + G) dt + dNoise on the mode coefficients.

Per mode, with rate r (1/eps for the fast equation, 1 otherwise) and
lam~ = lam * r::

    v' = exp(-lam~ dt) v + (1 - exp(-lam~ dt)) / lam~ * r * g + w

The linear part is exact and the drift is frozen at the left point, so the
update is exact whenever g is constant over the step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


class StepCoefficients:
    """Decay factors and drift weights for one (dt, rate_scale) pair."""

    def __init__(self, spectrum, dt, rate_scale=1.0):
        if not dt > 0:
            raise ParameterError("dt must be positive")
        self.dt = dt
        self.rate_scale = rate_scale
        lt = spectrum.lam * rate_scale * dt
        self.decay = np.exp(-lt)
        # (1 - e^{-lam r dt}) / (lam r) * r
        self.weight = -np.expm1(-lt) / spectrum.lam

    def __call__(self, v, drift_value, noise_increment):
        return self.decay * v + self.weight * drift_value + noise_increment


def step(spectrum, v, drift_value, dt, noise_increment, rate_scale=1.0):
    v = np.asarray(v, dtype=float)
    n = spectrum.n_modes
    for name, arr in (("state", v), ("drift", drift_value), ("noise", noise_increment)):
        if np.shape(arr)[-1:] != (n,):
            raise ParameterError(f"{name} has wrong dimension, expected {n} modes")
    return StepCoefficients(spectrum, dt, rate_scale)(v, drift_value, noise_increment)


def micro_steps(dt, epsilon, kappa=10):
    """Fast sub-steps per macro step so that dt_fast <= epsilon / kappa."""
    return max(1, math.ceil(kappa * dt / epsilon - 1e-9))


@dataclass
class Trajectory:
    """States at t = k * dt * save_stride; states has shape (n_saved, ..., n_modes)."""

    dt: float
    save_stride: int
    states: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ParameterError("trajectory contains non-finite states")

    @property
    def spacing(self):
        return self.dt * self.save_stride

    @property
    def times(self):
        return np.arange(self.states.shape[0]) * self.spacing

    def __len__(self):
        return self.states.shape[0]

    def replica(self, i):
        return Trajectory(self.dt, self.save_stride, self.states[:, i])

    def to_csv(self, path, header_fields=None):
        if self.states.ndim != 2:
            raise ParameterError("CSV export is per replica; select one with .replica(i)")
        n = self.states.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_fields:
                fh.write("# " + ",".join(f"{k}={v}" for k, v in header_fields.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"mode_{i + 1}" for i in range(n)])
            for t, row in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def steps_for(T, dt):
    """Number of steps and effective step size; dt > T collapses to one step of size T."""
    if T < 0:
        raise ParameterError("T must be non-negative")
    if T == 0:
        return 0, dt
    if dt >= T:
        return 1, T
    n = T / dt
    k = round(n)
    if abs(n - k) > 1e-9 * max(1.0, n):
        raise ParameterError(f"T={T} is not a multiple of dt={dt}")
    return k, dt


def run_steps(coeffs, v0, increments, drift_fn=None, save_stride=1):
    """Advance v0 through the given increments (steps, ..., n); returns saved states."""
    steps = increments.shape[0]
    v = np.array(v0, dtype=float)
    n_saved = steps // save_stride + 1
    out = np.empty((n_saved,) + np.broadcast_shapes(v.shape, increments.shape[1:]))
    out[0] = v
    j = 1
    for k in range(steps):
        g = 0.0 if drift_fn is None else drift_fn(v)
        v = coeffs(v, g, increments[k])
        if (k + 1) % save_stride == 0:
            out[j] = v
            j += 1
    return out


def integrate(spectrum, v0, drift, T, dt, noise, rate_scale=1.0, save_stride=1):
    """Mild-form trajectory on [0, T].

    ``drift`` is a callable state -> coefficients (e.g. ``F.frozen(x)``) or
    None; ``noise`` a NoisePath or an increments array whose step size is dt.
    """
    steps, dt_eff = steps_for(T, dt)
    increments = getattr(noise, "increments", noise)
    noise_dt = getattr(noise, "dt", dt_eff)
    if steps and abs(noise_dt - dt_eff) > 1e-12 * dt_eff:
        raise ParameterError(f"noise step {noise_dt} does not match integration step {dt_eff}")
    if increments.shape[0] < steps:
        raise ParameterError(f"noise covers {increments.shape[0]} steps, {steps} needed")
    if save_stride < 1:
        raise ParameterError("save_stride must be >= 1")
    coeffs = StepCoefficients(spectrum, dt_eff, rate_scale)
    states = run_steps(coeffs, v0, increments[:steps], drift, save_stride)
    return Trajectory(dt_eff, save_stride, states)


def increment_integrals(traj, delta):
    """Per-replica int_0^T |X_t - X_{t(delta)}| dt, left Riemann sum on the save grid."""
    h = traj.spacing
    ratio = delta / h
    m = round(ratio)
    if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"delta={delta} must be a positive multiple of the save spacing {h}")
    X = traj.states[:-1]
    idx = (np.arange(X.shape[0]) // m) * m
    diff = np.linalg.norm(X - X[idx], axis=-1)
    return h * diff.sum(axis=0)


def increment_stats(traj, delta, p=1.0):
    """Monte Carlo estimate of E[(int_0^T |X_t - X_{t(delta)}| dt)**p] over replicas."""
    return float(np.mean(increment_integrals(traj, delta) ** p))
