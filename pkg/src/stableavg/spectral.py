"""Truncated sine-basis Hilbert space on D = [0, pi] with Dirichlet boundary.

Vectors are plain float arrays of mode coefficients ``u_n = <u, e_n>`` with
``e_n(xi) = sqrt(2/pi) sin(n xi)``; a leading batch axis is allowed
everywhere (replicas are rows).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import fft, optimize

from .errors import ParameterError

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _coeffs(spectrum, v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != spectrum.n_modes:
        raise ParameterError(f"vector has {v.shape[-1]} modes, spectrum has {spectrum.n_modes}")
    return v


def basis_vector(spectrum, n):
    """Coefficients of e_n (1-based)."""
    v = np.zeros(spectrum.n_modes)
    v[n - 1] = 1.0
    return v


def semigroup_apply(spectrum, t, v):
    if t < 0:
        raise ParameterError("semigroup time must be non-negative")
    v = _coeffs(spectrum, v)
    if t == 0:
        return v.copy()
    return np.exp(-spectrum.lam * t) * v


def frac_norm(spectrum, theta, v):
    """||v||_theta = (sum lam_n**theta v_n**2)**(1/2)."""
    if theta < 0:
        raise ParameterError("theta must be non-negative")
    v = _coeffs(spectrum, v)
    return np.sqrt(np.sum(spectrum.lam**theta * v**2, axis=-1))


def smoothing_constant(theta):
    """sup_{s>0} s**(theta/2) exp(-s), attained at s = theta/2."""
    if theta == 0:
        return 1.0
    s = theta / 2.0
    return s**s * math.exp(-s)


def regularity_constant(theta):
    """sup_{s>0} s**(-theta/2) (1 - exp(-s)), for 0 < theta <= 2."""
    if not 0 < theta <= 2:
        raise ParameterError("theta must lie in (0, 2]")
    if theta == 2:
        return 1.0  # (1 - e^-s)/s decreases to 1 as s -> 0
    f = lambda ls: -math.exp(-theta / 2.0 * ls) * -math.expm1(-math.exp(ls))
    res = optimize.minimize_scalar(f, bounds=(-20.0, 20.0), method="bounded",
                                   options={"xatol": 1e-12})
    return -res.fun


def smoothing_check(spectrum, theta, t, v):
    """Pair (||e^{tA} v||_theta, C_theta t**(-theta/2) |v|); first never exceeds second."""
    if t < 0 or (t == 0 and theta > 0):
        raise ParameterError("smoothing bound needs t > 0 when theta > 0")
    v = _coeffs(spectrum, v)
    lhs = frac_norm(spectrum, theta, semigroup_apply(spectrum, t, v))
    if theta == 0:
        bound = math.exp(-spectrum.lam[0] * t) * np.linalg.norm(v, axis=-1)
    else:
        bound = smoothing_constant(theta) * t ** (-theta / 2.0) * np.linalg.norm(v, axis=-1)
    return lhs, bound


class PhysicalGrid:
    """Interior collocation nodes xi_j = j pi / (n_points + 1), j = 1..n_points."""

    def __init__(self, values, n_modes=None):
        self.values = np.asarray(values, dtype=float)
        self.n_modes = n_modes

    @property
    def n_points(self):
        return self.values.shape[-1]

    @property
    def nodes(self):
        return grid_nodes(self.n_points)

    @property
    def weight(self):
        return math.pi / (self.n_points + 1)


def grid_nodes(n_points):
    return np.arange(1, n_points + 1) * math.pi / (n_points + 1)


def _check_points(n_modes, n_points):
    if n_points < 2 * n_modes:
        raise ParameterError(
            f"n_points={n_points} aliases: need at least 2 * n_modes = {2 * n_modes}")


def synthesize(v, n_points):
    """Physical values at the interior nodes; v has modes on its last axis."""
    v = np.asarray(v, dtype=float)
    m = v.shape[-1]
    pad = np.zeros(v.shape[:-1] + (n_points,))
    pad[..., :m] = v
    return (0.5 * SQRT_2_OVER_PI) * fft.dst(pad, type=1, axis=-1)


def analyze(values, n_modes):
    """Mode coefficients from interior-node values (exact discrete sine inverse)."""
    values = np.asarray(values, dtype=float)
    n_points = values.shape[-1]
    c = 0.5 * SQRT_2_OVER_PI * math.pi / (n_points + 1)
    return c * fft.dst(values, type=1, axis=-1)[..., :n_modes]


def to_physical(spectrum, v, n_points):
    _check_points(spectrum.n_modes, n_points)
    v = _coeffs(spectrum, v)
    return PhysicalGrid(synthesize(v, n_points), spectrum.n_modes)


def from_physical(grid, n_modes=None):
    n_modes = grid.n_modes if n_modes is None else n_modes
    if n_modes is None:
        raise ParameterError("number of modes unknown for this grid")
    _check_points(n_modes, grid.n_points)
    return analyze(grid.values, n_modes)


def default_points(n_modes):
    return 4 * n_modes

