"""Registered bounded drifts B(x, y), F(x, y) and bounded observables.

Every drift is a Nemytskii map: both arguments are synthesized on the
collocation grid, combined pointwise, and projected back onto the modes.
Only named built-ins with numeric parameters exist; there is no hook for
arbitrary user code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError
from .spectral import analyze, default_points, synthesize

SQRT_PI = math.sqrt(math.pi)


def holder_map(u, eta):
    """sign(u) min(|u|, 1)**eta, pointwise."""
    return np.sign(u) * np.minimum(np.abs(u), 1.0) ** eta


@dataclass(frozen=True)
class DriftSpec:
    """A bounded drift on the truncated space.

    ``kind`` is one of ``zero``, ``trig`` (coefficients ``sx, cx, sy, cy`` on
    sin x, cos x, sin y, cos y) or ``holder`` (``ax h(x) + ay h(y)`` with
    ``h(u) = sign(u) min(|u|,1)**eta``). ``eta_x``/``eta_y`` are the declared
    Holder exponents in each argument.
    """

    name: str
    kind: str = "zero"
    params: dict = field(default_factory=dict)
    n_modes: int = 8
    n_points: int | None = None
    eta_x: float = 0.95
    eta_y: float = 0.95

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ParameterError(f"unknown drift kind {self.kind!r}; known: {sorted(DRIFT_KINDS)}")
        allowed = DRIFT_KINDS[self.kind]
        extra = set(self.params) - set(allowed)
        if extra:
            raise ParameterError(f"drift {self.name}: unknown parameters {sorted(extra)}")
        full = dict(allowed)
        full.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", full)
        if self.n_points is None:
            object.__setattr__(self, "n_points", default_points(self.n_modes))
        if self.n_points < 2 * self.n_modes:
            raise ParameterError("collocation grid too coarse for the drift")
        if not (0 < self.eta_x <= 1 and 0 < self.eta_y <= 1):
            raise ParameterError("declared Holder exponents must lie in (0, 1]")

    # -- declared constants ------------------------------------------------

    @property
    def pointwise_bound(self):
        p = self.params
        if self.kind == "trig":
            return abs(p["sx"]) + abs(p["cx"]) + abs(p["sy"]) + abs(p["cy"])
        if self.kind == "holder":
            return abs(p["ax"]) + abs(p["ay"])
        return 0.0

    @property
    def bound(self):
        """Sup of |drift| in H; a pointwise bound m gives m sqrt(pi) on L2(0, pi)."""
        return self.pointwise_bound * SQRT_PI

    @property
    def lipschitz_y(self):
        p = self.params
        if self.kind == "trig":
            return abs(p["sy"]) + abs(p["cy"])
        if self.kind == "holder":
            if p["ay"] == 0:
                return 0.0
            return math.inf if self.params["eta"] < 1 else abs(p["ay"])
        return 0.0

    @property
    def depends_on_x(self):
        p = self.params
        if self.kind == "trig":
            return p["sx"] != 0 or p["cx"] != 0
        if self.kind == "holder":
            return p["ax"] != 0
        return False

    @property
    def depends_on_y(self):
        p = self.params
        if self.kind == "trig":
            return p["sy"] != 0 or p["cy"] != 0
        if self.kind == "holder":
            return p["ay"] != 0
        return False

    def check_dissipative(self, spectrum):
        gap = spectrum.lam[0] - self.lipschitz_y
        if not gap > 0:
            raise ConfigError(
                f"drift {self.name}: lambda_1 - L_F = {gap:.4g} must be positive")
        return gap

    # -- evaluation --------------------------------------------------------

    def pointwise(self, xv, yv):
        p = self.params
        if self.kind == "trig":
            out = 0.0
            if p["sx"]:
                out = out + p["sx"] * np.sin(xv)
            if p["cx"]:
                out = out + p["cx"] * np.cos(xv)
            if p["sy"]:
                out = out + p["sy"] * np.sin(yv)
            if p["cy"]:
                out = out + p["cy"] * np.cos(yv)
            return out
        if self.kind == "holder":
            out = 0.0
            if p["ax"]:
                out = out + p["ax"] * holder_map(xv, p["eta"])
            if p["ay"]:
                out = out + p["ay"] * holder_map(yv, p["eta"])
            return out
        return 0.0

    def __call__(self, x, y=None):
        """Mode coefficients of the drift at (x, y); leading axes broadcast."""
        x = np.asarray(x, dtype=float)
        shape = x.shape if y is None else np.broadcast_shapes(x.shape, np.shape(y))
        if self.kind == "zero":
            return np.zeros(shape)
        xv = synthesize(x, self.n_points) if self.depends_on_x else np.zeros(x.shape[:-1] + (self.n_points,))
        if self.depends_on_y:
            if y is None:
                raise ParameterError(f"drift {self.name} needs a y argument")
            yv = synthesize(y, self.n_points)
        else:
            yv = np.zeros_like(xv)
        vals = self.pointwise(xv, yv)
        vals = np.broadcast_to(vals, shape[:-1] + (self.n_points,))
        return analyze(vals, self.n_modes)

    def frozen(self, x):
        """y -> drift(x, y) with the slow argument held fixed."""
        return lambda y: self(x, y)

    def describe(self):
        return {"name": self.name, "kind": self.kind, "params": dict(self.params),
                "bound": self.bound, "eta_x": self.eta_x, "eta_y": self.eta_y,
                "lipschitz_y": self.lipschitz_y}


DRIFT_KINDS = {
    "zero": {},
    "trig": {"sx": 0.0, "cx": 0.0, "sy": 0.0, "cy": 0.0},
    "holder": {"ax": 0.0, "ay": 0.0, "eta": 0.5},
}


def make_drift(name, kind, n_modes, n_points=None, eta_x=None, eta_y=None, **params):
    default_eta = params.get("eta", 0.95) if kind == "holder" else 0.95
    return DriftSpec(name=name, kind=kind, params=params, n_modes=n_modes, n_points=n_points,
                     eta_x=default_eta if eta_x is None else eta_x,
                     eta_y=default_eta if eta_y is None else eta_y)


def check_bound(drift, samples):
    """Max |drift(x, y)| over sampled (x, y) pairs, and whether it respects drift.bound."""
    xs, ys = samples
    vals = drift(xs, ys)
    worst = float(np.max(np.linalg.norm(vals, axis=-1))) if vals.size else 0.0
    return worst, worst <= drift.bound * (1 + 1e-12)


# -- observables -----------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Bounded Holder test function phi(y) with index ``holder``."""

    name: str
    kind: str = "sin_mode"
    mode: int = 1
    value: float = 0.0
    holder: float = 1.0

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "sin_mode":
            return np.sin(y[..., self.mode - 1])
        if self.kind == "const":
            return np.full(y.shape[:-1], self.value)
        raise ParameterError(f"unknown observable kind {self.kind!r}")

    @property
    def bound(self):
        return 1.0 if self.kind == "sin_mode" else abs(self.value)


OBSERVABLE_KINDS = ("sin_mode", "const")
