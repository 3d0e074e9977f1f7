"""INI experiment configuration: typed schema, presets, validation, echo and hash.

Every key has a type and a default; unknown sections or keys are errors and
all violations are collected before reporting. The resolved configuration
(all defaults filled in) is what gets echoed and hashed.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .drifts import DRIFT_KINDS, make_drift
from .errors import ConfigError, ParameterError
from .stable_noise import ModeSpectrum

RUN_KINDS = ("noise-check", "frozen", "avg-drift", "mixing", "converge", "khasminskii",
             "zvonkin", "assumptions")


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _int(s):
    return int(s)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _floats(s):
    return [_float(p) for p in s.replace(";", ",").split(",") if p.strip()]


def _auto_float(s):
    return None if s.strip().lower() == "auto" else _float(s)


def _str(s):
    return s.strip()


def _fmt(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# (type, default) per key. Drift sections take their keys from the drift kind.
SCHEMA = {
    "experiment": {
        "preset": (_str, "heat1d"),
        "master_seed": (_int, 7),
        "jobs": (_int, 1),
        "strict_assumptions": (_bool, False),
        "memory_budget_mb": (_int, 512),
    },
    "spectrum": {
        "n_modes": (_int, 8),
        "alpha": (_float, 1.75),
        "r": (_float, 0.35),
        "C": (_float, 1.0),
        "eig_power": (_float, 2.0),
    },
    "integrator": {
        "T": (_float, 1.0),
        "dt_macro": (_float, 0.01),
        "kappa": (_int, 10),
        "delta": (_auto_float, None),
        "x0": (_floats, [1.0]),
        "y0": (_floats, [0.0]),
    },
    "frozen": {
        "x": (_floats, [1.0]),
        "dt": (_float, 0.1),
        "t_burn": (_auto_float, None),
        "contraction_T": (_float, 10.0),
        "contraction_dt": (_float, 1e-3),
        "contraction_paths": (_int, 64),
    },
    "estimator": {
        "t_avg": (_float, 200.0),
        "n_replicas": (_int, 16),
        "max_stderr": (_float, 0.25),
    },
    "study": {
        "epsilons": (_floats, [0.1, 0.02, 0.004]),
        "replicas": (_int, 64),
        "p_set": (_floats, [0.5, 1.0, 2.0]),
        "chunk_size": (_int, 8),
        "drift_source": (_str, "estimator"),
        "bbar_t_avg": (_float, 20.0),
        "bbar_replicas": (_int, 8),
        "bbar_max_stderr": (_float, 0.25),
        "bbar_quantum": (_float, 1e-3),
        "theta": (_float, 1.0),
        "theta_prime": (_float, 0.5),
    },
    "khasminskii": {
        "epsilon": (_float, 0.05),
        "deltas": (_floats, [0.2, 0.1, 0.05]),
        "replicas": (_int, 32),
    },
    "mixing": {
        "mode": (_int, 1),
        "t_grid": (_floats, [0.0, 5.0, 10.0, 20.0, 40.0]),
        "dt": (_float, 0.1),
        "n_paths": (_int, 4000),
        "y_far": (_float, 5.0),
        "ref_t_avg": (_float, 200.0),
        "ref_chains": (_int, 16),
    },
    "noise_check": {
        "alphas": (_floats, [1.5, 1.75, 1.95]),
        "samples": (_int, 1_000_000),
        "hill_k": (_auto_float, None),
        "split_dt": (_float, 0.01),
        "split_samples": (_int, 200_000),
    },
    "zvonkin": {
        "dims": (_int, 1),
        "lams": (_floats, [1.0, 5.0, 25.0]),
        "drift": (_str, "tanh"),
        "const_value": (_float, 1.0),
        "n_nodes": (_auto_float, None),
        "n_paths": (_int, 4096),
        "n_scrambles": (_int, 8),
        "n_time": (_int, 48),
        "boundary": (_str, "clamp"),
        "tol": (_float, 1e-3),
        "max_iter": (_int, 200),
    },
    "assumptions": {
        "kappa1": (_auto_float, None),
    },
}

DRIFT_SECTIONS = ("drift.B", "drift.F")
DRIFT_DEFAULTS = {
    "drift.B": {"kind": "trig", "sx": 1.0, "cy": 1.0},
    "drift.F": {"kind": "trig", "sx": 1.0, "sy": 0.5},
}
PRESETS = ("heat1d",)
EXECUTION_KEYS = (("experiment", "jobs"),)


@dataclass
class ExperimentConfig:
    values: dict            # section -> key -> resolved value
    source_text: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def master_seed(self):
        return self.values["experiment"]["master_seed"]

    def spectrum(self):
        s = self.values["spectrum"]
        n = np.arange(1, s["n_modes"] + 1, dtype=float)
        lam = n ** s["eig_power"]
        amp = s["C"] * lam ** (-s["r"])
        return ModeSpectrum(lam, amp, amp.copy())

    @property
    def alpha(self):
        return self.values["spectrum"]["alpha"]

    def drift(self, which):
        d = dict(self.values[f"drift.{which}"])
        kind = d.pop("kind")
        eta_x = d.pop("eta_x", None)
        eta_y = d.pop("eta_y", None)
        return make_drift(which, kind, self.values["spectrum"]["n_modes"], eta_x=eta_x,
                          eta_y=eta_y, **d)

    def vector(self, section, key):
        v = list(self.values[section][key])
        n = self.values["spectrum"]["n_modes"]
        return np.array((v + [0.0] * n)[:n], dtype=float)

    def echo(self, skip=()):
        """Resolved config in INI form; every default is spelled out."""
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            for k, v in items.items():
                if (section, k) in skip:
                    continue
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def sha256(self):
        """Hash of the resolved config; the worker count is left out since results do not depend on it."""
        return hashlib.sha256(self.echo(skip=EXECUTION_KEYS).encode("utf-8")).hexdigest()

    def with_overrides(self, **experiment):
        vals = {s: dict(items) for s, items in self.values.items()}
        vals["experiment"].update(experiment)
        return ExperimentConfig(vals, self.source_text)


def _drift_schema(kind):
    keys = {"kind": _str, "eta_x": _float, "eta_y": _float}
    for k in DRIFT_KINDS.get(kind, {}):
        keys[k] = _float
    return keys


def _resolve_drift(section, raw, violations):
    items = dict(DRIFT_DEFAULTS[section])
    if "kind" in raw and raw["kind"].strip() != items["kind"]:
        items = {"kind": raw["kind"].strip()}
    kind = items["kind"]
    if kind not in DRIFT_KINDS:
        violations.append(f"[{section}] kind: unknown drift kind {kind!r}; "
                          f"known: {', '.join(sorted(DRIFT_KINDS))}")
        return items
    schema = _drift_schema(kind)
    for k, v in raw.items():
        if k not in schema:
            violations.append(f"[{section}] {k}: unknown key for kind {kind!r}")
            continue
        try:
            items[k] = schema[k](v)
        except ValueError as exc:
            violations.append(f"[{section}] {k}: {exc}")
    out = {"kind": kind}
    for k in DRIFT_KINDS[kind]:
        out[k] = float(items.get(k, DRIFT_KINDS[kind][k]))
    default_eta = out.get("eta", 0.95)
    for k in ("eta_x", "eta_y"):
        out[k] = items.get(k, default_eta)
    return out


def _validate(values, strict, violations):
    sp, integ, study = values["spectrum"], values["integrator"], values["study"]
    alpha, r = sp["alpha"], sp["r"]
    if not 1.0 < alpha < 2.0:
        violations.append(f"[spectrum] alpha: must lie in (1, 2), got {alpha}")
    if sp["n_modes"] < 1:
        violations.append("[spectrum] n_modes: must be >= 1")
    if sp["C"] <= 0:
        violations.append("[spectrum] C: must be positive")
    if strict and 1.0 < alpha < 2.0:
        lo, hi = 1.0 / (2.0 * alpha), (alpha - 1.0) / alpha
        if not lo < r < hi:
            violations.append(f"[spectrum] r: {r} outside the admissible interval "
                              f"({lo:.6g}, {hi:.6g}) for alpha={alpha}")
    eps = study["epsilons"]
    if not eps:
        violations.append("[study] epsilons: empty list")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        violations.append("[study] epsilons: must be strictly decreasing")
    if any(not 0 < e <= 1 for e in eps):
        violations.append("[study] epsilons: values must lie in (0, 1]")
    if study["drift_source"] not in ("estimator", "closed_form"):
        violations.append("[study] drift_source: must be 'estimator' or 'closed_form'")
    for sec, key in (("study", "replicas"), ("study", "chunk_size"), ("khasminskii", "replicas"),
                     ("experiment", "jobs"), ("estimator", "n_replicas"),
                     ("study", "bbar_replicas"),
                     ("mixing", "n_paths"), ("noise_check", "samples")):
        if values[sec][key] < 1:
            violations.append(f"[{sec}] {key}: must be >= 1")
    for sec, key in (("integrator", "T"), ("integrator", "dt_macro"), ("frozen", "dt"),
                     ("estimator", "t_avg"), ("study", "bbar_t_avg"), ("mixing", "dt"),
                     ("zvonkin", "tol")):
        if not values[sec][key] > 0:
            violations.append(f"[{sec}] {key}: must be positive")
    if integ["dt_macro"] > integ["T"]:
        violations.append("[integrator] dt_macro: must not exceed T")
    if integ["delta"] is not None and not integ["dt_macro"] <= integ["delta"] <= integ["T"]:
        violations.append("[integrator] delta: must satisfy dt_macro <= delta <= T")
    z = values["zvonkin"]
    if z["dims"] not in (1, 2):
        violations.append("[zvonkin] dims: must be 1 or 2")
    if z["drift"] not in ("tanh", "const", "zero"):
        violations.append("[zvonkin] drift: must be tanh, const or zero")
    if z["boundary"] not in ("clamp", "absorb"):
        violations.append("[zvonkin] boundary: must be clamp or absorb")
    if not 1 <= values["mixing"]["mode"] <= sp["n_modes"]:
        violations.append("[mixing] mode: must index a retained mode")
    if values["experiment"]["preset"] not in PRESETS:
        violations.append(f"[experiment] preset: unknown preset "
                          f"{values['experiment']['preset']!r}")


def load_config(source=None, text=None, strict=None):
    """Parse a config file (path) or inline INI text into a resolved ExperimentConfig.

    Raises ConfigError listing every violation found.
    """
    if source is not None:
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read {source}: {exc}"]) from exc
    text = text or ""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    violations = []
    values = {}
    known = set(SCHEMA) | set(DRIFT_SECTIONS)
    for section in parser.sections():
        if section not in known:
            violations.append(f"[{section}]: unknown section")
    for section, schema in SCHEMA.items():
        items = {k: default for k, (_, default) in schema.items()}
        if parser.has_section(section):
            for k, v in parser.items(section):
                if k not in schema:
                    violations.append(f"[{section}] {k}: unknown key")
                    continue
                try:
                    items[k] = schema[k][0](v)
                except ValueError as exc:
                    violations.append(f"[{section}] {k}: cannot parse {v!r} ({exc})")
        values[section] = items
    for section in DRIFT_SECTIONS:
        raw = dict(parser.items(section)) if parser.has_section(section) else {}
        values[section] = _resolve_drift(section, raw, violations)
    if strict is not None:
        values["experiment"]["strict_assumptions"] = bool(strict)
    _validate(values, values["experiment"]["strict_assumptions"], violations)
    if violations:
        raise ConfigError(violations)
    cfg = ExperimentConfig(values, text)
    try:
        cfg.drift("B")
        cfg.drift("F")
    except ParameterError as exc:
        raise ConfigError([str(exc)]) from exc
    return cfg


def preset_heat1d():
    """Nonlinear stochastic heat equation on [0, pi] with the default drifts and study."""
    return load_config(text="[experiment]\npreset = heat1d\n")
