"""Run kinds: turn a resolved ExperimentConfig into tables and summaries on disk.

Each run writes into its own directory:

    study.csv      the run's table; first line ``# config_sha256=...,master_seed=...``
    summary.json   headline numbers, the resolved config and the seed lineage
    config.echo    the resolved config in INI form
    manifest.json  status, exit code, files written and any failures

Extra tables (resolvent grid dumps) carry the same header line.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import averaging as avg
from . import frozen as fz
from . import zvonkin as zv
from .drifts import Observable
from .errors import ConfigError, NumericalError, ResourceError, StableAvgError
from .stable_noise import (SeedLineage, check_assumptions, sampler_check, split_step_check,
                           standard_sas)

log = logging.getLogger(__name__)

STUDY_COLUMNS = ["epsilon", "delta", "replicas", "median_sup_err", "q05", "q25", "q75", "q95",
                 "moment_p05", "moment_p1", "moment_p2", "theta_tilde", "fitted_slope"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def header_fields(cfg, kind):
    return {"config_sha256": cfg.sha256(), "master_seed": cfg.master_seed, "kind": kind}


def write_table(path, columns, rows, header):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ",".join(f"{k}={v}" for k, v in header.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


# -- shared builders ---------------------------------------------------------------


def holder_exponents(cfg):
    B, F = cfg.drift("B"), cfg.drift("F")
    return B.eta_x, B.eta_y, F.eta_x


def theta_tilde(cfg):
    eta1, eta2, eta3 = holder_exponents(cfg)
    a, r = cfg.alpha, cfg["spectrum"]["r"]
    gamma_index = a / (a * r + 1.0)
    s = cfg["study"]
    return avg.nominal_theta_tilde(s["theta"], s["theta_prime"], eta1, eta2, eta3, gamma_index)


def slow_fast_config(cfg, epsilon):
    s, integ = cfg["study"], cfg["integrator"]
    est = avg.EstimatorSettings(
        t_burn=cfg["frozen"]["t_burn"], t_avg=s["bbar_t_avg"], dt=cfg["frozen"]["dt"],
        n_replicas=s["bbar_replicas"], quantum=s["bbar_quantum"],
        max_stderr=s["bbar_max_stderr"])
    return avg.SlowFastConfig(
        spectrum=cfg.spectrum(), alpha=cfg.alpha, B=cfg.drift("B"), F=cfg.drift("F"),
        x=cfg.vector("integrator", "x0"), y=cfg.vector("integrator", "y0"), epsilon=epsilon,
        T=integ["T"], dt_macro=integ["dt_macro"], delta=integ["delta"], kappa=integ["kappa"],
        master_seed=cfg.master_seed, estimator=est,
        memory_budget=cfg["experiment"]["memory_budget_mb"] * 2**20)


def _t_burn(cfg, F, spectrum):
    t = cfg["frozen"]["t_burn"]
    return fz.default_burn_in(spectrum, F) if t is None else t


# -- run kinds -------------------------------------------------------------------------
# Each returns (columns, rows, summary, failures, extra_files).


def run_assumptions(cfg, out, jobs):
    eta1, eta2, eta3 = holder_exponents(cfg)
    rep = check_assumptions(cfg.spectrum(), cfg.alpha, kappa1=cfg["assumptions"]["kappa1"],
                            r_hint=cfg["spectrum"]["r"], holder_min=min(eta1, eta2 * eta3))
    rows = [{"flag": k, "ok": v} for k, v in rep.flags.items()]
    summary = rep.as_dict()
    summary["holder_exponents"] = {"eta1": eta1, "eta2": eta2, "eta3": eta3}
    return ["flag", "ok"], rows, summary, [], []


def run_noise_check(cfg, out, jobs):
    nc = cfg["noise_check"]
    seed = cfg.master_seed
    rows = []
    hill = {}
    for i, a in enumerate(nc["alphas"]):
        k = None if nc["hill_k"] is None else int(nc["hill_k"])
        res = sampler_check(a, nc["samples"], SeedLineage(seed, i, "sampler").rng(), k=k)
        hill[a] = res["hill"]
        rows.append({"check": "hill", "alpha": a, "expected": a, "observed": res["hill"],
                     "tolerance": 0.1, "ok": abs(res["hill"] - a) <= 0.1})
        for q in res["quantiles"]:
            if q["exact"] == 0:
                ok, tol, err = q["abs_err"] <= 0.02, 0.02, q["abs_err"]
            else:
                ok, tol, err = q["rel_err"] <= 0.02, 0.02, q["rel_err"]
            rows.append({"check": "quantile", "alpha": a, "p": q["p"], "expected": q["exact"],
                         "observed": q["sample"], "error": err, "tolerance": tol, "ok": ok})
    x = standard_sas(2.0, nc["samples"], SeedLineage(seed, len(nc["alphas"]), "sampler").rng())
    var = float(np.var(x))
    rows.append({"check": "variance", "alpha": 2.0, "expected": 2.0, "observed": var,
                 "error": abs(var - 2) / 2, "tolerance": 0.02, "ok": abs(var - 2) <= 0.04})
    split = split_step_check(cfg.spectrum(), cfg.alpha, nc["split_dt"], nc["split_samples"],
                             SeedLineage(seed, 0, "split").rng())
    for r in split:
        rows.append({"check": "split_step", "alpha": cfg.alpha, "mode": r["mode"], "p": r["p"],
                     "expected": r["direct"], "observed": r["composed"],
                     "error": abs(r["direct"] - r["composed"]), "tolerance": r["tolerance"],
                     "ok": r["ok"]})
    cols = ["check", "alpha", "mode", "p", "expected", "observed", "error", "tolerance", "ok"]
    summary = {"hill": hill, "alpha2_variance": var,
               "all_ok": all(r["ok"] for r in rows),
               "failed_checks": sum(not r["ok"] for r in rows)}
    return cols, rows, summary, [], []


def run_frozen(cfg, out, jobs):
    sp, F = cfg.spectrum(), cfg.drift("F")
    f = cfg["frozen"]
    x = cfg.vector("frozen", "x")
    lineage = SeedLineage(cfg.master_seed, 0, "contraction")
    starts = standard_sas(cfg.alpha, (f["contraction_paths"], sp.n_modes),
                          lineage.child("starts").rng())
    rec = fz.contraction_check(sp, cfg.alpha, F, x, x, np.zeros_like(starts), starts,
                               f["contraction_T"], f["contraction_dt"], lineage,
                               save_stride=max(1, round(f["contraction_T"] / f["contraction_dt"] / 100)))
    rows = [{"path": i, "initial_diff": rec.diff_norm[0, i], "final_diff": rec.diff_norm[-1, i],
             "envelope": rec.envelope[-1, i], "ratio": rec.final_ratio[i],
             "ok": bool(rec.diff_norm[-1, i] <= rec.envelope[-1, i] * (1 + rec.tol))}
            for i in range(starts.shape[0])]
    summary = {"gap": rec.gap, "T": f["contraction_T"], "dt": f["contraction_dt"],
               "all_ok": rec.ok, "monotone": rec.monotone,
               "max_ratio": float(np.max(rec.final_ratio)), "lineage": lineage.as_dict()}
    return ["path", "initial_diff", "final_diff", "envelope", "ratio", "ok"], rows, summary, [], []


def run_avg_drift(cfg, out, jobs):
    sp, B, F = cfg.spectrum(), cfg.drift("B"), cfg.drift("F")
    e = cfg["estimator"]
    x = cfg.vector("frozen", "x")
    fc = fz.FrozenConfig(x, np.zeros(sp.n_modes), _t_burn(cfg, F, sp), e["t_avg"],
                         cfg["frozen"]["dt"], e["n_replicas"])
    est = fz.estimate_averaged_drift(sp, cfg.alpha, x, B, F, fc, cfg.master_seed, tag="avg-drift",
                                     max_stderr=e["max_stderr"])
    try:
        closed = fz.closed_form_averaged_drift(sp, cfg.alpha, x, B, F)
    except StableAvgError:
        closed = None
    rows = [{"mode": i + 1, "value": est.value[i], "stderr": est.stderr[i],
             "closed_form": None if closed is None else closed[i]} for i in range(sp.n_modes)]
    summary = {"reliable": est.reliable, "max_stderr": float(np.max(est.stderr)),
               "bound": B.bound, "norm": float(np.linalg.norm(est.value)), **est.meta}
    failures = [] if est.reliable else [{"kind": "numerical", "message": "estimate unreliable",
                                         "state": x.tolist()}]
    return ["mode", "value", "stderr", "closed_form"], rows, summary, failures, []


def run_mixing(cfg, out, jobs):
    sp, F = cfg.spectrum(), cfg.drift("F")
    m = cfg["mixing"]
    x = cfg.vector("frozen", "x")
    phi = Observable("phi", "sin_mode", mode=m["mode"])
    starts = {"zero": np.zeros(sp.n_modes), "far": np.full(sp.n_modes, m["y_far"])}
    lineage = SeedLineage(cfg.master_seed, 0, "mixing")
    rows = fz.mixing_check(sp, cfg.alpha, x, phi, F, starts, m["t_grid"], m["dt"], m["n_paths"],
                           lineage, m["ref_t_avg"], m["ref_chains"])
    table = [{"start": r.y_label, "t": r.t, "estimate": r.estimate, "stderr": r.stderr,
              "reference": r.reference, "ref_stderr": r.ref_stderr, "gap": r.gap,
              "tolerance": r.tolerance, "within": r.within} for r in rows]
    rates = {lab: fz.fit_decay_rate([r for r in rows if r.y_label == lab]) for lab in starts}
    summary = {"gap": F.check_dissipative(sp), "decay_rates": rates,
               "final_within": all(r.within for r in rows if r.t == max(m["t_grid"])),
               "lineage": lineage.as_dict()}
    cols = ["start", "t", "estimate", "stderr", "reference", "ref_stderr", "gap", "tolerance",
            "within"]
    return cols, table, summary, [], []


def run_converge(cfg, out, jobs):
    s = cfg["study"]
    base = slow_fast_config(cfg, s["epsilons"][0])
    tt = theta_tilde(cfg)
    res = avg.convergence_study(base, s["epsilons"], s["replicas"], tuple(s["p_set"]), jobs=jobs,
                                chunk_size=s["chunk_size"], source=s["drift_source"],
                                theta_tilde=tt)
    rows = res.rows()
    failures = []
    for eps, msg in res.failures.items():
        kind = "resource" if msg.startswith("ResourceError") else "numerical"
        failures.append({"kind": kind, "epsilon": eps, "message": msg})
        rows.append({"epsilon": eps, "delta": base.with_epsilon(eps).delta_eff,
                     "replicas": 0, "median_sup_err": "failed"})
    rows.sort(key=lambda r: -r["epsilon"])
    summary = {"rows": [{k: v for k, v in r.items()} for r in res.rows()],
               "fitted_slope": res.fitted_slope, "monotone": res.monotone,
               "strict_endpoints": res.strict_endpoints,
               "theta_tilde_nominal": tt, "rate_nominal": res.rate_nominal,
               "error_ceiling": avg.error_ceiling(base),
               "within_ceiling": all(r.within_ceiling for r in res.reports),
               "failures": {repr(k): v for k, v in res.failures.items()},
               "cache": res.cache_stats,
               "seed_lineage": {"master_seed": cfg.master_seed,
                                "slow": "(master_seed, replica, 'slow')",
                                "fast": "(master_seed, replica, 'fast/eps=<eps>')",
                                "bbar": "(master_seed, hash(state), 'bbar/bbar')"}}
    return STUDY_COLUMNS, rows, summary, failures, []


def run_khasminskii(cfg, out, jobs):
    k = cfg["khasminskii"]
    base = slow_fast_config(cfg, k["epsilon"])
    res = avg.delta_sensitivity(base, k["deltas"], range(k["replicas"]))
    rows = [{"delta": r["delta"], "median": r["median"], "mean": r["mean"]} for r in res]
    meds = [r["median"] for r in sorted(rows, key=lambda r: -r["delta"])]
    summary = {"epsilon": k["epsilon"], "replicas": k["replicas"],
               "strictly_decreasing": all(b < a for a, b in zip(meds, meds[1:]))}
    return ["delta", "median", "mean"], rows, summary, [], []


def zvonkin_drift(z, axes):
    dims = len(axes)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if z["drift"] == "tanh":
        return np.tanh(pts)
    if z["drift"] == "const":
        return np.full(pts.shape, z["const_value"])
    return np.zeros(pts.shape[:-1] + (dims,))


def run_zvonkin(cfg, out, jobs):
    z = cfg["zvonkin"]
    sp = cfg.spectrum()
    n_nodes = None if z["n_nodes"] is None else int(z["n_nodes"])
    axes = zv.box_axes(sp, cfg.alpha, z["dims"], n_nodes)
    b = zvonkin_drift(z, axes)
    fk = zv.FeynmanKacConfig(n_time=z["n_time"], n_paths=z["n_paths"],
                             n_scrambles=z["n_scrambles"], boundary=z["boundary"],
                             seed=cfg.master_seed)
    rows, extra = [], []
    header = header_fields(cfg, "zvonkin")
    bound = float(np.max(np.linalg.norm(b, axis=-1)))
    for lam in sorted(z["lams"]):
        g = zv.picard_solve(sp, cfg.alpha, lam, b, axes, fk, z["max_iter"], z["tol"])
        row = {"lam": lam, "sup_U": g.sup_U, "sup_DU": g.sup_DU, "noise": g.noise,
               "iterations": g.iterations, "contraction_ratio": g.meta["contraction_ratio"],
               "bound_ok": g.bound_ok(bound)}
        res = None
        if g.dims == 1:
            res = zv.generator_residual(g, b, sp, cfg.alpha)
            row.update(residual_core=res.core_sup, quadrature_converged=res.quadrature_converged,
                       residual_ok=res.core_sup < 10 * z["tol"])
        name = f"grid_lam{lam:g}.csv"
        zv.grid_to_csv(g, Path(out) / name, res, header)
        extra.append(name)
        rows.append(row)
    sups = [r["sup_U"] for r in rows]
    summary = {"rows": rows, "strictly_decreasing": all(b_ < a for a, b_ in zip(sups, sups[1:])),
               "half_width": axes[0][-1], "n_nodes": axes[0].size}
    cols = ["lam", "sup_U", "sup_DU", "noise", "iterations", "contraction_ratio", "bound_ok",
            "residual_core", "quadrature_converged", "residual_ok"]
    return cols, rows, summary, [], extra


RUNNERS = {
    "assumptions": run_assumptions,
    "noise-check": run_noise_check,
    "frozen": run_frozen,
    "avg-drift": run_avg_drift,
    "mixing": run_mixing,
    "converge": run_converge,
    "khasminskii": run_khasminskii,
    "zvonkin": run_zvonkin,
}


def run(cfg, kind, out, jobs=None):
    """Execute one run kind and write its artifacts; returns the exit code."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg["experiment"]["jobs"] if jobs is None else jobs
    header = header_fields(cfg, kind)
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
    manifest = {"kind": kind, "config_sha256": header["config_sha256"],
                "master_seed": cfg.master_seed, "files": ["config.echo"], "failures": []}
    t0 = time.perf_counter()
    code = 0
    try:
        cols, rows, summary, failures, extra = RUNNERS[kind](cfg, out, jobs)
    except (ResourceError, NumericalError, ConfigError) as exc:
        code = exc.exit_code
        manifest["failures"].append({
            "kind": type(exc).__name__, "message": str(exc),
            "diagnostic": getattr(exc, "diagnostic", None)
            or {"violations": getattr(exc, "violations", None)}})
        log.error("%s run failed: %s", kind, exc)
    else:
        write_table(out / "study.csv", cols, rows, header)
        write_json(out / "summary.json", {**header, "summary": summary,
                                          "config": cfg.values})
        manifest["files"] += ["study.csv", "summary.json"] + extra
        manifest["failures"] += failures
        if failures:
            code = 3 if any(f["kind"] == "resource" for f in failures) else 4
    manifest["status"] = "ok" if code == 0 else ("partial" if len(manifest["files"]) > 1
                                                 else "failed")
    manifest["exit_code"] = code
    manifest["elapsed_s"] = round(time.perf_counter() - t0, 3)
    manifest["files"].append("manifest.json")
    write_json(out / "manifest.json", manifest)
    return code
