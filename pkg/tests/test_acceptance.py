"""End-to-end acceptance checks on the heat preset, one test per criterion.

Each test runs the packaged experiment through the same entry point as the
CLI, evaluates the criterion at its stated tolerance and records a verdict
line that is printed in the terminal summary.
"""

import csv
import json
import math

import numpy as np
import pytest

from stableavg.config import load_config
from stableavg.runner import run

pytestmark = pytest.mark.slow


class Runs:
    def __init__(self, root):
        self.root = root
        self.done = {}

    def __call__(self, kind, text="", label=None, jobs=None):
        label = label or kind
        if label not in self.done:
            cfg = load_config(text="[experiment]\npreset = heat1d\n" + text)
            if jobs is not None:
                cfg = cfg.with_overrides(jobs=jobs)
            out = self.root / label
            code = run(cfg, kind, out)
            manifest = json.loads((out / "manifest.json").read_text())
            summary_path = out / "summary.json"
            summary = json.loads(summary_path.read_text()) if summary_path.exists() else None
            self.done[label] = (code, out, manifest, summary)
        return self.done[label]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _verdict(log, label, ok, detail):
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'} ({detail})"
    log.append(line)
    print(line)
    assert ok, line


def test_criterion_1_sampler_fidelity(runs, acceptance_log):
    code, out, manifest, _ = runs("noise-check")
    assert code == 0
    rows = [r for r in _rows(out / "study.csv") if r["check"] in ("hill", "quantile", "variance")]
    hill = {float(r["alpha"]): float(r["observed"]) for r in rows if r["check"] == "hill"}
    bad = [f"{r['check']} alpha={r['alpha']} p={r['p']} obs={float(r['observed']):.4f}"
           for r in rows if r["ok"] != "true"]
    ok = not bad and manifest["elapsed_s"] < 30
    detail = ("hill " + ", ".join(f"{a}->{h:.3f}" for a, h in hill.items())
              + f"; {len(bad)} failing checks" + (f" [{'; '.join(bad)}]" if bad else "")
              + f"; noise-check run {manifest['elapsed_s']:.1f}s")
    _verdict(acceptance_log, "1 sampler fidelity", ok, detail)


def test_criterion_2_split_step(runs, acceptance_log):
    code, out, manifest, _ = runs("noise-check")
    assert code == 0
    rows = [r for r in _rows(out / "study.csv") if r["check"] == "split_step"]
    modes = {r["mode"] for r in rows}
    bad = [r for r in rows if r["ok"] != "true"]
    ok = len(rows) == 19 * len(modes) and not bad and manifest["elapsed_s"] < 30
    _verdict(acceptance_log, "2 split-step exactness", ok,
             f"{len(rows) - len(bad)}/{len(rows)} quantiles within 3 sigma over {len(modes)} modes")


def test_criterion_3_contraction(runs, acceptance_log):
    code, out, manifest, summary = runs("frozen")
    s = summary["summary"]
    rows = _rows(out / "study.csv")
    held = sum(r["ok"] == "true" for r in rows)
    ok = (code == 0 and len(rows) == 64 and held == 64 and math.isclose(s["gap"], 0.5)
          and s["T"] == 10 and s["dt"] == 1e-3 and manifest["elapsed_s"] < 60)
    _verdict(acceptance_log, "3 pathwise contraction", ok,
             f"{held}/{len(rows)} paths under e^-5 envelope x1.05, max ratio {s['max_ratio']:.3f}, "
             f"{manifest['elapsed_s']:.1f}s")


def test_criterion_4a_exact_y_free(runs, acceptance_log):
    code, out, manifest, summary = runs("avg-drift", "[drift.B]\nkind = trig\nsx = 1\ncy = 0\n",
                                        label="avg-drift-yfree")
    rows = _rows(out / "study.csv")
    cfg = load_config(text="[drift.B]\nkind = trig\nsx = 1\ncy = 0\n")
    exact = cfg.drift("B")(cfg.vector("frozen", "x"))
    values = np.array([float(r["value"]) for r in rows])
    spread = np.array([float(r["stderr"]) for r in rows])
    ok = code == 0 and np.array_equal(values, exact) and np.all(spread == 0)
    _verdict(acceptance_log, "4a y-independent drift exact", ok,
             f"max |est - B(x)| = {np.max(np.abs(values - exact)):.1e}, max spread {spread.max()}")


def test_criterion_4b_sine_under_linear_fast(runs, acceptance_log):
    text = "[drift.B]\nkind = trig\nsx = 0\ncy = 0\nsy = 1\n[drift.F]\nkind = zero\n"
    code, out, manifest, summary = runs("avg-drift", text, label="avg-drift-sine")
    rows = _rows(out / "study.csv")
    values = np.array([float(r["value"]) for r in rows])
    se = np.array([float(r["stderr"]) for r in rows])
    meta = summary["summary"]
    ok = (code == 0 and np.all(np.abs(values) <= 3 * se) and se.max() < 0.02
          and meta["t_avg"] == 200 and meta["n_replicas"] == 16 and manifest["elapsed_s"] < 120)
    _verdict(acceptance_log, "4b averaged sine vanishes", ok,
             f"max |est|/stderr = {np.max(np.abs(values) / se):.2f}, max stderr {se.max():.4f}, "
             f"{manifest['elapsed_s']:.1f}s")


def test_criterion_5_mixing(runs, acceptance_log):
    code, out, manifest, summary = runs("mixing")
    gap = summary["summary"]["gap"]
    t_check = 20 / gap
    rows = [r for r in _rows(out / "study.csv") if math.isclose(float(r["t"]), t_check)]
    ok = (code == 0 and len(rows) == 2 and all(r["within"] == "true" for r in rows)
          and manifest["elapsed_s"] < 120)
    detail = ", ".join(f"{r['start']}: gap {float(r['gap']):.4f} <= {float(r['tolerance']):.4f}"
                       for r in rows)
    _verdict(acceptance_log, "5 mixing decay", ok,
             f"t = {t_check:g}; {detail}; {manifest['elapsed_s']:.1f}s")


def test_criterion_6_khasminskii(runs, acceptance_log):
    code, out, manifest, summary = runs("khasminskii")
    rows = sorted(_rows(out / "study.csv"), key=lambda r: -float(r["delta"]))
    meds = [float(r["median"]) for r in rows]
    deltas = [float(r["delta"]) for r in rows]
    ok = (code == 0 and deltas == [0.2, 0.1, 0.05] and summary["summary"]["replicas"] == 32
          and summary["summary"]["epsilon"] == 0.05
          and all(b < a for a, b in zip(meds, meds[1:])) and manifest["elapsed_s"] < 180)
    _verdict(acceptance_log, "6 Khasminskii delta-sensitivity", ok,
             "medians " + ", ".join(f"{d:g}->{m:.4f}" for d, m in zip(deltas, meds))
             + f"; {manifest['elapsed_s']:.1f}s")


def test_criterion_7_strong_averaging(runs, acceptance_log):
    code, out, manifest, summary = runs("converge", label="converge-j1", jobs=1)
    rows = _rows(out / "study.csv")
    eps = [float(r["epsilon"]) for r in rows]
    meds = [float(r["median_sup_err"]) for r in rows]
    slope = summary["summary"]["fitted_slope"]
    ok = (code == 0 and eps == [0.1, 0.02, 0.004]
          and all(int(r["replicas"]) == 64 for r in rows)
          and all(b < a for a, b in zip(meds, meds[1:])) and meds[-1] <= 0.5 * meds[0]
          and manifest["elapsed_s"] < 900)
    _verdict(acceptance_log, "7 strong averaging", ok,
             "medians " + ", ".join(f"{e:g}->{m:.4f}" for e, m in zip(eps, meds))
             + f"; ratio {meds[-1] / meds[0]:.3f}; fitted slope {slope:.3f}"
             + f"; {manifest['elapsed_s']:.1f}s")


def test_criterion_8a_constant_drift(runs, acceptance_log):
    code, out, manifest, summary = runs("zvonkin", "[zvonkin]\ndrift = const\nconst_value = 1\n",
                                        label="zvonkin-const")
    worst_u, worst_du = 0.0, 0.0
    for lam in (1, 5, 25):
        grid = _rows(out / f"grid_lam{lam}.csv")
        U = np.array([float(r["U1"]) for r in grid])
        DU = np.array([float(r["DU11"]) for r in grid])
        worst_u = max(worst_u, float(np.max(np.abs(U - 1.0 / lam))))
        worst_du = max(worst_du, float(np.max(np.abs(DU))))
    ok = code == 0 and worst_u < 1e-3 and worst_du < 1e-3
    _verdict(acceptance_log, "8a resolvent with constant drift", ok,
             f"sup |U - c/lam| = {worst_u:.1e}, sup |DU| = {worst_du:.1e}")


def test_criterion_8b_tanh_drift(runs, acceptance_log):
    code, out, manifest, summary = runs("zvonkin", label="zvonkin-tanh")
    rows = _rows(out / "study.csv")
    sups = [float(r["sup_U"]) for r in rows]
    res = [float(r["residual_core"]) for r in rows]
    tol = load_config()["zvonkin"]["tol"]
    ok = (code == 0 and [float(r["lam"]) for r in rows] == [1, 5, 25]
          and all(b < a for a, b in zip(sups, sups[1:])) and max(res) < 10 * tol
          and manifest["elapsed_s"] < 300)
    _verdict(acceptance_log, "8b resolvent with tanh drift", ok,
             "sup U " + ", ".join(f"{s:.4f}" for s in sups) + "; core residual "
             + ", ".join(f"{r:.1e}" for r in res) + f"; {manifest['elapsed_s']:.1f}s")


def test_criterion_9_determinism(runs, acceptance_log):
    _, first, _, _ = runs("converge", label="converge-j1", jobs=1)
    code, second, manifest, _ = runs("converge", label="converge-j2", jobs=2)
    a = (first / "study.csv").read_bytes()
    b = (second / "study.csv").read_bytes()
    ok = code == 0 and a == b
    _verdict(acceptance_log, "9 determinism across --jobs", ok,
             f"study.csv {'identical' if a == b else 'differs'} for jobs=1 and jobs=2 "
             f"({len(a)} bytes); jobs=2 run {manifest['elapsed_s']:.1f}s")
