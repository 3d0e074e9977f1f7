"""Resolvent equation lam U - L U = B_bar on one or two retained modes.

U is the fixed point of

    U(x) = int_0^inf exp(-lam t) T_t(DU . B_bar + B_bar)(x) dt,

where T_t f(x) = E f(M_t^x) for the linear stable OU dynamics. The
transition law of each mode is known exactly (mean exp(-lam_k t) x, SaS
scale of the convolution), so T_t is estimated with common random numbers:
one randomized Sobol point set per mode, pushed through the CMS map, reused
at every node and every time. Interpolation on the grid is linear in the
node values, so the whole outer integral collapses to one matrix K and a
Picard step is ``U <- K (DU . B_bar + B_bar)``.

Several independent scramblings give independent copies of K; the spread of
the corresponding fixed points is the Monte Carlo error estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import NumericalError, ParameterError
from .stable_noise import cms_transform, levy_constant, ou_increment_scale

BOUNDARY_POLICIES = ("clamp", "absorb")


@dataclass
class FeynmanKacConfig:
    t_max: float | None = None      # None: log(1e6) / lam
    n_time: int = 48
    n_paths: int = 4096             # per mode, split evenly over the scramblings
    n_scrambles: int = 8
    t_min: float = 1e-4
    boundary: str = "clamp"
    seed: int = 0

    def __post_init__(self):
        if self.boundary not in BOUNDARY_POLICIES:
            raise ParameterError(f"boundary must be one of {BOUNDARY_POLICIES}")
        if self.n_scrambles < 2:
            raise ParameterError("need at least two scramblings for a noise estimate")
        per = self.n_paths // self.n_scrambles
        if per < 2 or per & (per - 1):
            raise ParameterError("n_paths / n_scrambles must be a power of two >= 2")
        if self.n_time < 2:
            raise ParameterError("n_time must be >= 2")

    def horizon(self, lam):
        t_max = math.log(1e6) / lam if self.t_max is None else self.t_max
        if math.exp(-lam * t_max) > 1e-6 * (1 + 1e-9):
            raise ParameterError(f"t_max={t_max} leaves truncation exp(-lam t_max) above 1e-6")
        return t_max


@dataclass
class ResolventGrid:
    lam: float
    axes: list
    U: np.ndarray          # grid shape + (dims,)
    DU: np.ndarray         # grid shape + (dims, dims), DU[..., i, j] = dU_i / dx_j
    iterations: int = 0
    history: list = field(default_factory=list)
    noise: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return len(self.axes)

    @property
    def spacing(self):
        return [float(a[1] - a[0]) for a in self.axes]

    @property
    def half_width(self):
        return float(self.axes[0][-1])

    def points(self):
        """Node coordinates, shape grid + (dims,)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def sup_U(self):
        return float(np.max(np.linalg.norm(self.U, axis=-1)))

    @property
    def sup_DU(self):
        return float(np.max(np.linalg.norm(self.DU, axis=(-2, -1), ord=2))) if self.dims > 1 \
            else float(np.max(np.abs(self.DU)))

    def bound_ok(self, b_bound, slack=1e-9):
        """|U| <= M (1 + |DU|) / lam, the a priori bound at the fixed point."""
        return self.sup_U <= b_bound * (1.0 + self.sup_DU) / self.lam + slack


def box_axes(spectrum, alpha, dims=1, n_nodes=None, half_width=None, factor=5.0):
    """Uniform axes over [-R, R]; R defaults to factor x the largest stationary mode scale."""
    if dims not in (1, 2):
        raise ParameterError("only 1 or 2 retained modes are supported")
    if n_nodes is None:
        n_nodes = 241 if dims == 1 else 41
    if n_nodes < 5:
        raise ParameterError("need at least 5 nodes per axis")
    if half_width is None:
        lam = spectrum.lam[:dims]
        scale = spectrum.beta[:dims] * (alpha * lam) ** (-1.0 / alpha)
        half_width = factor * float(scale.max())
    return [np.linspace(-half_width, half_width, n_nodes) for _ in range(dims)]


def time_weights(lam, nodes, tail=True):
    """Weights w with sum w_i h(t_i) = int exp(-lam t) h(t) dt for h piecewise linear on nodes.

    With ``tail`` the last value is held beyond the final node, so constants
    integrate to exactly 1/lam.
    """
    t = np.asarray(nodes, dtype=float)
    a, b = t[:-1], t[1:]
    L = b - a
    u = lam * L
    ea = np.exp(-lam * a)
    i0 = ea * -np.expm1(-u) / lam
    # int_a^b (t - a) exp(-lam t) dt, with a series where cancellation bites
    small = u < 1e-4
    core = np.where(small, u * u / 2 - u**3 / 3 + u**4 / 8, -np.expm1(-u) - u * np.exp(-u))
    i1 = ea * core / lam**2
    w = np.zeros_like(t)
    w[1:] += i1 / L
    w[:-1] += i0 - i1 / L
    if tail:
        w[-1] += math.exp(-lam * t[-1]) / lam
    return w


def time_nodes(fk, lam):
    t_max = fk.horizon(lam)
    t_min = min(fk.t_min, t_max / 10)
    return np.concatenate([[0.0], np.geomspace(t_min, t_max, fk.n_time - 1)])


def stable_points(alpha, n, seed):
    """n standard SaS values from one scrambled Sobol set through the CMS map."""
    sobol = qmc.Sobol(d=2, scramble=True, seed=np.random.default_rng(seed))
    u = sobol.random_base2(int(round(math.log2(n))))
    u = np.clip(u, 1e-15, 1 - 1e-15)
    return cms_transform(u[:, 0], u[:, 1], alpha)


def interp_weights(axis, pos, boundary="clamp"):
    """(G, G) matrix averaging linear-interpolation weights of pos (G, P) onto the axis nodes."""
    G = axis.size
    lo, h = axis[0], axis[1] - axis[0]
    inside = (pos >= axis[0]) & (pos <= axis[-1])
    p = np.clip(pos, axis[0], axis[-1])
    s = (p - lo) / h
    idx = np.clip(np.floor(s).astype(np.int64), 0, G - 2)
    frac = s - idx
    w_lo, w_hi = 1.0 - frac, frac
    if boundary == "absorb":
        w_lo = np.where(inside, w_lo, 0.0)
        w_hi = np.where(inside, w_hi, 0.0)
    rows = np.broadcast_to(np.arange(G)[:, None], pos.shape) * G
    M = np.bincount((rows + idx).ravel(), w_lo.ravel(), minlength=G * G)
    M += np.bincount((rows + idx + 1).ravel(), w_hi.ravel(), minlength=G * G)
    return M.reshape(G, G) / pos.shape[1]


def resolvent_operator(spectrum, alpha, axes, lam, fk, samples):
    """K = sum_i w_i T_{t_i} for one set of per-mode SaS samples."""
    t = time_nodes(fk, lam)
    w = time_weights(lam, t)
    G = int(np.prod([a.size for a in axes]))
    K = np.zeros((G, G))
    for ti, wi in zip(t, w):
        mats = []
        for k, axis in enumerate(axes):
            mean = math.exp(-spectrum.lam[k] * ti) * axis
            if ti == 0.0:
                pos = mean[:, None] + 0.0 * samples[k][None, :1]
            else:
                sig = float(ou_increment_scale(spectrum.lam[k], spectrum.beta[k], alpha, ti))
                pos = mean[:, None] + sig * samples[k][None, :]
            mats.append(interp_weights(axis, pos, fk.boundary))
        K += wi * (mats[0] if len(mats) == 1 else np.kron(mats[0], mats[1]))
    return K


def gradient(U, axes):
    """DU[..., i, j] = dU_i/dx_j; central differences inside, one-sided at the edges."""
    h = [a[1] - a[0] for a in axes]
    d = len(axes)
    out = np.empty(U.shape + (d,))
    for j in range(d):
        out[..., j] = np.gradient(U, h[j], axis=j)
    return out


def _picard(K, b, axes, U0, max_iter, tol):
    shape = b.shape
    G, d = int(np.prod(shape[:-1])), shape[-1]
    U = np.zeros(shape) if U0 is None else U0.copy()
    history = []
    grows = 0
    for it in range(1, max_iter + 1):
        DU = gradient(U, axes)
        g = np.einsum("...ij,...j->...i", DU, b) + b
        U_new = (K @ g.reshape(G, d)).reshape(shape)
        change = float(np.max(np.abs(U_new - U)))
        U = U_new
        if history and change > history[-1]:
            grows += 1
        else:
            grows = 0
        history.append(change)
        if change < tol:
            return U, history, True
        if grows >= 2 and it > 2:
            raise NumericalError("Picard iteration is not contracting; increase lam",
                                 {"history": history})
    return U, history, False


def picard_solve(spectrum, alpha, lam, b_bar, axes, fk=None, max_iter=200, tol=1e-3):
    """Fixed point of the integral representation on the grid spanned by ``axes``.

    b_bar: values of the averaged drift at the nodes, shape grid + (dims,).
    """
    fk = fk or FeynmanKacConfig()
    if not lam > 0:
        raise ParameterError("lam must be positive")
    dims = len(axes)
    b = np.asarray(b_bar, dtype=float)
    if b.shape != tuple(a.size for a in axes) + (dims,):
        raise ParameterError("b_bar does not match the grid")
    if not np.all(np.isfinite(b)):
        raise ParameterError("b_bar must be finite")
    per = fk.n_paths // fk.n_scrambles
    seeds = np.random.SeedSequence([fk.seed, 0x2E5]).spawn(fk.n_scrambles * dims)
    Ks = []
    for r in range(fk.n_scrambles):
        samples = [stable_points(alpha, per, seeds[r * dims + k]) for k in range(dims)]
        Ks.append(resolvent_operator(spectrum, alpha, axes, lam, fk, samples))
    K = np.mean(Ks, axis=0)
    U, history, ok = _picard(K, b, axes, None, max_iter, tol)
    if not ok:
        raise NumericalError(f"no convergence to tol={tol} in {max_iter} iterations",
                             {"history": history})
    copies = [_picard(Kr, b, axes, U, max_iter, tol / 10)[0] for Kr in Ks]
    noise = float(np.max(np.std(copies, axis=0, ddof=1)) / math.sqrt(fk.n_scrambles))
    if noise > tol:
        raise NumericalError(
            f"Monte Carlo noise {noise:.3g} exceeds tol={tol}; increase n_paths",
            {"noise": noise, "n_paths": fk.n_paths})
    DU = gradient(U, axes)
    ratio = history[2] / history[1] if len(history) > 2 and history[1] > 0 else 0.0
    frac = np.einsum("...ij,j->...ij", DU, spectrum.lam[:dims] ** 0.1)
    meta = {"contraction_ratio": ratio, "t_max": fk.horizon(lam), "n_time": fk.n_time,
            "n_paths": fk.n_paths, "boundary": fk.boundary, "tol": tol,
            "frac_DU_sup": float(np.max(np.abs(frac)))}
    return ResolventGrid(lam, axes, U, DU, len(history), history, noise, meta)


def norm_decay_probe(spectrum, alpha, lams, b_bar, axes, fk=None, tol=1e-3):
    """Rows (lam, sup|U|, sup|DU|, noise) and whether sup|U| is non-increasing in lam."""
    rows = []
    for lam in sorted(lams):
        g = picard_solve(spectrum, alpha, lam, b_bar, axes, fk, tol=tol)
        rows.append({"lam": float(lam), "sup_U": g.sup_U, "sup_DU": g.sup_DU, "noise": g.noise})
    monotone = all(b["sup_U"] <= a["sup_U"] + 3 * math.hypot(a["noise"], b["noise"])
                   for a, b in zip(rows, rows[1:]))
    return rows, monotone


# -- generator residual --------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _symmetric_jump(x, Ux, U_at, a, b, n_panels, alpha):
    """int_a^b (U(x+z) + U(x-z) - 2U(x)) c_alpha z^(-1-alpha) dz on geometric panels."""
    if b <= a:
        return np.zeros_like(x)
    edges = np.geomspace(a, b, n_panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    z = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    wz = (half[:, None] * _GL_W[None, :]).ravel() * levy_constant(alpha) * z ** (-1.0 - alpha)
    second = U_at(x[:, None] + z[None, :]) + U_at(x[:, None] - z[None, :]) - 2.0 * Ux[:, None]
    return second @ wz


@dataclass
class ResidualField:
    x: np.ndarray
    residual: np.ndarray
    core: np.ndarray
    core_sup: float
    quadrature_converged: bool
    quadrature_change: float
    split: float


def generator_residual(grid, b_bar, spectrum, alpha, split=1.0, n_panels=32, qtol=1e-3):
    """lam U - [-lam_1 x U' + B_bar U' + jump part] - B_bar at the nodes (one mode).

    Jumps below one grid spacing use the second difference, jumps in
    [h, split] and [split, 2R] use Gauss-Legendre on geometric panels, and
    beyond 2R every displaced point sits outside the box where U is clamped,
    which integrates in closed form. The panel count is doubled once to check
    the quadrature.
    """
    if grid.dims != 1:
        raise ParameterError("the generator residual is implemented for one mode")
    x = grid.axes[0]
    h = x[1] - x[0]
    R = grid.half_width
    if not h < split < 2 * R:
        raise ParameterError("split must lie between the grid spacing and 2R")
    U = grid.U[:, 0]
    b = np.asarray(b_bar, dtype=float).reshape(-1)
    Up = grid.DU[:, 0, 0]
    Upp = np.full_like(U, np.nan)
    Upp[1:-1] = (U[2:] - 2 * U[1:-1] + U[:-2]) / h**2
    c_a = levy_constant(alpha)

    def U_at(p):
        return np.interp(p, x, U)

    z_max = 2.0 * R
    tail = (U[-1] + U[0] - 2.0 * U) * c_a * z_max ** (-alpha) / alpha
    small = Upp * c_a * h ** (2.0 - alpha) / (2.0 - alpha)

    def jump(panels):
        mid = _symmetric_jump(x, U, U_at, h, split, panels, alpha)
        large = _symmetric_jump(x, U, U_at, split, z_max, panels, alpha)
        return spectrum.beta[0] ** alpha * (small + mid + large + tail)

    J1, J2 = jump(n_panels), jump(2 * n_panels)
    interior = np.zeros_like(U, dtype=bool)
    interior[1:-1] = True
    change = float(np.max(np.abs(J2 - J1)[interior]))
    res = grid.lam * U - (-spectrum.lam[0] * x * Up + b * Up + J2) - b
    res[~interior] = np.nan
    core = interior & (np.abs(x) <= 0.5 * R)
    return ResidualField(x, res, core, float(np.max(np.abs(res[core]))), change <= qtol, change,
                         split)


def grid_to_csv(grid, path, residual=None, header_fields=None):
    """Node coordinates, U, DU and (optionally) the residual; one row per node."""
    d = grid.dims
    pts = grid.points().reshape(-1, d)
    U = grid.U.reshape(-1, d)
    DU = grid.DU.reshape(-1, d * d)
    res = None if residual is None else np.asarray(residual.residual).reshape(-1)
    cols = [f"x{i + 1}" for i in range(d)] + [f"U{i + 1}" for i in range(d)]
    cols += [f"DU{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    if res is not None:
        cols.append("residual")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_fields:
            fh.write("# " + ",".join(f"{k}={v}" for k, v in header_fields.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(pts.shape[0]):
            row = list(pts[i]) + list(U[i]) + list(DU[i])
            if res is not None:
                row.append(res[i])
            w.writerow([repr(float(v)) for v in row])
