import math

import numpy as np
import pytest

from stableavg.errors import NumericalError, ParameterError
from stableavg.stable_noise import ModeSpectrum
from stableavg.zvonkin import (
    FeynmanKacConfig, box_axes, generator_residual, grid_to_csv, interp_weights, norm_decay_probe,
    picard_solve, resolvent_operator, stable_points, time_nodes, time_weights)

ALPHA = 1.75
FK = FeynmanKacConfig(n_paths=2048)


@pytest.fixture(scope="module")
def sp():
    return ModeSpectrum.heat(8, 0.35)


@pytest.fixture(scope="module")
def axes(sp):
    return box_axes(sp, ALPHA, 1, 121)


@pytest.fixture(scope="module")
def tanh_grid(sp, axes):
    b = np.tanh(axes[0])[:, None]
    return picard_solve(sp, ALPHA, 1.0, b, axes, FK), b


def test_time_weights_constants_and_linear():
    lam = 2.5
    t = np.concatenate([[0.0], np.geomspace(1e-4, 6.0, 40)])
    assert time_weights(lam, t).sum() == pytest.approx(1 / lam, rel=1e-13)
    T = t[-1]
    exact = (1 - math.exp(-lam * T) * (1 + lam * T)) / lam**2
    assert time_weights(lam, t, tail=False) @ t == pytest.approx(exact, rel=1e-12)


def test_horizon_truncation_checked():
    assert FeynmanKacConfig().horizon(2.0) == pytest.approx(math.log(1e6) / 2)
    with pytest.raises(ParameterError):
        FeynmanKacConfig(t_max=1.0).horizon(2.0)
    nodes = time_nodes(FeynmanKacConfig(n_time=10), 1.0)
    assert nodes[0] == 0 and nodes.size == 10


def test_fk_config_validation():
    with pytest.raises(ParameterError):
        FeynmanKacConfig(n_paths=3000)
    with pytest.raises(ParameterError):
        FeynmanKacConfig(n_scrambles=1)
    with pytest.raises(ParameterError):
        FeynmanKacConfig(boundary="wrap")


def test_stable_points_deterministic():
    seed = np.random.SeedSequence(4)
    a = stable_points(ALPHA, 256, seed)
    b = stable_points(ALPHA, 256, np.random.SeedSequence(4))
    assert np.array_equal(a, b) and a.shape == (256,)


def test_interp_weights_rows():
    axis = np.linspace(-1, 1, 11)
    pos = np.array([[-5.0, 0.05, 0.95], [0.0, 0.0, 0.0]] + [[0.1, 0.1, 0.1]] * 9)
    M = interp_weights(axis, pos)
    np.testing.assert_allclose(M.sum(axis=1), 1.0)
    assert M[1, 5] == pytest.approx(1.0)
    A = interp_weights(axis, pos, "absorb")
    assert A[0].sum() == pytest.approx(2 / 3)


def test_operator_rows_integrate_to_resolvent(sp, axes):
    samples = [stable_points(ALPHA, 256, np.random.SeedSequence(1))]
    K = resolvent_operator(sp, ALPHA, axes, 3.0, FK, samples)
    np.testing.assert_allclose(K.sum(axis=1), 1 / 3.0, rtol=1e-12)


def test_zero_drift(sp, axes):
    g = picard_solve(sp, ALPHA, 1.0, np.zeros((121, 1)), axes, FK)
    assert g.sup_U == 0 and g.sup_DU == 0


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_constant_drift(sp, axes, c):
    g = picard_solve(sp, ALPHA, 4.0, np.full((121, 1), c), axes, FK)
    np.testing.assert_allclose(g.U, c / 4.0, rtol=1e-12)
    assert g.sup_DU < 1e-12


def test_constant_drift_two_modes(sp):
    axes2 = box_axes(sp, ALPHA, 2, 15)
    b = np.broadcast_to([1.0, -0.5], (15, 15, 2))
    g = picard_solve(sp, ALPHA, 2.0, b, axes2, FeynmanKacConfig(n_paths=256))
    np.testing.assert_allclose(g.U, b / 2.0, rtol=1e-12)
    assert g.dims == 2


def test_grid_shape_checked(sp, axes):
    with pytest.raises(ParameterError):
        picard_solve(sp, ALPHA, 1.0, np.zeros((120, 1)), axes, FK)
    with pytest.raises(ParameterError):
        picard_solve(sp, ALPHA, 0.0, np.zeros((121, 1)), axes, FK)


def test_tanh_solution_properties(tanh_grid):
    g, _ = tanh_grid
    assert g.bound_ok(1.0)
    assert g.noise <= 1e-3
    assert g.meta["contraction_ratio"] < 1
    # odd drift, symmetric noise: odd solution
    np.testing.assert_allclose(g.U[:, 0], -g.U[::-1, 0], atol=5 * g.noise + 1e-12)


def test_noise_budget_enforced(sp, axes):
    b = np.tanh(axes[0])[:, None]
    with pytest.raises(NumericalError):
        picard_solve(sp, ALPHA, 1.0, b, axes, FeynmanKacConfig(n_paths=32), tol=1e-6)


def test_horizon_invariance(sp, axes, tanh_grid):
    g, b = tanh_grid
    longer = picard_solve(sp, ALPHA, 1.0, b, axes,
                          FeynmanKacConfig(n_paths=2048, t_max=2 * math.log(1e6), n_time=64))
    assert np.max(np.abs(longer.U - g.U)) <= 4 * math.hypot(g.noise, longer.noise) + 1e-4


def test_seed_agreement(sp, axes, tanh_grid):
    g, b = tanh_grid
    other = picard_solve(sp, ALPHA, 1.0, b, axes, FeynmanKacConfig(n_paths=2048, seed=1))
    assert np.max(np.abs(other.U - g.U)) <= 3 * math.hypot(g.noise, other.noise)


def test_norms_decrease_with_lambda(sp, axes):
    b = np.tanh(axes[0])[:, None]
    rows, monotone = norm_decay_probe(sp, ALPHA, [5.0, 1.0, 25.0], b, axes, FK)
    assert [r["lam"] for r in rows] == [1.0, 5.0, 25.0]
    assert monotone
    assert rows[-1]["sup_U"] <= 1.0 * (1 + rows[-1]["sup_DU"]) / 25.0


def test_residual_split_invariance(sp, tanh_grid):
    g, b = tanh_grid
    r1 = generator_residual(g, b, sp, ALPHA, split=1.0)
    r2 = generator_residual(g, b, sp, ALPHA, split=0.5)
    assert r1.quadrature_converged and r2.quadrature_converged
    assert np.nanmax(np.abs(r1.residual - r2.residual)) < 1e-3
    assert r1.core_sup < 1e-2


def test_residual_of_constant_solution(sp, axes):
    g = picard_solve(sp, ALPHA, 4.0, np.full((121, 1), 2.0), axes, FK)
    r = generator_residual(g, np.full(121, 2.0), sp, ALPHA)
    assert r.core_sup < 1e-10
    with pytest.raises(ParameterError):
        generator_residual(g, np.full(121, 2.0), sp, ALPHA, split=1e-6)


def test_grid_csv(tmp_path, sp, tanh_grid):
    g, b = tanh_grid
    res = generator_residual(g, b, sp, ALPHA)
    grid_to_csv(g, tmp_path / "g.csv", res, {"lam": 1.0})
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "# lam=1.0"
    assert lines[1] == "x1,U1,DU11,residual"
    assert len(lines) == 2 + 121
