import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raresim.action import (DiscretePath, action, asymptotic_comparison, blowup_probe, gap_trend,
                            integrate_slaved, minimize_action, path_action)
from raresim.model import ChainSystem, box_domain
from raresim.presets import get_preset

from conftest import const_sigma, zero_chain

OU_ACTION = 1.0 / (1.0 - math.exp(-2.0))


def lattice_oracle(steps=50, n1=201, n2=101):
    """Brute-force min exit action for ou-chain-2x1 (L=1, T=1) from the origin.

    Time is cut into ``steps`` intervals; block 1 jumps between lattice
    values with constant velocity, block 2 follows its ODE at the midpoint,
    and the value at off-lattice block-2 positions is linearly interpolated.
    """
    dt = 1.0 / steps
    x1 = np.linspace(-1, 1, n1)
    x2 = np.linspace(-1, 1, n2)
    V = np.full((n1, n2), np.inf)
    a, b = x1[:, None, None], x1[None, :, None]  # from, to
    mid = 0.5 * (a + b)
    cost = 0.5 * dt * ((b - a) / dt + mid) ** 2
    y = x2[None, None, :]
    y_new = y + dt * (mid - y)
    exits = (np.abs(b) >= 1.0) | (np.abs(y_new) >= 1.0)
    for _ in range(steps):
        Vn = np.empty((n1, n1, n2))
        for j in range(n1):
            Vn[:, j, :] = _interp_inf(np.clip(y_new[:, j, :], -1, 1), x2, V[j])
        total = cost + np.where(exits, 0.0, Vn)
        V = total.min(axis=1)
        V[0, :] = V[-1, :] = 0.0
    return float(np.interp(0.0, x2, V[n1 // 2]))


def _interp_inf(q, grid, vals):
    # linear interpolation that stays infinite next to infinite nodes
    idx = np.clip(np.searchsorted(grid, q) - 1, 0, len(grid) - 2)
    w = (q - grid[idx]) / (grid[idx + 1] - grid[idx])
    lo, hi = vals[idx], vals[idx + 1]
    with np.errstate(invalid="ignore"):
        out = (1 - w) * lo + w * hi
    return np.where(np.isfinite(lo) & np.isfinite(hi), out, np.inf)


def test_zero_cost_characteristic():
    sc = get_preset("ou-chain-2x1")
    t = np.linspace(0.0, 1.0, 2001)
    phi = 0.8 * np.exp(-t)[:, None]
    assert path_action(sc.system, 0.0, 1.0, phi, [0.0]) < 1e-7


def test_constant_speed_line():
    sys = zero_chain(1)
    phi = np.linspace(0.0, 0.6, 17)[:, None]
    assert path_action(sys, 0.0, 0.3, phi) == pytest.approx(0.6 ** 2 / (2 * 0.3), rel=1e-12)


def test_quadrature_refinement():
    sc = get_preset("ou-chain-2x1")
    rng = np.random.default_rng(3)
    c = rng.normal(size=4) * 0.3

    def phi(t):
        return (c[0] * t + c[1] * np.sin(3 * t) + c[2] * t ** 2 + c[3] * np.cos(2 * t) - c[3])[:, None]

    coarse = path_action(sc.system, 0.0, 1.0, phi(np.linspace(0, 1, 65)), [0.1])
    fine = path_action(sc.system, 0.0, 1.0, phi(np.linspace(0, 1, 641)), [0.1])
    assert abs(coarse - fine) <= 0.005 * fine


def test_action_of_path_object():
    sc = get_preset("ou-chain-2x1")
    phi = np.linspace(0, 1, 33)[:, None]
    X = integrate_slaved(sc.system, 0.0, np.array([1.0]), phi[None], np.array([0.0]))[0]
    path = DiscretePath(np.linspace(0, 1, 33), phi, X)
    assert action(path, sc.system) == pytest.approx(path_action(sc.system, 0.0, 1.0, phi, [0.0]))
    assert len(list(path.rows())) == 33 and path.theta == 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=9, max_size=20), st.floats(0.05, 2.0))
def test_action_nonnegative(vals, theta):
    sc = get_preset("ou-chain-3x1")
    phi = np.array([0.0] + vals)[:, None]
    assert path_action(sc.system, 0.0, theta, phi, [0.0, 0.0]) >= 0.0


def test_free_bm_minimum():
    sc = get_preset("free-bm-1")
    path, val = minimize_action(sc.system, sc.domain, knots=16, restarts=2)
    assert val.converged and val.value == pytest.approx(0.5, rel=1e-6)
    assert path.theta == pytest.approx(1.0) and abs(path.phi[-1, 0]) == pytest.approx(1.0)


def test_drift_driven_exit_costs_nothing():
    sys = ChainSystem(1, 1, [lambda t, x: np.full(np.shape(x), 3.0)], const_sigma(1, [[1.0]]), 1.0)
    dom = box_domain([1.0], start=[0.0])
    _, val = minimize_action(sys, dom, knots=16, restarts=2)
    assert val.value < 1e-6


@pytest.fixture(scope="module")
def ou_minimum():
    sc = get_preset("ou-chain-2x1")
    return sc, minimize_action(sc.system, sc.domain, knots=32, restarts=2)


def test_ou_chain_against_lattice_oracle(ou_minimum):
    _, (path, val) = ou_minimum
    assert val.converged
    oracle = lattice_oracle()
    assert abs(val.value - oracle) <= 0.02 * oracle
    assert val.value == pytest.approx(OU_ACTION, rel=1e-3)


def test_minimizer_is_locally_optimal(ou_minimum):
    sc, (path, val) = ou_minimum
    rng = np.random.default_rng(0)
    t = path.times
    tol = 1e-6 * (1 + val.value)
    for _ in range(100):
        bump = rng.normal(size=len(t)) * 0.02 * np.sin(np.pi * (t - t[0]) / (t[-1] - t[0]))
        phi = path.phi + bump[:, None]
        X = integrate_slaved(sc.system, 0.0, np.array([path.theta]), phi[None], np.array([0.0]))[0]
        if np.any(sc.domain.signed_distance(X[:-1]) >= 0):
            continue
        assert path_action(sc.system, 0.0, path.theta, phi, [0.0]) >= val.value - tol


def test_refinement_stability(ou_minimum):
    sc, (_, val) = ou_minimum
    _, fine = minimize_action(sc.system, sc.domain, knots=64, restarts=1)
    assert abs(fine.value - val.value) < 0.01 * val.value


def test_argument_guards():
    sc = get_preset("free-bm-1")
    with pytest.raises(ValueError):
        minimize_action(sc.system, sc.domain, knots=4)
    with pytest.raises(ValueError):
        minimize_action(sc.system, sc.domain, start=[2.0])


def test_blowup_examples():
    sc = get_preset("ou-chain-2x1")
    dom = sc.domain.with_start([0.5, 0.5])
    still = blowup_probe(sc.system, dom, lambda t: np.full((len(t), 1), 0.5), [1.0, 2.0, 4.0])
    assert np.allclose(still, 0.5 * 0.25 * np.array([1.0, 2.0, 4.0]), rtol=1e-12)
    eq = blowup_probe(sc.system, sc.domain, lambda t: np.zeros((len(t), 1)), [1.0, 2.0, 4.0])
    assert np.all(eq == 0.0)
    loop = blowup_probe(sc.system, sc.domain, lambda t: 0.5 * np.sin(2 * np.pi * t)[:, None], [1, 2, 4, 8])
    assert np.all(np.diff(loop) > 0)


def test_asymptotic_comparison_examples():
    c = 0.7
    rows = asymptotic_comparison([(e, math.exp(-c / e), 0.0) for e in (0.5, 0.25, 0.125)], 0.5)
    assert all(r.log_estimate == pytest.approx(c) and r.gap == pytest.approx(0.2) for r in rows)
    sure = asymptotic_comparison([(0.5, 1.0, 0.0), (0.25, 1.0, 0.0)], 0.0)
    assert all(r.log_estimate == 0.0 and r.gap == 0.0 for r in sure)
    flagged = asymptotic_comparison([(0.5, 0.0, math.nan)], 0.5)
    assert flagged[0].flagged and not gap_trend(flagged)
    shrinking = asymptotic_comparison([(0.5, math.exp(-0.6 / 0.5), 0.0), (0.25, math.exp(-0.55 / 0.25), 0.0)], 0.5)
    growing = asymptotic_comparison([(0.5, math.exp(-0.55 / 0.5), 0.0), (0.25, math.exp(-0.6 / 0.25), 0.0)], 0.5)
    assert gap_trend(shrinking) and not gap_trend(growing)
