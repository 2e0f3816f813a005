import math

import numpy as np
import pytest

from raresim.errors import SimulationError
from raresim.model import ChainSystem, TerminalFunctional, ball_domain, box_domain
from raresim.presets import get_preset
from raresim.rng import NoiseStream, standard_normals
from raresim.sde import FunctionControl, euler_step, locate_exit, sample_paths, simulate, simulate_controlled

from conftest import const_sigma, free_bm_exit_probability, linear_chain, zero_chain


def test_euler_step_examples():
    chain = linear_chain()
    assert np.allclose(euler_step(chain, 0.0, [1.0, 2.0], 0.1, 0.0, [0.0]), [0.9, 1.9])
    assert np.allclose(euler_step(zero_chain(2), 0.0, [0.0, 0.0], 0.37, 1.0, [0.3]), [0.3, 0.0])
    assert np.allclose(euler_step(chain, 0.0, [1.0, 2.0], 0.1, 0.04, [0.5]), [1.0, 1.9])


def test_frozen_path_never_exits():
    dom = box_domain([1.0], start=[0.0])
    p = simulate(zero_chain(1), dom, TerminalFunctional.exit_indicator(), 0.0, 0.1, NoiseStream(1, 0))
    assert not p.exited and p.theta == 1.0 and p.girsanov_log_weight == 0.0
    assert np.all(p.states == 0.0)


def test_constant_velocity_crossing():
    sys = ChainSystem(1, 1, [lambda t, x: np.full(np.shape(x), 2.0)], const_sigma(1, [[1.0]]), 1.0)
    dom = box_domain([1.0], start=[0.0])
    p = simulate(sys, dom, TerminalFunctional.exit_indicator(), 0.0, 0.1, NoiseStream(1, 0))
    assert p.exited
    assert p.theta == pytest.approx(0.5, abs=1e-9)
    assert p.exit_state[0] == pytest.approx(1.0, abs=1e-9)
    assert p.cost == 0.0


def test_locate_exit_examples():
    dom = box_domain([1.0])
    frac, x = locate_exit(np.array([[-0.5]]), np.array([[1.5]]), dom)
    assert frac[0] == pytest.approx(0.75, abs=1e-9) and x[0, 0] == pytest.approx(1.0, abs=1e-9)
    frac, x = locate_exit(np.array([[0.2]]), np.array([[1.0]]), dom)
    assert frac[0] == 1.0 and x[0, 0] == 1.0


def test_locate_exit_circle():
    dom = ball_domain([0.0, 0.0], 1.0)
    a, b = np.array([0.1, -0.2]), np.array([1.3, 0.9])
    _, x = locate_exit(a[None], b[None], dom)
    # |a + s (b - a)| = 1
    u = b - a
    qa, qb, qc = u @ u, 2 * a @ u, a @ a - 1
    s = (-qb + math.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
    assert np.linalg.norm(x[0] - (a + s * u)) <= 1e-10 * dom.diameter * 10


def test_free_bm_exit_fraction_matches_series():
    sc = get_preset("free-bm-1")
    res = sample_paths(sc.system, sc.domain, 1.0, 0.01, 2024, 100_000)
    q = free_bm_exit_probability(1.0)
    p = res.exited.mean()
    se = math.sqrt(p * (1 - p) / len(res))
    assert abs(p - q) < 3 * se


def test_zero_control_reproduces_plain_path():
    sc = get_preset("ou-chain-2x1")
    plain = simulate(sc.system, sc.domain, sc.terminal, 0.5, 0.01, NoiseStream(3, 17))
    zero = FunctionControl(lambda t, x: np.zeros(np.shape(x)[:-1] + (1,)), 1)
    ctl = simulate_controlled(sc.system, sc.domain, sc.terminal, 0.5, 0.01, NoiseStream(3, 17), zero)
    assert np.array_equal(plain.states, ctl.states)
    assert ctl.girsanov_log_weight == 0.0 and ctl.weight == 1.0


def test_single_step_weight():
    c, eps, dt = 0.7, 0.5, 0.01
    sys = zero_chain(1)
    dom = box_domain([50.0], time_window=(0.0, dt), start=[0.0])
    ctl = FunctionControl(lambda t, x: np.full(np.shape(x)[:-1] + (1,), c), 1)
    p = simulate_controlled(sys, dom, TerminalFunctional.exit_indicator(), eps, dt, NoiseStream(5, 2), ctl)
    dW = math.sqrt(dt) * standard_normals(5, [2], 0, 1)[0, 0]
    assert p.girsanov_log_weight == pytest.approx(-c * dW / math.sqrt(eps) - c * c * dt / (2 * eps), rel=1e-12)
    assert p.states[-1, 0] == pytest.approx(c * dt + math.sqrt(eps) * dW, rel=1e-12)


def test_bounded_control_weight_mean_is_one():
    sc = get_preset("ou-chain-2x1")
    ctl = FunctionControl(lambda t, x: 0.8 * np.sign(x[..., :1]) + 0.3, 1)
    res = sample_paths(sc.system, sc.domain, 0.5, 0.02, 77, 100_000, ctl)
    z = np.exp(res.log_weight)
    assert abs(z.mean() - 1.0) < 3 * z.std() / math.sqrt(len(z))


def test_degenerate_blocks_stay_constant():
    sys = zero_chain(3)
    dom = box_domain([1.0, 1.0, 1.0], start=[0.0, 0.3, -0.2])
    res = sample_paths(sys, dom, 1.0, 0.01, 8, 200, record=True)
    for _, xs in res.paths:
        assert np.all(xs[:, 1] == 0.3) and np.all(xs[:, 2] == -0.2)


def test_results_independent_of_workers_and_chunks():
    sc = get_preset("ou-chain-2x1")
    a = sample_paths(sc.system, sc.domain, 0.5, 0.01, 9, 3000, workers=1, chunk_size=1000)
    b = sample_paths(sc.system, sc.domain, 0.5, 0.01, 9, 3000, workers=3, chunk_size=1000)
    c = sample_paths(sc.system, sc.domain, 0.5, 0.01, 9, 3000, workers=1, chunk_size=317)
    for other in (b, c):
        assert np.array_equal(a.theta, other.theta) and np.array_equal(a.exit_state, other.exit_state)


def test_exit_states_on_boundary_and_states_inside():
    sc = get_preset("ou-chain-2x1")
    res = sample_paths(sc.system, sc.domain, 0.5, 0.01, 4, 500, record=True)
    sd = sc.domain.signed_distance
    tol = 1e-10 * sc.domain.diameter
    assert np.all(np.abs(sd(res.exit_state[res.exited])) <= tol)
    for (ts, xs), ex in zip(res.paths, res.exited):
        inner = xs[:-1] if ex else xs
        assert np.all(sd(inner) < 0)
        assert np.all(np.diff(ts) >= 0) and ts[-1] <= 1.0


def test_guards():
    sc = get_preset("free-bm-1")
    with pytest.raises(SimulationError):
        sample_paths(sc.system, sc.domain, 1.0, 1e-3, 1, 10, max_steps=10)
    zero = FunctionControl(lambda t, x: 0 * x, 1)
    with pytest.raises(ValueError):
        sample_paths(sc.system, sc.domain, 0.0, 0.1, 1, 10, zero)
    with pytest.raises(SimulationError):
        blow = ChainSystem(1, 1, [lambda t, x: 1e308 * np.ones_like(x)], const_sigma(1, [[1.0]]), 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            sample_paths(blow, box_domain([1.0], time_window=(0.0, 4.0), start=[0.0]), 1.0, 4.0, 1, 2)


def test_recorded_running_log_weight():
    sc = get_preset("ou-chain-2x1")
    ctl = FunctionControl(lambda t, x: 0.8 * np.sign(x[..., :1] + 1e-9), 1)
    res = sample_paths(sc.system, sc.domain, 0.5, 0.01, 5, 300, ctl, record=True, chunk_size=128)
    for (ts, _), lw, final in zip(res.paths, res.path_log_weights, res.log_weight):
        assert len(lw) == len(ts) and lw[0] == 0.0 and lw[-1] == final
    assert res.exited.any() and not res.exited.all()
