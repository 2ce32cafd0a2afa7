import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from circbeta.dynamics import (CollisionError, DbmConfig, StepUnderflowError, Trajectory,
                               conditional_increments, dbm_evolve, dbm_step, drift, estimate_drift_limit,
                               evolve_batch, exchangeability_test, extrapolation_weights, relative_l1,
                               stationarity_test, symmetry_scores, time_grid)
from circbeta.ensemble import TWO_PI, EnsembleParams, verblunsky_sample
from circbeta.rng import stream

configs = st.lists(st.floats(0, TWO_PI, exclude_max=True), min_size=2, max_size=9).map(
    lambda v: np.sort(np.array(v)))


def _separated(x):
    return np.min(np.diff(x)) > 1e-3 and x[0] + TWO_PI - x[-1] > 1e-3


def test_drift_examples():
    assert np.allclose(drift(np.array([0.0, math.pi]), 3.0), 0, atol=1e-15)
    g = 0.7
    d = drift(np.array([0.0, g]), 2.0)
    assert d[0] == pytest.approx(1 / math.tan(-g / 2)) and d[1] == pytest.approx(-d[0])
    assert np.allclose(drift(TWO_PI * np.arange(3) / 3, 1.0), 0, atol=1e-14)
    with pytest.raises(CollisionError):
        drift(np.array([1.0, 1.0, 2.0]), 2.0)


def test_drift_matches_direct_cot():
    x = np.sort(stream(1).uniform(0, TWO_PI, 9))
    direct = [0.75 * sum(1 / math.tan((x[j] - x[i]) / 2) for i in range(9) if i != j) for j in range(9)]
    assert np.allclose(drift(x, 1.5), direct, atol=1e-11)


@settings(max_examples=60, deadline=None)
@given(configs, st.floats(0, TWO_PI), st.sampled_from([0.5, 1.0, 2.0, 4.0]))
def test_drift_symmetries(x, theta, beta):
    assume(_separated(x))
    d = drift(x, beta)
    assert abs(d.sum()) < 1e-9 * (1 + np.abs(d).max())
    rot = drift(x + theta, beta)
    assert np.allclose(rot, d, atol=1e-8 * (1 + np.abs(d).max()))
    assert np.allclose(drift(-x, beta), -d, atol=1e-8 * (1 + np.abs(d).max()))


def test_step_zero_noise_symmetric_is_identity():
    for n in (2, 5, 8):
        x = TWO_PI * np.arange(n) / n
        y = dbm_step(x, 2.0, 1e-3, np.zeros(n))
        assert np.allclose(y, x, atol=1e-12)


def test_step_small_dt_small_displacement():
    x = np.sort(stream(2).uniform(0, TWO_PI, 5))
    noise = stream(3).standard_normal(5)
    moves = [np.max(np.abs(np.angle(np.exp(1j * (dbm_step(x, 2.0, dt, noise) - x))))) for dt in (1e-2, 1e-4, 1e-6)]
    assert moves[0] > moves[1] > moves[2] and moves[2] < 1e-2


def test_step_output_in_configuration_space():
    x = np.array([0.1, 3.0, 6.2])
    y = dbm_step(x, 2.0, 1e-4, np.array([-1.0, 0.0, 1.0]))
    assert np.all((y >= 0) & (y < TWO_PI)) and np.all(np.diff(y) >= 0)


def test_n1_step_variance():
    noise = stream(4).standard_normal((100000, 1))
    y = dbm_step(np.full((100000, 1), math.pi), 2.0, 1e-3, noise)
    var = np.var(y - math.pi)
    assert var == pytest.approx(2e-3, rel=4 * math.sqrt(2 / 100000))


def test_n1_endpoint_variance():
    times, states = evolve_batch(np.full((20000, 1), math.pi), 1.0, 0.05, DbmConfig(dt=1e-3), stream(5))
    var = np.var(states[-1, :, 0] - math.pi)
    assert var == pytest.approx(0.1, rel=4 * math.sqrt(2 / 20000))


def test_time_grid_hits_endpoint_and_checkpoints():
    g = time_grid(0.0105, 1e-3, [0.0042])
    assert g[0] == 0 and g[-1] == 0.0105 and 0.0042 in g
    assert np.all(np.diff(g) > 0) and np.max(np.diff(g)) <= 1e-3 + 1e-15
    with pytest.raises(ValueError):
        time_grid(0.0, 1e-3)


def test_evolve_deterministic_and_recorded(tmp_path):
    x = np.sort(stream(6).uniform(0, TWO_PI, 4))
    a = dbm_evolve(x, 2.0, 0.01, DbmConfig(dt=1e-4), stream(7), checkpoints=[0.004])
    b = dbm_evolve(x, 2.0, 0.01, DbmConfig(dt=1e-4), stream(7), checkpoints=[0.004])
    assert np.array_equal(a.states, b.states)
    assert list(a.times) == [0.0, 0.004, 0.01]
    a.save(tmp_path / "tr")
    back = Trajectory.load(tmp_path / "tr")
    assert np.array_equal(back.states, a.states) and np.array_equal(back.times, a.times)
    assert (tmp_path / "tr.csv").read_text().startswith("t,x1")


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Trajectory([0.1], np.zeros((1, 3)))


def test_reject_and_halve_keeps_order():
    # a large kick that would swap the two close particles
    x = np.array([1.0, 1.001, 4.0])
    rng = stream(8)
    y = dbm_step(x, 2.0, 1e-4, np.array([30.0, -30.0, 0.0]), rng=rng)
    assert np.all(np.isfinite(y)) and np.all(np.diff(y) > 0)
    with pytest.raises(CollisionError):
        dbm_step(x, 2.0, 1e-4, np.array([30.0, -30.0, 0.0]))


def test_underflow_aborts():
    cfg = DbmConfig(dt=1e-3, max_halvings=2)
    with pytest.raises(StepUnderflowError):
        dbm_step(np.array([1.0, 1.0 + 1e-9]), 2.0, 1e-3, np.array([50.0, -50.0]), cfg, stream(0))


def test_drift_cap_policy():
    cfg = DbmConfig(collision_policy="drift-cap", drift_cap=1e-3)
    x = np.array([1.0, 1.0 + 1e-6, 3.0])
    y = dbm_step(x, 2.0, 1e-2, np.zeros(3), cfg)
    moved = np.abs(y - x)
    assert np.all(np.isfinite(y)) and moved.max() <= 1e-3 + 1e-12
    with pytest.raises(ValueError):
        DbmConfig(collision_policy="bounce").resolved(3)
    with pytest.raises(ValueError):
        DbmConfig(dt=-1.0).resolved(3)


def test_stationarity_trivial_and_flags_bad_start():
    params = EnsembleParams(10, 2.0, 3)
    rep = stationarity_test(params, 0.0, 600)
    assert rep["z"] == [0.0, 0.0, 0.0] and rep["stationary"]
    lattice = TWO_PI * np.arange(10) / 10 + 0.01
    bad = stationarity_test(params, 0.5, 600, DbmConfig(dt=1e-4), starts=lattice)
    assert not bad["stationary"]


def test_stationarity_small_run():
    rep = stationarity_test(EnsembleParams(8, 2.0, 4), 0.1 / 8, 800)
    assert rep["stationary"] and rep["reliable"]


def test_exchangeability_trivial_and_swap():
    rep = exchangeability_test(EnsembleParams(6, 2.0, 1), 0.0, 200)
    assert rep["max_abs_z"] == 0.0 and rep["symmetric"]
    u, v = stream(1).standard_normal(300), stream(2).standard_normal(300)
    a, b = symmetry_scores(u, v), symmetry_scores(v, u)
    assert all(a[k] == pytest.approx(-b[k]) for k in a)


def test_exchangeability_small_run():
    assert exchangeability_test(EnsembleParams(8, 2.0, 2), 0.02, 1000)["symmetric"]


def test_extrapolation_weights_recover_intercept():
    t = np.array([4.0, 2.0, 1.0])
    w = extrapolation_weights(t)
    assert w @ (3.0 + 0.5 * t) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        extrapolation_weights([1.0])


def test_relative_l1():
    assert relative_l1([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_l1([0.0], [0.0]) == 0.0
    assert relative_l1([1.1], [1.0]) == pytest.approx(0.1)


def test_drift_limit_k0_and_n1():
    rep = estimate_drift_limit(EnsembleParams(5, 2.0), 0, m=5)
    assert rep["relative_l1"] == 0.0
    rep = estimate_drift_limit(EnsembleParams(1, 2.0, 1), 2, t_grid=[4e-3, 2e-3, 1e-3], m=20, n_noise=64)
    assert rep["relative_l1"] < 0.05 and rep["passed"]


def test_control_variates_keep_expectation():
    x0 = verblunsky_sample(EnsembleParams(6, 2.0, 5), 10).angles
    grid = [2e-3, 1e-3]
    kw = dict(beta=2.0, d=2, t_grid=grid, n_noise=400, cfg=DbmConfig(dt=2e-5))
    raw = conditional_increments(x0, rng=stream(1), control_variate=False, **kw)
    cv = conditional_increments(x0, rng=stream(1), control_variate=True, **kw)
    for name in ("first", "mixed", "plain"):
        a, sa = raw.extrapolated(name)
        b, sb = cv.extrapolated(name)
        # same paths: the difference is a zero-mean sum, bounded by the raw noise
        assert np.all(np.abs(a - b) <= 5 * sa + 1e-12)
        assert np.mean(sb) <= np.mean(sa)
