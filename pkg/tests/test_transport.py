import math

import numpy as np
import pytest

from circbeta.rng import stream
from circbeta.transport import (PointCloud, brute_force_w1, complex_to_real, empirical_w1, exact_w1,
                                sliced_w1, subsample_w1, w1_convergence_experiment, w1_trend_check,
                                write_w1_table)


def _cloud(rng, m, dim):
    return PointCloud(rng.standard_normal((m, dim)))


def test_point_cloud_from_complex():
    c = PointCloud(np.array([[1 + 2j, 3 - 1j]]))
    assert c.dim == 4 and np.array_equal(c.points[0], [1, 2, 3, -1])
    assert np.array_equal(complex_to_real(np.array([1j])), [0.0, 1.0])
    with pytest.raises(ValueError):
        PointCloud(np.empty((0, 2)))


def test_trivial_cases():
    rng = stream(0)
    a = _cloud(rng, 7, 3)
    assert exact_w1(a, a) == 0.0
    u, v = np.array([[0.0, 3.0]]), np.array([[4.0, 0.0]])
    assert exact_w1(PointCloud(u), PointCloud(v)) == 5.0
    with pytest.raises(ValueError):
        exact_w1(a, _cloud(rng, 6, 3))
    with pytest.raises(ValueError):
        exact_w1(a, _cloud(rng, 7, 2))
    with pytest.raises(ValueError):
        empirical_w1(a, a, method="sinkhorn")


def test_two_point_clouds():
    a = PointCloud(np.array([[0.0], [1.0]]))
    b = PointCloud(np.array([[1.0], [3.0]]))
    assert exact_w1(a, b) == pytest.approx(min((1 + 2) / 2, (3 + 0) / 2))


def test_exact_equals_brute_force():
    rng = stream(1)
    for _ in range(100):
        m, dim = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        a, b = _cloud(rng, m, dim), _cloud(rng, m, dim)
        assert exact_w1(a, b) == pytest.approx(brute_force_w1(a, b), rel=1e-12, abs=0)


def test_metric_properties():
    rng = stream(2)
    for _ in range(20):
        a, b, c = (_cloud(rng, 12, 4) for _ in range(3))
        assert exact_w1(a, b) == pytest.approx(exact_w1(b, a), rel=1e-12)
        assert exact_w1(a, c) <= exact_w1(a, b) + exact_w1(b, c) + 1e-9
    a = _cloud(rng, 9, 2)
    shuffled = PointCloud(a.points[rng.permutation(9)])
    assert exact_w1(a, shuffled) == 0.0


def test_sliced_variant():
    rng = stream(3)
    a = _cloud(rng, 50, 4)
    assert sliced_w1(a, a) == 0.0
    shifted = PointCloud(a.points + np.array([1.0, 0, 0, 0]))
    val = sliced_w1(a, shifted)
    assert 0 < val <= 1.0 + 1e-12
    # unequal sizes are allowed for the sliced estimate
    assert sliced_w1(a, _cloud(rng, 30, 4)) > 0
    # in one dimension slicing is exact
    x, y = _cloud(rng, 40, 1), _cloud(rng, 40, 1)
    assert sliced_w1(x, y, directions=4) == pytest.approx(exact_w1(x, y), rel=1e-12)


def test_exact_cap():
    rng = stream(4)
    with pytest.raises(ValueError):
        exact_w1(_cloud(rng, 5, 1), _cloud(rng, 5, 1), cap=4)


def test_subsample_se():
    rng = stream(5)
    a, b = _cloud(rng, 200, 2), _cloud(rng, 200, 2)
    w, se = subsample_w1(a, b)
    assert w > 0 and se > 0
    assert math.isnan(subsample_w1(_cloud(rng, 10, 2), _cloud(rng, 10, 2))[1])


def test_convergence_experiment_small(tmp_path):
    rep = w1_convergence_experiment(2.0, 1, [10, 40], m=200, seed=1)
    assert [r["n"] for r in rep["rows"]] == [10, 40]
    assert all(r["w1"] >= 0 and r["floor"] == rep["floor"] for r in rep["rows"])
    assert set(w1_trend_check(rep)) == {"nonincreasing", "near_floor", "passed"}
    path = write_w1_table(rep, tmp_path / "w1.csv")
    assert path.read_text().splitlines()[0] == "n,d,beta,w1,se,floor,method"


def test_trend_check_detects_growth():
    rep = {"floor": 0.1, "floor_se": 0.01,
           "rows": [{"w1": 0.2, "se": 0.01}, {"w1": 0.5, "se": 0.01}]}
    out = w1_trend_check(rep)
    assert not out["nonincreasing"] and not out["near_floor"] and not out["passed"]
