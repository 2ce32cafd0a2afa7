import math

import numpy as np
import pytest
from scipy import integrate

from circbeta.field import (FourierField, closed_surrogate, coefficient_features, field_covariance_comparison,
                            log_char_poly_coeffs, sample_limiting_field, sobolev_norm_sq, tightness_report,
                            write_tightness, xn_norm_sq_from_sums, xn_yn_fields)
from circbeta.rng import stream
from circbeta.statistics import power_sums


def _x():
    return np.sort(stream(0).uniform(0, 2 * math.pi, 6))


def test_log_coeffs_n1_at_zero():
    f = log_char_poly_coeffs(np.array([0.0]), 5)
    for j in range(1, 6):
        assert f.coefficient(-j) == pytest.approx(-1 / j)
        assert f.coefficient(j) == 0
    assert f.coefficient(0) == 0
    short = log_char_poly_coeffs(np.array([0.0]), 3)
    assert np.allclose(short.coeffs, f.coeffs[2:-2])


def test_split_reproduces_log():
    x = _x()
    full = log_char_poly_coeffs(x, 8)
    X, Y = xn_yn_fields(x, 8)
    assert X.is_hermitian() and Y.is_hermitian()
    combo = X.coeffs + 1j * Y.coeffs
    assert np.allclose(combo[:8], full.coeffs[:8], atol=1e-15)
    assert np.allclose(combo[8:], 0, atol=1e-15)


def test_fields_real_on_grid():
    X, Y = xn_yn_fields(_x(), 20)
    theta = np.linspace(0, 2 * math.pi, 101)
    assert np.max(np.abs(X.evaluate(theta).imag)) < 1e-10
    assert np.max(np.abs(Y.evaluate(theta).imag)) < 1e-10


@pytest.mark.parametrize("x1", [0.0, 1.3])
def test_n1_matches_quadrature(x1):
    """Fourier coefficients of Re and Im of the principal log of 1 - e^{i(x1 - theta)}."""
    X, Y = xn_yn_fields(np.array([x1]), 4)

    def coeff(part, k):
        g = lambda t: part(np.log(1 - np.exp(1j * (x1 - t)))) * np.exp(-1j * k * t)
        pts = [x1 % (2 * math.pi)]
        re = integrate.quad(lambda t: g(t).real, 0, 2 * math.pi, points=pts, limit=400)[0]
        im = integrate.quad(lambda t: g(t).imag, 0, 2 * math.pi, points=pts, limit=400)[0]
        return (re + 1j * im) / (2 * math.pi)

    for k in (-3, -1, 1, 2):
        assert X.coefficient(k) == pytest.approx(coeff(np.real, k), abs=1e-6)
        assert Y.coefficient(k) == pytest.approx(coeff(np.imag, k), abs=1e-6)


def test_sobolev_norm():
    zero = FourierField(np.zeros(7))
    assert sobolev_norm_sq(zero, -0.6) == 0
    f = FourierField(np.array([1, 0, 1], dtype=complex))
    assert sobolev_norm_sq(f, 0.3) == pytest.approx(2 * 2**0.3)
    g = FourierField(3 * f.coeffs)
    assert sobolev_norm_sq(g, -1.0) == pytest.approx(9 * sobolev_norm_sq(f, -1.0))
    with pytest.raises(ValueError):
        FourierField(np.zeros(4))


def test_parseval_on_grid():
    X, _ = xn_yn_fields(_x(), 10)
    theta = np.arange(64) * 2 * math.pi / 64
    vals = X.evaluate(theta).real
    assert sobolev_norm_sq(X, 0.0) == pytest.approx(np.mean(vals**2), rel=1e-12)


def test_norm_from_sums_matches_field():
    x = _x()
    X, _ = xn_yn_fields(x, 12)
    assert xn_norm_sq_from_sums(power_sums(x, 12), 0.7) == pytest.approx(sobolev_norm_sq(X, -0.7))


def test_limiting_field_variances():
    X, Y = sample_limiting_field(4, 1.0, stream(1), size=20000)
    assert X.is_hermitian() and Y.is_hermitian()
    for j in range(1, 5):
        v = np.abs(X.coefficient(-j)) ** 2
        assert v.mean() == pytest.approx(2.0 / (4 * j), abs=4 * v.std() / math.sqrt(v.size))
        assert np.allclose(Y.coefficient(-j), -1j * X.coefficient(-j))
    single = sample_limiting_field(3, 2.0, stream(2))
    assert single[0].coeffs.shape == (7,)


def test_field_csv_round_trip(tmp_path):
    X, _ = xn_yn_fields(_x(), 5)
    X.to_csv(tmp_path / "x.csv")
    assert np.array_equal(FourierField.from_csv(tmp_path / "x.csv").coeffs, X.coeffs)
    assert (tmp_path / "x.csv").read_text().startswith("index,re,im")


def test_closed_surrogate_small():
    want = 0.5 * sum((1 + j * j) ** -0.6 * min(j, 2) / j**2 for j in range(1, 4))
    assert closed_surrogate(2, 0.6, 3) == pytest.approx(want)


def test_tightness_small(tmp_path):
    rep = tightness_report(2.0, 0.6, [10, 20], m=600, seed=3)
    assert rep["bounded"] and rep["closed_within_4se"] and rep["reliable"]
    write_tightness(rep, tmp_path)
    assert (tmp_path / "tightness.csv").exists()
    with pytest.raises(ValueError):
        tightness_report(2.0, 0.5, [10])
    with pytest.raises(ValueError):
        tightness_report(2.0, 0.6, [10], J=5)


def test_covariance_comparison_small():
    rep = field_covariance_comparison(2.0, 60, K=3, m=1500, seed=1)
    assert rep["passed"] and len(rep["z"]) == 12
    X, Y = xn_yn_fields(_x(), 3)
    assert coefficient_features(X, Y, 3).shape == (12,)
