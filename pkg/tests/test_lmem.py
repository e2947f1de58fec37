import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import lpmv

from emns.core import Dataset, i_max
from emns.lmem import (
    LmemFitError, LmemModel, MultipoleBasis, actuation_matrix, basis_field, fit, n_terms, predict,
    solid_harmonic_fields, term_index,
)
from emns.synth import SynthEmnsConfig, collect_dataset, dipole_field, ground_truth_field

H = 1e-5  # central-difference step; error ~1e-8 of the Jacobian norm here


def jacobian(f, p, h=H):
    J = np.empty((3, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        J[:, a] = (f(p + e) - f(p - e)) / (2 * h)
    return J


def div_curl_rel(f, p, h=H):
    J = jacobian(f, p, h)
    s = np.linalg.norm(J)
    return abs(np.trace(J)) / s, np.linalg.norm(J - J.T) / s


def legendre_potential(r, l, m):
    """Schmidt semi-normalised real irregular solid harmonic via scipy."""
    rho = np.linalg.norm(r)
    theta = math.acos(r[2] / rho)
    phi = math.atan2(r[1], r[0])
    am = abs(m)
    norm = math.sqrt((1 if am == 0 else 2) * math.factorial(l - am) / math.factorial(l + am))
    trig = math.cos(am * phi) if m >= 0 else math.sin(am * phi)
    return norm * lpmv(am, l, math.cos(theta)) * trig / rho ** (l + 1)


@pytest.fixture(scope="module")
def cfg():
    return SynthEmnsConfig()


@pytest.fixture(scope="module")
def fitted(cfg):
    d = collect_dataset(200, cfg.replace(seed=21))
    return fit(d, MultipoleBasis(cfg.centers)), d


def test_term_count():
    assert [n_terms(L) for L in (1, 2, 3)] == [3, 8, 15]
    assert term_index(2) == [(1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2)]


def test_basis_matches_legendre_oracle():
    rng = np.random.default_rng(0)
    L = 5
    for _ in range(10):
        r = rng.normal(size=3)
        r *= rng.uniform(0.5, 2.0) / np.linalg.norm(r)
        fields = solid_harmonic_fields(r, L, reference_radius=1.0)[0]
        for q, (l, m) in enumerate(term_index(L)):
            h = 1e-6
            g = np.array([(legendre_potential(r + h * e, l, m) - legendre_potential(r - h * e, l, m)) / (2 * h)
                          for e in np.eye(3)])
            np.testing.assert_allclose(fields[q], -g, rtol=1e-6, atol=1e-7 * np.abs(g).max() + 1e-12)


def test_l1_spans_dipole_family():
    rng = np.random.default_rng(1)
    center = np.array([0.1, -0.2, 0.15])
    P = rng.uniform(-0.1, 0.1, (10, 3))
    B = np.stack([basis_field(center, 1, m, P) for m in (-1, 0, 1)], axis=-1)  # (10, 3, 3)
    for _ in range(5):
        mom = rng.normal(size=3)
        target = dipole_field(P - center, mom).reshape(-1)
        c, *_ = np.linalg.lstsq(B.reshape(-1, 3), target, rcond=None)
        resid = B.reshape(-1, 3) @ c - target
        assert np.linalg.norm(resid) < 1e-10 * np.linalg.norm(target)


@given(st.integers(1, 5).flatmap(lambda l: st.tuples(st.just(l), st.integers(-l, l))),
       st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_basis_div_curl_free(lm, x, y, z):
    l, m = lm
    center = np.array([0.2, 0.1, -0.15])
    f = lambda q: basis_field(center, l, m, q, reference_radius=0.2)
    div, curl = div_curl_rel(f, np.array([x, y, z]))
    assert div < 1e-6 and curl < 1e-6


def test_decay_rate():
    d = np.array([0.3, -0.5, 0.8])
    d /= np.linalg.norm(d)
    for l, m in term_index(4):
        b1 = basis_field(np.zeros(3), l, m, 0.15 * d)
        b2 = basis_field(np.zeros(3), l, m, 0.30 * d)
        ratio = np.linalg.norm(b2) / np.linalg.norm(b1)
        assert ratio == pytest.approx(2.0 ** -(l + 2), rel=1e-9)


def test_basis_errors():
    with pytest.raises(ZeroDivisionError):
        basis_field(np.zeros(3), 1, 0, np.zeros(3))
    with pytest.raises(ValueError):
        basis_field(np.zeros(3), 2, 3, np.ones(3))
    with pytest.raises(ValueError):
        MultipoleBasis(np.zeros((8, 3)), max_degree=6)


def test_linear_regime_fit_residual(linear_cfg):
    lin = linear_cfg
    d = collect_dataset(300, lin)
    model = fit(d, MultipoleBasis(lin.centers))
    res = model.diagnostics["residual_rmse_T"]
    assert res < 2 * lin.field_noise_sd
    keep = i_max(d.currents) <= 5.0
    assert model.diagnostics["n_samples"] == int(keep.sum())
    # residual is the noise floor: averaged field noise plus current-reading
    # noise propagated through the true actuation matrix
    P = d.positions[keep]
    A = np.stack([ground_truth_field(P, e, lin) for e in np.eye(8)], axis=-1)
    w = np.sqrt(lin.averaging_window)
    floor = np.sqrt((lin.field_noise_sd / w) ** 2
                    + (lin.current_noise_sd / w) ** 2 * np.mean(np.sum(A**2, axis=(1, 2))) / 3)
    assert res == pytest.approx(floor, rel=0.1)


def test_linear_regime_noise_free_residual(linear_cfg):
    lin = linear_cfg.replace(current_noise_sd=0.0, field_noise_sd=0.0)
    model = fit(collect_dataset(150, lin), MultipoleBasis(lin.centers))
    assert model.diagnostics["residual_rmse_T"] < 1e-12


def test_duplicate_samples_invariance(fitted):
    model, d = fitted
    idx = np.r_[np.arange(len(d)), np.arange(len(d))]
    dup = d.subset(idx)
    m2 = fit(dup, model.basis)
    np.testing.assert_allclose(m2.coefficients, model.coefficients, rtol=1e-10, atol=1e-10 * np.abs(model.coefficients).max())


def test_field_scaling_scales_coefficients(fitted):
    model, d = fitted
    d2 = Dataset(d.current_vector_id, d.sensor_id, d.positions, d.currents, 2 * d.fields, d.sensor_positions)
    m2 = fit(d2, model.basis)
    np.testing.assert_allclose(m2.coefficients, 2 * model.coefficients, rtol=1e-10,
                               atol=1e-10 * np.abs(model.coefficients).max())


def test_fit_is_bit_deterministic(fitted):
    model, d = fitted
    assert np.array_equal(fit(d, model.basis).coefficients, model.coefficients)


def test_least_squares_optimality(fitted):
    model, d = fitted
    keep = i_max(d.currents) <= 5.0
    P, I, B = d.positions[keep], d.currents[keep], d.fields[keep]

    def sse(coef):
        m = LmemModel(model.basis, coef)
        return float(np.sum((predict(m, P, I) - B) ** 2))

    base = sse(model.coefficients)
    for k in range(model.coefficients.shape[0]):
        for t in range(model.coefficients.shape[1]):
            for s in (1e-3, -1e-3):
                c = model.coefficients.copy()
                c[k, t] += s
                assert sse(c) >= base


def test_actuation_matrix_properties(fitted):
    model, _ = fitted
    p = np.array([0.03, -0.06, 0.02])
    A = actuation_matrix(model, p)
    assert A.shape == (3, 8)
    for k in range(8):
        e = np.zeros(8)
        e[k] = 1.0
        assert np.array_equal(predict(model, p, e), A @ e)
        np.testing.assert_array_equal(A @ e, A[:, k])
    assert np.all(predict(model, p, np.zeros(8)) == 0)
    A2 = actuation_matrix(model, p + 1e-6)
    assert np.abs(A2 - A).max() < 1e-4 * np.abs(A).max()


@given(st.lists(st.floats(-35, 35), min_size=8, max_size=8), st.lists(st.floats(-35, 35), min_size=8, max_size=8),
       st.floats(-3, 3))
def test_superposition_and_homogeneity(i, j, a):
    model = _fitted_cache()
    i, j = np.array(i), np.array(j)
    p = np.array([[0.05, 0.0, -0.1], [-0.02, 0.08, 0.04]])
    bi, bj = predict(model, p, i), predict(model, p, j)
    scale = np.abs(predict(model, p, np.abs(i) + np.abs(j))).max() + 1e-30
    assert np.abs(predict(model, p, i + j) - bi - bj).max() <= 1e-12 * scale
    assert np.abs(predict(model, p, a * i) - a * bi).max() <= 1e-12 * (abs(a) + 1) * scale


_CACHE = {}


def _fitted_cache():
    if "m" not in _CACHE:
        cfg = SynthEmnsConfig(seed=8)
        _CACHE["m"] = fit(collect_dataset(120, cfg), MultipoleBasis(cfg.centers))
    return _CACHE["m"]


def test_predicted_field_div_curl_free(fitted):
    model, _ = fitted
    rng = np.random.default_rng(4)
    for _ in range(30):
        i = rng.uniform(-35, 35, 8)
        div, curl = div_curl_rel(lambda q: predict(model, q, i), rng.uniform(-0.1, 0.1, 3))
        assert div < 1e-6 and curl < 1e-6


def test_lmem_degrades_with_current(cfg):
    d = collect_dataset(300, cfg.replace(seed=13))
    model = fit(d, MultipoleBasis(cfg.centers))
    err = np.linalg.norm(predict(model, d.positions, d.currents), axis=1) - np.linalg.norm(d.fields, axis=1)
    im = i_max(d.currents)
    low = np.sqrt(np.mean(err[im <= 5] ** 2))
    high = np.sqrt(np.mean(err[im > 30] ** 2))
    assert high > low


def test_too_few_low_current_samples(fitted):
    model, d = fitted
    with pytest.raises(LmemFitError, match="need at least"):
        fit(d, model.basis, current_cap=0.01)


def test_rank_deficiency_names_coil(fitted):
    model, d = fitted
    cur = np.array(d.currents)
    cur[:, 2] = 0.0
    bad = Dataset(d.current_vector_id, d.sensor_id, d.positions, cur, d.fields, d.sensor_positions)
    with pytest.raises(LmemFitError, match="coil 3"):
        fit(bad, model.basis)


def test_json_round_trip(tmp_path, fitted):
    model, d = fitted
    p = tmp_path / "m.json"
    model.save(p)
    back = LmemModel.load(p)
    assert np.array_equal(back.coefficients, model.coefficients)
    assert np.array_equal(back.predict(d.positions[:50], d.currents[:50]), model.predict(d.positions[:50], d.currents[:50]))
