import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from emns.core import power_of, read_kv, write_kv
from emns.synth import (
    MU0_OVER_4PI, CoilSpec, StandoffError, SynthEmnsConfig, collect_dataset, effective_moment,
    generate_current_vectors, ground_truth_field,
)

currents8 = hnp.arrays(np.float64, 8, elements=st.floats(-35, 35))


def _interior_points(rng, n):
    return rng.uniform(-0.1, 0.1, (n, 3))


def test_coil_spec_validation():
    with pytest.raises(ValueError):
        CoilSpec([0.3, 0, 0], [1, 1, 0], 1.0, 1.0)
    with pytest.raises(ValueError):
        CoilSpec([0.3, 0, 0], [1, 0, 0], 0.0, 1.0)


def test_config_invariants():
    cfg = SynthEmnsConfig()
    assert np.all(np.diag(cfg.coupling) == 1)
    with pytest.raises(ValueError):
        SynthEmnsConfig(coupling=np.full((8, 8), 0.2) + 0.8 * np.eye(8))
    with pytest.raises(ValueError):
        SynthEmnsConfig(field_noise_sd=-1)
    assert len(cfg.sensor_grid()) == 125 and len(cfg.active_sensors()) == 119


def test_coils_outside_workspace():
    cfg = SynthEmnsConfig()
    grid = np.array(list(cfg.sensor_grid().values()))
    for c in cfg.coils:
        assert np.min(np.linalg.norm(grid - c.center, axis=1)) > 0.05
        assert np.dot(c.axis, -c.center) > 0  # pointing at the centre


def test_effective_moment_examples():
    cfg = SynthEmnsConfig()
    assert np.all(effective_moment(np.zeros(8), cfg) == 0)
    c = cfg.coils[0]
    i = np.zeros(8)
    i[0] = 0.05  # gain*drive << m_sat
    m = effective_moment(i, cfg)[0]
    lin = c.axis * c.gain * (cfg.coupling[0] @ i)
    np.testing.assert_allclose(m, lin, rtol=1e-2)
    big = effective_moment(np.full(8, 1e6), cfg)
    np.testing.assert_allclose(np.linalg.norm(big, axis=1), [c.m_sat for c in cfg.coils], rtol=1e-12)


@given(currents8)
def test_moment_bounded_and_odd(i):
    cfg = SynthEmnsConfig()
    m = effective_moment(i, cfg)
    assert np.all(np.linalg.norm(m, axis=1) <= np.array([c.m_sat for c in cfg.coils]) * (1 + 1e-12))
    np.testing.assert_array_equal(effective_moment(-i, cfg), -m)


def test_zero_current_zero_field():
    cfg = SynthEmnsConfig()
    assert np.all(ground_truth_field(np.zeros(3), np.zeros(8), cfg) == 0)


def test_on_axis_dipole():
    coil = CoilSpec([0.0, 0.0, 0.3], [0.0, 0.0, -1.0], 2.0, 1e9)
    cfg = SynthEmnsConfig(coils=(coil,), coupling=np.eye(1), saturation=False)
    i = np.array([10.0])
    for d in (0.05, 0.1, 0.2):
        b = ground_truth_field(np.array([0, 0, 0.3 - d]), i, cfg)
        assert np.linalg.norm(b) == pytest.approx(MU0_OVER_4PI * 2 * 20.0 / d**3, rel=1e-12)


def test_standoff():
    cfg = SynthEmnsConfig()
    with pytest.raises(StandoffError):
        ground_truth_field(cfg.coils[2].center + 0.001, np.ones(8), cfg)


@given(currents8, st.floats(-3, 3))
def test_linear_mode_homogeneity(i, a):
    cfg = SynthEmnsConfig(saturation=False, coupling=np.eye(8))
    p = np.array([[0.03, -0.02, 0.07], [-0.1, 0.1, 0.0]])
    b = ground_truth_field(p, i, cfg)
    scale = np.abs(b).max() + 1e-30
    assert np.max(np.abs(ground_truth_field(p, a * i, cfg) - a * b)) <= 1e-12 * abs(a) * scale + 1e-300


@given(currents8, currents8)
def test_linear_mode_superposition(i, j):
    cfg = SynthEmnsConfig(saturation=False, coupling=np.eye(8))
    p = np.array([0.05, 0.05, -0.05])
    lhs = ground_truth_field(p, i + j, cfg)
    rhs = ground_truth_field(p, i, cfg) + ground_truth_field(p, j, cfg)
    scale = np.abs(ground_truth_field(p, np.abs(i) + np.abs(j), cfg)).max() + 1e-30
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale


def _divergence(f, p, h=1e-4):
    div = 0.0
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        div += (f(p + e)[a] - f(p - e)[a]) / (2 * h)
    return div


def test_noiseless_field_divergence_free():
    cfg = SynthEmnsConfig()
    rng = np.random.default_rng(1)
    h = 1e-4
    for _ in range(20):
        p = _interior_points(rng, 1)[0]
        i = rng.uniform(-35, 35, 8)
        f = lambda q: ground_truth_field(q, i, cfg)
        assert abs(_divergence(f, p, h)) < 1e-6 * np.linalg.norm(f(p)) / h


@given(st.integers(0, 7), st.floats(0, 34), st.floats(0.01, 1))
def test_single_coil_saturation_monotone(k, a, da):
    cfg = SynthEmnsConfig()
    p = np.array([0.02, -0.04, 0.01])
    e = np.zeros(8)
    e[k] = 1.0
    lo = np.linalg.norm(ground_truth_field(p, a * e, cfg))
    hi = np.linalg.norm(ground_truth_field(p, (a + da) * e, cfg))
    assert hi >= lo * (1 - 1e-12)


def test_saturation_calibration():
    """Within 5% of linear up to ~6 A, clearly bent at 20 A and above."""
    cfg = SynthEmnsConfig(coupling=np.eye(8))
    p = np.zeros(3)
    e = np.zeros(8)
    e[0] = 1.0
    b1 = np.linalg.norm(ground_truth_field(p, e, cfg))
    ratio = lambda a: np.linalg.norm(ground_truth_field(p, a * e, cfg)) / (a * b1)
    assert ratio(6.0) > 0.95
    assert ratio(20.0) < 0.8
    assert ratio(35.0) < 0.85


def test_generate_current_vectors():
    cfg = SynthEmnsConfig()
    cur, rate = generate_current_vectors(3590, cfg)
    assert cur.shape == (3590, 8)
    assert np.all(power_of(cur) <= 15000)
    assert np.all(np.abs(cur) <= 35)
    assert rate > 0.5
    # the largest coil current is spread across the full range
    hist = np.histogram(np.abs(cur).max(axis=1), bins=np.arange(0, 36, 5))[0]
    assert np.all(hist > 100)


def test_uniform_sampling_option():
    cfg = SynthEmnsConfig(current_sampling="uniform")
    cur, rate = generate_current_vectors(500, cfg)
    assert rate > 0.5 and np.all(np.abs(cur) <= 35)
    assert np.abs(cur).max(axis=1).min() > 5


def test_collect_dataset_shape_and_determinism():
    cfg = SynthEmnsConfig(seed=11)
    a = collect_dataset(7, cfg)
    b = collect_dataset(7, cfg)
    assert len(a) == 7 * 119
    assert a.content_hash() == b.content_hash()
    assert collect_dataset(7, cfg.replace(seed=12)).content_hash() != a.content_hash()
    assert len(collect_dataset(3, cfg, all_sensors=True)) == 375


def test_collect_noise_free_is_ground_truth():
    cfg = SynthEmnsConfig(field_noise_sd=0.0, current_noise_sd=0.0, seed=2)
    d = collect_dataset(5, cfg)
    for k in range(5):
        sel = d.current_vector_id == k
        truth = ground_truth_field(d.positions[sel], d.currents[sel][0], cfg)
        np.testing.assert_array_equal(d.fields[sel], truth)


def test_collect_noise_level():
    cfg = SynthEmnsConfig(seed=4)
    d = collect_dataset(40, cfg)
    resid = d.fields - ground_truth_field(d.positions, d.currents, cfg)
    # current noise also leaks into the residual, so only a loose check
    assert np.std(resid) > 0.5 * cfg.field_noise_sd / np.sqrt(8)


def test_kv_round_trip(tmp_path):
    cfg = SynthEmnsConfig(seed=9, grid_pitch=0.04, saturation=False)
    p = tmp_path / "s.cfg"
    write_kv(p, cfg.to_kv())
    back = SynthEmnsConfig.from_kv(read_kv(p))
    assert back.config_hash() == cfg.config_hash()
    with pytest.raises(KeyError):
        SynthEmnsConfig.from_kv({"bogus": "1"})
