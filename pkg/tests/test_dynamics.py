import math

import numpy as np
import pytest

from isal_fragility.dynamics import (
    DEFAULT_GROUND_MOTION,
    Accelerogram,
    GroundMotionParams,
    Instability,
    OscillatorSpec,
    capacity_from_quantile,
    generate_pool,
    generate_signal,
    integrate_response,
    pga,
    read_accelerogram,
    restoring_force_path,
    simulate_linear,
    simulate_nonlinear,
    spectral_accel,
    write_accelerogram,
)

SPEC = OscillatorSpec()


def signals(k, seed=0, params=DEFAULT_GROUND_MOTION):
    return [generate_signal(params, np.random.default_rng(np.random.SeedSequence([seed, i]))) for i in range(k)]


def test_free_vibration_matches_closed_form():
    dt = 2e-5
    acc = Accelerogram(np.zeros(int(1.0 / dt) + 1), dt)
    z0 = 1e-3
    _, _, zh, _ = integrate_response(acc, SPEC, linear=True, substeps=1, z0=z0, record=True)
    w, zeta = SPEC.omega, SPEC.zeta
    wd = w * math.sqrt(1 - zeta**2)
    t = acc.time
    exact = z0 * np.exp(-zeta * w * t) * (np.cos(wd * t) + zeta / math.sqrt(1 - zeta**2) * np.sin(wd * t))
    assert np.max(np.abs(zh - exact)) / z0 < 1e-4


def test_pushover_force_at_twice_yield():
    f = restoring_force_path(SPEC, np.linspace(0, 2 * SPEC.Y, 201))
    assert f[-1] == pytest.approx(5.922, abs=1e-3)
    assert f[100] == pytest.approx(SPEC.stiffness * SPEC.Y)


def test_hysteresis_unloads_elastically():
    k = SPEC.stiffness
    z = np.concatenate([np.linspace(0, 2 * SPEC.Y, 101), np.linspace(2 * SPEC.Y, 1.5 * SPEC.Y, 51)[1:]])
    f = restoring_force_path(SPEC, z)
    assert (f[100] - f[-1]) / (0.5 * SPEC.Y) == pytest.approx(k)
    lin = restoring_force_path(SPEC, z, linear=True)
    assert np.allclose(lin, k * z)


def test_resonant_sine_spectral_acceleration():
    dt = 0.005
    t = np.arange(0, 60 + dt / 2, dt)
    acc = Accelerogram(np.sin(2 * math.pi * 5.0 * t), dt)
    assert spectral_accel(acc, 5.0, 0.02) == pytest.approx(1 / (2 * 0.02), rel=0.05)


def test_dissipation_is_nondecreasing():
    for acc in signals(1000, seed=3):
        _, diss, _, eh = integrate_response(acc, SPEC, record=True)
        assert np.all(np.diff(eh) >= -1e-12 * max(diss, 1e-30))
        assert diss >= 0


def test_elastic_records_match_linear_solution():
    for acc in signals(20, seed=4):
        lin = simulate_linear(acc).D
        acc = acc.scaled(0.9 * SPEC.Y / lin)
        assert simulate_nonlinear(acc).D == pytest.approx(simulate_linear(acc).D, rel=1e-8)


def test_step_halving_changes_peak_displacement_little():
    for acc in signals(20, seed=5):
        d8 = simulate_nonlinear(acc, substeps=8).D
        d16 = simulate_nonlinear(acc, substeps=16).D
        assert abs(d8 - d16) / d16 < 1e-3


def test_linear_labels_are_monotone_in_amplitude():
    acc = signals(1, seed=6)[0]
    d = [simulate_linear(acc.scaled(c)).D for c in (0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(d) > 0)
    assert d[1] == pytest.approx(2 * d[0]) and d[2] == pytest.approx(2 * d[1])


def test_resolution_guard_and_instability():
    acc = Accelerogram(np.zeros(10), 0.05)
    with pytest.raises(ValueError):
        integrate_response(acc, SPEC, substeps=1)
    big = Accelerogram(np.full(2000, 1e6), 0.005)
    with pytest.raises(Instability):
        integrate_response(big, SPEC)


def test_zero_scale_generator_gives_silence():
    acc = generate_signal(GroundMotionParams(scale=0.0), np.random.default_rng(0))
    assert not acc.samples.any()
    out = simulate_nonlinear(acc)
    assert out.D == 0.0 and out.failure == 0


def test_generator_is_deterministic():
    a = generate_signal(DEFAULT_GROUND_MOTION, np.random.default_rng(9))
    b = generate_signal(DEFAULT_GROUND_MOTION, np.random.default_rng(9))
    np.testing.assert_array_equal(a.samples, b.samples)


def test_generator_variance_at_envelope_peak():
    params = GroundMotionParams(scale=0.7)
    env = params.envelope()
    near = np.flatnonzero(env > 0.995)
    vals = np.concatenate([generate_signal(params, np.random.default_rng(i)).samples[near] / env[near]
                           for i in range(1000)])
    assert vals.var() == pytest.approx(0.49, rel=0.10)


def test_pga_and_scaling():
    acc = Accelerogram(np.array([0.0, -3.0, 2.0]), 0.01)
    assert pga(acc) == 3.0 and pga(acc.scaled(2.0)) == 6.0


@pytest.mark.parametrize("suffix", [".txt", ".npz"])
def test_accelerogram_file_roundtrip(tmp_path, suffix):
    acc = signals(1, seed=7)[0]
    back = read_accelerogram(write_accelerogram(tmp_path / f"sig{suffix}", acc))
    assert back.dt == acc.dt
    np.testing.assert_array_equal(back.samples, acc.samples)


def test_capacity_quantile():
    assert capacity_from_quantile(np.arange(1, 101), 0.9) == pytest.approx(90.1)
    assert capacity_from_quantile([1.0], 0.9, override=0.02) == 0.02
    with pytest.raises(ValueError):
        capacity_from_quantile([], 0.9)


def test_pool_is_seeded_and_thread_independent():
    a = generate_pool(300, seed=11, threads=1)
    b = generate_pool(300, seed=11, threads=2)
    np.testing.assert_array_equal(a.pga, b.pga)
    np.testing.assert_array_equal(a.d_linear, b.d_linear)
    assert a.pga[5] == pga(a.signal(5))


def test_pool_labels_are_lazy_and_cached():
    pool = generate_pool(50, seed=12)
    assert pool.n_simulations == 0
    lab = pool.label(3)
    assert pool.n_simulations == 1
    assert pool.label(3) == lab and pool.n_simulations == 1
    assert lab == simulate_nonlinear(pool.signal(3), capacity=pool.capacity).failure
    sub = pool.subset([3, 4])
    assert sub.pga[0] == pool.pga[3] and sub.signal(1).samples[10] == pool.signal(4).samples[10]


def test_empty_pool():
    pool = generate_pool(0)
    assert len(pool) == 0 and pool.capacity == 2 * SPEC.Y
