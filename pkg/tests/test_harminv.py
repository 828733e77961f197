import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from epspec.dynamics import DensityState, TimeSignal, add_noise, emit_signal, population_observable
from epspec.harminv import (InsufficientSamples, InversionResult, Mode, OrderOverflow, RankDeficient,
                            closest_pair, ep_indicator, hankel_rank, invert, invert_polynomial,
                            noise_rank, reconstruct)
from epspec.liouville import build_ca_superoperator, build_tls_spec, vectorize_lgks

from conftest import ca_params


def _synth(omegas, amps, dt, n, t0=0.0):
    t = t0 + dt * np.arange(n)
    x = sum(d * np.exp(-1j * w * t) for w, d in zip(omegas, amps))
    return TimeSignal(t0, dt, np.asarray(x, dtype=complex))


def _match(found, expected):
    """Distance from each expected value to its nearest found value."""
    found = np.asarray(found)
    return np.array([np.min(np.abs(found - e)) for e in expected])


def _rms(x):
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _tls_signal(omega, delta=0.0, gamma=1.0, dt=0.1, n=600):
    L = vectorize_lgks(build_tls_spec(gamma, delta, omega))
    return emit_signal(L, DensityState.pure(2, 0), population_observable(2, (0,)), dt, n)


# -- invert --------------------------------------------------------------

def test_constant_signal():
    r = invert(TimeSignal(0.0, 0.5, np.full(20, 2.5 + 0j)))
    assert r.K == 1
    assert abs(r.modes[0].omega) < 1e-12
    assert abs(r.modes[0].amplitude - 2.5) < 1e-12


def test_damped_cosine():
    t = 0.2 * np.arange(200)
    s = TimeSignal(0.0, 0.2, 2 * np.exp(-0.1 * t) * np.cos(1.5 * t))
    r = invert(s)
    assert r.K == 2
    w = sorted(r.frequencies(), key=lambda z: z.real)
    np.testing.assert_allclose(w, [-1.5 - 0.1j, 1.5 - 0.1j], rtol=1e-9)
    for m in r.modes:
        assert abs(m.amplitude - 1.0) < 1e-9
    assert r.residual_rms <= 1e-10 * _rms(s.samples)


def test_nonzero_start_time_amplitudes_refer_to_t0():
    s = _synth([0.7 - 0.05j], [1.5 - 0.5j], 0.1, 100, t0=3.0)
    r = invert(s)
    assert abs(r.modes[0].amplitude - (1.5 - 0.5j)) < 1e-10
    np.testing.assert_allclose(reconstruct(r, s).samples, s.samples, atol=1e-12)


def test_modes_sorted_by_amplitude():
    s = _synth([1.0 - 0.1j, 2.0 - 0.2j, 0.3 - 0.01j], [0.1, 3.0, 1.0], 0.1, 200)
    amps = [abs(m.amplitude) for m in invert(s).modes]
    assert amps == sorted(amps, reverse=True)


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        invert(_synth([1.0], [1.0], 0.1, 7), K=3)


def test_invalid_order():
    with pytest.raises(ValueError):
        invert(_synth([1.0], [1.0], 0.1, 20), K=0)


def test_rank_deficient_reports_rank():
    s = _synth([1.0 - 0.1j, 2.0 - 0.1j], [1.0, 1.0], 0.1, 100)
    with pytest.raises(RankDeficient) as exc:
        invert(s, K=4)
    assert exc.value.effective_rank == 2
    assert invert(s, K=4, strict=False).K == 2


def test_zero_signal_is_rank_deficient():
    with pytest.raises(RankDeficient):
        invert(TimeSignal(0.0, 0.1, np.zeros(30, dtype=complex)))


def test_hankel_rank_counts_modes():
    s = _synth([0.5 - 0.01j, 1.1 - 0.02j, -2.0 - 0.1j], [1, 1, 1], 0.1, 300)
    assert hankel_rank(s) == 3


def test_noise_rank_ignores_noise():
    s = _synth([0.5 - 0.01j, -0.5 - 0.01j], [1, 1], 0.1, 400)
    noisy = add_noise(s, 1e-4, 3)
    assert hankel_rank(noisy) > 10
    assert noise_rank(noisy, 1e-4) == 2


def test_ca_frequencies_are_generator_eigenvalues():
    p = ca_params(delta=0.3, omega=0.2)
    L = build_ca_superoperator(p)
    s = emit_signal(L, DensityState.pure(4, 0), population_observable(4), 0.2, 1500)
    r = invert(s, rank_tol=1e-12)
    ev = np.linalg.eigvals(L.matrix)
    norm = np.linalg.norm(L.matrix, 2)
    lam = r.eigenvalues(min_rel_amp=1e-6)
    assert 0 < lam.size < ev.size
    assert np.max(_match(ev, lam)) <= 1e-6 * norm


@st.composite
def _mode_sets(draw):
    K = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    while True:
        r = rng.uniform(0.5, 1.0, K)
        phi = rng.uniform(-np.pi, np.pi, K)
        z = r * np.exp(1j * phi)
        gaps = np.abs(z[:, None] - z[None, :]) + 10 * np.eye(K)
        if gaps.min() > 0.1:
            break
    amps = (rng.uniform(0.5, 2.0, K) * np.exp(1j * rng.uniform(-np.pi, np.pi, K)))
    return 1j * np.log(z), amps


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(_mode_sets())
def test_exact_recovery(modes):
    w, d = modes
    s = _synth(w, d, 1.0, 8 * w.size + 40)
    r = invert(s, K=w.size)
    got_w = np.array([m.omega for m in r.modes])
    got_d = np.array([m.amplitude for m in r.modes])
    for wk, dk in zip(w, d):
        j = np.argmin(np.abs(got_w - wk))
        assert abs(got_w[j] - wk) <= 1e-8 * max(abs(wk), 1.0)
        assert abs(got_d[j] - dk) <= 1e-6 * abs(dk)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.2, 2.5), st.floats(0.01, 0.3), st.floats(0.2, 2.0)),
                min_size=1, max_size=3, unique_by=lambda x: round(x[0], 1)))
def test_conjugate_symmetry(triples):
    t = 0.1 * np.arange(400)
    x = sum(a * np.exp(-g * t) * np.cos(f * t) for f, g, a in triples)
    r = invert(TimeSignal(0.0, 0.1, x))
    w = np.array([m.omega for m in r.modes])
    d = np.array([m.amplitude for m in r.modes])
    for wk, dk in zip(w, d):
        j = np.argmin(np.abs(w - (-wk.conjugate())))
        assert abs(w[j] + wk.conjugate()) <= 1e-8 * max(abs(wk), 1.0)
        assert abs(d[j] - dk.conjugate()) <= 1e-6 * max(abs(dk), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60))
def test_shift_consistency(m):
    w = np.array([0.8 - 0.02j, -1.3 - 0.05j, 0.1 - 0.01j])
    d = np.array([1.0, 0.5 + 0.5j, 2.0])
    s = _synth(w, d, 0.1, 300)
    full = invert(s, K=3)
    part = invert(TimeSignal(0.0, s.dt, s.samples[m:]), K=3)
    for a in full.modes:
        b = min(part.modes, key=lambda q: abs(q.omega - a.omega))
        assert abs(b.omega - a.omega) <= 1e-6
        assert abs(b.amplitude - a.amplitude * np.exp(-1j * a.omega * m * s.dt)) <= 1e-6


# -- confluent fit -------------------------------------------------------

def test_polynomial_double_root():
    t = 0.05 * np.arange(400)
    s = TimeSignal(0.0, 0.05, (1 + 0.5 * t) * np.exp(-0.75 * t))
    r = invert_polynomial(s)
    assert len(r.modes) == 2
    by_order = {m.order: m for m in r.modes}
    assert set(by_order) == {0, 1}
    for m in r.modes:
        assert abs(m.omega - (-0.75j)) < 1e-8
    assert abs(by_order[0].amplitude - 1.0) < 1e-8
    assert abs(by_order[1].amplitude - 0.5) < 1e-8


def test_polynomial_plain_signal_matches_invert():
    s = _synth([1.0 - 0.1j, -0.4 - 0.05j], [1.0, 0.7j], 0.1, 200)
    a = invert(s)
    b = invert_polynomial(s)
    assert all(m.order == 0 for m in b.modes)
    np.testing.assert_allclose(sorted(a.frequencies(), key=np.real),
                               sorted(b.frequencies(), key=np.real), atol=1e-10)


def test_polynomial_at_tls_ep():
    r = invert_polynomial(_tls_signal(0.25))
    lin = [m for m in r.modes if m.order == 1]
    assert len(lin) == 1
    assert abs(lin[0].omega - (-0.75j)) < 1e-5
    base = next(m for m in r.modes if m.order == 0 and abs(m.omega - lin[0].omega) < 1e-12)
    assert abs(lin[0].amplitude) > 1e-3 * abs(base.amplitude)


def test_order_overflow():
    t = 0.05 * np.arange(400)
    s = TimeSignal(0.0, 0.05, (1 + t + t**2) * np.exp(-0.5 * t))
    assert max(m.order for m in invert_polynomial(s, merge_tol=1e-3).modes) == 2
    with pytest.raises(OrderOverflow):
        invert_polynomial(s, max_order=1, merge_tol=1e-3)


# -- EP indicator --------------------------------------------------------

def test_indicator_far_from_ep_is_order_one():
    s = _tls_signal(1.0)
    val = ep_indicator(invert(s))
    assert 0.05 < val < 5 * np.max(np.abs(s.samples))


def test_indicator_diverges_towards_tls_ep():
    vals = []
    for delta in (1e-1, 1e-2, 1e-3):
        s = _tls_signal(0.25 + delta)
        r = invert(s)
        assert r.residual_rms <= 1e-8
        vals.append(ep_indicator(r))
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] > 5 * vals[0]


def test_indicator_empty_raises():
    with pytest.raises(ValueError):
        ep_indicator(InversionResult((), 0.0, 0.1, 0))


def test_closest_pair():
    modes = [Mode(1.0, 1.0), Mode(1.1, 1.0), Mode(3.0, 1.0), Mode(1.05, 1.0, 1)]
    a, b = closest_pair(modes)
    assert {a.omega, b.omega} == {1.0, 1.1}


# -- reconstruct and serialization ---------------------------------------

def test_reconstruct_empty_is_zero():
    out = reconstruct(InversionResult((), 0.0, 0.1, 0), (0.0, 0.1, 10))
    assert np.all(out.samples == 0)
    assert len(out) == 10


def test_reconstruct_round_trip():
    s = _synth([0.5 - 0.02j, -1.2 - 0.1j, 2.0 - 0.3j], [1.0, 0.3 - 0.2j, 0.8j], 0.1, 300)
    r = invert(s)
    err = _rms(reconstruct(r, s).samples - s.samples)
    assert err <= 1e-10
    assert err == pytest.approx(r.residual_rms, abs=1e-14)


def test_reconstruct_accepts_time_array():
    s = _synth([0.5 - 0.02j], [1.0], 0.1, 50)
    r = invert(s)
    np.testing.assert_allclose(reconstruct(r, s.times).samples, s.samples, atol=1e-12)


def test_reconstruct_noisy_round_trip():
    sigma = 1e-3
    s = _synth([0.5 - 0.02j, -0.5 - 0.02j, 1.7 - 0.1j], [1.0, 1.0, 0.5], 0.1, 500)
    noisy = add_noise(s, sigma, 42)
    r = invert(noisy, K=3)
    err = _rms(reconstruct(r, noisy).samples - noisy.samples)
    assert err <= 3 * sigma
    assert err == pytest.approx(r.residual_rms, rel=1e-10)


def test_result_json_round_trip():
    s = _synth([0.5 - 0.02j, -1.2 - 0.1j], [1.0, 0.3 - 0.2j], 0.1, 100)
    r = invert(s)
    back = InversionResult.from_dict(json.loads(r.to_json()))
    assert back == r
