"""Acceptance criteria 1-10 at their stated tolerances and runtime budgets.

Every test records one PASS/FAIL line, printed in the terminal summary
under "acceptance criteria".
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import sympy as sp

from epspec.dynamics import DensityState, TimeSignal, emit_signal, population_observable
from epspec.epfinder import (bloch_model, ca_model, classify, curve_distance,
                             mfrd_double_eigs, refine_ep, scan_map, trace_curve)
from epspec.estimate import (AtomicLineData, PipelineConfig, SimulatedOracle, chi_from_curve,
                             decay_rate_from_dipole, dephasing_from_split, run_pipeline)
from epspec.harminv import ep_indicator, invert, invert_polynomial
from epspec.liouville import (CaParams, build_ca_superoperator, build_tls_spec, ca_resonances,
                              mhz_to_rad_per_ns, vectorize_lgks)

from conftest import ACCEPTANCE, GAMMA_CA, ca_params

# Parameter-space location tolerance of a refined EP, shared by criteria 1 and 5.
REFINE_TOL = 1e-8
RB_GAMMA = 38.117e6 * 1e-9
CA_ABSOLUTE_MHZ = 755222766.2


@contextmanager
def criterion(n: int, title: str, budget: float):
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        dt = time.perf_counter() - t0
        ACCEPTANCE[n] = f"criterion {n:2d}: FAIL  {title} [{dt:.1f} s] {type(exc).__name__}: {str(exc)[:160]}"
        print(ACCEPTANCE[n])
        raise
    dt = time.perf_counter() - t0
    ok = dt <= budget
    verdict = "PASS" if ok else "FAIL"
    ACCEPTANCE[n] = f"criterion {n:2d}: {verdict}  {title} [{dt:.1f} s of {budget:g} s] {info['detail']}"
    print(ACCEPTANCE[n])
    assert ok, f"runtime {dt:.1f} s exceeds the {budget:g} s budget"


def test_criterion_01_tls_ep2():
    with criterion(1, "analytic two-level EP2", 10) as info:
        gamma = 1.0
        # oracle: at delta = 0 the (Y, Z) block [[-g/2, w], [-w, -g]] has
        # discriminant g**2/4 - 4 w**2, zero at w = g/4
        w_exact = max(np.roots([-4.0, 0.0, gamma ** 2 / 4]).real)
        m = bloch_model(gamma)
        cands = scan_map(m, np.linspace(-0.2, 0.2, 21), np.linspace(0.1, 0.4, 31))
        seed = min(cands, key=lambda c: abs(c.delta) + abs(c.omega - 0.25))
        c = refine_ep(m, seed, constraint="axis")
        err = max(abs(c.delta), abs(c.omega - w_exact))
        info["detail"] = f"error {err:.1e}, order {c.order}"
        assert err <= 1e-8
        assert c.order == 2


def _ep3_oracle():
    """Cusps of the closed Bloch family from resultants of p, p', p''."""
    lam, d, w = sp.symbols("lam d w")
    g = sp.Integer(1)
    M = sp.Matrix([[-g / 2, d, 0], [-d, -g / 2, w], [0, -w, -g]])
    p = sp.expand((M - lam * sp.eye(3)).det())
    # p'' is linear in lam; substitute its root into p and p'
    lam3 = sp.solve(sp.diff(p, lam, 2), lam)[0]
    A = sp.expand(p.subs(lam, lam3))
    B = sp.expand(sp.diff(p, lam).subs(lam, lam3))
    R = sp.Poly(sp.resultant(A, B, d), w)
    out = []
    for wv in set(sp.real_roots(R)):
        if wv > 0:
            common = sp.gcd(sp.Poly(A.subs(w, wv), d), sp.Poly(B.subs(w, wv), d))
            out += [(float(dv), float(wv)) for dv in sp.real_roots(common)]
    return out


def test_criterion_02_ep3_cusp():
    with criterion(2, "EP3 cusp vs resultant oracle", 30) as info:
        oracle = _ep3_oracle()
        assert len(oracle) == 2
        m = bloch_model(1.0)
        curve = trace_curve(m, refine_ep(m, (0.0, 0.25)), step=0.01, max_points=400)
        assert len(curve.cusps) == 2
        errs = []
        for c in curve.cusps:
            assert classify(m.at(c.params), c, raise_ambiguous=False).order == 3
            errs.append(min(np.hypot(c.delta - a, c.omega - b) for a, b in oracle))
        info["detail"] = f"max error {max(errs):.1e}"
        assert max(errs) <= 1e-6


def test_criterion_03_trace_sum_rules():
    with criterion(3, "trace sum rules", 5) as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            g, d, w, chi = rng.uniform(0.01, 5), rng.uniform(-5, 5), rng.uniform(0, 5), rng.uniform(0, 1)
            L = vectorize_lgks(build_tls_spec(g, d, w, chi))
            worst = max(worst, abs(L.trace() + 2 * g) / (2 * g))
            w21 = rng.uniform(0.1, 3)
            p = CaParams(g, chi, d, w, w21, rng.uniform(0.1, 3))
            L4 = build_ca_superoperator(p)
            worst = max(worst, abs(L4.trace() + 8 * g) / (8 * g))
        info["detail"] = f"max relative deviation {worst:.1e}"
        assert worst <= 1e-12


def test_criterion_04_ca_ep24():
    with criterion(4, "Ca EP2^4 at the resonances and Gamma/4", 120) as info:
        p = ca_params()
        m = ca_model(p)
        errs = []
        for res in ca_resonances(p):
            c = refine_ep(m, (res * 1.001, GAMMA_CA / 4 * 1.01))
            assert c.multiplicity == 4
            errs += [abs(c.delta - res) / abs(res), abs(c.omega - GAMMA_CA / 4) / (GAMMA_CA / 4)]
        info["detail"] = f"max relative error {max(errs):.1e}, multiplicity 4"
        assert max(errs) <= 1e-6


def _family_curve(chi: float):
    m = bloch_model(1.0, chi)
    mus = [mu.real for _, mu in mfrd_double_eigs(m.pencil("omega", 0.0))
           if abs(mu.imag) < 1e-6 and 0.1 < mu.real < 0.6]
    w0 = min(mus, key=lambda w: abs(w - 0.25))
    seed = refine_ep(m, (0.0, w0), active=("omega",))
    return m, trace_curve(m, seed, step=0.01, max_points=100)


def test_criterion_05_chi_family():
    with criterion(5, "branching-fraction curve family", 300) as info:
        chis = (0.0, 0.065, 0.3, 0.5)
        traced = {chi: _family_curve(chi) for chi in chis}
        sym, sep, trip = 0.0, np.inf, 0.0
        for chi, (m, curve) in traced.items():
            pts = curve.array()
            mirror = np.column_stack([-pts[:, 0], pts[:, 1]])
            sym = max(sym, np.max(curve_distance(m, mirror, [l.conjugate() for l in curve.lams])))
            est = chi_from_curve(curve, 1.0)
            trip = max(trip, abs(est.chi - chi))
        for a in chis:
            for b in chis:
                if a != b:
                    ca, mb = traced[a][1], traced[b][0]
                    sep = min(sep, np.max(curve_distance(mb, ca.points, ca.lams)))
        info["detail"] = (f"min separation {sep:.1e}, symmetry {sym:.1e}, "
                          f"chi round trip {trip:.1e}")
        assert sep > 10 * REFINE_TOL
        assert sym <= 1e-6
        assert trip <= 1e-3


def test_criterion_06_dephasing_split():
    with criterion(6, "dephasing split", 300) as info:
        gd = 0.01
        p = ca_params(gamma_deph=gd)
        m = ca_model(p)
        res = ca_resonances(p)[0]
        branches = []
        for sign in (-1, 1):
            pts = [refine_ep(m, (res + sign * (gd / 2 + 13 * w * w), w), active=("delta",),
                             lam=-GAMMA_CA / 2, classify_result=False).point()
                   for w in (0.001, 0.002, 0.003, 0.004)]
            branches.append(np.array(pts))
        est = dephasing_from_split(branches)
        rel = abs(est.gamma_deph - gd) / gd
        # the noiseless EP2^4 becomes two distinct EP2^2
        found = [refine_ep(m, (res * f, GAMMA_CA / 4)) for f in (1.002, 0.998)]
        kinds = [c.kind for c in found]
        gap = np.hypot(*(found[0].point() - found[1].point()))
        remnant = classify(m(res, GAMMA_CA / 4), raise_ambiguous=False)
        info["detail"] = (f"split {est.gamma_deph:.5f} (rel. error {rel:.1e}), "
                          f"EP2^4 -> {kinds}, separated by {gap:.1e}")
        assert rel <= 0.05
        assert kinds == ["EP2^2", "EP2^2"]
        assert all(c.multiplicity == 2 for c in found)
        assert gap > 1e-4
        assert remnant.kind != "EP2^4"


def _random_modes(rng, K):
    while True:
        z = rng.uniform(0.5, 1.0, K) * np.exp(1j * rng.uniform(-np.pi, np.pi, K))
        gaps = np.abs(z[:, None] - z[None, :]) + 10 * np.eye(K)
        # distinct roots, away from z = 1 so relative frequency error is defined
        if gaps.min() > 0.1 and np.abs(z - 1).min() > 0.1:
            return 1j * np.log(z)


def _amps(rng, k):
    return rng.uniform(0.5, 2.0, k) * np.exp(1j * rng.uniform(-np.pi, np.pi, k))


def test_criterion_07_harmonic_inversion():
    with criterion(7, "harmonic inversion exactness", 60) as info:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(500):
            K = int(rng.integers(1, 9))
            w, d = _random_modes(rng, K), _amps(rng, K)
            t = np.arange(8 * K + 40, dtype=float)
            s = TimeSignal(0.0, 1.0, (d * np.exp(-1j * np.outer(t, w))).sum(axis=1))
            got = np.array([m.omega for m in invert(s, K=K).modes])
            worst = max(worst, max(np.min(np.abs(got - x)) / abs(x) for x in w))
        worst_conf = 0.0
        for _ in range(50):
            k = int(rng.integers(0, 4))
            w = _random_modes(rng, k + 1)
            a, d = _amps(rng, 2), _amps(rng, k)
            t = np.arange(8 * (k + 2) + 40, dtype=float)
            x = (a[0] + a[1] * t) * np.exp(-1j * w[0] * t)
            x = x + (d * np.exp(-1j * np.outer(t, w[1:]))).sum(axis=1)
            r = invert_polynomial(TimeSignal(0.0, 1.0, x))
            first = [m for m in r.modes if m.order == 1]
            assert len(first) == 1
            worst_conf = max(worst_conf, abs(first[0].omega - w[0]) / abs(w[0]),
                             *(min(abs(m.omega - v) for m in r.modes) / abs(v) for v in w[1:]))
        info["detail"] = f"max relative error {worst:.1e} (500 signals), confluent {worst_conf:.1e}"
        assert worst <= 1e-8
        assert worst_conf <= 1e-6


def test_criterion_08_amplitude_divergence():
    with criterion(8, "amplitude divergence towards the EP", 60) as info:
        vals, resid = [], []
        for delta in np.logspace(-1, -4, 7):
            L = vectorize_lgks(build_tls_spec(1.0, 0.0, 0.25 + delta))
            s = emit_signal(L, DensityState.pure(2, 0), population_observable(2, (0,)), 0.1, 600)
            r = invert(s)
            vals.append(ep_indicator(r))
            resid.append(r.residual_rms)
        info["detail"] = f"indicator {vals[0]:.2f} -> {vals[-1]:.2f}, max residual {max(resid):.1e}"
        assert np.all(np.diff(vals) > 0)
        assert max(resid) <= 1e-8


@pytest.mark.slow
def test_criterion_09_signal_only_pipeline():
    with criterion(9, "signal-only Ca end-to-end", 600) as info:
        p = ca_params(chi=0.065)
        rep = run_pipeline(SimulatedOracle.ca(p), PipelineConfig("Ca4"))
        res = sorted(ca_resonances(p))
        got = sorted(r["value"] for r in rep.resonances)
        errs = {"gamma": abs(rep.gamma_total - GAMMA_CA) / GAMMA_CA,
                "chi": np.inf if rep.chi is None else abs(rep.chi - 0.065) / 0.065,
                "resonances": max(abs(a - b) / abs(b) for a, b in zip(got, res)) if len(got) == 2 else np.inf}
        info["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + \
            (f", failures {rep.failures}" if rep.failures else "")
        assert max(errs.values()) <= 1e-3


def test_criterion_10_input_plumbing():
    with criterion(10, "laboratory constants are inputs (plumbing only)", 60) as info:
        # Ca absolute line frequency: units conversion and detuning arithmetic
        w_abs = mhz_to_rad_per_ns(CA_ABSOLUTE_MHZ)
        assert w_abs / (2 * np.pi * 1e-3) == pytest.approx(CA_ABSOLUTE_MHZ, rel=1e-15)
        res = max(ca_resonances(ca_params()))
        assert (w_abs + res) - w_abs == pytest.approx(res, rel=1e-8)
        line = AtomicLineData(w_abs, 1.0)
        assert json.loads(json.dumps({"omega": line.omega}))["omega"] == line.omega
        # Rb: the laboratory rate survives the simulate -> estimate round trip
        rep = run_pipeline(SimulatedOracle.tls(RB_GAMMA), PipelineConfig("TLS"))
        rb_rt = abs(rep.gamma_total - RB_GAMMA) / RB_GAMMA
        rb_dip = abs(decay_rate_from_dipole(AtomicLineData(2 * np.pi * 384229.241689, 2.98931))
                     - RB_GAMMA) / RB_GAMMA
        info["detail"] = f"Rb round trip {rb_rt:.1e}, dipole rate {rb_dip:.1e}; not asserted as outputs"
        assert rb_rt <= 1e-4
        assert rb_dip <= 1e-4
