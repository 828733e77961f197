import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epspec.epfinder import (EPS_MFRD, KAPPA_CAP, AmbiguousStructure, EpCandidate, LostCluster,
                             NotConverged, Pencil, SingularPencil, bloch_model, ca_model,
                             candidates_to_csv, chain_singular_values, classify, condeig,
                             curve_distance, curve_to_csv, mfrd_double_eigs, refine_ep, scan_map,
                             tls_model, to_json, trace_curve)
from epspec.liouville import BlochParams, build_bloch, ca_resonances

from conftest import GAMMA_CA, ca_params, random_hermitian

EP3 = (0.0962250448649376, 0.2721655269759086)


def _evals(c: EpCandidate) -> int:
    return int(next(n for n in c.notes if n.startswith("evaluations=")).split("=")[1])


@pytest.fixture(scope="module")
def bloch_curve():
    m = bloch_model(1.0)
    seed = refine_ep(m, (0.0, 0.25))
    return trace_curve(m, seed, step=0.01, max_points=400)


# -- Pencil and MFRD -----------------------------------------------------

def test_pencil_validation():
    with pytest.raises(ValueError):
        Pencil(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        Pencil(np.ones((1, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        Pencil(np.array([[np.nan, 0], [0, 0]]), np.eye(2))


def test_default_eps():
    assert EPS_MFRD == pytest.approx(6.06e-6, rel=2e-3)


def test_mfrd_two_by_two():
    p = Pencil(np.array([[0.0, 1.0], [1.0, 0.0]]), np.diag([1.0, -1.0]))
    out = mfrd_double_eigs(p)
    # each double eigenvalue is found once per ordering of the coalescing pair
    mus = np.array([mu for _, mu in out])
    assert mus.size >= 2
    for ref in (-1j, 1j):
        assert np.min(np.abs(mus - ref)) <= 10 * EPS_MFRD
    assert np.all(np.minimum(np.abs(mus - 1j), np.abs(mus + 1j)) <= 10 * EPS_MFRD)
    for lam, _ in out:
        assert abs(lam) <= 1e-3


def test_mfrd_bloch_pencil():
    m = bloch_model(1.0)
    out = mfrd_double_eigs(m.pencil("omega", 0.0))
    real = [mu.real for _, mu in out if abs(mu.imag) < 1e-6 and mu.real > 0]
    assert min(abs(mu - 0.25) for mu in real) <= 1e-4


def test_mfrd_singular_pencil():
    with pytest.raises(SingularPencil):
        mfrd_double_eigs(Pencil(np.eye(3), np.zeros((3, 3))))


def test_mfrd_size_cap():
    with pytest.raises(ValueError):
        mfrd_double_eigs(Pencil(np.eye(65), np.eye(65)))


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.8, 0.8), st.floats(0.0, 0.2))
def test_mfrd_soundness(delta, chi):
    m = bloch_model(1.0, chi)
    for lam, mu in mfrd_double_eigs(m.pencil("omega", delta)):
        M = m.pencil("omega", delta)(mu)
        sv = chain_singular_values(M, lam)
        assert sv[1] <= 10 * EPS_MFRD * np.linalg.norm(M)


# -- condition numbers ---------------------------------------------------

def test_condeig_hermitian(rng):
    for _, k in condeig(random_hermitian(rng, 6)):
        assert abs(k - 1.0) <= 1e-10


def test_condeig_upper_triangular():
    d = 1e-4
    for _, k in condeig(np.array([[1.0, 1.0], [0.0, 1.0 + d]])):
        assert k == pytest.approx(1 / d, rel=1e-3)


def test_condeig_caps_defective():
    ks = [k for _, k in condeig(np.array([[1.0, 1.0], [0.0, 1.0]]))]
    assert max(ks) <= KAPPA_CAP
    assert max(ks) > 1e7


def test_kappa_diverges_towards_bloch_ep():
    deltas = np.logspace(-2, -6, 9)
    kmax = np.array([max(k for _, k in condeig(build_bloch(BlochParams(1.0, 0.0, 0.25 + d))))
                     for d in deltas])
    assert kmax[-1] >= 1e2
    assert np.all(np.diff(kmax) > 0)
    slope, icpt = np.polyfit(np.log(deltas), np.log(kmax), 1)
    fit = slope * np.log(deltas) + icpt
    assert slope < 0
    assert np.max(np.abs(fit - np.log(kmax))) < 0.5


# -- classify ------------------------------------------------------------

def test_classify_bloch_ep2():
    c = classify(build_bloch(BlochParams(1.0, 0.0, 0.25)))
    assert c.kind == "EP2"
    assert c.order == 2
    assert c.multiplicity == 1
    assert abs(c.lam + 0.75) < 1e-6


def test_classify_hermitian_degeneracy(rng):
    u, _ = np.linalg.qr(random_hermitian(rng, 4))
    H = u @ np.diag([1.0, 1.0, 2.0, 3.0]) @ u.conj().T
    c = classify(H)
    assert c.kind == "degenerate"
    assert c.order == 1
    assert c.multiplicity == 0


def test_classify_jordan_three():
    J = np.array([[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 0.0, 2.0]])
    c = classify(J + np.diag([0.0, 0.0, 0.0]))
    assert c.kind == "EP3"
    assert c.order == 3


def test_classify_ambiguous_raises():
    with pytest.raises(AmbiguousStructure) as exc:
        classify(np.array([[1.0, 1.0], [0.0, 1.0 + 1e-4]]))
    assert exc.value.candidate.kind == "ambiguous"


def test_classify_ca_ep24():
    p = ca_params()
    _, res = ca_resonances(p)
    c = classify(ca_model(p)(res, GAMMA_CA / 4))
    assert c.kind == "EP2^4"
    assert c.multiplicity == 4
    assert sorted(c.orders)[-4:] == [2, 2, 2, 2]


def test_candidate_json_round_trip():
    c = classify(build_bloch(BlochParams(1.0, 0.0, 0.25)), EpCandidate({"delta": 0.0, "omega": 0.25}, -0.75))
    back = EpCandidate.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.kind == c.kind and back.orders == c.orders and back.lam == c.lam


# -- refine_ep -----------------------------------------------------------

def test_refine_tls():
    # the EP2s form a curve; the apex on the symmetry axis is the isolated target
    c = refine_ep(bloch_model(1.0), (1e-3, 0.2501), constraint="axis")
    assert abs(c.delta) <= 1e-8
    assert abs(c.omega - 0.25) <= 1e-8
    assert c.kind == "EP2"
    assert c.converged


def test_refine_vectorized_tls():
    c = refine_ep(tls_model(1.0), (1e-3, 0.2501), constraint="axis")
    assert abs(c.delta) <= 1e-8
    assert abs(c.omega - 0.25) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_refine_convergence_budget(dd, dw):
    m = bloch_model(1.0)
    x = (dd, 0.25 + dw)
    M = m(*x)
    ev = np.sort_complex(np.linalg.eigvals(M))
    gaps = [abs(ev[i] - ev[j]) for i in range(3) for j in range(i + 1, 3)]
    if min(gaps) > 1e-2 * np.linalg.norm(M):
        return
    c = refine_ep(m, x, tol=1e-9)
    assert c.residual <= 1e-9 * np.linalg.norm(m(*c.point()))
    assert _evals(c) <= 200


def test_refine_far_guess_loses_cluster():
    with pytest.raises(LostCluster):
        refine_ep(bloch_model(1.0), (0.0, 1.0))


def test_refine_not_converged_carries_candidate():
    with pytest.raises(NotConverged) as exc:
        refine_ep(bloch_model(1.0), (1e-3, 0.2501), tol=1e-30, max_evals=5)
    assert exc.value.candidate is not None
    c = refine_ep(bloch_model(1.0), (1e-3, 0.2501), tol=1e-30, max_evals=5, raise_on_failure=False)
    assert not c.converged


def test_refine_one_active_parameter():
    c = refine_ep(bloch_model(1.0), (0.0, 0.2499), active=("omega",))
    assert c.delta == 0.0
    assert abs(c.omega - 0.25) <= 1e-10


def test_refine_free_lands_on_curve():
    m = bloch_model(1.0)
    c = refine_ep(m, (1e-3, 0.2501))
    assert c.kind == "EP2"
    assert c.residual <= 1e-13 * np.linalg.norm(m.at(c.params))
    assert np.hypot(c.delta, c.omega - 0.25) <= 5e-3


def test_refine_idempotent_classification():
    m = bloch_model(1.0, 0.065)
    once = refine_ep(m, (0.001, 0.2557))
    twice = refine_ep(m, once)
    assert (once.order, once.multiplicity) == (twice.order, twice.multiplicity)


def test_refine_ca_ep24():
    p = ca_params()
    _, res = ca_resonances(p)
    c = refine_ep(ca_model(p), (res * 1.001, GAMMA_CA / 4 * 1.01))
    assert abs(c.delta - res) <= 1e-6 * res
    assert abs(c.omega - GAMMA_CA / 4) <= 1e-6 * GAMMA_CA / 4
    assert c.multiplicity == 4


def test_refine_order3_cusp():
    c = refine_ep(bloch_model(1.0), (EP3[0] + 1e-3, EP3[1] - 1e-3), order=3)
    assert c.order == 3
    np.testing.assert_allclose(c.point(), EP3, atol=1e-7)


def test_ca_30mhz_isolated_ep22():
    # regression pin: no closed form is known for these points
    m = ca_model(ca_params(30.0))
    for sign in (1, -1):
        c = refine_ep(m, (sign * 0.0041, 0.0235), lam=-0.0755 + 0.0713j)
        assert c.kind == "EP2^2"
        assert c.delta == pytest.approx(sign * 0.0041138323, abs=1e-8)
        assert c.omega == pytest.approx(0.0234946457, abs=1e-8)


def test_conjugate_pairing_of_candidates():
    for chi in (0.0, 0.065):
        cands = scan_map(bloch_model(1.0, chi), np.linspace(-0.6, 0.6, 13), np.linspace(0.0, 0.6, 13))
        for c in cands:
            assert abs(c.lam.imag) <= 1e-6 or any(abs(d.lam - c.lam.conjugate()) < 1e-3 for d in cands)


# -- trace_curve ---------------------------------------------------------

def test_bloch_curve_is_mirror_symmetric(bloch_curve):
    pts = bloch_curve.array()
    assert len(pts) > 20
    m = bloch_model(1.0)
    mirror = np.column_stack([-pts[:, 0], pts[:, 1]])
    dist = curve_distance(m, mirror, [l.conjugate() for l in bloch_curve.lams])
    assert np.max(dist) <= 1e-6


def test_bloch_curve_ends_at_cusps(bloch_curve):
    assert bloch_curve.stop_reason == "cusp|cusp"
    assert len(bloch_curve.cusps) == 2
    m = bloch_model(1.0)
    for c in bloch_curve.cusps:
        cls = classify(m.at(c.params), c, raise_ambiguous=False)
        assert cls.order == 3
        np.testing.assert_allclose([abs(c.delta), c.omega], EP3, atol=1e-6)


def test_curve_step_bound(bloch_curve):
    pts = bloch_curve.array()
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.max(steps) <= bloch_curve.max_step + 1e-12
    assert bloch_curve.max_step <= 0.01 * 1.5


def test_leaky_curve_differs(bloch_curve):
    m = bloch_model(1.0, 0.065)
    d = curve_distance(m, bloch_curve.points, bloch_curve.lams)
    assert np.max(d) > 10 * 1e-8


def test_curve_csv(bloch_curve):
    text = curve_to_csv(bloch_curve, ["model: bloch"])
    lines = text.splitlines()
    assert lines[0] == "# model: bloch"
    assert lines[1].startswith("delta,omega,lam_re,lam_im,order,multiplicity,kappa")
    assert len(lines) == 2 + len(bloch_curve) + len(bloch_curve.cusps)
    assert json.loads(to_json(bloch_curve))["stop_reason"] == "cusp|cusp"


# -- scan_map ------------------------------------------------------------

def test_scan_tls_covers_deltoid():
    m = bloch_model(1.0)
    cands = scan_map(m, np.linspace(-1, 1, 41), np.linspace(0, 0.6, 31))
    near = [c for c in cands if abs(c.delta) < 0.05 and abs(c.omega - 0.25) < 0.02]
    assert near
    best = refine_ep(m, min(near, key=lambda c: abs(c.omega - 0.25)))
    assert abs(best.omega - 0.25) <= 1e-8
    # every candidate sits close to the EP2 set
    for c in cands:
        assert c.gap <= 2e-2 * np.linalg.norm(m.at(c.params))


def test_scan_rejects_non_monotone_grid():
    with pytest.raises(ValueError):
        scan_map(bloch_model(1.0), [0.0, 0.2, 0.1], [0.1, 0.2])


def test_scan_empty_window():
    assert scan_map(bloch_model(1.0), np.linspace(2.0, 3.0, 3), np.linspace(5.0, 6.0, 3)) == []


def test_candidates_csv():
    cands = scan_map(bloch_model(1.0), np.linspace(-0.2, 0.2, 5), np.linspace(0.2, 0.3, 5))
    text = candidates_to_csv(cands)
    assert len(text.splitlines()) == 1 + len(cands)
    assert len(json.loads(to_json(cands))) == len(cands)
