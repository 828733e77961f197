"""Location, refinement, classification and continuation of exceptional points.

Models are maps ``(delta, omega) -> L`` that are affine in each parameter,
so a line through parameter space defines a pencil ``A + mu B``. Double
eigenvalues of a pencil are found with the method of fixed relative
distance (MFRD). Candidates are then refined by minimizing the coalescence
function ``F = (lam1 - lam2)**2`` of the tracked eigenvalue pair. ``F`` is
smooth at an EP2 even though the eigenvalues themselves are not, which is
what allows refinement below the ``sqrt(eps)`` floor of raw splittings.

For real-structured spectra (closed under conjugation, with the tracked pair
either real or a conjugate pair) ``F`` is real. EP2s then form curves, and
refinement or continuation is done by one-dimensional root finding. Pairs
with complex ``F`` give isolated EP2s, which are refined by simplex descent
on ``|F|``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq, least_squares, minimize, minimize_scalar

from .liouville import (BlochParams, CaParams, build_bloch, build_ca_superoperator,
                        build_leaky_bloch, build_tls_spec, vectorize_lgks)

__all__ = [
    "Pencil",
    "EpCandidate",
    "EpCurve",
    "ParametricModel",
    "SingularPencil",
    "NotConverged",
    "LostCluster",
    "AmbiguousStructure",
    "StallError",
    "EPS_MFRD",
    "KAPPA_CAP",
    "bloch_model",
    "tls_model",
    "ca_model",
    "mfrd_double_eigs",
    "condeig",
    "coalescence",
    "refine_ep",
    "classify",
    "trace_curve",
    "scan_map",
    "curve_distance",
    "candidates_to_csv",
    "curve_to_csv",
]

EPS = np.finfo(float).eps
EPS_MFRD = EPS ** (1.0 / 3.0)
KAPPA_CAP = 1e16
KAPPA_EP = 1e6
KAPPA_DIAG = 1e3
PARAMS = ("delta", "omega")
# coalescence residual |F| / ||L||^2 reachable in double precision
FLOOR = 4 * EPS


class SingularPencil(RuntimeError):
    """The MFRD determinant pencil carries no information (B = 0)."""


class NotConverged(RuntimeError):
    """Refinement stopped before reaching the target; ``candidate`` is the best point."""

    def __init__(self, msg: str, candidate: "EpCandidate | None" = None):
        super().__init__(msg)
        self.candidate = candidate


class LostCluster(RuntimeError):
    """The tracked eigenvalue pair could not be followed unambiguously."""


class AmbiguousStructure(RuntimeError):
    """Rank or conditioning decisions are too close to their thresholds."""

    def __init__(self, msg: str, candidate: "EpCandidate | None" = None):
        super().__init__(msg)
        self.candidate = candidate


class StallError(RuntimeError):
    """Curve continuation could not make progress."""

    def __init__(self, msg: str, curve: "EpCurve | None" = None):
        super().__init__(msg)
        self.curve = curve


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pencil:
    """Affine matrix family ``A + mu B`` in the parameter ``param``."""

    A: np.ndarray
    B: np.ndarray
    param: str = "omega"

    def __post_init__(self) -> None:
        a = np.asarray(self.A, dtype=complex)
        b = np.asarray(self.B, dtype=complex)
        if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
            raise ValueError("A and B must be square, equally sized, with n >= 2")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("pencil has non-finite entries")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)

    def __call__(self, mu: complex) -> np.ndarray:
        return self.A + mu * self.B


@dataclass(frozen=True)
class EpCandidate:
    """A point of (near) eigenvalue coalescence.

    Attributes
    ----------
    params : dict
        Parameter values, keys ``"delta"`` and ``"omega"``.
    lam : complex
        Tracked degenerate eigenvalue (cluster mean).
    orders : tuple of int
        Largest Jordan block size of every eigenvalue cluster found.
    cluster_lams : tuple of complex
        Cluster means matching ``orders``.
    multiplicity : int
        Number of clusters with order >= 2.
    kappa : float
        Largest eigenvalue condition number at the point.
    gap : float
        Raw separation of the tracked pair.
    residual : float
        Coalescence residual ``|F| / ||L||`` (same units as ``lam``).
    kind : str
        ``"candidate"`` (unclassified), ``"EP2"``, ``"EP2^n"``, ``"EP3"``,
        ``"degenerate"`` (diagonalizable) or ``"ambiguous"``.
    converged : bool
    """

    params: Mapping[str, float]
    lam: complex
    orders: tuple[int, ...] = ()
    cluster_lams: tuple[complex, ...] = ()
    multiplicity: int = 0
    kappa: float = 1.0
    gap: float = 0.0
    residual: float = 0.0
    kind: str = "candidate"
    converged: bool = True
    notes: tuple[str, ...] = ()

    @property
    def delta(self) -> float:
        return float(self.params["delta"])

    @property
    def omega(self) -> float:
        return float(self.params["omega"])

    @property
    def order(self) -> int:
        """Jordan order of the cluster containing ``lam`` (0 if unknown)."""
        if not self.orders:
            return 0
        i = int(np.argmin([abs(c - self.lam) for c in self.cluster_lams]))
        return self.orders[i]

    def point(self) -> np.ndarray:
        return np.array([self.delta, self.omega])

    def to_dict(self) -> dict:
        return {"delta": self.delta, "omega": self.omega, "lam_re": self.lam.real,
                "lam_im": self.lam.imag, "order": self.order, "orders": list(self.orders),
                "multiplicity": self.multiplicity, "kappa": self.kappa, "gap": self.gap,
                "residual": self.residual, "kind": self.kind, "converged": self.converged,
                "notes": list(self.notes)}

    @classmethod
    def from_dict(cls, d: dict) -> "EpCandidate":
        return cls({"delta": d["delta"], "omega": d["omega"]}, complex(d["lam_re"], d["lam_im"]),
                   tuple(d.get("orders", ())), (), int(d.get("multiplicity", 0)),
                   float(d.get("kappa", 1.0)), float(d.get("gap", 0.0)),
                   float(d.get("residual", 0.0)), d.get("kind", "candidate"),
                   bool(d.get("converged", True)), tuple(d.get("notes", ())))


@dataclass(frozen=True)
class EpCurve:
    """Ordered samples along a curve of EP2s."""

    points: tuple[tuple[float, float], ...]
    lams: tuple[complex, ...]
    branch: int = 0
    closed: bool = False
    max_step: float = 0.0
    cusps: tuple[EpCandidate, ...] = ()
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.points)

    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def mirrored(self) -> "EpCurve":
        pts = tuple((-d, w) for d, w in self.points)
        return replace(self, points=pts)

    def to_dict(self) -> dict:
        return {"branch": self.branch, "closed": self.closed, "max_step": self.max_step,
                "stop_reason": self.stop_reason,
                "points": [{"delta": d, "omega": w, "lam_re": l.real, "lam_im": l.imag}
                           for (d, w), l in zip(self.points, self.lams)],
                "cusps": [c.to_dict() for c in self.cusps]}


@dataclass(frozen=True, eq=False)
class ParametricModel:
    """Matrix-valued map ``(delta, omega) -> L``, affine in each argument.

    Parameters
    ----------
    builder : callable
        ``builder(delta, omega)`` returns a square complex matrix.
    name : str
    scale : float
        Natural rate scale (e.g. the total decay rate), used for default step
        sizes.
    """

    builder: Callable[[float, float], np.ndarray]
    name: str = "model"
    scale: float = 1.0

    def __call__(self, delta: float, omega: float) -> np.ndarray:
        return np.asarray(self.builder(float(delta), float(omega)), dtype=complex)

    def at(self, params: Mapping[str, float] | Sequence[float]) -> np.ndarray:
        if isinstance(params, Mapping):
            return self(params["delta"], params["omega"])
        return self(params[0], params[1])

    def pencil(self, param: str, fixed: float) -> Pencil:
        """Pencil along ``param`` with the other parameter held at ``fixed``."""
        if param == "omega":
            a = self(fixed, 0.0)
            b = self(fixed, 1.0) - a
        elif param == "delta":
            a = self(0.0, fixed)
            b = self(1.0, fixed) - a
        else:
            raise ValueError(f"unknown parameter {param!r}")
        return Pencil(a, b, param)


def bloch_model(gamma: float = 1.0, chi: float = 0.0) -> ParametricModel:
    """3x3 (``chi = 0``) or 4x4 (``chi > 0``) Bloch matrix family."""
    if chi == 0:
        return ParametricModel(lambda d, w: build_bloch(BlochParams(gamma, d, w, 0.0)),
                               f"bloch(gamma={gamma})", gamma)
    return ParametricModel(lambda d, w: build_leaky_bloch(BlochParams(gamma, d, w, chi)),
                           f"leaky_bloch(gamma={gamma}, chi={chi})", gamma)


def tls_model(gamma: float = 1.0, chi: float = 0.0) -> ParametricModel:
    """Vectorized two-level generator family."""
    return ParametricModel(lambda d, w: vectorize_lgks(build_tls_spec(gamma, d, w, chi)).matrix,
                           f"tls(gamma={gamma}, chi={chi})", gamma)


def ca_model(base: CaParams) -> ParametricModel:
    """Four-level generator family; ``base.delta`` and ``base.omega`` are ignored."""
    return ParametricModel(lambda d, w: build_ca_superoperator(base.replace(delta=d, omega=w)).matrix,
                           f"ca({base})", base.gamma)


def _params(point) -> dict[str, float]:
    if isinstance(point, Mapping):
        return {"delta": float(point["delta"]), "omega": float(point["omega"])}
    return {"delta": float(point[0]), "omega": float(point[1])}


# ---------------------------------------------------------------------------
# MFRD
# ---------------------------------------------------------------------------

def _pair_near(ev: np.ndarray, lam: complex) -> tuple[int, int]:
    idx = np.argsort(np.abs(ev - lam))
    return int(idx[0]), int(idx[1])


def polish_double_eig(p: Pencil, lam: complex, mu: complex) -> complex:
    """Replace ``lam`` by the mean of the two eigenvalues of ``A + mu B`` nearest it."""
    ev = np.linalg.eigvals(p(mu))
    i, j = _pair_near(ev, lam)
    return complex(0.5 * (ev[i] + ev[j]))


def chain_singular_values(M: np.ndarray, lam: complex) -> np.ndarray:
    """Singular values of ``[[M - lam, -I], [0, M - lam]]`` in ascending order.

    Its null space has dimension two exactly when ``lam`` is an eigenvalue of
    algebraic multiplicity at least two, defective or not.
    """
    n = M.shape[0]
    N = M - lam * np.eye(n)
    big = np.block([[N, -np.eye(n)], [np.zeros((n, n)), N]])
    return np.sort(np.linalg.svd(big, compute_uv=False))


def mfrd_double_eigs(p: Pencil, eps: float | None = None, deflation: float = 1e-12,
                     polish: bool = True, verify: bool = True) -> list[tuple[complex, complex]]:
    """Double eigenvalues ``(lam, mu)`` of ``A + mu B`` by fixed relative distance.

    The pair ``lam`` and ``(1 + eps) lam`` of eigenvalues of ``A + mu B`` is
    recast as the two-parameter problem with operator determinants

        D0 = -I (x) B + (1 + eps) B (x) I
        D1 = -A (x) B + B (x) A
        D2 =  I (x) A - (1 + eps) A (x) I

    ``mu`` comes from the generalized eigenproblem ``mu D0 z = D2 z`` (QZ) and
    ``lam`` from the Rayleigh quotient of ``lam D0 z = D1 z`` on the same
    eigenvector. Infinite and indeterminate eigenvalues are dropped. With
    ``polish`` the returned ``lam`` is the mean of the two eigenvalues of
    ``A + mu B`` nearest the quotient. With ``verify`` a pair is kept only if
    the two smallest singular values of :func:`chain_singular_values` are
    below ``10 eps ||A + mu B||``; this removes the spurious solutions that
    singular pencils (e.g. trace-preserving generators) produce.

    Results are approximations with error ``O(eps)`` in ``mu``.
    """
    if eps is None:
        eps = EPS_MFRD
    if not eps > 0:
        raise ValueError("eps must be positive")
    A, B = p.A, p.B
    n = A.shape[0]
    if n * n > 4096:
        raise ValueError(f"pencil of size {n} exceeds the n^2 <= 4096 cap")
    nb = np.linalg.norm(B)
    if nb == 0:
        raise SingularPencil("B = 0: the pencil does not depend on its parameter")
    eye = np.eye(n)
    d0 = -np.kron(eye, B) + (1 + eps) * np.kron(B, eye)
    d1 = -np.kron(A, B) + np.kron(B, A)
    d2 = np.kron(eye, A) - (1 + eps) * np.kron(A, eye)
    (al, be), vr = sla.eig(d2, d0, right=True, homogeneous_eigvals=True)
    n0 = np.linalg.norm(d0)
    n2 = max(np.linalg.norm(d2), 1e-300)
    out = []
    for k in range(al.size):
        a_s, b_s = abs(al[k]) / n2, abs(be[k]) / n0
        h = np.hypot(a_s, b_s)
        if h == 0 or b_s <= deflation * h:
            continue
        mu = al[k] / be[k]
        z = vr[:, k]
        dz = d0 @ z
        den = np.vdot(dz, dz)
        if den == 0:
            continue
        lam = np.vdot(dz, d1 @ z) / den
        if not (np.isfinite(lam) and np.isfinite(mu)):
            continue
        if polish:
            lam = polish_double_eig(p, lam, mu)
        if verify:
            M = p(mu)
            sv = chain_singular_values(M, lam)
            if sv[1] > 10 * eps * np.linalg.norm(M):
                continue
        out.append((complex(lam), complex(mu)))
    return out


# ---------------------------------------------------------------------------
# Condition numbers and coalescence measures
# ---------------------------------------------------------------------------

def condeig(M: np.ndarray) -> list[tuple[complex, float]]:
    """Eigenvalues with condition numbers ``||y|| ||x|| / |y^H x|``.

    Values are capped at :data:`KAPPA_CAP`; a capped entry signals a
    numerically defective eigenvalue.
    """
    M = np.asarray(M, dtype=complex)
    w, vl, vr = sla.eig(M, left=True, right=True)
    out = []
    for k in range(w.size):
        x, y = vr[:, k], vl[:, k]
        den = abs(np.vdot(y, x))
        num = np.linalg.norm(x) * np.linalg.norm(y)
        kap = KAPPA_CAP if den <= num / KAPPA_CAP else max(num / den, 1.0)
        out.append((complex(w[k]), float(kap)))
    return out


def coalescence(M: np.ndarray, lam_ref: complex) -> tuple[complex, complex, complex, np.ndarray]:
    """``(F, lam_mean, gap, eigenvalues)`` for the pair nearest ``lam_ref``."""
    ev = np.linalg.eigvals(M)
    i, j = _pair_near(ev, lam_ref)
    diff = ev[i] - ev[j]
    return complex(diff * diff), complex(0.5 * (ev[i] + ev[j])), complex(abs(diff)), ev


def _power_sums(M: np.ndarray, lam_ref: complex) -> tuple[complex, complex, complex]:
    ev = np.linalg.eigvals(M)
    idx = np.argsort(np.abs(ev - lam_ref))[:3]
    c = ev[idx]
    m = c.mean()
    return complex(np.sum((c - m) ** 2)), complex(np.sum((c - m) ** 3)), complex(m)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _clusters(ev: np.ndarray, radius: float) -> list[list[int]]:
    n = ev.size
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(ev[i] - ev[j]) <= radius:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [g for g in groups.values()]


def _jordan_order(L: np.ndarray, center: complex, members: np.ndarray, norm: float,
                  radius: float) -> tuple[int, int, bool]:
    """(largest block size, number of blocks, ambiguous) for one cluster."""
    m = members.size
    sel = lambda x: abs(x - center) <= radius
    T, _, sdim = sla.schur(L, output="complex", sort=sel)
    if sdim != m:
        return m, 1, True
    T11 = T[:m, :m]
    lbar = np.trace(T11) / m
    N = T11 - lbar * np.eye(m)
    spread = float(np.max(np.abs(members - lbar))) if m > 1 else 0.0
    tol = max(np.sqrt(spread * norm), 1e2 * EPS * norm)
    ambiguous = False
    P = np.eye(m, dtype=complex)
    ranks = []
    for _ in range(m):
        P = P @ N
        sv = np.linalg.svd(P, compute_uv=False)
        if np.any((sv > tol / 10) & (sv < tol * 10)):
            ambiguous = True
        ranks.append(int(np.sum(sv > tol)))
    order = next((k + 1 for k, r in enumerate(ranks) if r == 0), m)
    blocks = m - ranks[0]
    return order, blocks, ambiguous


def classify(L: np.ndarray, candidate: EpCandidate | None = None, radius: float | None = None,
             raise_ambiguous: bool = True) -> EpCandidate:
    """Determine the Jordan structure of every eigenvalue cluster of ``L``.

    Clusters are formed with single linkage at ``radius`` (default
    ``1e-4 ||L||_F``). For each cluster the ordered Schur block ``T11`` is
    shifted by the cluster mean and the numerical ranks of its powers give
    the largest Jordan block. Rank threshold is ``sqrt(spread ||L||)``, which
    separates the ``O(spread**2)`` singular values left by a perturbed
    Jordan block from the ``O(spread)`` ones of a semisimple cluster.

    An order >= 2 cluster counts as an EP when the largest eigenvalue
    condition number in it exceeds 1e6. An order-1 cluster is a
    diagonalizable degeneracy when that number is below 1e3.

    Raises
    ------
    AmbiguousStructure
        If a singular value lies within a factor 10 of the rank threshold or
        the conditioning falls between the two thresholds (only when
        ``raise_ambiguous``). The partially classified candidate is attached.
    """
    L = np.asarray(L, dtype=complex)
    norm = float(np.linalg.norm(L))
    if radius is None:
        radius = 1e-4 * norm
    conds = condeig(L)
    ev = np.array([c[0] for c in conds])
    kap = np.array([c[1] for c in conds])
    lam = candidate.lam if candidate is not None else None
    groups = [g for g in _clusters(ev, radius) if len(g) >= 2]
    orders, centers, kinds = [], [], []
    ambiguous = False
    kmax = 1.0
    for g in groups:
        members = ev[g]
        center = complex(members.mean())
        order, blocks, amb = _jordan_order(L, center, members, norm, radius)
        kc = float(kap[g].max())
        kmax = max(kmax, kc)
        if amb:
            kind = "ambiguous"
        elif order >= 2 and kc > KAPPA_EP:
            kind = "EP"
        elif order == 1 and kc < KAPPA_DIAG:
            kind = "diag"
        else:
            kind = "ambiguous"
        ambiguous = ambiguous or kind == "ambiguous"
        orders.append(order)
        centers.append(center)
        kinds.append(kind)
    multiplicity = sum(1 for o, k in zip(orders, kinds) if o >= 2 and k == "EP")
    if lam is None:
        lam = centers[int(np.argmax(orders))] if centers else complex(ev[0])
    # the tracked cluster decides the label
    if centers:
        it = int(np.argmin([abs(c - lam) for c in centers]))
        tracked_order, tracked_kind = orders[it], kinds[it]
        if abs(centers[it] - lam) > max(radius, 1e-3 * norm):
            tracked_order, tracked_kind = 1, "none"
    else:
        tracked_order, tracked_kind = 1, "none"
    if tracked_kind == "ambiguous":
        label = "ambiguous"
    elif tracked_kind == "EP" and tracked_order >= 3:
        label = f"EP{tracked_order}"
    elif tracked_kind == "EP":
        label = "EP2" if multiplicity == 1 else f"EP2^{multiplicity}"
    elif tracked_kind == "diag":
        label = "degenerate"
    else:
        label = "none"
    params = dict(candidate.params) if candidate is not None else {}
    gap = candidate.gap if candidate is not None else 0.0
    residual = candidate.residual if candidate is not None else 0.0
    converged = candidate.converged if candidate is not None else True
    notes = candidate.notes if candidate is not None else ()
    out = EpCandidate(params, complex(lam), tuple(orders), tuple(centers), multiplicity,
                      float(min(kmax, KAPPA_CAP)), gap, residual, label, converged, notes)
    if label == "ambiguous" and raise_ambiguous:
        raise AmbiguousStructure(
            "rank or conditioning decision within a factor 10 of its threshold", out)
    return out


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

class _Target(Exception):
    pass


def _point_eval(model: ParametricModel, x: np.ndarray, lam_ref: complex):
    M = model(x[0], x[1])
    F, lm, gap, ev = coalescence(M, lam_ref)
    return F, lm, gap, ev, M


def _line_root(f: Callable[[float], float], h: float, max_expand: int = 40,
               grow: float = 1.6, s_max: float | None = None, xtol: float = 1e-15) -> float | None:
    """Root of real ``f`` nearest ``s = 0`` found by symmetric bracket growth."""
    f0 = f(0.0)
    if f0 == 0:
        return 0.0
    lo_p, lo_m = 0.0, 0.0
    f_p, f_m = f0, f0
    step = h
    for _ in range(max_expand):
        if s_max is not None and step > s_max:
            step = s_max
        sp, sm = lo_p + step, lo_m - step
        fp, fm = f(sp), f(-abs(sm))
        if np.sign(fp) != np.sign(f_p):
            return brentq(f, lo_p, sp, xtol=xtol, rtol=4 * EPS, maxiter=200)
        if np.sign(fm) != np.sign(f_m):
            return brentq(f, sm, lo_m, xtol=xtol, rtol=4 * EPS, maxiter=200)
        lo_p, lo_m, f_p, f_m = sp, sm, fp, fm
        if s_max is not None and step >= s_max and abs(lo_p) >= s_max:
            return None
        step *= grow
    return None


def _directional_root(f: Callable[[float], float], h: float, sign: int, max_expand: int = 40,
                      grow: float = 1.6, xtol: float = 1e-15,
                      accept: Callable[[float], bool] | None = None) -> float | None:
    """First root of ``f`` along ``sign``; roots failing ``accept`` are skipped."""
    f0 = f(0.0)
    a, fa = 0.0, f0
    step = h
    for _ in range(max_expand):
        b = a + sign * step
        fb = f(b)
        if np.sign(fb) != np.sign(fa):
            lo, hi = (a, b) if a < b else (b, a)
            r = brentq(f, lo, hi, xtol=xtol, rtol=4 * EPS, maxiter=200)
            if accept is None or accept(r):
                return r
        a, fa = b, fb
        step *= grow
    return None


def _real_F(model, lam_box, x0, direction, tol_imag=1e-6):
    """Real coalescence function along ``x0 + s * direction``; tracks the pair."""
    x0 = np.asarray(x0, float)
    direction = np.asarray(direction, float)

    def f(s):
        x = x0 + s * direction
        F, lm, _, _, M = _point_eval(model, x, lam_box[0])
        return F.real

    return f


def _make_candidate(model: ParametricModel, x: np.ndarray, lam_ref: complex, converged: bool,
                    classify_point: bool, notes: tuple[str, ...] = ()) -> EpCandidate:
    F, lm, gap, ev, M = _point_eval(model, x, lam_ref)
    norm = float(np.linalg.norm(M))
    cand = EpCandidate(_params(x), lm, gap=float(abs(gap)), residual=float(abs(F) / norm),
                       converged=converged, notes=notes)
    if classify_point:
        try:
            cand = classify(M, cand)
        except AmbiguousStructure as exc:
            cand = exc.candidate
    return cand


def refine_ep(model: ParametricModel, guess: EpCandidate | Sequence[float], tol: float = 1e-13,
              active: Sequence[str] = PARAMS, lam: complex | None = None, order: int = 2,
              constraint: str | None = None, step: float | None = None, max_evals: int = 2000,
              raise_on_failure: bool = True, classify_result: bool = True) -> EpCandidate:
    """Refine an EP guess by driving the tracked pair to coalescence.

    Parameters
    ----------
    model : ParametricModel
    guess : EpCandidate or (delta, omega)
    tol : float
        Target for the coalescence residual ``|F| / ||L||``, relative to
        ``||L||``.
    active : sequence of str
        Parameters to vary; with a single entry the other one is held fixed
        and the search is a one-dimensional root or minimum.
    lam : complex, optional
        Reference eigenvalue selecting the tracked pair; defaults to
        ``guess.lam`` or the closest pair at the guess.
    order : {2, 3}
        ``3`` makes the three eigenvalues nearest ``lam`` coalesce by solving
        for vanishing centered power sums ``p2 = p3 = 0``.
    constraint : {None, "axis"}
        ``"axis"`` locates the extremum of an EP2 curve along ``delta`` (the
        apex on a mirror-symmetry axis): chord midpoints of the curve are
        taken at shrinking heights above the point and the curve is then
        solved on the resulting vertical line.
    step : float, optional
        Initial simplex and bracket size, default ``1e-3 * model.scale``.
    max_evals : int
    raise_on_failure : bool
        Raise :class:`NotConverged` (best point attached) rather than return
        an unconverged candidate.

    Raises
    ------
    LostCluster
        If the guess violates the basin condition (pair gap above 0.1 of the
        distance to the next eigenvalue), or the tracked pair jumps.
    NotConverged
    """
    x0 = guess.point() if isinstance(guess, EpCandidate) else np.asarray(guess, dtype=float)
    if lam is None and isinstance(guess, EpCandidate) and guess.kind != "none":
        lam = guess.lam
    M0 = model(*x0)
    ev0 = np.linalg.eigvals(M0)
    norm0 = float(np.linalg.norm(M0))
    if lam is None:
        best = None
        for i in range(ev0.size):
            for j in range(i + 1, ev0.size):
                g = abs(ev0[i] - ev0[j])
                if best is None or g < best[0]:
                    best = (g, 0.5 * (ev0[i] + ev0[j]))
        lam = best[1]
    _check_basin(ev0, lam, order)
    if step is None:
        step = 1e-3 * model.scale
    if order == 3:
        return _refine_order3(model, x0, lam, tol, step, raise_on_failure, classify_result)
    if constraint == "axis":
        return _refine_axis(model, x0, lam, tol, step, raise_on_failure, classify_result)
    if constraint is not None:
        raise ValueError(f"unknown constraint {constraint!r}")

    idx = [PARAMS.index(a) for a in active]
    target = tol * norm0 * norm0
    floor = FLOOR * norm0 * norm0
    state = {"lam": lam, "best": (np.inf, x0.copy(), lam), "n": 0, "n_target": None}

    def full(y):
        x = x0.copy()
        x[idx] = y
        return x

    def record(x, F, lm):
        val = abs(F)
        if val < state["best"][0]:
            state["best"] = (val, x.copy(), lm)
        if val <= target and state["n_target"] is None:
            state["n_target"] = state["n"]
        return val

    def obj(y):
        state["n"] += 1
        x = full(y)
        F, lm, _, _, _ = _point_eval(model, x, state["lam"])
        val = record(x, F, lm)
        if val <= target or state["n"] >= max_evals:
            raise _Target
        return val

    if len(idx) == 1:
        # a real F changes sign across the curve; otherwise minimize |F|
        d = np.zeros(2)
        d[idx[0]] = 1.0
        F0 = coalescence(M0, lam)[0]
        if abs(F0.imag) <= 1e-6 * abs(F0) and abs(F0) > target:
            f = _real_F(model, [lam], x0, d)
            s = _line_root(f, step)
            if s is not None:
                x = x0 + s * d
                F, lm, _, _, _ = _point_eval(model, x, lam)
                record(x, F, lm)
        if state["best"][0] > target:
            try:
                obj(x0[idx])
                minimize_scalar(lambda y: obj(np.array([y])),
                                bracket=(x0[idx[0]] - step, x0[idx[0]] + step), tol=1e-15)
            except _Target:
                pass
    else:
        simplex = np.array([x0[idx]] + [x0[idx] + step * e for e in np.eye(len(idx))])
        try:
            obj(x0[idx])
            minimize(obj, x0[idx], method="Nelder-Mead",
                     options={"initial_simplex": simplex, "xatol": 1e-15, "fatol": 0.0,
                              "maxfev": max_evals, "maxiter": max_evals})
        except _Target:
            pass
    # F is locally affine in the parameters: a few secant-Newton steps take
    # the best point down to the rounding floor, where kappa is decisive
    _secant_polish(model, state, idx, floor, record)

    val, xb, lmb = state["best"]
    _check_tracking(model, xb, lam, lmb, ev0)
    converged = val <= target
    n_eval = state["n_target"] if state["n_target"] is not None else state["n"]
    cand = _make_candidate(model, xb, lmb, converged, classify_result, (f"evaluations={n_eval}",))
    if not converged and raise_on_failure:
        raise NotConverged(f"residual {val / norm0:.3e} above target {tol * norm0:.3e}", cand)
    return cand


def _check_basin(ev: np.ndarray, lam: complex, order: int) -> None:
    d = np.sort(np.abs(ev - lam))
    m = 3 if order == 3 else 2
    if ev.size <= m:
        return
    idx = np.argsort(np.abs(ev - lam))
    members = ev[idx[:m]]
    center = members.mean()
    gap = float(np.max(np.abs(members - center))) * 2
    spacing = float(np.min(np.abs(ev[idx[m:]] - center)))
    if order == 2 and gap > 0.1 * spacing:
        raise LostCluster(f"pair gap {gap:.3e} exceeds 0.1 x spacing {spacing:.3e}")


def _check_tracking(model, x, lam0, lam_final, ev0) -> None:
    # the pair must not have migrated to a different part of the spectrum
    spread = np.sort(np.abs(ev0 - lam0))
    if spread.size > 2 and abs(lam_final - lam0) > 0.5 * spread[2] + 1e-3 * abs(lam0) and \
            abs(lam_final - lam0) > 0.5 * max(spread[2], 1e-12):
        raise LostCluster(f"tracked eigenvalue moved from {lam0:.6g} to {lam_final:.6g}")


def _secant_polish(model, state, idx, floor, record, steps: int = 6) -> None:
    """Newton steps on the locally affine map ``params -> F`` with a difference Jacobian."""
    for _ in range(steps):
        val, xb, lmb = state["best"]
        if val <= floor:
            return
        h = max(1e-7 * np.max(np.abs(xb)), 1e-9)
        F0 = _point_eval(model, xb, lmb)[0]
        J = []
        for i in idx:
            e = np.zeros(2)
            e[i] = h
            Fp = _point_eval(model, xb + e, lmb)[0]
            Fm = _point_eval(model, xb - e, lmb)[0]
            J.append((Fp - Fm) / (2 * h))
        J = np.array(J)
        A = np.vstack([J.real, J.imag])
        b = -np.array([F0.real, F0.imag])
        dy, *_ = np.linalg.lstsq(A, b, rcond=None)
        xn = xb.copy()
        xn[idx] += dy
        Fn, lmn, _, _, _ = _point_eval(model, xn, lmb)
        if not abs(Fn) < val:
            return
        record(xn, Fn, lmn)


def _refine_axis(model, x0, lam, tol, step, raise_on_failure, classify_result) -> EpCandidate:
    M0 = model(*x0)
    norm = float(np.linalg.norm(M0))
    target = tol * norm * norm
    lam_box = [lam]
    x = np.array(x0, float)
    height = None
    axis = x[0]
    for it in range(12):
        # vertical solve on the current axis estimate
        fv = _real_F(model, lam_box, np.array([axis, x[1]]), np.array([0.0, 1.0]))
        s = _line_root(fv, step)
        if s is None:
            break
        apex = np.array([axis, x[1] + s])
        lam_box[0] = _point_eval(model, apex, lam_box[0])[1]
        if height is None:
            height = max(abs(x0[1] - apex[1]), 10 * step)
        else:
            height *= 0.1
        # chord on a horizontal line above (or below) the apex
        sign = 1.0 if x0[1] >= apex[1] else -1.0
        line0 = np.array([apex[0], apex[1] + sign * height])
        fh = _real_F(model, lam_box, line0, np.array([1.0, 0.0]))
        sp = _directional_root(fh, step, +1)
        sm = _directional_root(fh, step, -1)
        if sp is None or sm is None:
            x = apex
            break
        new_axis = apex[0] + 0.5 * (sp + sm)
        moved = abs(new_axis - axis)
        axis = new_axis
        x = apex
        if moved <= 1e-15 * max(1.0, abs(axis)) + 1e-15 and it > 0:
            break
    fv = _real_F(model, lam_box, np.array([axis, x[1]]), np.array([0.0, 1.0]))
    s = _line_root(fv, step)
    if s is not None:
        x = np.array([axis, x[1] + s])
    F, lm, _, _, _ = _point_eval(model, x, lam_box[0])
    converged = abs(F) <= target
    cand = _make_candidate(model, x, lm, converged, classify_result, ("axis",))
    if not converged and raise_on_failure:
        raise NotConverged("axis refinement did not reach the target", cand)
    return cand


def _refine_order3(model, x0, lam, tol, step, raise_on_failure, classify_result) -> EpCandidate:
    M0 = model(*x0)
    norm = float(np.linalg.norm(M0))
    ref = [lam]

    def resid(x):
        p2, p3, m = _power_sums(model(*x), ref[0])
        return np.array([p2.real, p2.imag, p3.real, p3.imag]) / np.array([norm**2, norm**2, norm**3, norm**3])

    r = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, x_scale=step,
                      diff_step=1e-7, max_nfev=400)
    x = r.x
    p2, p3, m = _power_sums(model(*x), ref[0])
    val = max(abs(p2) / norm**2, abs(p3) / norm**3)
    converged = val <= max(tol, 1e2 * EPS)
    M = model(*x)
    ev = np.linalg.eigvals(M)
    idx = np.argsort(np.abs(ev - m))[:3]
    gap = float(np.max(np.abs(ev[idx] - m)) * 2)
    cand = EpCandidate(_params(x), complex(m), gap=gap, residual=float(abs(p2) / norm),
                       converged=converged, notes=("order3",))
    if classify_result:
        try:
            cand = classify(M, cand)
        except AmbiguousStructure as exc:
            cand = exc.candidate
    if not converged and raise_on_failure:
        raise NotConverged(f"power-sum residual {val:.3e} above target", cand)
    return cand


# ---------------------------------------------------------------------------
# Continuation
# ---------------------------------------------------------------------------

def _grad_F(model, x, lam, h):
    g = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        g[i] = (coalescence(model(*(x + e)), lam)[0].real
                - coalescence(model(*(x - e)), lam)[0].real) / (2 * h)
    return g


def _trace_branch(model, seed_x, seed_lam, tangent, step, max_points, bounds, tol,
                  cusp_gap, hmin, branch) -> EpCurve:
    pts = [np.array(seed_x, float)]
    lams = [complex(seed_lam)]
    t = np.asarray(tangent, float)
    t = t / np.linalg.norm(t)
    h = step
    successes = 0
    failures = 0
    cusps: list[EpCandidate] = []
    reason = "max_points"
    closed = False
    max_taken = 0.0
    norm = float(np.linalg.norm(model(*seed_x)))
    while len(pts) < max_points:
        p = pts[-1]
        pred = p + h * t
        nvec = np.array([-t[1], t[0]])
        lam_box = [lams[-1] if len(lams) < 2 else 2 * lams[-1] - lams[-2]]
        f = _real_F(model, lam_box, pred, nvec)
        try:
            s = _line_root(f, 0.05 * h, s_max=h)
        except ValueError:
            s = None
        ok = False
        if s is not None and abs(s) <= h:
            q = pred + s * nvec
            F, lm, gap, ev, M = _point_eval(model, q, lam_box[0])
            if abs(F) <= max(tol * norm, 1e3 * EPS * norm) * norm and np.linalg.norm(q - p) > 0.2 * h:
                ok = True
        if not ok:
            failures += 1
            successes = 0
            h *= 0.5
            if h < hmin:
                if len(pts) >= 2 and cusp_gap > 0:
                    c = _try_cusp(model, pts[-1], lams[-1], step)
                    if c is not None:
                        cusps.append(c)
                        reason = "cusp"
                        break
                raise StallError(f"corrector failed with step {h:.3e}",
                                 _mk_curve(pts, lams, branch, closed, max_taken, cusps, "stall"))
            continue
        d = np.linalg.norm(q - p)
        max_taken = max(max_taken, d)
        t_new = (q - p) / d
        if np.dot(t_new, t) < 0:  # reversed direction: passed a turning point
            t_new = -t_new
        t = t_new
        pts.append(q)
        lams.append(complex(lm))
        successes += 1
        if successes >= 4:
            h = min(2 * h, step)
            successes = 0
        if bounds is not None:
            (dlo, dhi), (wlo, whi) = bounds
            if not (dlo <= q[0] <= dhi and wlo <= q[1] <= whi):
                reason = "bounds"
                break
        if len(pts) > 3 and np.linalg.norm(q - pts[0]) < 0.5 * h:
            closed = True
            reason = "closed"
            break
        if cusp_gap > 0:
            d3 = np.sort(np.abs(ev - lm))[2]
            if d3 < cusp_gap * norm:
                c = _try_cusp(model, q, lm, step)
                if c is not None and np.linalg.norm(c.point() - q) <= 3 * step:
                    cusps.append(c)
                    reason = "cusp"
                    break
    return _mk_curve(pts, lams, branch, closed, max_taken, cusps, reason)


def _try_cusp(model, x, lam, step) -> EpCandidate | None:
    try:
        c = refine_ep(model, x, lam=lam, order=3, step=step, raise_on_failure=True)
    except (NotConverged, LostCluster):
        return None
    return c if c.order >= 3 else None


def _mk_curve(pts, lams, branch, closed, max_taken, cusps, reason) -> EpCurve:
    return EpCurve(tuple((float(p[0]), float(p[1])) for p in pts), tuple(lams), branch, closed,
                   float(max_taken), tuple(cusps), reason)


def trace_curve(model: ParametricModel, seed: EpCandidate, step: float = 0.01,
                max_points: int = 200, bounds=None, tol: float = 1e-12, direction: int = 1,
                bidirectional: bool = True, cusp_gap: float = 0.05,
                hmin: float | None = None) -> EpCurve:
    """Follow a curve of EP2s through ``seed`` by predictor-corrector steps.

    The predictor moves along the current tangent (initially perpendicular
    to the gradient of ``F``, afterwards the secant through the last two
    points). The corrector solves ``F = 0`` on the normal line through the
    predicted point. Steps halve on corrector failure and double after four
    successes, within ``[hmin, step]``.

    Tracing stops at ``max_points``, outside ``bounds``
    (``((dlo, dhi), (wlo, whi))``), on closure, or at a cusp: once the third
    eigenvalue comes within ``cusp_gap * ||L||`` of the pair, an order-3
    refinement is attempted and a confirmed EP3 ends the branch.

    With ``bidirectional`` both directions are traced and joined so the
    result runs from one end to the other.
    """
    if hmin is None:
        hmin = max(1e-5 * model.scale, 1e-12)
    x0 = seed.point()
    lam = seed.lam
    h = 1e-6 * max(model.scale, np.max(np.abs(x0)))
    g = _grad_F(model, x0, lam, h)
    if not np.any(g):
        raise StallError("coalescence gradient vanishes at the seed")
    tan = np.array([-g[1], g[0]]) * direction
    plus = _trace_branch(model, x0, lam, tan, step, max_points, bounds, tol, cusp_gap, hmin, 0)
    if not bidirectional:
        return plus
    minus = _trace_branch(model, x0, lam, -tan, step, max_points, bounds, tol, cusp_gap, hmin, 1)
    pts = tuple(reversed(minus.points[1:])) + plus.points
    lams = tuple(reversed(minus.lams[1:])) + plus.lams
    return EpCurve(pts, lams, 0, plus.closed or minus.closed, max(plus.max_step, minus.max_step),
                   minus.cusps + plus.cusps, f"{minus.stop_reason}|{plus.stop_reason}")


def curve_distance(model: ParametricModel, points: Iterable[Sequence[float]],
                   lams: Iterable[complex]) -> np.ndarray:
    """First-order distance ``|F| / |grad F|`` of each point to the model's EP2 curve."""
    out = []
    for x, lam in zip(points, lams):
        x = np.asarray(x, float)
        F, lm, _, _ = coalescence(model(*x), lam)
        h = 1e-6 * max(model.scale, np.max(np.abs(x)), 1e-3)
        g = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            g[i] = abs(coalescence(model(*(x + e)), lm)[0] - coalescence(model(*(x - e)), lm)[0]) / (2 * h)
        out.append(abs(F) / max(np.linalg.norm(g), 1e-300))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------

def _default_threads() -> int:
    env = os.environ.get("EPSPEC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


def _scan_line(model: ParametricModel, param: str, fixed: float, window: tuple[float, float],
               imag_tol: float, gap_tol: float, eps: float) -> list[EpCandidate]:
    pen = model.pencil(param, fixed)
    try:
        pairs = mfrd_double_eigs(pen, eps)
    except SingularPencil:
        return []
    lo, hi = window
    out = []
    for lam, mu in pairs:
        if abs(mu.imag) > imag_tol or not (lo <= mu.real <= hi):
            continue
        x = (fixed, mu.real) if param == "omega" else (mu.real, fixed)
        M = model(*x)
        norm = float(np.linalg.norm(M))
        F, lm, gap, _ = coalescence(M, lam)
        if abs(gap) > gap_tol * norm:
            continue
        out.append(EpCandidate(_params(x), lm, gap=float(abs(gap)), residual=float(abs(F) / norm),
                               kind="candidate", converged=False, notes=(f"scan:{param}",)))
    return out


def scan_map(model: ParametricModel, deltas: Sequence[float], omegas: Sequence[float],
             directions: Sequence[str] = ("omega", "delta"), threads: int | None = None,
             eps: float | None = None, imag_tol: float | None = None,
             gap_tol: float = 2e-2) -> list[EpCandidate]:
    """Unrefined EP candidates over a rectangular window.

    For every grid value of one parameter a pencil in the other is built
    and solved with :func:`mfrd_double_eigs`. Solutions with near-real
    ``mu`` inside the window and a tracked-pair gap below
    ``gap_tol * ||L||`` are kept and deduplicated.

    ``imag_tol`` (default: the larger grid step) admits isolated EPs that
    lie between grid lines, whose ``mu`` is complex on nearby lines.
    """
    deltas = np.asarray(deltas, float)
    omegas = np.asarray(omegas, float)
    for g in (deltas, omegas):
        if g.size > 1 and not (np.all(np.diff(g) > 0) or np.all(np.diff(g) < 0)):
            raise ValueError("grids must be strictly monotone")
    if eps is None:
        eps = EPS_MFRD
    steps = [np.max(np.abs(np.diff(g))) for g in (deltas, omegas) if g.size > 1]
    if imag_tol is None:
        imag_tol = max(steps) if steps else 1e-6
    threads = threads or _default_threads()
    wd = (deltas.min(), deltas.max())
    ww = (omegas.min(), omegas.max())
    jobs = []
    if "omega" in directions:
        jobs += [("omega", d, ww) for d in deltas]
    if "delta" in directions:
        jobs += [("delta", w, wd) for w in omegas]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        results = list(ex.map(lambda j: _scan_line(model, j[0], j[1], j[2], imag_tol, gap_tol, eps),
                              jobs))
    cands = [c for r in results for c in r]
    return _dedupe(cands, steps)


def _dedupe(cands: list[EpCandidate], steps: list[float]) -> list[EpCandidate]:
    if not cands:
        return []
    h = 0.5 * min(steps) if steps else 1e-9
    cands = sorted(cands, key=lambda c: c.gap)
    kept: list[EpCandidate] = []
    for c in cands:
        dup = False
        for k in kept:
            if abs(c.delta - k.delta) <= h and abs(c.omega - k.omega) <= h and \
                    abs(c.lam - k.lam) <= 10 * max(c.gap, k.gap, 1e-8):
                dup = True
                break
        if not dup:
            kept.append(c)
    return sorted(kept, key=lambda c: (c.delta, c.omega))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("delta", "omega", "lam_re", "lam_im", "order", "multiplicity", "kappa")


def candidates_to_csv(cands: Iterable[EpCandidate], header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    lines.append(",".join(CSV_COLUMNS + ("kind",)))
    for c in cands:
        lines.append(",".join([repr(c.delta), repr(c.omega), repr(c.lam.real), repr(c.lam.imag),
                               str(c.order), str(c.multiplicity), repr(c.kappa), c.kind]))
    return "\n".join(lines) + "\n"


def curve_to_csv(curve: EpCurve, header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    lines.append(",".join(CSV_COLUMNS + ("kind",)))
    for (d, w), l in zip(curve.points, curve.lams):
        lines.append(",".join([repr(d), repr(w), repr(l.real), repr(l.imag), "2", "1", "", "EP2"]))
    for c in curve.cusps:
        lines.append(",".join([repr(c.delta), repr(c.omega), repr(c.lam.real), repr(c.lam.imag),
                               str(c.order), str(c.multiplicity), repr(c.kappa), c.kind]))
    return "\n".join(lines) + "\n"


def to_json(obj) -> str:
    if isinstance(obj, EpCurve):
        return json.dumps(obj.to_dict())
    return json.dumps([c.to_dict() for c in obj])
