"""Harmonic inversion of uniformly sampled signals.

A signal is modeled as ``s(t) = sum_k sum_a d_{k,a} t^a exp(-i w_k t)``.
Plain modes have ``a = 0``; confluent (polynomial) terms appear at
exceptional points where the generator is defective. Frequencies follow the
``exp(-i w t)`` convention, so ``Im w < 0`` is a decaying mode and a
generator eigenvalue ``lam`` shows up as ``w = i lam``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import TimeSignal

__all__ = [
    "Mode",
    "InversionResult",
    "InsufficientSamples",
    "RankDeficient",
    "OrderOverflow",
    "hankel_rank",
    "noise_rank",
    "invert",
    "invert_polynomial",
    "ep_indicator",
    "reconstruct",
    "closest_pair",
]


class InsufficientSamples(ValueError):
    """Signal too short for the requested model order."""


class RankDeficient(ValueError):
    """Signal has fewer effective modes than the requested order."""

    def __init__(self, msg: str, effective_rank: int):
        super().__init__(msg)
        self.effective_rank = effective_rank


class OrderOverflow(RuntimeError):
    """A root cluster needs a higher polynomial order than allowed."""


@dataclass(frozen=True)
class Mode:
    """One term ``d * t**order * exp(-i omega t)``."""

    omega: complex
    amplitude: complex
    order: int = 0

    @property
    def eigenvalue(self) -> complex:
        """Generator eigenvalue ``-i omega`` corresponding to this mode."""
        return -1j * self.omega

    def to_dict(self) -> dict:
        return {"omega_re": self.omega.real, "omega_im": self.omega.imag,
                "d_re": self.amplitude.real, "d_im": self.amplitude.imag, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict) -> "Mode":
        return cls(complex(d["omega_re"], d["omega_im"]), complex(d["d_re"], d["d_im"]), int(d["order"]))


@dataclass(frozen=True)
class InversionResult:
    modes: tuple[Mode, ...]
    residual_rms: float
    dt: float
    K: int
    t0: float = 0.0
    notes: tuple[str, ...] = field(default=())

    def frequencies(self, min_rel_amp: float = 0.0) -> np.ndarray:
        amax = max((abs(m.amplitude) for m in self.modes), default=0.0)
        return np.array([m.omega for m in self.modes
                         if m.order == 0 and abs(m.amplitude) >= min_rel_amp * amax])

    def eigenvalues(self, min_rel_amp: float = 0.0) -> np.ndarray:
        return -1j * self.frequencies(min_rel_amp)

    def to_dict(self) -> dict:
        return {"K": self.K, "dt": self.dt, "t0": self.t0, "residual_rms": self.residual_rms,
                "modes": [m.to_dict() for m in self.modes], "notes": list(self.notes)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "InversionResult":
        return cls(tuple(Mode.from_dict(m) for m in d["modes"]), float(d["residual_rms"]),
                   float(d["dt"]), int(d["K"]), float(d.get("t0", 0.0)), tuple(d.get("notes", ())))


def _hankel(x: np.ndarray, ncols: int) -> np.ndarray:
    rows = x.size - ncols + 1
    idx = np.arange(rows)[:, None] + np.arange(ncols)[None, :]
    return x[idx]


def _ncols(n: int, K: int, max_cols: int) -> int:
    return int(min(max(max_cols, 2 * K + 1), (n - 1) // 2 + 1))


def _hankel_sv(x: np.ndarray, ncols: int) -> tuple[np.ndarray, np.ndarray]:
    H = _hankel(x, ncols)
    u, sv, _ = np.linalg.svd(H, full_matrices=False)
    return u, sv


def hankel_rank(s: TimeSignal | np.ndarray, tol: float = 1e-10, max_cols: int = 128) -> int:
    """Numerical rank of the signal's Hankel matrix at ``tol * sigma_max``."""
    x = s.samples if isinstance(s, TimeSignal) else np.asarray(s, dtype=complex)
    sv = np.linalg.svd(_hankel(x, _ncols(x.size, 1, max_cols)), compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def noise_rank(s: TimeSignal | np.ndarray, sigma: float, factor: float = 5.0,
               max_cols: int = 128) -> int:
    """Number of Hankel singular values above the noise floor.

    For i.i.d. noise of standard deviation ``sigma`` the largest singular
    value of the noise Hankel matrix is about ``sigma (sqrt(rows) +
    sqrt(cols))``; values above ``factor`` times that count as signal.
    """
    x = s.samples if isinstance(s, TimeSignal) else np.asarray(s, dtype=complex)
    H = _hankel(x, _ncols(x.size, 1, max_cols))
    sv = np.linalg.svd(H, compute_uv=False)
    floor = factor * sigma * (np.sqrt(H.shape[0]) + np.sqrt(H.shape[1]))
    return int(np.sum(sv > floor))


def _prediction_roots(x: np.ndarray, K: int, u: np.ndarray | None = None,
                      max_cols: int = 128) -> np.ndarray:
    """Signal poles ``z_k`` of a rank-``K`` signal.

    The Hankel matrix is truncated to its dominant ``K``-dimensional column
    space ``U``; shift invariance ``U[:-1] Z = U[1:]`` is solved in least
    squares and the poles are the eigenvalues of ``Z``, i.e. the roots of
    the order-``K`` prediction polynomial ``det(z - Z)``.
    """
    if u is None:
        u, _ = _hankel_sv(x, _ncols(x.size, K, max_cols))
    uk = u[:, :K]
    Z, *_ = np.linalg.lstsq(uk[:-1], uk[1:], rcond=None)
    z = np.linalg.eigvals(Z)
    return z


def _check_sizes(n: int, K: int) -> None:
    if K < 1:
        raise ValueError("model order K must be at least 1")
    if n < 2 * K + 2:
        raise InsufficientSamples(f"{n} samples cannot support K={K}; need at least {2 * K + 2}")


def _choose_order(x: np.ndarray, K: int | None, rank_tol: float) -> int:
    if K is not None:
        return int(K)
    r = hankel_rank(x, rank_tol)
    if r == 0:
        raise RankDeficient("signal is identically zero", 0)
    return min(r, (x.size - 2) // 2)


def _omega(z: np.ndarray, dt: float) -> np.ndarray:
    return 1j * np.log(z.astype(complex)) / dt


def invert(s: TimeSignal, K: int | None = None, rank_tol: float = 1e-10,
           strict: bool = True) -> InversionResult:
    """Fit ``s`` with ``K`` complex exponentials.

    Parameters
    ----------
    s : TimeSignal
    K : int, optional
        Model order. Defaults to the numerical rank of the Hankel matrix.
    rank_tol : float
        Relative singular-value threshold used for rank decisions.
    strict : bool
        If True, an explicit ``K`` above the effective rank raises
        :class:`RankDeficient`; otherwise ``K`` is reduced to that rank.

    Returns
    -------
    InversionResult
        Modes sorted by decreasing ``|d|``.
    """
    x = s.samples
    K = _choose_order(x, K, rank_tol)
    _check_sizes(x.size, K)
    u, sv = _hankel_sv(x, _ncols(x.size, K, 128))
    r = int(np.sum(sv > rank_tol * sv[0])) if sv[0] > 0 else 0
    if r < K:
        if strict:
            raise RankDeficient(f"signal has effective rank {r} < K={K}", r)
        K = max(r, 1)
    z = _prediction_roots(x, K, u)
    w = _omega(z, s.dt)
    V = z[None, :] ** np.arange(x.size)[:, None]
    c, *_ = np.linalg.lstsq(V, x, rcond=None)
    d = c * np.exp(1j * w * s.t0)
    resid = float(np.sqrt(np.mean(np.abs(x - V @ c) ** 2)))
    modes = sorted((Mode(complex(wk), complex(dk), 0) for wk, dk in zip(w, d)),
                   key=lambda m: -abs(m.amplitude))
    return InversionResult(tuple(modes), resid, s.dt, K, s.t0)


def _cluster_roots(z: np.ndarray, tol: float) -> list[list[int]]:
    n = z.size
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(z[i] - z[j]) <= tol:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def invert_polynomial(s: TimeSignal, K: int | None = None, max_order: int = 3,
                      merge_tol: float = 1e-5, rank_tol: float = 1e-10,
                      residual_target: float = 1e-8) -> InversionResult:
    """Fit the confluent model with polynomial prefactors.

    Roots of the prediction polynomial closer than ``merge_tol`` are merged
    into one frequency carrying orders ``0 .. m-1``, where ``m`` is the
    cluster size capped at ``max_order + 1``.

    Raises
    ------
    OrderOverflow
        If a cluster was truncated and the residual exceeds
        ``residual_target`` times the signal RMS.
    """
    x = s.samples
    K = _choose_order(x, K, rank_tol)
    _check_sizes(x.size, K)
    z = _prediction_roots(x, K)
    groups = _cluster_roots(z, merge_tol)
    t = s.times
    cols, labels = [], []
    truncated = False
    for g in groups:
        zc = np.mean(z[g])
        wc = complex(_omega(np.array([zc]), s.dt)[0])
        m = len(g)
        if m - 1 > max_order:
            truncated = True
            m = max_order + 1
        base = np.exp(-1j * wc * t)
        for a in range(m):
            cols.append(base * t**a)
            labels.append((wc, a))
    V = np.column_stack(cols)
    d, *_ = np.linalg.lstsq(V, x, rcond=None)
    resid = float(np.sqrt(np.mean(np.abs(x - V @ d) ** 2)))
    rms = float(np.sqrt(np.mean(np.abs(x) ** 2)))
    if truncated and resid > residual_target * max(rms, 1e-300):
        raise OrderOverflow(f"max_order={max_order} leaves residual {resid:.3e}")
    modes = sorted((Mode(wc, complex(dk), a) for (wc, a), dk in zip(labels, d)),
                   key=lambda m: -abs(m.amplitude))
    return InversionResult(tuple(modes), resid, s.dt, K, s.t0)


def closest_pair(modes: Sequence[Mode], min_rel_amp: float = 1e-8) -> tuple[Mode, Mode] | None:
    """The two order-0 modes with the smallest frequency separation."""
    if not modes:
        return None
    amax = max(abs(m.amplitude) for m in modes)
    cand = [m for m in modes if m.order == 0 and abs(m.amplitude) >= min_rel_amp * amax]
    best = None
    for i in range(len(cand)):
        for j in range(i + 1, len(cand)):
            gap = abs(cand[i].omega - cand[j].omega)
            if best is None or gap < best[0]:
                best = (gap, cand[i], cand[j])
    return None if best is None else (best[1], best[2])


def ep_indicator(r: InversionResult, min_rel_amp: float = 1e-8) -> float:
    """Largest amplitude within the most nearly degenerate pair of modes.

    Amplitudes of coalescing modes grow like the inverse of their frequency
    separation, so this diverges as the sampled system approaches an EP.
    """
    if not r.modes:
        raise ValueError("inversion result has no modes")
    pair = closest_pair(r.modes, min_rel_amp)
    if pair is None:
        return float(max(abs(m.amplitude) for m in r.modes))
    return float(max(abs(pair[0].amplitude), abs(pair[1].amplitude)))


def reconstruct(r: InversionResult, grid) -> TimeSignal:
    """Evaluate the fitted model on ``grid``.

    ``grid`` is a TimeSignal (its time axis is used), a ``(t0, dt, n)``
    tuple, or a uniformly spaced array of times.
    """
    if isinstance(grid, TimeSignal):
        t0, dt, n = grid.t0, grid.dt, len(grid)
    elif isinstance(grid, tuple) and len(grid) == 3:
        t0, dt, n = float(grid[0]), float(grid[1]), int(grid[2])
    else:
        t = np.asarray(grid, dtype=float)
        t0, dt, n = float(t[0]), float(t[1] - t[0]), t.size
    t = t0 + dt * np.arange(n)
    out = np.zeros(n, dtype=complex)
    for m in r.modes:
        out += m.amplitude * t**m.order * np.exp(-1j * m.omega * t)
    return TimeSignal(t0, dt, out, "reconstruction")
