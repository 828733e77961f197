"""Propagation, initial states and synthetic emission signals."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .liouville import P_LEVELS, SystemSpec, Superoperator, unvec, vec, vectorize_lgks

__all__ = [
    "DensityState",
    "TimeSignal",
    "Observable",
    "PropagationError",
    "NoSteadyState",
    "SignalFormatError",
    "propagate",
    "steady_state",
    "initial_state_with_repump",
    "emit_signal",
    "add_noise",
    "average_shots",
    "default_sampling",
    "population_observable",
    "coherence_observable",
    "probe_unitary",
    "probe_observable",
    "probe_state",
]


class PropagationError(RuntimeError):
    """Raised when propagation produces non-finite values."""


class NoSteadyState(RuntimeError):
    """Raised when a generator has no normalizable stationary state."""


class SignalFormatError(ValueError):
    """Raised for malformed or non-uniform signal files."""


@dataclass(frozen=True, eq=False)
class DensityState:
    """Density matrix ``rho`` (possibly sub-normalized for leaky models)."""

    rho: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rho, dtype=complex)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("rho must be square")
        r.setflags(write=False)
        object.__setattr__(self, "rho", r)

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.rho).real)

    def check(self, tol: float = 1e-12, psd_tol: float = 1e-10) -> None:
        """Raise ``ValueError`` if Hermiticity, trace or positivity fail."""
        r = self.rho
        scale = max(np.linalg.norm(r), 1.0)
        if np.linalg.norm(r - r.conj().T) > tol * scale:
            raise ValueError("density matrix is not Hermitian")
        tr = np.trace(r)
        if abs(tr.imag) > tol or not (-tol <= tr.real <= 1 + tol):
            raise ValueError(f"trace {tr} outside [0, 1]")
        if np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min() < -psd_tol:
            raise ValueError("density matrix is not positive semidefinite")

    @classmethod
    def pure(cls, dim: int, level: int) -> "DensityState":
        r = np.zeros((dim, dim), dtype=complex)
        r[level, level] = 1.0
        return cls(r)


@dataclass(frozen=True, eq=False)
class Observable:
    """Hermitian observable with a name used to label signals."""

    matrix: np.ndarray
    name: str = "O"

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=complex)
        if np.linalg.norm(m - m.conj().T) > 1e-12 * max(np.linalg.norm(m), 1.0):
            raise ValueError("observable is not Hermitian")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True, eq=False)
class TimeSignal:
    """Uniformly sampled observable ``s(t0 + k dt)``."""

    t0: float
    dt: float
    samples: np.ndarray
    label: str = "signal"

    def __post_init__(self) -> None:
        s = np.array(self.samples, dtype=complex).ravel()
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if s.size < 2:
            raise ValueError("a signal needs at least two samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def duration(self) -> float:
        return self.dt * (self.samples.size - 1)

    def is_real(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.samples.imag)) <= tol * max(np.max(np.abs(self.samples)), 1e-300))

    def slice(self, start: int) -> "TimeSignal":
        return TimeSignal(self.t0 + start * self.dt, self.dt, self.samples[start:], self.label)

    # -- serialization -------------------------------------------------
    def to_csv(self, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        buf.write(f"# label={self.label}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "re", "im"])
        for t, s in zip(self.times, self.samples):
            w.writerow([repr(float(t)), repr(float(s.real)), repr(float(s.imag))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, jitter: float = 1e-9) -> "TimeSignal":
        label = "signal"
        rows = []
        header_seen = False
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped[1:].strip()
                if body.startswith("label="):
                    label = body[len("label="):]
                continue
            cells = [c.strip() for c in stripped.split(",")]
            if not header_seen:
                header_seen = True
                if cells == ["t", "re", "im"]:
                    continue
            if len(cells) != 3:
                raise SignalFormatError(f"line {lineno}: expected 3 columns (t, re, im), got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise SignalFormatError(f"line {lineno}: {exc}") from None
        if len(rows) < 2:
            raise SignalFormatError("signal file has fewer than two samples")
        a = np.asarray(rows)
        return cls._from_columns(a[:, 0], a[:, 1] + 1j * a[:, 2], label, jitter)

    @classmethod
    def _from_columns(cls, t: np.ndarray, s: np.ndarray, label: str, jitter: float) -> "TimeSignal":
        steps = np.diff(t)
        dt = float(np.mean(steps))
        if dt <= 0:
            raise SignalFormatError("time column is not increasing")
        bad = np.nonzero(np.abs(steps - dt) > jitter * dt)[0]
        if bad.size:
            raise SignalFormatError(
                f"non-uniform grid: step {bad[0] + 1} deviates from dt={dt:.12g} by more than {jitter:g} relative")
        return cls(float(t[0]), dt, s, label)

    def to_dict(self) -> dict:
        return {"t0": self.t0, "dt": self.dt, "label": self.label,
                "re": self.samples.real.tolist(), "im": self.samples.imag.tolist()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSignal":
        s = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)
        return cls(float(d["t0"]), float(d["dt"]), s, d.get("label", "signal"))

    @classmethod
    def from_json(cls, text: str) -> "TimeSignal":
        return cls.from_dict(json.loads(text))


def _as_matrix(L) -> tuple[np.ndarray, int]:
    if isinstance(L, Superoperator):
        return L.matrix, L.dim
    m = np.asarray(L, dtype=complex)
    return m, int(round(np.sqrt(m.shape[0])))


def _step_matrix(lm: np.ndarray, dt: float) -> np.ndarray:
    # scipy's expm is Al-Mohy/Higham scaling and squaring with a degree-13
    # Pade core, valid for defective generators.
    e = sla.expm(lm * dt)
    if not np.all(np.isfinite(e)):
        raise PropagationError("matrix exponential has non-finite entries")
    return e


def propagate(L, rho0: DensityState | np.ndarray, dt: float, n_steps: int) -> list[DensityState]:
    """States ``rho(k dt)`` for ``k = 0..n_steps`` via repeated ``expm(L dt)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lm, n = _as_matrix(L)
    r0 = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, dtype=complex)
    if not (np.all(np.isfinite(lm)) and np.all(np.isfinite(r0))):
        raise PropagationError("non-finite generator or initial state")
    e = _step_matrix(lm, dt)
    v = vec(r0)
    out = [DensityState(r0)]
    for _ in range(n_steps):
        v = e @ v
        if not np.all(np.isfinite(v)):
            raise PropagationError("state became non-finite")
        out.append(DensityState(unvec(v, n)))
    return out


def steady_state(L, tol: float = 1e-10) -> DensityState:
    """Unit-trace null vector of ``L``.

    A degenerate null space (several conserved sectors) is resolved by
    projecting the maximally mixed state onto it with the spectral projector
    of the zero eigenvalue, i.e. the long-time limit reached from ``I / N``.

    Raises
    ------
    NoSteadyState
        If ``L`` has no null vector within ``tol * ||L||`` or the null
        vector has zero trace.
    """
    lm, n = _as_matrix(L)
    scale = max(np.linalg.norm(lm), 1e-300)
    u, s, vh = np.linalg.svd(lm)
    if s[-1] > tol * scale:
        raise NoSteadyState(f"smallest singular value {s[-1]:.3e} exceeds {tol:g}*||L||")
    k = int(np.sum(s <= tol * scale))
    V = vh[-k:].conj().T
    if k == 1:
        v = V[:, 0]
    else:
        W = u[:, -k:]
        G = W.conj().T @ V
        if np.linalg.cond(G) > 1e8:
            raise NoSteadyState("zero eigenvalue of L is not semisimple")
        v = V @ np.linalg.solve(G, W.conj().T @ vec(np.eye(n) / n))
    rho = unvec(v, n)
    tr = np.trace(rho)
    if abs(tr) < 1e-8:
        raise NoSteadyState("null vector has zero trace")
    rho = rho / tr
    rho = 0.5 * (rho + rho.conj().T)
    return DensityState(rho)


def initial_state_with_repump(spec: SystemSpec) -> DensityState:
    """Stationary state of the repump-closed cycle.

    Leak terms are dropped (all leaked population is returned by the repump
    laser) and the steady state of the remaining generator is returned. A
    spec without leaks is its own closed counterpart.
    """
    return steady_state(vectorize_lgks(spec.closed()))


def _readout(O: Observable | np.ndarray) -> np.ndarray:
    m = O.matrix if isinstance(O, Observable) else np.asarray(O, dtype=complex)
    # tr(O rho) = vec(O^T) . vec(rho) under column stacking
    return vec(m.T)


def emit_signal(L, rho0: DensityState | np.ndarray, O: Observable | np.ndarray, dt: float,
                n: int, t0: float = 0.0) -> TimeSignal:
    """Sample ``tr(O rho(t))`` at ``t0 + k dt`` for ``k = 0..n-1``.

    ``rho0`` is the state at ``t0``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    lm, _ = _as_matrix(L)
    r0 = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, dtype=complex)
    e = _step_matrix(lm, dt)
    o = _readout(O)
    v = vec(r0)
    out = np.empty(n, dtype=complex)
    for k in range(n):
        out[k] = o @ v
        v = e @ v
    if not np.all(np.isfinite(out)):
        raise PropagationError("signal became non-finite")
    name = O.name if isinstance(O, Observable) else "O"
    return TimeSignal(t0, dt, out, name)


def add_noise(s: TimeSignal, sigma: float, seed) -> TimeSignal:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma``.

    Real signals receive real noise. Complex signals receive circular noise
    with variance ``sigma**2 / 2`` per quadrature.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return TimeSignal(s.t0, s.dt, s.samples.copy(), s.label)
    rng = np.random.default_rng(seed)
    n = len(s)
    if s.is_real():
        noise = sigma * rng.standard_normal(n)
    else:
        noise = sigma / np.sqrt(2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return TimeSignal(s.t0, s.dt, s.samples + noise, s.label)


def average_shots(s: TimeSignal, sigma: float, shots: int, seed) -> TimeSignal:
    """Mean of ``shots`` independently noised copies of ``s``."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    seeds = np.random.SeedSequence(seed).spawn(shots)
    acc = np.zeros(len(s), dtype=complex)
    for ss in seeds:
        acc += add_noise(s, sigma, ss).samples
    return TimeSignal(s.t0, s.dt, acc / shots, s.label)


def default_sampling(L, nyquist: float = 0.5, decay_times: float = 8.0,
                     max_samples: int = 4096, min_samples: int = 64) -> tuple[float, int]:
    """Default ``(dt, n)`` for a generator.

    ``dt`` keeps ``max|Im lambda| * dt <= nyquist`` and ``n`` covers
    ``decay_times`` times the slowest nonzero decay time, capped at
    ``max_samples``.
    """
    lm, _ = _as_matrix(L)
    ev = np.linalg.eigvals(lm)
    scale = max(np.abs(ev).max(), 1e-300)
    wmax = np.abs(ev.imag).max()
    rates = -ev.real[-ev.real > 1e-9 * scale]
    slow = 1.0 / rates.min() if rates.size else 1.0 / scale
    fast = 1.0 / rates.max() if rates.size else slow
    dt = nyquist / wmax if wmax > 1e-12 * scale else 0.25 * fast
    dt = min(dt, 0.25 * slow)
    n = int(np.clip(np.ceil(decay_times * slow / dt), min_samples, max_samples))
    return float(dt), n


# ---------------------------------------------------------------------------
# Observables and state preparations
# ---------------------------------------------------------------------------

def population_observable(dim: int, levels: Sequence[int] = P_LEVELS, name: str = "O_pop") -> Observable:
    """Total population of ``levels``."""
    m = np.zeros((dim, dim))
    for a in levels:
        m[a, a] = 1.0
    return Observable(m, name)


def coherence_observable(dim: int, i: int, j: int, name: str = "O_coher") -> Observable:
    """``|i><j| + |j><i|``, i.e. twice the real part of ``rho_ji``."""
    m = np.zeros((dim, dim))
    m[i, j] = m[j, i] = 1.0
    return Observable(m, name)


def probe_unitary(dim: int, seed: int = 7) -> np.ndarray:
    """Fixed, generic unitary used to prepare a state that excites all modes.

    It stands in for a short preparation pulse applied to the repumped
    stationary state; the default seed makes it reproducible.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def probe_observable(dim: int, seed: int = 11) -> Observable:
    """Fixed generic Hermitian observable with overlap on every sector."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return Observable(0.5 * (z + z.conj().T), "O_probe")


def probe_state(rho: DensityState, seed: int = 7) -> DensityState:
    """Apply :func:`probe_unitary` to ``rho``."""
    u = probe_unitary(rho.dim, seed)
    return DensityState(u @ rho.rho @ u.conj().T)
