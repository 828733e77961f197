"""Hamiltonians, dissipators and vectorized L-GKS generators.

All builders use column stacking, ``vec(rho)[i + N*j] = rho[i, j]``, for which

    vec(X rho Y) = (Y^T kron X) vec(rho).

The Hamiltonian part is therefore ``-i (I kron H - H^T kron I)`` and a jump
operator ``A`` at rate ``g`` contributes
``g (conj(A) kron A - 1/2 (I kron A^H A + (A^H A)^T kron I))``.

Units are fixed throughout the package: time in ns, rates in 1/ns and
angular frequencies in rad/ns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

STACKING = "column"
UNITS = {"time": "ns", "rate": "1/ns", "frequency": "rad/ns"}

__all__ = [
    "DecayChannel",
    "SystemSpec",
    "Superoperator",
    "BlochParams",
    "CaParams",
    "vec",
    "unvec",
    "build_bloch",
    "build_leaky_bloch",
    "build_ca_hamiltonian",
    "build_ca_spec",
    "build_ca_superoperator",
    "build_tls_spec",
    "vectorize_lgks",
    "ca_resonances",
    "ca_dephasing_operator",
    "mhz_to_rad_per_ns",
]


def mhz_to_rad_per_ns(f_mhz: float) -> float:
    """Convert a frequency in MHz to an angular frequency in rad/ns."""
    return 2.0 * np.pi * f_mhz * 1e-3


def vec(rho: np.ndarray) -> np.ndarray:
    """Column-stack a square matrix into a vector."""
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    if dim is None:
        dim = int(round(np.sqrt(v.size)))
    if dim * dim != v.size:
        raise ValueError(f"vector of length {v.size} is not a vectorized {dim}x{dim} matrix")
    return v.reshape((dim, dim), order="F")


@dataclass(frozen=True)
class DecayChannel:
    """Spontaneous decay ``source -> dest`` with jump operator ``|dest><source|``."""

    source: int
    dest: int
    rate: float

    def operator(self, dim: int) -> np.ndarray:
        a = np.zeros((dim, dim), dtype=complex)
        a[self.dest, self.source] = 1.0
        return a


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Declarative description of a driven dissipative model.

    Parameters
    ----------
    dim : int
        Hilbert-space dimension N.
    hamiltonian : ndarray
        Hermitian N x N matrix in rad/ns.
    channels : sequence of DecayChannel
        Population-transferring decays.
    leaks : sequence of (int, float)
        Level index and rate of population loss out of the model. Only the
        anticommutator part is kept, so trace is not conserved.
    dephasers : sequence of (ndarray, float)
        Hermitian operator V and rate; contributes ``rate * D[V]``.
    labels : sequence of str, optional
        Level names, used for serialization only.
    """

    dim: int
    hamiltonian: np.ndarray
    channels: tuple[DecayChannel, ...] = ()
    leaks: tuple[tuple[int, float], ...] = ()
    dephasers: tuple[tuple[np.ndarray, float], ...] = ()
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        h = np.array(self.hamiltonian, dtype=complex)
        h.setflags(write=False)
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "leaks", tuple((int(a), float(r)) for a, r in self.leaks))
        deph = []
        for v, r in self.dephasers:
            v = np.array(v, dtype=complex)
            v.setflags(write=False)
            deph.append((v, float(r)))
        object.__setattr__(self, "dephasers", tuple(deph))
        self.validate()

    def validate(self) -> None:
        n = self.dim
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ValueError(f"dim must be a positive integer, got {n!r}")
        h = self.hamiltonian
        if h.shape != (n, n):
            raise ValueError(f"hamiltonian has shape {h.shape}, expected {(n, n)}")
        if not np.all(np.isfinite(h)):
            raise ValueError("hamiltonian has non-finite entries")
        if np.linalg.norm(h - h.conj().T) > 1e-12 * max(np.linalg.norm(h), 1.0):
            raise ValueError("hamiltonian is not Hermitian")
        for c in self.channels:
            if not (0 <= c.source < n and 0 <= c.dest < n):
                raise ValueError(f"channel {c} has an index outside [0, {n})")
            if c.source == c.dest:
                raise ValueError(f"channel {c} has source equal to destination")
            _check_rate(c.rate)
        for a, r in self.leaks:
            if not 0 <= a < n:
                raise ValueError(f"leak level {a} outside [0, {n})")
            _check_rate(r)
        for v, r in self.dephasers:
            if v.shape != (n, n):
                raise ValueError(f"dephaser has shape {v.shape}, expected {(n, n)}")
            if np.linalg.norm(v - v.conj().T) > 1e-12 * max(np.linalg.norm(v), 1.0):
                raise ValueError("dephaser operator is not Hermitian")
            _check_rate(r)
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels must have one entry per level")

    def closed(self) -> "SystemSpec":
        """Same spec with all leaks removed."""
        return SystemSpec(self.dim, self.hamiltonian, self.channels, (), self.dephasers, self.labels)

    def out_rates(self) -> np.ndarray:
        """Total population out-rate of each level (channels plus leaks)."""
        g = np.zeros(self.dim)
        for c in self.channels:
            g[c.source] += c.rate
        for a, r in self.leaks:
            g[a] += r
        return g

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "units": dict(UNITS),
            "levels": list(self.labels) if self.labels else [str(i) for i in range(self.dim)],
            "hamiltonian": _matrix_to_json(self.hamiltonian),
            "channels": [{"source": c.source, "dest": c.dest, "rate": c.rate} for c in self.channels],
            "leaks": [{"level": a, "rate": r} for a, r in self.leaks],
            "dephasers": [{"operator": _matrix_to_json(v), "rate": r} for v, r in self.dephasers],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemSpec":
        if "units" not in d:
            raise ValueError("SystemSpec document is missing the mandatory 'units' field")
        if dict(d["units"]) != UNITS:
            raise ValueError(f"unsupported units {d['units']!r}; expected {UNITS!r}")
        levels = list(d["levels"])
        h = _matrix_from_json(d["hamiltonian"])
        return cls(
            dim=len(levels),
            hamiltonian=h,
            channels=tuple(DecayChannel(int(c["source"]), int(c["dest"]), float(c["rate"]))
                           for c in d.get("channels", [])),
            leaks=tuple((int(x["level"]), float(x["rate"])) for x in d.get("leaks", [])),
            dephasers=tuple((_matrix_from_json(x["operator"]), float(x["rate"]))
                            for x in d.get("dephasers", [])),
            labels=tuple(levels),
        )

    @classmethod
    def from_json(cls, text: str) -> "SystemSpec":
        return cls.from_dict(json.loads(text))


def _check_rate(r: float) -> None:
    if not np.isfinite(r) or r < 0:
        raise ValueError(f"rates must be finite and non-negative, got {r!r}")


def _matrix_to_json(m: np.ndarray) -> dict[str, list]:
    m = np.asarray(m, dtype=complex)
    return {"re": m.real.tolist(), "im": m.imag.tolist()}


def _matrix_from_json(d: dict[str, list]) -> np.ndarray:
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)


@dataclass(frozen=True, eq=False)
class Superoperator:
    """Dense N^2 x N^2 generator acting on column-stacked density matrices."""

    dim: int
    matrix: np.ndarray
    convention: str = STACKING

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=complex)
        if m.shape != (self.dim**2, self.dim**2):
            raise ValueError(f"matrix has shape {m.shape}, expected {(self.dim**2,) * 2}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return unvec(self.matrix @ vec(rho), self.dim)

    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvals(self.matrix)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.matrix))


def _dissipator(a: np.ndarray, rate: float) -> np.ndarray:
    n = a.shape[0]
    eye = np.eye(n)
    ada = a.conj().T @ a
    return rate * (np.kron(a.conj(), a) - 0.5 * (np.kron(eye, ada) + np.kron(ada.T, eye)))


def vectorize_lgks(spec: SystemSpec) -> Superoperator:
    """Assemble the vectorized generator of ``spec``.

    Terms are added in a fixed order (Hamiltonian, channels, leaks,
    dephasers) so equal specs give bit-identical matrices.
    """
    n = spec.dim
    eye = np.eye(n)
    h = spec.hamiltonian
    lm = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for c in spec.channels:
        lm = lm + _dissipator(c.operator(n), c.rate)
    for a, r in spec.leaks:
        p = np.zeros((n, n))
        p[a, a] = 1.0
        lm = lm - 0.5 * r * (np.kron(eye, p) + np.kron(p.T, eye))
    for v, r in spec.dephasers:
        lm = lm + _dissipator(v, r)
    return Superoperator(n, lm)


# ---------------------------------------------------------------------------
# Two-level models in Bloch (Heisenberg) form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlochParams:
    """Driven two-level parameters: decay, detuning, Rabi frequency, branching."""

    gamma: float
    delta: float = 0.0
    omega: float = 0.0
    chi: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.chi <= 1.0:
            raise ValueError("chi must lie in [0, 1]")


def build_bloch(p: BlochParams) -> np.ndarray:
    """3x3 Bloch matrix acting on (X, Y, Z) of a closed two-level system."""
    if p.chi != 0:
        raise ValueError("build_bloch is the closed model; use build_leaky_bloch for chi != 0")
    g, d, w = p.gamma, p.delta, p.omega
    return np.array([[-g / 2, d, 0.0],
                     [-d, -g / 2, w],
                     [0.0, -w, -g]])


def build_leaky_bloch(p: BlochParams) -> np.ndarray:
    """4x4 Bloch matrix acting on (X, Y, Z, I) with fraction ``chi`` lost."""
    g, d, w, c = p.gamma, p.delta, p.omega, p.chi
    return np.array([[-g / 2, d, 0.0, 0.0],
                     [-d, -g / 2, w, 0.0],
                     [0.0, -w, -(1 - c / 2) * g, -(1 - c / 2) * g],
                     [0.0, 0.0, -c / 2 * g, -c / 2 * g]])


def build_tls_spec(gamma: float, delta: float = 0.0, omega: float = 0.0,
                   chi: float = 0.0) -> SystemSpec:
    """Two-level spec with basis (p, s) = (excited, ground).

    ``H = 1/2 [[delta, omega], [omega, -delta]]``; its generator has the same
    spectrum as :func:`build_leaky_bloch` plus, for ``chi = 0``, the
    stationary eigenvalue.
    """
    h = 0.5 * np.array([[delta, omega], [omega, -delta]], dtype=complex)
    channels = (DecayChannel(0, 1, (1.0 - chi) * gamma),)
    leaks = ((0, chi * gamma),) if chi > 0 else ()
    return SystemSpec(2, h, channels, leaks, labels=("p", "s"))


# ---------------------------------------------------------------------------
# Four-level Ca+ model
# ---------------------------------------------------------------------------

S_LEVELS = (0, 1)
P_LEVELS = (2, 3)


@dataclass(frozen=True)
class CaParams:
    """Parameters of the four-level S1/2 - P1/2 model.

    Levels 0, 1 are the S sub-levels and 2, 3 the P sub-levels. ``omega21``
    and ``omega43`` enter the diagonal of the Hamiltonian as written in
    :func:`build_ca_hamiltonian`.
    """

    gamma: float
    chi: float = 0.0
    delta: float = 0.0
    omega: float = 0.0
    omega21: float = 0.0
    omega43: float = 0.0
    gamma_deph: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.chi <= 1.0:
            raise ValueError("chi must lie in [0, 1]")
        if self.omega21 < 0 or self.omega43 < 0:
            raise ValueError("Zeeman splittings must be non-negative")
        if self.gamma_deph < 0:
            raise ValueError("gamma_deph must be non-negative")

    def replace(self, **kw) -> "CaParams":
        d = dict(self.__dict__)
        d.update(kw)
        return CaParams(**d)


def build_ca_hamiltonian(p: CaParams) -> np.ndarray:
    """Rotating-frame Hamiltonian of the four-level model (rad/ns)."""
    d, w = p.delta, p.omega
    h = np.diag([0.5 * (p.omega43 - d), 0.5 * (-p.omega43 - d),
                 0.5 * (p.omega21 + d), 0.5 * (-p.omega21 + d)]).astype(complex)
    h[0, 2] = h[2, 0] = w
    h[1, 3] = h[3, 1] = w
    return h


def ca_dephasing_operator() -> np.ndarray:
    """Laser-amplitude operator for amplitude-noise dephasing, with V^2 = I/2."""
    v = np.zeros((4, 4))
    v[0, 2] = v[2, 0] = v[1, 3] = v[3, 1] = 1.0
    return np.sqrt(0.5) * v


def build_ca_spec(p: CaParams) -> SystemSpec:
    """SystemSpec equivalent of :func:`build_ca_superoperator`."""
    half = 0.5 * (1.0 - p.chi) * p.gamma
    channels = tuple(DecayChannel(a, b, half) for a in P_LEVELS for b in S_LEVELS)
    leaks = tuple((a, p.chi * p.gamma) for a in P_LEVELS) if p.chi > 0 else ()
    deph = ((ca_dephasing_operator(), p.gamma_deph),) if p.gamma_deph > 0 else ()
    return SystemSpec(4, build_ca_hamiltonian(p), channels, leaks, deph,
                      labels=("S-", "S+", "P-", "P+"))


def build_ca_superoperator(p: CaParams) -> Superoperator:
    """Generator of the four-level model with equal P -> S branching."""
    return vectorize_lgks(build_ca_spec(p))


def ca_resonances(p: CaParams) -> tuple[float, float]:
    """Detunings at which each driven pair (0, 2) and (1, 3) is resonant.

    Returned in ascending order.
    """
    r1 = 0.5 * (p.omega43 - p.omega21)
    r2 = 0.5 * (p.omega21 - p.omega43)
    return (min(r1, r2), max(r1, r2))


def spec_from_matrices(h: np.ndarray, jumps: Sequence[tuple[int, int, float]] = (),
                       leaks: Sequence[tuple[int, float]] = ()) -> SystemSpec:
    """Small convenience wrapper used by tests and the CLI."""
    h = np.asarray(h, dtype=complex)
    return SystemSpec(h.shape[0], h, tuple(DecayChannel(a, b, r) for a, b, r in jumps), tuple(leaks))
