"""Signal-driven parameter estimation.

An experiment is represented by an oracle ``(delta, omega) -> TimeSignal``.
The estimators here only ever look at signals: harmonic inversion yields the
generator eigenvalues visible in a signal, the coalescence of a tracked pair
of those eigenvalues locates exceptional points, and the geometry of the
located points is inverted into the total decay rate, the branching fraction
and the resonance offsets. Model families are used only as fitting templates.
"""
from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import constants as sc
from scipy.optimize import minimize, minimize_scalar

from . import __version__
from .dynamics import (DensityState, Observable, TimeSignal, add_noise, average_shots, default_sampling,
                       emit_signal, initial_state_with_repump, population_observable,
                       probe_observable, probe_state)
from .epfinder import (EpCandidate, EpCurve, NotConverged, ParametricModel, _default_threads,
                       _directional_root, _line_root, bloch_model, ca_model, curve_distance)
from .harminv import (InversionResult, Mode, OrderOverflow, ep_indicator, invert, invert_polynomial,
                      noise_rank, reconstruct)
from .liouville import CaParams, SystemSpec, build_ca_spec, build_tls_spec, mhz_to_rad_per_ns, vectorize_lgks

__all__ = [
    "ExperimentOracle",
    "SimulatedOracle",
    "IngestedOracle",
    "OracleMiss",
    "IncompleteSpectrum",
    "SignalTooShort",
    "PoorFit",
    "WrongMultiplicity",
    "NoCentralCurve",
    "BranchesMerged",
    "GammaEstimate",
    "ChiEstimate",
    "ResonanceEstimate",
    "HLineEstimate",
    "DephasingEstimate",
    "PhysicalConstants",
    "ATOMIC_UNITS",
    "AtomicLineData",
    "EpTarget",
    "PipelineConfig",
    "EstimationReport",
    "FAMILIES",
    "trace_coefficient",
    "gamma_from_modes",
    "bootstrap_gamma",
    "locate_ep_iteratively",
    "curve_residual",
    "chi_from_curve",
    "resonances_from_ep24",
    "degeneracy_on_line",
    "h_line_from_degeneracy",
    "dephasing_from_split",
    "golden_rule_rate",
    "decay_rate_from_dipole",
    "run_pipeline",
]

FAMILIES = ("TLS", "leaky-TLS", "Ca4")
FAMILY_LEVELS = {"TLS": 2, "leaky-TLS": 2, "Ca4": 4}


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class OracleMiss(KeyError):
    """An ingested dataset has no signal recorded at the requested parameters."""


class IncompleteSpectrum(RuntimeError):
    """Fewer than 80% of the expected modes were observed."""

    def __init__(self, msg: str, estimate: "GammaEstimate | None" = None):
        super().__init__(msg)
        self.estimate = estimate


class SignalTooShort(RuntimeError):
    """The tracked pair is not resolvable on the provided time grid."""

    def __init__(self, msg: str, min_duration: float):
        super().__init__(msg)
        self.min_duration = min_duration


class PoorFit(RuntimeError):
    """A curve fit left a residual above its tolerance."""

    def __init__(self, msg: str, estimate: "ChiEstimate | None" = None):
        super().__init__(msg)
        self.estimate = estimate


class WrongMultiplicity(ValueError):
    """A candidate does not have the pair multiplicity the relation needs."""


class NoCentralCurve(RuntimeError):
    """No degeneracy candidates lie between the Bloch-like curves."""


class BranchesMerged(RuntimeError):
    """The two branches meet; no dephasing split is resolvable."""


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

class ExperimentOracle:
    """Maps drive parameters ``(delta, omega)`` to a measured time signal.

    Subclasses set ``provenance`` (``"simulated"`` or ``"ingested"``),
    ``reentrant`` and ``n_levels`` (``None`` if unknown).
    """

    provenance = "abstract"
    reentrant = False
    n_levels: int | None = None
    noise_level = 0.0

    def __call__(self, delta: float, omega: float) -> TimeSignal:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"provenance": self.provenance, "n_levels": self.n_levels}


def _point_seed(seed: int, delta: float, omega: float) -> list[int]:
    bits = np.array([delta, omega], dtype=np.float64).view(np.uint64)
    return [int(seed), int(bits[0]), int(bits[1])]


class SimulatedOracle(ExperimentOracle):
    """Simulated experiment built on a model family.

    Parameters
    ----------
    builder : callable
        ``builder(delta, omega)`` returns the :class:`SystemSpec` at a drive point.
    dt, n : float, int, optional
        Sampling grid shared by every call. Defaults come from
        :func:`default_sampling` at ``reference``.
    sigma : float
        Per-shot Gaussian noise level.
    shots : int
        Number of averaged shots per call.
    seed : int
        Noise seed. The noise of each call is derived from ``seed`` and the
        drive point, so repeated calls are identical.
    preparation : {"probe", "repump", "state"}
        ``"probe"`` rotates the repumped stationary state by a fixed generic
        unitary and reads a generic observable, which makes every mode
        visible. ``"repump"`` starts from the repumped state and
        ``"state"`` from ``initial``; both read ``observable``.
    observable : Observable, optional
        Required unless ``preparation="probe"``.
    initial : DensityState, optional
        Required for ``preparation="state"``.
    """

    provenance = "simulated"
    reentrant = True

    def __init__(self, builder: Callable[[float, float], SystemSpec], dt: float | None = None,
                 n: int | None = None, sigma: float = 0.0, shots: int = 1, seed: int = 0,
                 preparation: str = "probe", observable: Observable | None = None,
                 initial: DensityState | None = None, reference: tuple[float, float] = (0.0, 0.0), decay_times: float = 16.0,
                 max_samples: int = 2048, label: str = "simulated"):
        if preparation not in ("probe", "repump", "state"):
            raise ValueError("preparation must be 'probe', 'repump' or 'state'")
        if preparation != "probe" and observable is None:
            raise ValueError(f"preparation={preparation!r} needs an observable")
        if preparation == "state" and initial is None:
            raise ValueError("preparation='state' needs an initial state")
        if sigma < 0 or shots < 1:
            raise ValueError("sigma must be >= 0 and shots >= 1")
        self._builder = builder
        spec = builder(*reference)
        self.n_levels = spec.dim
        if dt is None or n is None:
            d0, n0 = default_sampling(vectorize_lgks(spec), decay_times=decay_times,
                                      max_samples=max_samples)
            dt = d0 if dt is None else dt
            n = n0 if n is None else n
        self.dt = float(dt)
        self.n = int(n)
        self.sigma = float(sigma)
        self.shots = int(shots)
        self.seed = int(seed)
        self.preparation = preparation
        self.observable = observable
        self.initial = initial
        self.label = label
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def noise_level(self) -> float:
        return self.sigma / np.sqrt(self.shots)

    @classmethod
    def tls(cls, gamma: float, chi: float = 0.0, **kw) -> "SimulatedOracle":
        """Two-level oracle; ``chi > 0`` adds the leak.

        ``preparation="ground"`` starts in the ground level and reads the
        excited population.
        """
        if kw.get("preparation") == "ground":
            kw.update(preparation="state", initial=DensityState.pure(2, 1),
                      observable=population_observable(2, (0,), "O_pop"))
        kw.setdefault("reference", (0.0, gamma))
        kw.setdefault("label", f"tls(gamma={gamma}, chi={chi})")
        return cls(lambda d, w: build_tls_spec(gamma, d, w, chi), **kw)

    @classmethod
    def ca(cls, params: CaParams, **kw) -> "SimulatedOracle":
        """Four-level oracle; ``params.delta`` and ``params.omega`` are ignored."""
        kw.setdefault("reference", (0.0, params.gamma))
        kw.setdefault("label", f"ca({params})")
        return cls(lambda d, w: build_ca_spec(params.replace(delta=d, omega=w)), **kw)

    def spec(self, delta: float, omega: float) -> SystemSpec:
        return self._builder(float(delta), float(omega))

    def __call__(self, delta: float, omega: float) -> TimeSignal:
        delta, omega = float(delta), float(omega)
        with self._lock:
            self.calls += 1
        spec = self.spec(delta, omega)
        L = vectorize_lgks(spec)
        if self.preparation == "state":
            rho = self.initial
        else:
            rho = initial_state_with_repump(spec)
        if self.preparation == "probe":
            rho = probe_state(rho)
            O = self.observable if self.observable is not None else probe_observable(spec.dim)
        else:
            O = self.observable
        s = emit_signal(L, rho, O, self.dt, self.n)
        if self.sigma > 0:
            s = average_shots(s, self.sigma, self.shots, _point_seed(self.seed, delta, omega))
        return s

    def describe(self) -> dict:
        return {"provenance": self.provenance, "n_levels": self.n_levels, "label": self.label,
                "dt": self.dt, "n": self.n, "sigma": self.sigma, "shots": self.shots,
                "seed": self.seed, "preparation": self.preparation}


class IngestedOracle(ExperimentOracle):
    """Recorded dataset: a directory of CSV signals plus ``index.json``.

    The index has the form::

        {"frequency_unit": "rad/ns" | "MHz", "n_levels": 4,
         "signals": [{"delta": ..., "omega": ..., "file": "s0000.csv"}, ...]}

    Lookups match drive parameters to ``rtol`` relative precision.
    """

    provenance = "ingested"
    reentrant = True
    INDEX = "index.json"

    def __init__(self, directory: str | Path, rtol: float = 1e-9):
        self.directory = Path(directory)
        path = self.directory / self.INDEX
        try:
            index = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read dataset index {path}: {exc}") from exc
        unit = index.get("frequency_unit", "rad/ns")
        if unit == "MHz":
            conv = mhz_to_rad_per_ns
        elif unit == "rad/ns":
            conv = float
        else:
            raise ValueError(f"unknown frequency_unit {unit!r}")
        self.n_levels = index.get("n_levels")
        self.rtol = rtol
        self._entries = [(conv(e["delta"]), conv(e["omega"]), e["file"]) for e in index["signals"]]
        self._cache: dict[str, TimeSignal] = {}
        self._lock = threading.Lock()

    def points(self) -> list[tuple[float, float]]:
        return [(d, w) for d, w, _ in self._entries]

    def __call__(self, delta: float, omega: float) -> TimeSignal:
        for d, w, f in self._entries:
            if (abs(d - delta) <= self.rtol * max(1.0, abs(d))
                    and abs(w - omega) <= self.rtol * max(1.0, abs(w))):
                with self._lock:
                    if f not in self._cache:
                        self._cache[f] = TimeSignal.from_csv((self.directory / f).read_text())
                    return self._cache[f]
        raise OracleMiss(f"no recorded signal at delta={delta!r}, omega={omega!r}")

    @classmethod
    def record(cls, oracle: ExperimentOracle, points: Sequence[tuple[float, float]],
               directory: str | Path) -> "IngestedOracle":
        """Write ``oracle`` signals at ``points`` as a dataset and load it back."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, (d, w) in enumerate(points):
            name = f"s{k:04d}.csv"
            s = oracle(d, w)
            (directory / name).write_text(s.to_csv([f"delta={d!r}", f"omega={w!r}"]))
            entries.append({"delta": float(d), "omega": float(w), "file": name})
        index = {"frequency_unit": "rad/ns", "n_levels": oracle.n_levels, "signals": entries}
        (directory / cls.INDEX).write_text(json.dumps(index, indent=1))
        return cls(directory)

    def describe(self) -> dict:
        return {"provenance": self.provenance, "n_levels": self.n_levels,
                "directory": str(self.directory), "n_signals": len(self._entries)}


class _Probe:
    """Cached oracle access: signal, inversion and visible eigenvalues."""

    def __init__(self, oracle: ExperimentOracle, K: int | None = None, rank_tol: float = 1e-12):
        self.oracle = oracle
        n = getattr(oracle, "n_levels", None)
        self.K = K if K is not None else (n * n if n else None)
        self.rank_tol = rank_tol
        self.calls = 0
        self._cache: dict[tuple[float, float], tuple[TimeSignal, InversionResult]] = {}
        self._lock = threading.Lock()

    def get(self, x) -> tuple[TimeSignal, InversionResult]:
        key = (float(x[0]), float(x[1]))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        s = self.oracle(*key)
        K = self.K
        sigma = getattr(self.oracle, "noise_level", 0.0)
        if sigma > 0:
            K = max(1, min(noise_rank(s, sigma), K or len(s)))
        r = invert(s, K=K, rank_tol=self.rank_tol, strict=False)
        with self._lock:
            self.calls += 1
            self._cache[key] = (s, r)
        return s, r

    def lams(self, x) -> np.ndarray:
        return np.array([m.eigenvalue for m in self.get(x)[1].modes])


def _as_probe(oracle, K=None, rank_tol=1e-12) -> _Probe:
    return oracle if isinstance(oracle, _Probe) else _Probe(oracle, K, rank_tol)


# ---------------------------------------------------------------------------
# Pair bookkeeping on observed eigenvalues
# ---------------------------------------------------------------------------

def _pair_F(lams: np.ndarray, lam_ref: complex) -> tuple[complex, complex, float]:
    """``F = (l1 - l2)**2``, mean and gap of the two eigenvalues nearest ``lam_ref``."""
    if lams.size < 2:
        raise NotConverged(f"only {lams.size} mode(s) resolved; no pair to track")
    idx = np.argsort(np.abs(lams - lam_ref))[:2]
    a, b = lams[idx]
    return complex((a - b) ** 2), complex(0.5 * (a + b)), float(abs(a - b))


def _sorted_pairs(lams: np.ndarray) -> list[tuple[float, int, int]]:
    out = [(float(abs(lams[i] - lams[j])), i, j)
           for i in range(lams.size) for j in range(i + 1, lams.size)]
    out.sort()
    return out


def _coalesced_pairs(lams: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    used: set[int] = set()
    out = []
    for g, i, j in _sorted_pairs(lams):
        if g > thresh:
            break
        if i in used or j in used:
            continue
        used.update((i, j))
        out.append((i, j))
    return out


def _kth_gap(lams: np.ndarray, k: int) -> float:
    pairs = _sorted_pairs(lams)
    return pairs[min(k, len(pairs)) - 1][0] if pairs else np.inf


def _select_pair(lams: np.ndarray, pairs: int) -> complex:
    """Mean of the tracked pair.

    For ``pairs == 1`` this is the closest pair. For ``pairs > 1`` it is a
    member of the group of ``pairs`` nearly equal gaps with the smallest gap,
    taking the member with the largest imaginary part.
    """
    sp = _sorted_pairs(lams)
    if not sp:
        raise ValueError("need at least two modes to track a pair")
    if pairs <= 1:
        _, i, j = sp[0]
        return complex(0.5 * (lams[i] + lams[j]))
    best = None
    for k in range(len(sp) - pairs + 1):
        grp = sp[k:k + pairs]
        hi = grp[-1][0]
        spread = (hi - grp[0][0]) / max(hi, 1e-300)
        key = (spread > 1e-3, hi)
        if best is None or key < best[0]:
            best = (key, grp)
    means = [0.5 * (lams[i] + lams[j]) for _, i, j in best[1]]
    return complex(max(means, key=lambda m: (m.imag, m.real)))


# ---------------------------------------------------------------------------
# Total decay rate from the mode sum
# ---------------------------------------------------------------------------

def trace_coefficient(n_levels: int) -> float:
    """Ratio ``-trace(L) / Gamma_total`` for the supported level schemes."""
    table = {2: 2.0, 4: 8.0}
    if n_levels not in table:
        raise ValueError(f"no trace coefficient for {n_levels} levels; pass coefficient=")
    return table[n_levels]


@dataclass(frozen=True)
class GammaEstimate:
    """Total decay rate from the sum of observed decay rates."""

    value: float
    n_observed: int
    n_expected: int
    n_imputed: int
    coefficient: float
    uncertainty: float = 0.0

    @property
    def partial(self) -> bool:
        return self.n_observed + self.n_imputed < self.n_expected

    @property
    def incomplete(self) -> bool:
        return self.n_observed + self.n_imputed < 0.8 * self.n_expected

    @property
    def flags(self) -> tuple[str, ...]:
        out = []
        if self.partial:
            out.append("partial")
        if self.incomplete:
            out.append("IncompleteSpectrum")
        return tuple(out)

    def to_dict(self) -> dict:
        return {"value": self.value, "uncertainty": self.uncertainty,
                "n_observed": self.n_observed, "n_expected": self.n_expected,
                "n_imputed": self.n_imputed, "coefficient": self.coefficient,
                "flags": list(self.flags)}


def gamma_from_modes(modes: Sequence[Mode] | Sequence[complex], n_levels: int,
                     coefficient: float | None = None, conj_tol: float = 1e-6,
                     strict: bool = False) -> GammaEstimate:
    """Total decay rate from the sum of the generator eigenvalues.

    Parameters
    ----------
    modes : sequence of Mode or complex eigenvalues
        Each mode term counts as one eigenvalue (a confluent term of order
        ``a`` is one more occurrence of its frequency).
    n_levels : int
        Number of levels ``N``; ``N**2`` eigenvalues are expected.
    coefficient : float, optional
        ``-trace(L) / Gamma_total``; defaults to :func:`trace_coefficient`.
    conj_tol : float
        Relative tolerance for matching complex-conjugate partners. Complex
        eigenvalues without a partner get one imputed.
    strict : bool
        Raise :class:`IncompleteSpectrum` instead of returning a flagged
        estimate when fewer than 80% of the modes are covered.
    """
    lams = np.array([m.eigenvalue if isinstance(m, Mode) else complex(m) for m in modes])
    coef = trace_coefficient(n_levels) if coefficient is None else float(coefficient)
    expected = n_levels * n_levels
    scale = max(float(np.abs(lams).max()) if lams.size else 0.0, 1e-300)
    tol = conj_tol * scale
    imputed = []
    free = list(range(lams.size))
    while free:
        i = free.pop(0)
        if abs(lams[i].imag) <= tol:
            continue
        target = lams[i].conjugate()
        match = [j for j in free if abs(lams[j] - target) <= max(tol, 1e-3 * abs(lams[i].imag))]
        if match:
            j = min(match, key=lambda j: abs(lams[j] - target))
            free.remove(j)
        else:
            imputed.append(target)
    total = -(lams.real.sum() + sum(z.real for z in imputed))
    est = GammaEstimate(float(total / coef), int(lams.size), expected, len(imputed), coef)
    if strict and est.incomplete:
        raise IncompleteSpectrum(f"{est.n_observed + est.n_imputed} of {expected} modes observed", est)
    return est


def bootstrap_gamma(result: InversionResult, signal: TimeSignal, n_levels: int,
                    resamples: int = 32, sigma: float | None = None, seed: int = 0,
                    coefficient: float | None = None) -> float:
    """Parametric-bootstrap standard deviation of :func:`gamma_from_modes`.

    The fitted model is re-sampled on the signal grid with Gaussian noise at
    ``sigma`` (default: the fit residual) and re-inverted.
    """
    if resamples < 2:
        return 0.0
    base = reconstruct(result, signal)
    base = TimeSignal(base.t0, base.dt, base.samples.real if signal.is_real() else base.samples,
                      base.label)
    peak = float(np.abs(signal.samples).max())
    sig = max(result.residual_rms if sigma is None else sigma, 4 * np.finfo(float).eps * peak)
    vals = []
    for ss in np.random.SeedSequence(seed).spawn(resamples):
        r = invert(add_noise(base, sig, ss), K=result.K, strict=False)
        vals.append(gamma_from_modes(r.modes, n_levels, coefficient).value)
    return float(np.std(vals, ddof=1))


# ---------------------------------------------------------------------------
# Signal-only EP location
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpTarget:
    """What :func:`locate_ep_iteratively` converges to.

    Attributes
    ----------
    kind : {"point", "line", "axis"}
        ``"point"``: isolated EP with both parameters free. ``"line"``: the
        crossing of an EP2 curve along ``active``. ``"axis"``: apex of an
        EP-curve that is mirror symmetric in ``delta``.
    lam_ref : complex, optional
        Eigenvalue hint selecting the tracked pair (the two observed
        eigenvalues nearest it). Defaults to the pair picked by ``pairs``.
    pairs : int
        Number of pairs expected to coalesce together (4 for an EP2^4).
    active : {"delta", "omega"}
        Free parameter for ``kind="line"``.
    """

    kind: str = "point"
    lam_ref: complex | None = None
    pairs: int = 1
    active: str = "omega"

    def __post_init__(self) -> None:
        if self.kind not in ("point", "line", "axis"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.active not in ("delta", "omega"):
            raise ValueError(f"unknown parameter {self.active!r}")


def _signal_candidate(P: _Probe, x: np.ndarray, lam_ref: complex, converged: bool,
                      scale: float, gap_tol: float, notes: tuple[str, ...]) -> EpCandidate:
    s, r = P.get(x)
    lams = np.array([m.eigenvalue for m in r.modes])
    F, lm, gap = _pair_F(lams, lam_ref)
    merged = _coalesced_pairs(lams, gap_tol)
    orders: list[int] = []
    lams_c: list[complex] = []
    kind = "candidate"
    try:
        rp = invert_polynomial(s, K=r.K, merge_tol=gap_tol * s.dt)
        clusters: dict[complex, int] = {}
        for m in rp.modes:
            clusters[m.omega] = max(clusters.get(m.omega, 0), m.order + 1)
        for w, o in clusters.items():
            if o >= 2:
                orders.append(o)
                lams_c.append(-1j * w)
        if any(o >= 3 for o in orders):
            kind = "EP3"
        elif len(orders) == 1:
            kind = "EP2"
        elif len(orders) > 1:
            kind = f"EP2^{len(orders)}"
    except OrderOverflow:
        kind = "ambiguous"
    mult = max(len(orders), len(merged)) if orders else len(merged)
    return EpCandidate({"delta": float(x[0]), "omega": float(x[1])}, lm, tuple(orders),
                       tuple(lams_c), mult, ep_indicator(r), gap, abs(F) / scale, kind,
                       converged, notes)


def _finite_newton(Ffun, x, F, h, tol, max_iter=25):
    """Newton on ``(Re F, Im F)`` with a forward-difference Jacobian and backtracking."""
    last = np.inf
    for _ in range(max_iter):
        J = np.empty((2, 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            Fi = Ffun(x + e)
            J[:, i] = [(Fi - F).real / h, (Fi - F).imag / h]
        rhs = -np.array([F.real, F.imag])
        try:
            dx = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, rhs, rcond=None)[0]
        t = 1.0
        for _ in range(8):
            xn = x + t * dx
            Fn = Ffun(xn)
            if abs(Fn) < abs(F):
                break
            t *= 0.5
        else:
            break
        x, F = xn, Fn
        last = float(np.linalg.norm(t * dx))
        if last <= tol:
            break
    return x, F, last


def locate_ep_iteratively(oracle, start: Sequence[float], target: EpTarget | None = None,
                          tol: float = 1e-10, gap_tol: float | None = None, scale: float | None = None,
                          simplex_evals: int = 60, fd_step: float | None = None,
                          max_travel: float = 20.0, K: int | None = None, rank_tol: float = 1e-12,
                          raise_on_failure: bool = True) -> EpCandidate:
    """Walk to an EP using only signals.

    Each iterate calls the oracle, inverts the signal and evaluates the
    coalescence ``F = (l1 - l2)**2`` of the tracked pair of observed
    eigenvalues. Isolated points are approached by a Nelder-Mead descent on
    ``|F|`` followed by finite-difference Newton steps on ``(Re F, Im F)``;
    curve crossings use bracketed root finding of the real ``F``.

    Parameters
    ----------
    oracle : ExperimentOracle
    start : (delta, omega)
        Must lie where the tracked pair is resolvable.
    target : EpTarget
    tol : float
        Step tolerance relative to ``scale``.
    gap_tol : float, optional
        Pair separation counted as coalesced when classifying the final point
        (default ``1e-4 * scale``).
    scale : float, optional
        Rate scale; defaults to the largest observed decay rate at ``start``.
    max_travel : float
        Distance from ``start`` (in units of ``scale``) beyond which the walk
        is considered lost.

    Raises
    ------
    SignalTooShort
        If the oracle is noisy and the tracked pair at ``start`` is closer
        than the Fourier resolution ``2 pi / duration``. Noiseless signals
        are resolved below that limit by the inversion.
    NotConverged
    """
    target = target or EpTarget()
    P = _as_probe(oracle, K, rank_tol)
    x0 = np.asarray(start, dtype=float)
    lams = P.lams(x0)
    if scale is None:
        scale = max(float(np.abs(lams.real).max()), 1e-300)
    gap_tol = 1e-4 * scale if gap_tol is None else gap_tol
    noise = getattr(P.oracle, "noise_level", 0.0)
    h = fd_step if fd_step is not None else max(1e-7, 10 * np.sqrt(noise)) * scale
    xtol = max(tol, 30 * noise) * scale
    lam_ref = target.lam_ref if target.lam_ref is not None else _select_pair(lams, target.pairs)
    _, lam_ref, g0 = _pair_F(lams, lam_ref)
    duration = P.get(x0)[0].duration
    if noise > 0 and g0 * duration < 2 * np.pi:
        raise SignalTooShort(f"tracked pair gap {g0:.3e} is below the Fourier resolution "
                             f"{2 * np.pi / duration:.3e} of the grid",
                             2 * np.pi / max(g0, 1e-300))
    state = {"lam": lam_ref}

    def Fat(x):
        F, lm, _ = _pair_F(P.lams(x), state["lam"])
        return F, lm

    converged = False
    notes: list[str] = []
    x = x0.copy()
    if target.kind == "point":
        best = [np.inf]

        def obj(y):
            F, lm = Fat(y)
            if abs(F) < best[0]:
                best[0] = abs(F)
                state["lam"] = lm
            return abs(F)

        step = 0.02 * scale
        simplex = np.array([x0, x0 + [step, 0.0], x0 + [0.0, step]])
        res = minimize(obj, x0, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxfev": simplex_evals,
                                "xatol": xtol, "fatol": 0.0})
        x = np.asarray(res.x, float)
        F, state["lam"] = Fat(x)
        x, F, last = _finite_newton(lambda y: Fat(y)[0], x, F, h, xtol)
        converged = last <= max(xtol, 10 * h) or np.sqrt(abs(F)) <= 1e-6 * scale
        notes.append(f"newton_last_step={last:.3e}")
    elif target.kind == "line":
        i = 0 if target.active == "delta" else 1
        e = np.zeros(2)
        e[i] = 1.0
        r = _line_root(lambda s: Fat(x0 + s * e)[0].real, 1e-3 * scale, s_max=max_travel * scale,
                       xtol=xtol)
        if r is not None:
            x = x0 + r * e
            converged = True
    else:
        x, converged = _walk_axis(Fat, x0, scale, xtol, max_travel)
    _, state["lam"] = Fat(x)
    if np.linalg.norm(x - x0) > max_travel * scale:
        converged = False
        notes.append("left the search region")
    notes.append(f"oracle_calls={P.calls}")
    cand = _signal_candidate(P, x, state["lam"], converged, scale, gap_tol, tuple(notes))
    if not converged and raise_on_failure:
        raise NotConverged(f"signal-driven search did not converge from {tuple(x0)}", cand)
    return cand


def _walk_axis(Fat, x0, scale, xtol, max_travel, halfwidth=0.04):
    """Apex of a mirror-symmetric EP curve.

    ``omega_v(delta)`` is the curve crossing on the vertical line at
    ``delta``. Mirror symmetry makes ``g(c) = omega_v(c + d) - omega_v(c - d)``
    vanish on the axis; ``g`` is solved by secant steps and the apex is the
    crossing on the axis. Any signal-derived curve inherits the symmetry, so
    the axis estimate stays unbiased when noise hides weak modes.
    """
    ev = np.array([0.0, 1.0])
    h = 1e-3 * scale
    d = halfwidth * scale
    last = {"omega": float(x0[1])}

    def omega_v(delta):
        base = np.array([delta, last["omega"]])
        r = _line_root(lambda s: Fat(base + s * ev)[0].real, h, s_max=max_travel * scale, xtol=xtol)
        if r is None:
            raise _NoCrossing(delta)
        last["omega"] = float(base[1] + r)
        return last["omega"]

    def g(c):
        return omega_v(c + d) - omega_v(c - d)

    try:
        c0 = float(x0[0])
        g0 = g(c0)
        c1 = c0 - np.sign(g0 if g0 != 0 else 1.0) * 0.25 * d
        g1 = g(c1)
        converged = False
        for _ in range(40):
            if g1 == g0:
                converged = abs(c1 - c0) <= 10 * xtol
                break
            c2 = c1 - g1 * (c1 - c0) / (g1 - g0)
            if abs(c2 - c1) > 2 * d:
                c2 = c1 + np.sign(c2 - c1) * 2 * d
            c0, g0 = c1, g1
            c1, g1 = c2, g(c2)
            if abs(c1 - c0) <= xtol:
                converged = True
                break
        x = np.array([c1, omega_v(c1)])
    except _NoCrossing:
        return np.asarray(x0, float), False
    return x, converged


class _NoCrossing(Exception):
    pass


# ---------------------------------------------------------------------------
# Branching fraction from an EP curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChiEstimate:
    chi: float
    residual: float
    uncertainty: float
    n_points: int
    family: str

    def to_dict(self) -> dict:
        return {"chi": self.chi, "residual": self.residual, "uncertainty": self.uncertainty,
                "n_points": self.n_points, "family": self.family}


def _curve_coords(curve: EpCurve, gamma: float, center: float, scaled: bool):
    pts = curve.array().copy()
    lams = np.asarray(curve.lams, dtype=complex)
    pts[:, 0] -= center
    if scaled:
        pts /= gamma
        lams = lams / gamma
    return pts, lams


def _distances(curve, gamma, chi, family, center):
    scaled = family is None
    fam = family or (lambda c: bloch_model(1.0, c))
    pts, lams = _curve_coords(curve, gamma, 0.0 if family is not None else center, scaled)
    return curve_distance(fam(chi), pts, lams)


def curve_residual(curve: EpCurve, gamma: float, chi: float,
                   family: Callable[[float], ParametricModel] | None = None,
                   center: float = 0.0) -> float:
    """RMS distance of ``curve`` to the family member at ``chi``.

    Without ``family`` the leaky two-level family is used in Gamma-scaled
    coordinates ``((delta - center) / gamma, omega / gamma)``. A custom
    ``family`` maps ``chi`` to a model in the curve's own coordinates.
    """
    d = _distances(curve, gamma, chi, family, center)
    return float(np.sqrt(np.mean(d ** 2)))


def chi_from_curve(curve: EpCurve, gamma: float, family: Callable[[float], ParametricModel] | None = None,
                   center: float = 0.0, tol: float = 1e-6, bounds: tuple[float, float] = (0.0, 1.0),
                   grid: int = 21) -> ChiEstimate:
    """Least-squares branching fraction of a measured EP curve.

    Parameters
    ----------
    curve : EpCurve
        At least 10 points with points on both sides of ``center``.
    gamma : float
        Total decay rate used to scale the curve.
    family : callable, optional
        ``chi -> ParametricModel``; default is the leaky two-level family.
    center : float
        Mirror axis of the curve in ``delta``.
    tol : float
        Refinement tolerance of the curve points; the fit fails with
        :class:`PoorFit` if its residual exceeds ``10 * tol``.
    """
    if len(curve) < 10:
        raise ValueError(f"need at least 10 curve points, got {len(curve)}")
    d = curve.array()[:, 0] - center
    if not (np.any(d < 0) and np.any(d > 0)):
        raise ValueError("curve must have points on both branches")
    lo, hi = bounds
    f = lambda c: curve_residual(curve, gamma, float(c), family, center)
    cs = np.linspace(lo, hi, grid)
    vals = np.array([f(c) for c in cs])
    k = int(np.argmin(vals))
    a, b = cs[max(k - 1, 0)], cs[min(k + 1, grid - 1)]
    opt = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    chi, resid = (float(opt.x), float(opt.fun)) if opt.fun <= vals[k] else (float(cs[k]), float(vals[k]))
    hc = 1e-4 * max(hi - lo, 1e-12)
    dp = _distances(curve, gamma, min(chi + hc, hi), family, center)
    dm = _distances(curve, gamma, max(chi - hc, lo), family, center)
    slope = np.sqrt(np.mean(((dp + dm) / (2 * hc)) ** 2))
    unc = float(resid / slope) if slope > 0 else float("inf")
    name = "leaky-two-level" if family is None else getattr(family(chi), "name", "custom")
    est = ChiEstimate(chi, resid, unc, len(curve), name)
    if resid > 10 * tol:
        raise PoorFit(f"fit residual {resid:.3e} exceeds {10 * tol:.3e}", est)
    return est


# ---------------------------------------------------------------------------
# Resonances, central degeneracy line and dephasing split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResonanceEstimate:
    delta: float
    gamma_check: float
    consistency: float | None
    candidate: EpCandidate

    def to_dict(self) -> dict:
        return {"delta": self.delta, "gamma_check": self.gamma_check,
                "consistency": self.consistency, "candidate": self.candidate.to_dict()}


def resonances_from_ep24(candidates: Sequence[EpCandidate],
                         gamma_modes: float | None = None) -> list[ResonanceEstimate]:
    """Resonance offsets and ``Gamma = 4 omega`` cross-checks from EP2^4 points.

    Raises
    ------
    WrongMultiplicity
        If a candidate does not carry four coalescing pairs.
    """
    out = []
    for c in candidates:
        if c.multiplicity != 4:
            raise WrongMultiplicity(f"candidate at ({c.delta:.6g}, {c.omega:.6g}) has "
                                    f"multiplicity {c.multiplicity}, expected 4")
        g = 4.0 * c.omega
        cons = None if gamma_modes is None else abs(g - gamma_modes) / abs(gamma_modes)
        out.append(ResonanceEstimate(c.delta, g, cons, c))
    return out


def degeneracy_on_line(oracle, omega: float, center: float = 0.0, h: float | None = None,
                       scale: float = 1.0, iterations: int = 6, K: int | None = None) -> EpCandidate:
    """Locate the diabolic crossing closest to ``center`` along ``delta``.

    The gap of the crossing pair is V-shaped, ``g = a |delta - delta0|``,
    so two gaps straddling ``delta0`` give it by linear interpolation. The
    bracket shrinks around the current estimate on each iteration.
    """
    P = _as_probe(oracle, K)
    h = 1e-3 * scale if h is None else h
    lams = P.lams((center + h, omega))
    lam_ref = _select_pair(lams, 1)
    d0 = center
    for _ in range(iterations):
        _, lp, gp = _pair_F(P.lams((d0 + h, omega)), lam_ref)
        _, lm, gm = _pair_F(P.lams((d0 - h, omega)), lam_ref)
        if gp + gm == 0:
            break
        shift = h * (gm - gp) / (gm + gp)
        if abs(shift) >= h:
            d0 += shift
            continue
        d0 += shift
        lam_ref = 0.5 * (lp + lm)
        h = max(min(h, 20 * abs(shift)), 1e-7 * scale)
    _, lm, g = _pair_F(P.lams((d0, omega)), lam_ref)
    s, r = P.get((d0, omega))
    return EpCandidate({"delta": float(d0), "omega": float(omega)}, lm, (), (), 0,
                       ep_indicator(r), g, g / scale, "degenerate", True,
                       (f"oracle_calls={P.calls}",))


@dataclass(frozen=True)
class HLineEstimate:
    offset: float
    spread: float
    n_points: int

    def to_dict(self) -> dict:
        return {"offset": self.offset, "spread": self.spread, "n_points": self.n_points}


def h_line_from_degeneracy(candidates: Sequence[EpCandidate], window: float | None = None,
                           kinds: Sequence[str] = ("degenerate", "ambiguous")) -> HLineEstimate:
    """Offset of the central degeneracy locus.

    Candidates qualify if their kind is in ``kinds`` or their order is at
    least 2, and if ``|delta| <= window``. The default window is half the
    smallest ``|delta|`` among EP-classified candidates, so the flanking
    Bloch-like curves are excluded.

    Raises
    ------
    NoCentralCurve
    """
    if window is None:
        eps = [abs(c.delta) for c in candidates if c.kind.startswith("EP")]
        window = 0.5 * min(eps) if eps else np.inf
    sel = [c for c in candidates
           if (c.kind in kinds or (c.order >= 2 and not c.kind.startswith("EP")))
           and abs(c.delta) <= window]
    if not sel:
        raise NoCentralCurve("no degeneracy candidates between the Bloch-like curves")
    d = np.array([c.delta for c in sel])
    return HLineEstimate(float(d.mean()), float(d.std()), len(sel))


@dataclass(frozen=True)
class DephasingEstimate:
    gamma_deph: float
    center: float
    terminations: tuple[float, float]
    residual: float

    def to_dict(self) -> dict:
        return {"gamma_deph": self.gamma_deph, "center": self.center,
                "terminations": list(self.terminations), "residual": self.residual}


def _branch_points(b) -> np.ndarray:
    return b.array() if isinstance(b, EpCurve) else np.asarray(b, dtype=float)


def dephasing_from_split(branches: Sequence, degree: int = 2, resolution: float = 1e-6) -> DephasingEstimate:
    """Dephasing rate from the separation of two branch terminations.

    Each branch (an :class:`EpCurve` or an array of ``(delta, omega)``) is
    fitted by a polynomial of ``degree`` in ``omega**2`` and extrapolated to
    ``omega = 0``; the estimate is the distance between the two
    terminations. A single curve is split at its median ``delta``.

    Raises
    ------
    BranchesMerged
        If the terminations are closer than ``resolution`` plus ten times
        the fit residual.
    """
    if len(branches) == 1:
        pts = _branch_points(branches[0])
        c = np.median(pts[:, 0])
        branches = [pts[pts[:, 0] < c], pts[pts[:, 0] >= c]]
    if len(branches) != 2:
        raise ValueError("need exactly two branches")
    ends, res = [], 0.0
    for b in branches:
        pts = _branch_points(b)
        if pts.shape[0] < degree + 1:
            raise ValueError(f"each branch needs at least {degree + 1} points")
        w2 = pts[:, 1] ** 2
        coef = np.polynomial.polynomial.polyfit(w2, pts[:, 0], degree)
        fit = np.polynomial.polynomial.polyval(w2, coef)
        res = max(res, float(np.sqrt(np.mean((fit - pts[:, 0]) ** 2))))
        ends.append(float(coef[0]))
    lo, hi = sorted(ends)
    sep = hi - lo
    if sep <= resolution + 10 * res:
        raise BranchesMerged(f"branch terminations {lo:.9g} and {hi:.9g} are not separated")
    return DephasingEstimate(sep, 0.5 * (lo + hi), (lo, hi), res)


# ---------------------------------------------------------------------------
# Golden-rule decay rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalConstants:
    """``hbar`` and ``c`` in one unit system, plus its time unit in seconds.

    The default is atomic units: ``hbar = 1``, ``c = 1/alpha`` and time unit
    ``hbar / E_h``.
    """

    hbar: float = 1.0
    c: float = 1.0 / sc.fine_structure
    time_unit_s: float = sc.physical_constants["atomic unit of time"][0]


ATOMIC_UNITS = PhysicalConstants()


@dataclass(frozen=True)
class AtomicLineData:
    """Transition data for the golden-rule rate.

    Attributes
    ----------
    omega : float
        Transition angular frequency in rad/ns.
    dipole : float
        Dipole matrix element magnitude in the units of ``constants``
        (``e a0`` for atomic units).
    """

    omega: float
    dipole: float
    constants: PhysicalConstants = ATOMIC_UNITS

    def __post_init__(self) -> None:
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.dipole < 0:
            raise ValueError("dipole magnitude must be non-negative")


def golden_rule_rate(omega: float, dipole: float, hbar: float = 1.0,
                     c: float = ATOMIC_UNITS.c) -> float:
    """``(4/3) omega**3 |d|**2 / (hbar c**3)`` in a single consistent unit system."""
    return 4.0 / 3.0 * omega ** 3 * dipole ** 2 / (hbar * c ** 3)


def decay_rate_from_dipole(line: AtomicLineData) -> float:
    """Spontaneous decay rate in 1/ns."""
    t_ns = line.constants.time_unit_s * 1e9
    rate = golden_rule_rate(line.omega * t_ns, line.dipole, line.constants.hbar, line.constants.c)
    return rate / t_ns


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Settings of :func:`run_pipeline`.

    Grids in ``chi_omegas``, ``chi_deltas`` and ``hline_omegas`` and the
    scan half-width ``delta_span`` are in units of the estimated total decay
    rate. ``generic_point`` is in rad/ns and must avoid EPs.
    """

    family: str
    zeeman_ratio: float = 1.0 / 3.0
    generic_point: tuple[float, float] = (0.2, 0.05)
    delta_span: float = 6.0
    n_scan: int = 121
    chi_omegas: tuple[float, ...] = (0.04, 0.06, 0.08, 0.10, 0.12, 0.14)
    chi_deltas: tuple[float, ...] = (0.01, 0.02, 0.03, 0.04, 0.05)
    hline_omegas: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    tol: float = 1e-10
    chi_tol: float = 1e-6
    bootstrap: int = 32
    seed: int = 0
    threads: int | None = None
    K: int | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not 0 < self.zeeman_ratio < 1:
            raise ValueError("zeeman_ratio must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        kw = dict(d)
        for k in ("generic_point", "chi_omegas", "chi_deltas", "hline_omegas"):
            if k in kw:
                kw[k] = tuple(float(v) for v in kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class EstimationReport:
    """Outcome of :func:`run_pipeline`; every value links to its evidence."""

    family: str
    gamma_total: float | None = None
    gamma_uncertainty: float | None = None
    gamma_flags: tuple[str, ...] = ()
    chi: float | None = None
    chi_uncertainty: float | None = None
    resonances: list[dict] = field(default_factory=list)
    h_line_frequency: float | None = None
    h_line_uncertainty: float | None = None
    ep_evidence: list[EpCandidate] = field(default_factory=list)
    modes: list[Mode] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"family": self.family, "gamma_total": self.gamma_total,
                "gamma_uncertainty": self.gamma_uncertainty, "gamma_flags": list(self.gamma_flags),
                "chi": self.chi, "chi_uncertainty": self.chi_uncertainty,
                "resonances": self.resonances, "h_line_frequency": self.h_line_frequency,
                "h_line_uncertainty": self.h_line_uncertainty,
                "ep_evidence": [c.to_dict() for c in self.ep_evidence],
                "modes": [m.to_dict() for m in self.modes], "notes": self.notes,
                "failures": self.failures, "provenance": self.provenance}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _step_gamma(P: _Probe, cfg: PipelineConfig, n_levels: int, rep: EstimationReport) -> float:
    s, r = P.get(cfg.generic_point)
    est = gamma_from_modes(r.modes, n_levels)
    unc = bootstrap_gamma(r, s, n_levels, cfg.bootstrap, seed=cfg.seed,
                          sigma=max(r.residual_rms, P.oracle.noise_level))
    rep.gamma_total = est.value
    rep.gamma_uncertainty = unc
    rep.gamma_flags = est.flags
    rep.modes = list(r.modes)
    rep.notes.append(f"gamma: {est.n_observed} modes observed, {est.n_imputed} imputed, "
                     f"trace coefficient {est.coefficient:g}")
    return est.value


def _location_uncertainty(c: EpCandidate, tol: float, scale: float) -> float:
    for n in c.notes:
        if n.startswith("newton_last_step="):
            return max(float(n.split("=")[1]), tol * scale)
    return tol * scale


def _curve_root(P: _Probe, x0, axis: int, sign: int, lam_ref: complex, h: float,
                gap_tol: float = np.inf):
    e = np.zeros(2)
    e[axis] = 1.0
    x0 = np.asarray(x0, float)
    f = lambda s: _pair_F(P.lams(x0 + s * e), lam_ref)[0].real
    # A sign change of F can also come from the nearest pair switching
    # identity; a genuine crossing has a vanishing gap.
    ok = lambda s: _pair_F(P.lams(x0 + s * e), lam_ref)[2] <= gap_tol
    r = _directional_root(f, h, sign, accept=ok) if sign else _line_root(f, h)
    if r is None:
        return None
    x = x0 + r * e
    return x, _pair_F(P.lams(x), lam_ref)[1]


def _tls_steps(P, cfg, g, rep, pool):
    target = EpTarget("axis", lam_ref=-0.75 * g)
    apex = locate_ep_iteratively(P, (0.05 * g, 0.2 * g), target, tol=cfg.tol, scale=g)
    rep.ep_evidence.append(apex)
    rep.resonances = [{"value": apex.delta, "uncertainty": cfg.tol * g,
                       "gamma_check": 4 * apex.omega if cfg.family == "TLS" else None}]
    if cfg.family == "TLS":
        rep.chi, rep.chi_uncertainty = 0.0, 0.0
        rep.notes.append("chi: closed family, fixed at 0")
        return
    jobs = [(apex.delta + sgn * c * g) for c in cfg.chi_deltas for sgn in (-1, 1)]
    found = list(pool.map(lambda d: _curve_root(P, (d, apex.omega), 1, 0, apex.lam, 1e-3 * g), jobs))
    pts = [(apex.delta, apex.omega)] + [tuple(f[0]) for f in found if f is not None]
    lams = [apex.lam] + [f[1] for f in found if f is not None]
    order = np.argsort([p[0] for p in pts])
    curve = EpCurve(tuple(pts[i] for i in order), tuple(lams[i] for i in order))
    est = chi_from_curve(curve, g, center=apex.delta, tol=cfg.chi_tol)
    rep.chi, rep.chi_uncertainty = est.chi, est.uncertainty
    rep.notes.append(f"chi: leaky two-level fit to {est.n_points} points, residual {est.residual:.2e}")


def _ca_ep24(P, cfg, g, sign, pool):
    ds = sign * np.linspace(0.02, cfg.delta_span, cfg.n_scan // 2) * g
    w = 0.25 * g
    ind = np.array(list(pool.map(lambda d: _kth_gap(P.lams((d, w)), 4), ds)))
    # Interior minima only: the edge nearest zero detuning is the central
    # degeneracy line. Each dip is refined since the grid undersamples the
    # square-root cusp of the EP2^4.
    dips = [k for k in range(1, ds.size - 1) if ind[k] <= ind[k - 1] and ind[k] <= ind[k + 1]]
    if not dips:
        raise NotConverged("no local minimum of the four-pair gap along the scan")
    step = abs(ds[1] - ds[0])

    def refine(k):
        r = minimize_scalar(lambda d: _kth_gap(P.lams((d, w)), 4),
                            bounds=(ds[k] - step, ds[k] + step), method="bounded",
                            options={"xatol": 1e-6 * g})
        return float(r.fun), float(r.x)

    _, seed = min(pool.map(refine, dips))
    return locate_ep_iteratively(P, (seed, w), EpTarget("point", pairs=4), tol=cfg.tol, scale=g)


def _ca_hline(P, cfg, g, pool):
    cands = list(pool.map(lambda w: degeneracy_on_line(P, w * g, 0.0, scale=g), cfg.hline_omegas))
    return cands, h_line_from_degeneracy(cands, window=np.inf)


def _ca_chi(P, cfg, g, res, pool):
    r = cfg.zeeman_ratio
    w21 = 2 * abs(res) / (1 - r)
    w43 = r * w21
    jobs = [(w * g, sgn) for w in cfg.chi_omegas for sgn in (-1, 1)]
    # The probe gap at a genuine root is about the square root of the fit
    # error (1e-4 g here); identity switches of the pair leave gaps of
    # order 1e-2 g.
    found = list(pool.map(lambda j: _curve_root(P, (res, j[0]), 0, j[1], -0.5 * g, 1e-4 * g, 2e-3 * g), jobs))
    ok = [f for f in found if f is not None]
    order = np.argsort([f[0][0] for f in ok])
    curve = EpCurve(tuple(tuple(ok[i][0]) for i in order), tuple(ok[i][1] for i in order))
    base = CaParams(g, 0.0, 0.0, 0.0, w21, w43)
    family = lambda chi: ca_model(base.replace(chi=chi))
    return chi_from_curve(curve, g, family=family, center=res, tol=cfg.chi_tol), curve


def _ca_steps(P, cfg, g, rep, pool, inner):
    futs = {"ep24+": pool.submit(_ca_ep24, P, cfg, g, +1, inner),
            "ep24-": pool.submit(_ca_ep24, P, cfg, g, -1, inner),
            "h_line": pool.submit(_ca_hline, P, cfg, g, inner)}
    eps = []
    for key in ("ep24-", "ep24+"):
        try:
            eps.append(futs[key].result())
        except Exception as exc:
            rep.failures[key] = _describe(exc)
    rep.ep_evidence.extend(eps)
    res_list = []
    try:
        res_list = resonances_from_ep24(eps, g)
        rep.resonances = [{"value": r.delta, "uncertainty": _location_uncertainty(r.candidate, cfg.tol, g),
                           "gamma_check": r.gamma_check, "consistency": r.consistency}
                          for r in res_list]
    except Exception as exc:
        rep.failures["resonances"] = _describe(exc)
    try:
        cands, hl = futs["h_line"].result()
        rep.ep_evidence.extend(cands)
        rep.h_line_frequency, rep.h_line_uncertainty = hl.offset, hl.spread
    except Exception as exc:
        rep.failures["h_line"] = _describe(exc)
    if not res_list:
        rep.failures["chi"] = "skipped: no resonance located"
        return
    res = max(r.delta for r in res_list)
    try:
        est, curve = _ca_chi(P, cfg, g, res, inner)
    except Exception as exc:
        rep.failures["chi"] = _describe(exc)
        return
    rep.chi, rep.chi_uncertainty = est.chi, est.uncertainty
    rep.notes.append(f"chi: four-level fit to {est.n_points} points near {res:.6g}, "
                     f"residual {est.residual:.2e}")


def run_pipeline(oracle: ExperimentOracle, config: PipelineConfig | Mapping) -> EstimationReport:
    """Estimate decay rate, branching fraction and resonances from signals.

    Steps: (1) Gamma from the mode sum at a generic drive point; (2) EP
    location (EP2^4 points for the four-level family, the curve apex for
    two-level families), giving the resonances and the ``4 omega``
    cross-check; (3) the branching fraction from a fit of measured EP-curve
    points; (4) the central degeneracy line (four-level family). Failures of
    individual steps are recorded in ``failures`` without aborting the
    independent ones.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_dict(config)
    n_levels = getattr(oracle, "n_levels", None) or FAMILY_LEVELS[cfg.family]
    if n_levels != FAMILY_LEVELS[cfg.family]:
        raise ValueError(f"oracle has {n_levels} levels but family {cfg.family} needs "
                         f"{FAMILY_LEVELS[cfg.family]}")
    P = _Probe(oracle, cfg.K or n_levels * n_levels)
    rep = EstimationReport(cfg.family, provenance={"tool": "epspec", "version": __version__,
                                                   "oracle": oracle.describe(),
                                                   "config": cfg.to_dict()})
    try:
        g = _step_gamma(P, cfg, n_levels, rep)
    except Exception as exc:
        rep.failures["gamma"] = _describe(exc)
        rep.failures["ep_location"] = "skipped: requires gamma"
        return rep
    threads = cfg.threads or _default_threads()
    if not getattr(oracle, "reentrant", False):
        threads = 1
    with ThreadPoolExecutor(max_workers=max(threads, 3)) as outer, \
            ThreadPoolExecutor(max_workers=threads) as inner:
        try:
            if cfg.family == "Ca4":
                _ca_steps(P, cfg, g, rep, outer, inner)
            else:
                _tls_steps(P, cfg, g, rep, inner)
        except Exception as exc:
            rep.failures["ep_location"] = _describe(exc)
    rep.notes.append(f"oracle_calls={P.calls}")
    return rep
