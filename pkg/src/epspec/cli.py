"""Command-line front end.

Subcommands ``simulate``, ``invert``, ``scan-ep``, ``trace-curve``,
``classify`` and ``estimate`` share one JSON configuration validated against
``schemas/run_config.schema.json``. Frequencies in the configuration are in
``model.units`` (``rad/ns`` or ``MHz``) and are converted once, here; rates
are always in 1/ns. Every output carries a provenance header with the tool
version and the SHA-256 of the effective configuration.

Exit codes: 0 success, 2 input error, 3 numerical non-convergence,
4 internal error. Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import __version__
from .dynamics import (DensityState, NoSteadyState, PropagationError, SignalFormatError,
                       TimeSignal, average_shots, coherence_observable, default_sampling,
                       emit_signal, initial_state_with_repump, population_observable, probe_state)
from .epfinder import (AmbiguousStructure, LostCluster, NotConverged, SingularPencil,
                       StallError, _default_threads, bloch_model, ca_model, candidates_to_csv,
                       classify, curve_to_csv, refine_ep, scan_map, trace_curve)
from .estimate import (BranchesMerged, IncompleteSpectrum, IngestedOracle, NoCentralCurve,
                       OracleMiss, PipelineConfig, PoorFit, SignalTooShort, SimulatedOracle,
                       WrongMultiplicity, run_pipeline)
from .harminv import InsufficientSamples, OrderOverflow, RankDeficient, invert, invert_polynomial
from .liouville import (CaParams, SystemSpec, build_ca_spec, build_tls_spec, mhz_to_rad_per_ns,
                        vectorize_lgks)

__all__ = ["main", "load_config", "validate_config", "EXIT_OK", "EXIT_INPUT", "EXIT_NUMERICAL",
           "EXIT_INTERNAL"]

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_INTERNAL = 0, 2, 3, 4

_INPUT_ERRORS = (ValueError, KeyError, OSError, jsonschema.ValidationError, SignalFormatError,
                 InsufficientSamples, RankDeficient, OracleMiss, json.JSONDecodeError)
_NUMERICAL_ERRORS = (NotConverged, LostCluster, StallError, AmbiguousStructure, SingularPencil,
                     PropagationError, NoSteadyState, OrderOverflow, SignalTooShort, PoorFit,
                     IncompleteSpectrum, WrongMultiplicity, NoCentralCurve, BranchesMerged,
                     np.linalg.LinAlgError)

# Configuration keys holding frequencies, converted when units == "MHz".
_MODEL_FREQS = ("delta", "omega", "omega21", "omega43")


class InputError(ValueError):
    """Invalid command-line or configuration input."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _schema() -> dict:
    text = resources.files("epspec").joinpath("schemas/run_config.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg: dict) -> None:
    """Raise :class:`jsonschema.ValidationError` if ``cfg`` violates the schema."""
    jsonschema.validate(cfg, _schema(), cls=jsonschema.Draft202012Validator)


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") \
            from None


# Keys that do not change any computed value and stay out of the hash.
_UNHASHED = ("output", "threads")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _grid(g, default: np.ndarray, conv) -> np.ndarray:
    if g is None:
        return default
    if isinstance(g, dict):
        vals = np.linspace(g["start"], g["stop"], g["num"])
    else:
        vals = np.asarray(g, dtype=float)
    return np.array([conv(v) for v in vals])


class _Run:
    """Effective configuration of one invocation, in internal units."""

    def __init__(self, cfg: dict, command: str):
        validate_config(cfg)
        self.raw = cfg
        self.command = command
        self.hash = config_hash(cfg)
        m = cfg["model"]
        self.family = m["family"]
        self.units = m["units"]
        self.conv = mhz_to_rad_per_ns if self.units == "MHz" else float
        self.model = {k: (self.conv(v) if k in _MODEL_FREQS else v) for k, v in m.items()}
        chi = m.get("chi", 0.0)
        self.chis = [float(c) for c in (chi if isinstance(chi, list) else [chi])]
        if self.family == "TLS" and any(c != 0 for c in self.chis):
            raise InputError("family TLS is closed; use leaky-TLS for chi > 0")
        self.gamma = float(m.get("gamma", 1.0 if self.family != "Ca4" else 1.0 / 7.0))
        self.seed = int(cfg.get("seed", 0))
        self.threads = int(cfg["threads"]) if "threads" in cfg else _default_threads()
        self.tolerance = cfg.get("tolerance")
        self.out = Path(cfg.get("output", "epspec_out"))

    def header(self, *extra: str) -> list[str]:
        return [f"epspec {__version__} command={self.command} config_sha256={self.hash}",
                f"units: time ns, rates 1/ns, frequencies rad/ns (config units {self.units})",
                *extra]

    def provenance(self) -> dict:
        return {"tool": "epspec", "version": __version__, "command": self.command,
                "config_sha256": self.hash}

    def single_chi(self) -> float:
        if len(self.chis) != 1:
            raise InputError(f"command {self.command} takes a single chi value")
        return self.chis[0]

    # -- models ----------------------------------------------------------
    def ca_params(self, chi: float) -> CaParams:
        m = self.model
        w21 = float(m.get("omega21", mhz_to_rad_per_ns(200.0)))
        w43 = float(m.get("omega43", m.get("zeeman_ratio", 1.0 / 3.0) * w21))
        return CaParams(self.gamma, chi, float(m.get("delta", 0.0)), float(m.get("omega", 0.0)),
                        w21, w43, float(m.get("gamma_deph", 0.0)))

    def spec(self, chi: float) -> SystemSpec:
        d, w = float(self.model.get("delta", 0.0)), float(self.model.get("omega", 0.0))
        if self.family == "Ca4":
            return build_ca_spec(self.ca_params(chi))
        return build_tls_spec(self.gamma, d, w, chi)

    def parametric(self, chi: float):
        if self.gamma <= 0:
            raise InputError("EP commands need gamma > 0")
        if self.family == "Ca4":
            return ca_model(self.ca_params(chi))
        return bloch_model(self.gamma, chi)

    def default_deltas(self) -> np.ndarray:
        span = 6.0 if self.family == "Ca4" else 0.3
        return np.linspace(-span, span, 61) * self.gamma

    def default_omegas(self) -> np.ndarray:
        return np.linspace(0.01, 0.5, 50) * self.gamma


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return str(path)


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _chi_suffix(run: _Run, chi: float) -> str:
    return "" if len(run.chis) == 1 else f"_chi-{chi:g}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _initial_state(spec: SystemSpec, preparation: str) -> DensityState:
    if preparation == "ground":
        return DensityState.pure(spec.dim, spec.dim - 1 if spec.dim == 2 else 0)
    try:
        rho = initial_state_with_repump(spec)
    except NoSteadyState:
        # Without decay every state commuting with H is stationary.
        rho = DensityState(np.eye(spec.dim) / spec.dim)
    return probe_state(rho) if preparation == "probe" else rho


def cmd_simulate(run: _Run) -> dict:
    """Emit the population and coherence signals of the configured model."""
    chi = run.single_chi()
    sc = run.raw.get("signal", {})
    spec = run.spec(chi)
    L = vectorize_lgks(spec)
    if "dt" in sc and "n" in sc:
        dt, n = float(sc["dt"]), int(sc["n"])
    else:
        d0, n0 = default_sampling(L, decay_times=16.0)
        dt, n = float(sc.get("dt", d0)), int(sc.get("n", n0))
    rho = _initial_state(spec, sc.get("preparation", "repump"))
    if run.family == "Ca4":
        pop = population_observable(4)
        i, j = sc.get("coherence", (2, 3))
    else:
        pop = population_observable(2, (0,))
        i, j = sc.get("coherence", (0, 1))
    if max(i, j) >= spec.dim or i == j:
        raise InputError(f"coherence levels {i, j} invalid for a {spec.dim}-level model")
    coh = coherence_observable(spec.dim, i, j)
    sigma, shots = float(sc.get("sigma", 0.0)), int(sc.get("shots", 1))
    written = []
    for k, O in enumerate((pop, coh)):
        s = emit_signal(L, rho, O, dt, n)
        if sigma > 0:
            s = average_shots(s, sigma, shots, [run.seed, k])
        hdr = run.header(f"observable={O.name} sigma={sigma:g} shots={shots} seed={run.seed}")
        written.append(_write(run.out / f"{O.name}.csv", s.to_csv(hdr)))
    return {"files": written, "dt": dt, "n": n}


def cmd_invert(run: _Run, signal_path: str, K: int | None) -> dict:
    """Harmonic inversion of a signal CSV."""
    try:
        s = TimeSignal.from_csv(Path(signal_path).read_text())
    except SignalFormatError as exc:
        raise SignalFormatError(f"{signal_path}: {exc}") from None
    ic = run.raw.get("invert", {})
    K = K if K is not None else ic.get("K")
    if ic.get("polynomial", False):
        r = invert_polynomial(s, K=K, max_order=ic.get("max_order", 3))
    else:
        r = invert(s, K=K, rank_tol=ic.get("rank_tol", 1e-10))
    out = r.to_dict()
    out["eigenvalues"] = [[m.eigenvalue.real, m.eigenvalue.imag] for m in r.modes]
    out["provenance"] = run.provenance() | {"signal": str(signal_path)}
    path = _write(run.out / f"modes_{Path(signal_path).stem}.json", _dump(out))
    return {"files": [path], "K": r.K, "residual_rms": r.residual_rms}


def cmd_scan(run: _Run) -> dict:
    """Unrefined (optionally refined) EP candidates over a grid."""
    sc = run.raw.get("scan", {})
    deltas = _grid(sc.get("deltas"), run.default_deltas(), run.conv)
    omegas = _grid(sc.get("omegas"), run.default_omegas(), run.conv)
    tol = run.tolerance if run.tolerance is not None else 1e-12
    written, counts = [], {}
    for chi in run.chis:
        model = run.parametric(chi)
        cands = scan_map(model, deltas, omegas, directions=tuple(sc.get("directions", ("omega", "delta"))),
                         threads=run.threads, gap_tol=sc.get("gap_tol", 2e-2))
        if sc.get("refine", False):
            cands = [refine_ep(model, c, tol=tol, raise_on_failure=False) for c in cands]
        hdr = run.header(f"model={model.name}", f"grid={deltas.size}x{omegas.size}")
        written.append(_write(run.out / f"ep_map{_chi_suffix(run, chi)}.csv", candidates_to_csv(cands, hdr)))
        counts[f"{chi:g}"] = len(cands)
    return {"files": written, "candidates": counts}


def _default_seed(run: _Run) -> tuple[float, float]:
    g = run.gamma
    if run.family == "Ca4":
        return (float(run.ca_params(0.0).omega21) / 3.0 + 0.01 * g, 0.1 * g)
    return (0.05 * g, 0.25 * g)


def cmd_trace(run: _Run) -> dict:
    """Refine a seed point and trace the EP curve through it."""
    tc = run.raw.get("trace", {})
    seed = tuple(run.conv(v) for v in tc["seed"]) if "seed" in tc else _default_seed(run)
    bounds = None
    if "bounds" in tc:
        bounds = tuple(tuple(run.conv(v) for v in b) for b in tc["bounds"])
    tol = run.tolerance if run.tolerance is not None else 1e-12
    written, info = [], {}
    for chi in run.chis:
        model = run.parametric(chi)
        guess = seed
        if "seed" not in tc:
            # Nearest scan candidate to the default seed keeps refinement in its basin.
            cands = scan_map(model, run.default_deltas(), run.default_omegas(), threads=run.threads)
            if not cands:
                raise NotConverged("no EP candidate found to seed the trace")
            guess = min(cands, key=lambda c: np.hypot(c.delta - seed[0], c.omega - seed[1]))
        start = refine_ep(model, guess, tol=max(tol, 1e-13), classify_result=False)
        curve = trace_curve(model, start, step=run.conv(tc["step"]) if "step" in tc else 0.01 * run.gamma,
                            max_points=tc.get("max_points", 200), bounds=bounds, tol=tol)
        hdr = run.header(f"model={model.name}", f"stop_reason={curve.stop_reason} closed={curve.closed}")
        written.append(_write(run.out / f"curve{_chi_suffix(run, chi)}.csv", curve_to_csv(curve, hdr)))
        info[f"{chi:g}"] = {"points": len(curve), "cusps": len(curve.cusps), "stop_reason": curve.stop_reason}
    return {"files": written, "curves": info}


def cmd_classify(run: _Run) -> dict:
    """Jordan structure at configured points."""
    cc = run.raw.get("classify", {})
    if "points" not in cc:
        raise InputError("classify needs classify.points")
    chi = run.single_chi()
    model = run.parametric(chi)
    tol = run.tolerance if run.tolerance is not None else 1e-13
    results = []
    for p in cc["points"]:
        x = tuple(run.conv(v) for v in p)
        cand = None
        if cc.get("refine", False):
            cand = refine_ep(model, x, tol=tol, raise_on_failure=False, classify_result=False)
            x = cand.point()
        c = classify(model(*x), cand, radius=cc.get("radius"), raise_ambiguous=False)
        if cand is None:
            c = dataclasses.replace(c, params={"delta": float(x[0]), "omega": float(x[1])})
        results.append(c.to_dict())
    out = {"model": model.name, "points": results, "provenance": run.provenance()}
    return {"files": [_write(run.out / "classify.json", _dump(out))],
            "kinds": [r.get("kind") for r in results]}


def cmd_estimate(run: _Run) -> dict:
    """Run the estimation pipeline on a simulated or recorded oracle."""
    chi = run.single_chi()
    oc = run.raw.get("oracle", {})
    sc = run.raw.get("signal", {})
    if oc.get("kind", "simulated") == "ingested":
        if "directory" not in oc:
            raise InputError("oracle.kind = ingested needs oracle.directory")
        oracle = IngestedOracle(oc["directory"])
    else:
        if run.gamma <= 0:
            raise InputError("estimate needs gamma > 0")
        kw = {k: sc[k] for k in ("dt", "n", "sigma", "shots") if k in sc}
        kw["seed"] = run.seed
        prep = sc.get("preparation", "probe")
        kw["preparation"] = prep
        if prep == "repump":
            dim = 4 if run.family == "Ca4" else 2
            kw["observable"] = population_observable(dim) if dim == 4 else population_observable(2, (0,))
        if run.family == "Ca4":
            if prep == "ground":
                raise InputError("preparation 'ground' is only defined for two-level families")
            oracle = SimulatedOracle.ca(run.ca_params(chi), **kw)
        else:
            oracle = SimulatedOracle.tls(run.gamma, chi, **kw)
    pc = dict(run.raw.get("pipeline", {}))
    if "generic_point" in pc:
        pc["generic_point"] = [run.conv(v) for v in pc["generic_point"]]
    pc.update(family=run.family, seed=run.seed, threads=run.threads)
    if "zeeman_ratio" in run.model:
        pc["zeeman_ratio"] = run.model["zeeman_ratio"]
    if run.tolerance is not None:
        pc["tol"] = run.tolerance
    report = run_pipeline(oracle, PipelineConfig.from_dict(pc))
    d = report.to_dict()
    d["provenance"] = dict(d.get("provenance", {})) | run.provenance()
    path = _write(run.out / "report.json", _dump(d))
    return {"files": [path], "failures": report.failures}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="RunConfig JSON file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config.output)")
    common.add_argument("--seed", type=int, metavar="N", help="noise seed (overrides config.seed)")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker threads (default: config.threads, then EPSPEC_THREADS)")
    common.add_argument("--tolerance", type=float, metavar="X", help="refinement tolerance")
    p = argparse.ArgumentParser(prog="epspec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"epspec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="emit O_pop and O_coher signal CSVs")
    inv = sub.add_parser("invert", parents=[common], help="harmonic inversion of a signal CSV")
    inv.add_argument("signal", help="signal CSV (columns t, re, im)")
    inv.add_argument("--K", type=int, help="number of modes (default: numerical rank)")
    sub.add_parser("scan-ep", parents=[common], help="EP candidate map over a grid")
    sub.add_parser("trace-curve", parents=[common], help="trace an EP curve from a seed")
    sub.add_parser("classify", parents=[common], help="Jordan structure at given points")
    sub.add_parser("estimate", parents=[common], help="parameter-estimation pipeline")
    return p


def _effective_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(load_config(args.config))
    if args.command == "invert" and "model" not in cfg:
        cfg["model"] = {"family": "TLS", "units": "rad/ns"}
    if args.out is not None:
        cfg["output"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    elif "threads" not in cfg and os.environ.get("EPSPEC_THREADS"):
        cfg["threads"] = _default_threads()
    if args.tolerance is not None:
        cfg["tolerance"] = args.tolerance
    return cfg


def _error(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, jsonschema.ValidationError):
        payload["path"] = "/".join(str(p) for p in exc.absolute_path)
        payload["message"] = exc.message
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        if args.command != "invert" and "model" not in cfg:
            raise InputError("configuration needs a model section (pass --config)")
        run = _Run(cfg, args.command)
        if args.command == "simulate":
            summary = cmd_simulate(run)
        elif args.command == "invert":
            summary = cmd_invert(run, args.signal, args.K)
        elif args.command == "scan-ep":
            summary = cmd_scan(run)
        elif args.command == "trace-curve":
            summary = cmd_trace(run)
        elif args.command == "classify":
            summary = cmd_classify(run)
        else:
            summary = cmd_estimate(run)
    except _NUMERICAL_ERRORS as exc:
        return _error(exc, EXIT_NUMERICAL)
    except _INPUT_ERRORS as exc:
        return _error(exc, EXIT_INPUT)
    except Exception as exc:  # pragma: no cover - defensive
        return _error(exc, EXIT_INTERNAL)
    sys.stdout.write(_dump(summary))
    if args.command == "estimate" and summary["failures"]:
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
