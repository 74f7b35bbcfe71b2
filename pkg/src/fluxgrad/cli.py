"""Command-line front end: ``fluxgrad <command> ...``.

Every command writes a JSON result envelope (``schema_version``, command
echo, provenance and payload); time series are additionally written as CSV.
Exit codes: 0 on success, 2 for invalid input, 3 for numerical failures,
1 when ``verify --strict`` finds a failing condition.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from fluxgrad import dynamics, lattice, ldp, structures
from fluxgrad.errors import FluxgradError, ModelError, NumericalError, ParseError, ValidationError
from fluxgrad.network import ReactionNetwork

SCHEMA_VERSION = "1"
COMMANDS = ("simulate", "limit", "ldp", "verify", "lattice", "rd")


def load_schema(name: str) -> dict:
    text = resources.files("fluxgrad").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def shipped_model_path(name: str) -> Path:
    """Path of a model file bundled with the package (``na_cl2``, ``a_b``, ...)."""
    return Path(str(resources.files("fluxgrad").joinpath("models", f"{name}.json")))


def _read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ParseError("file not found", path=str(path)) from None
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=str(path), line=exc.lineno, column=exc.colno) from None


def _format_error_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def model_from_document(doc) -> ReactionNetwork:
    """Validate a parsed model document against the schema and build the network."""
    validator = jsonschema.Draft202012Validator(load_schema("model"))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ValidationError([f"{_format_error_path(e.absolute_path)}: {e.message}" for e in errors])
    return ReactionNetwork.from_spec(doc)


def parse_model(path) -> ReactionNetwork:
    """Read and validate a JSON model file.

    Raises
    ------
    ParseError
        Missing file or malformed JSON (with line and column).
    ValidationError
        Schema or invariant violations, all of them listed.
    """
    return model_from_document(_read_json(path))


def serialize(net: ReactionNetwork) -> str:
    """Canonical JSON text of a network: sorted keys, compact separators, float rates."""
    spec = net.to_spec()
    for r in spec["reactions"]:
        r["kappa_fw"] = float(r["kappa_fw"])
        r["kappa_bw"] = float(r["kappa_bw"])
    return json.dumps(spec, sort_keys=True, separators=(",", ":"))


def model_hash(net: ReactionNetwork) -> str:
    return hashlib.sha256(serialize(net).encode()).hexdigest()


def to_jsonable(obj):
    """Convert numpy values to JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def envelope(command: str, arguments: dict, seed, net: ReactionNetwork | None, payload: dict) -> dict:
    env = {
        "schema_version": SCHEMA_VERSION,
        "command": {"name": command, "arguments": to_jsonable(arguments)},
        "provenance": {"seed": seed, "model_sha256": model_hash(net) if net is not None else None},
        "payload": to_jsonable(payload),
    }
    jsonschema.validate(env, load_schema("envelope"))
    return env


def dump_envelope(env: dict) -> str:
    return json.dumps(env, sort_keys=True, indent=2) + "\n"


def _write_text(path, text: str):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _vector(text, name: str) -> np.ndarray:
    """Parse ``[1, 2]`` or ``1,2`` into a float vector."""
    try:
        value = json.loads(text) if text.strip().startswith("[") else [float(x) for x in text.split(",")]
        return np.asarray(value, dtype=float)
    except (ValueError, json.JSONDecodeError):
        raise ValidationError(f"--{name}: cannot parse vector {text!r}") from None


def _rho0(args, net: ReactionNetwork) -> np.ndarray:
    if args.rho0 is None:
        return np.ones(net.n_species)
    rho0 = _vector(args.rho0, "rho0")
    if rho0.shape != (net.n_species,):
        raise ValidationError(f"--rho0 needs {net.n_species} entries, got {rho0.size}")
    if np.any(rho0 < 0) or not np.all(np.isfinite(rho0)):
        raise ValidationError("--rho0 must be finite and nonnegative")
    return rho0


def _species_row_names(net):
    return list(net.species)


def _flux_names(net: ReactionNetwork):
    slow = [f"flux_slow_{i}" for i in np.flatnonzero(net.slow)]
    fast = [f"flux_fast_{i}" for i in np.flatnonzero(net.fast)]
    return slow, fast


def _write_csv(path, header, rows):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def cmd_simulate(args):
    net = parse_model(args.model)
    rho0 = _rho0(args, net)
    grid = np.linspace(0.0, args.t_end, args.records)
    config = dynamics.JumpProcessConfig(volume=args.volume, t_end=args.t_end, seed=args.seed, record_grid=grid)
    trajs = dynamics.simulate_ensemble(net, rho0, config, args.replicates, threads=args.threads)
    slow_names, fast_names = _flux_names(net)
    header = ["replicate", "time"] + _species_row_names(net) + slow_names + fast_names
    rows = []
    for k, tr in enumerate(trajs):
        for i, t in enumerate(tr.times):
            rows.append(
                [k, _fmt(t)]
                + [_fmt(x) for x in tr.states[i]]
                + [_fmt(x) for x in tr.slow_fluxes[i]]
                + [_fmt(x) for x in tr.fast_fluxes[i]]
            )
    _write_csv(args.out, header, rows)
    mean_final = np.mean([tr.states[-1] for tr in trajs], axis=0)
    payload = {
        "csv": str(args.out) if args.out else None,
        "columns": header,
        "replicates": args.replicates,
        "records": args.records,
        "mean_final_state": mean_final,
    }
    return envelope("simulate", _echo(args), args.seed, net, payload), args.report


def cmd_limit(args):
    net = parse_model(args.model)
    rho0 = _rho0(args, net)
    times = np.linspace(0.0, args.t_end, args.records)
    tr = dynamics.integrate_rre(net, rho0, args.t_end, times, rtol=args.rtol, atol=args.atol)
    slow_names, fast_names = _flux_names(net)
    header = ["time"] + _species_row_names(net) + slow_names + fast_names
    rows = [
        [_fmt(t)] + [_fmt(x) for x in tr.states[i]] + [_fmt(x) for x in tr.slow_fluxes[i]] + [_fmt(x) for x in tr.fast_fluxes[i]]
        for i, t in enumerate(tr.times)
    ]
    _write_csv(args.csv, header, rows)
    payload = {"times": tr.times, "states": tr.states, "fluxes": tr.fluxes, "columns": header}
    return envelope("limit", _echo(args), None, net, payload), args.out


def _point_vector(point: dict, key: str, size: int, default=None) -> np.ndarray:
    if key not in point:
        if default is not None:
            return default
        raise ValidationError(f"point file is missing {key!r}")
    arr = np.asarray(point[key], dtype=float)
    if arr.shape != (size,):
        raise ValidationError(f"point field {key!r} needs {size} entries, got shape {list(arr.shape)}")
    return arr


def _rate_payload(ev: ldp.RateEvaluation) -> dict:
    return {
        "value": ev.value if ev.finite else math.inf,
        "finite": ev.finite,
        "optimizer": ev.optimizer,
        "residual": ev.residual,
        "converged": ev.converged,
    }


def cmd_ldp(args):
    net = parse_model(args.model)
    point = _read_json(args.at)
    if not isinstance(point, dict):
        raise ValidationError("point file must hold a JSON object")
    Y, R = net.n_species, net.n_reactions
    zeros_r = np.zeros(R)
    if args.eval in ("flux_H", "flux_L", "contraction") or "rho" not in point:
        rho0 = _point_vector(point, "rho0", Y)
        w = _point_vector(point, "w", R, zeros_r)
        rho = ldp.flux_state(net, w, rho0)
    else:
        rho = _point_vector(point, "rho", Y)
    if args.eval == "state_H":
        value = ldp.state_H(net, rho, _point_vector(point, "xi", Y))
        payload = {"value": value, "finite": bool(np.isfinite(value)), "optimizer": None, "residual": 0.0, "converged": True}
    elif args.eval == "flux_H":
        value = ldp.flux_H(net, w, rho0, _point_vector(point, "zeta", R))
        payload = {"value": value, "finite": bool(np.isfinite(value)), "optimizer": None, "residual": 0.0, "converged": True}
    elif args.eval == "state_L":
        payload = _rate_payload(ldp.state_L(net, rho, _point_vector(point, "s", Y)))
    elif args.eval == "flux_L":
        payload = _rate_payload(ldp.flux_L(net, w, rho0, _point_vector(point, "j", R)))
    else:
        payload = _rate_payload(ldp.contraction(net, w, rho0, _point_vector(point, "s", Y)))
    payload["eval"] = args.eval
    return envelope("ldp", _echo(args), None, net, payload), args.out


def _ggen_candidate(path, R: int):
    if path is None:
        return (lambda w: 0.0), np.zeros((R, R))
    doc = _read_json(path)
    try:
        Lmat = np.asarray(doc.get("L", np.zeros((R, R))), dtype=float)
        energy = doc.get("E", {})
        Q = np.asarray(energy.get("quadratic", np.zeros((R, R))), dtype=float)
        c = np.asarray(energy.get("linear", np.zeros(R)), dtype=float)
    except (AttributeError, TypeError, ValueError):
        raise ValidationError("GENERIC candidate must be {'L': matrix, 'E': {'quadratic': matrix, 'linear': vector}}") from None
    if Lmat.shape != (R, R) or Q.shape != (R, R) or c.shape != (R,):
        raise ValidationError(f"GENERIC candidate matrices must be {R}x{R} and vectors of length {R}")
    return (lambda w: float(0.5 * w @ Q @ w + c @ w)), Lmat


def cmd_verify(args):
    net = parse_model(args.model)
    rho0 = _rho0(args, net)
    F, pair = structures.build_cosh_ggs(net, rho0)
    if args.structure == "ggs":
        report = structures.verify_ggs(net, rho0, F, pair, samples=args.samples, tol=args.tol, seed=args.seed)
    elif args.structure == "pggen":
        report = structures.verify_pggen(
            net, rho0, F, pair, samples=args.samples, tol=args.tol, orthogonality_tol=args.orthogonality_tol, seed=args.seed
        )
    else:
        E, Lmat = _ggen_candidate(args.candidate, net.n_reactions)
        report = structures.verify_ggen_nic(pair, F, E, Lmat, samples=args.samples, tol=args.tol, seed=args.seed)
    payload = report.to_dict()
    payload["rho_star"] = F.rho_star
    env = envelope("verify", _echo(args), args.seed, net, payload)
    if args.strict and not report.overall:
        return env, args.out, 1
    return env, args.out


def _initial_profile(grid: lattice.Grid, kind: str, level: float) -> np.ndarray:
    if kind == "uniform":
        return np.full(grid.shape, level)
    rho = np.zeros(grid.shape)
    rho[(slice(0, grid.n // 2),) + (slice(None),) * (grid.dim - 1)] = level
    return rho


def cmd_lattice(args):
    grid = lattice.Grid(args.dim, args.n, args.eps)
    rho0 = _initial_profile(grid, args.initial, args.density)
    counts = np.round(rho0 * args.volume).astype(np.int64)
    times = np.linspace(0.0, args.t_end, args.records)
    run = lattice.simulate_walkers(grid, counts, args.diffusivity, args.t_end, seed=args.seed, volume=args.volume, record_times=times)
    heat = [lattice.solve_heat(grid, counts / args.volume, t, args.diffusivity) if t > 0 else counts / args.volume for t in times]
    if args.fields:
        header = ["time", "site", "density_walkers", "density_heat"] + [f"flux_axis_{l}" for l in range(grid.dim)]
        rows = []
        for k, t in enumerate(times):
            dens, hot, flux = run.densities[k].ravel(), heat[k].ravel(), run.fluxes[k].reshape(grid.dim, -1)
            for x in range(grid.size):
                rows.append([_fmt(t), x, _fmt(dens[x]), _fmt(hot[x])] + [_fmt(flux[l, x]) for l in range(grid.dim)])
        _write_csv(args.fields, header, rows)
    payload = {
        "grid": {"dim": grid.dim, "n": grid.n, "eps": grid.eps, "site_order": "row-major"},
        "volume": args.volume,
        "times": times,
        "max_deviation_from_heat": [float(np.max(np.abs(run.densities[k] - heat[k]))) for k in range(times.size)],
        "free_energy_walkers": [lattice.diffusion_free_energy(grid, run.fluxes[k], counts / args.volume) for k in range(times.size)],
        "fields_csv": str(args.fields) if args.fields else None,
    }
    return envelope("lattice", _echo(args), args.seed, None, payload), args.out


def cmd_rd(args):
    grid = lattice.Grid(args.dim, args.n, args.eps)
    a0 = _initial_profile(grid, args.initial, args.density)
    b0 = np.full(grid.shape, args.density_b)
    state = lattice.RDState.initial(grid, np.stack([a0, b0]), (args.diffusivity_a, args.diffusivity_b), args.kappa_fw, args.kappa_bw)
    steps = max(1, math.ceil(args.t_end / args.dt))
    dt = args.t_end / steps
    energy, mass = [lattice.rd_free_energy(state)], [float(state.rho.sum())]
    for _ in range(steps):
        state = lattice.rd_step(state, dt)
        energy.append(lattice.rd_free_energy(state))
        mass.append(float(state.rho.sum()))
    payload = {
        "grid": {"dim": grid.dim, "n": grid.n, "eps": grid.eps, "site_order": "row-major"},
        "steps": steps,
        "dt": dt,
        "free_energy": energy,
        "total_mass": mass,
        "final_rho": state.rho.reshape(2, -1),
    }
    if grid.size <= lattice.MAX_DENSE_SITES and np.all(state.rho > 0):
        rho = state.rho
        velocity = np.stack(
            [
                state.diffusivity[0] * lattice.discrete_laplacian(grid, rho[0]) - (state.kappa_fw * rho[0] - state.kappa_bw * rho[1]),
                state.diffusivity[1] * lattice.discrete_laplacian(grid, rho[1]) + (state.kappa_fw * rho[0] - state.kappa_bw * rho[1]),
            ]
        )
        payload["dissipation_rate"] = lattice.rd_state_psi(state, velocity).value
    return envelope("rd", _echo(args), None, None, payload), args.out


def _echo(args) -> dict:
    skip = {"func", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


HELP = {
    "simulate": (
        "Exact stochastic simulation of the finite-volume jump process on flux space. Slow reactions move "
        "their net flux by +-1/V, fast reactions their one-way flux by 1/V^2; the state is recovered through "
        "the continuity map rho = rho0 + gamma^T w. Output CSV columns: replicate, time, species..., "
        "flux_slow..., flux_fast...."
    ),
    "limit": (
        "Integrate the macroscopic flux equations dw/dt = k(rho0 + gamma^T w) (mass-action kinetics, fast "
        "reactions at their limit rates) with adaptive Dormand-Prince 5(4)."
    ),
    "ldp": (
        "Evaluate large-deviation quantities at a point file: state_H / flux_H (exponential Hamiltonians), "
        "flux_L (entropic flux rate function with optimal one-way split), state_L (Legendre dual of state_H) "
        "and contraction (minimum of flux_L over fluxes reproducing the state velocity s)."
    ),
    "verify": (
        "Build the free energy F = 1/2 h(rho | rho*) and the cosh dissipation pair from detailed balance and "
        "check the gradient-structure identities on sampled flux points: decomposition of the rate function, "
        "d_zeta H(w, dF) = 0 (or = drift), d_j L(w, 0) = dF, and dual reconstruction of Psi* from H. "
        "'pggen' adds the divergence-free and orthogonality conditions of the fast drift; 'ggen' checks "
        "non-interaction conditions for a supplied (L, E)."
    ),
    "lattice": (
        "Independent random walkers on a periodic lattice with face-crossing flux counters (+-eps/V per "
        "crossing), compared against the explicit heat equation d rho/dt = D lap rho."
    ),
    "rd": (
        "Unimolecular reaction-diffusion A <-> B on a periodic lattice: explicit Euler for transport and "
        "reaction fluxes, combined free energy and the inf-convolution of transport and reaction dissipation."
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func):
        p = sub.add_parser(name, help=HELP[name].split(".")[0], description=HELP[name])
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate)
    p.add_argument("--model", required=True)
    p.add_argument("--volume", type=int, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho0", help="initial concentrations, e.g. '3,0' (default: all ones)")
    p.add_argument("--records", type=int, default=101, help="number of equally spaced sample times")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: FLUXGRAD_THREADS or CPU count)")
    p.add_argument("--out", help="trajectory CSV path")
    p.add_argument("--report", help="envelope JSON path (default: stdout)")

    p = add("limit", cmd_limit)
    p.add_argument("--model", required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--rho0")
    p.add_argument("--records", type=int, default=101)
    p.add_argument("--rtol", type=float, default=1e-8)
    p.add_argument("--atol", type=float, default=1e-10)
    p.add_argument("--csv", help="trajectory CSV path")
    p.add_argument("--out", help="envelope JSON path (default: stdout)")

    p = add("ldp", cmd_ldp)
    p.add_argument("--model", required=True)
    p.add_argument("--eval", required=True, choices=["state_H", "flux_H", "state_L", "flux_L", "contraction"])
    p.add_argument(
        "--at", required=True, help="JSON point file with keys among rho0, w, rho, xi, zeta, j, s"
    )
    p.add_argument("--out")

    p = add("verify", cmd_verify)
    p.add_argument("--model", required=True)
    p.add_argument("--structure", required=True, choices=["ggs", "pggen", "ggen"])
    p.add_argument("--rho0")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--orthogonality-tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidate", help="GENERIC candidate JSON {'L': ..., 'E': {'quadratic': ..., 'linear': ...}}")
    p.add_argument("--strict", action="store_true", help="exit with status 1 if any condition fails")
    p.add_argument("--out")

    p = add("lattice", cmd_lattice)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--eps", type=float, default=None, help="lattice spacing (default 1/n)")
    p.add_argument("--volume", type=float, default=1e4)
    p.add_argument("--diffusivity", type=float, default=1.0)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--initial", choices=["uniform", "half"], default="half")
    p.add_argument("--t-end", type=float, default=0.1)
    p.add_argument("--records", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fields", help="CSV path for sampled fields")
    p.add_argument("--out")

    p = add("rd", cmd_rd)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--diffusivity-a", type=float, default=1.0)
    p.add_argument("--diffusivity-b", type=float, default=1.0)
    p.add_argument("--kappa-fw", type=float, default=1.0)
    p.add_argument("--kappa-bw", type=float, default=1.0)
    p.add_argument("--density", type=float, default=1.0, help="initial A density on the loaded region")
    p.add_argument("--density-b", type=float, default=0.5, help="initial uniform B density")
    p.add_argument("--initial", choices=["uniform", "half"], default="half")
    p.add_argument("--t-end", type=float, default=0.1)
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--out")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, dispatch, write outputs; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "eps", "unset") is None:
        args.eps = 1.0 / args.n
    try:
        result = args.func(args)
        env, out = result[0], result[1]
        code = result[2] if len(result) > 2 else 0
        _write_text(out, dump_envelope(env))
        return code
    except ModelError as exc:
        print(f"fluxgrad: invalid input: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"fluxgrad: numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    except (ValueError, FluxgradError) as exc:
        print(f"fluxgrad: invalid input: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
