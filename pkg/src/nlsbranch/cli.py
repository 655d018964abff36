"""Command-line runs: configuration, branch files and report export.

Subcommands: limiting, seed, continue, diagnose, diagram.  Exit codes:
0 all checks pass, 2 identity failure, 3 solver failure, 4 config error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as diag
from .core import Field, Grid, ProblemSpec
from .limiting import (ProfileTemplate, export_profile_csv, export_profile_json,
                       solve_uinfinity)
from .operators import Inertia
from .potential import PotentialSpec, critical_points, linear_ground_state
from .continuation import (PHYSICAL, BifurcationEvent, Branch,
                           BranchPoint, ContinuationConfig, Discretization, SolverError,
                           continue_branch, make_branch, seed_from_infinity, seed_from_zero,
                           switch_branch)

log = logging.getLogger("nlsbranch")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_IDENTITY, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4

_CONT = {f.name: f.default for f in fields(ContinuationConfig)}

DEFAULTS = {
    "problem": {"sigma": -1.0, "p": 1.0, "n": 1},
    "potential": {"family": "poschl_teller", "wells": [[2.0, 0.0]], "samples": None},
    "grid": {"L": 30.0, "npoints": 30001},
    "renormalized_grid": {"L": 80.0, "npoints": 16001},
    "continuation": {**_CONT, "direction": 1},
    "seed": {"id": "branch", "kind": "zero", "amplitude": 0.1, "centers": [0.0],
             "signs": [1], "E": 100.0},
    "switch": {"event": None, "delta": 0.05},
    "limiting": {"L": 30.0, "npoints": 30001, "tol": 1e-10},
    "diagnostics": {
        "stationarity": True, "pohozaev": True, "energy_mass": True, "dq_law": True,
        "scaling": False, "limit_profile": False, "morse": False,
        "scaling_window": [50.0, 100.0], "last": 5,
        "tolerances": {"stationarity": 1e-5, "pohozaev": 1e-5, "energy_mass": 1e-2,
                       "dq_law": 1e-2, "scaling_slope": 0.02, "remainder": 0.5},
    },
    "output": {"dir": "."},
}


class ConfigError(ValueError):
    pass


# configuration ------------------------------------------------------------------

def _leaves(d, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaves(v, prefix + (k,))
        else:
            yield prefix + (k,), v


def _merge(base, over, path=""):
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            _merge(base[k], v, where)
        else:
            base[k] = _coerce(base[k], v, where)


def _coerce(default, v, where):
    if v is None or default is None:
        return v
    if isinstance(default, bool):
        if not isinstance(v, bool):
            raise ConfigError(f"{where!r} must be true or false")
        return v
    if isinstance(default, int):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{where!r} must be an integer")
        return v
    if isinstance(default, float):
        if isinstance(v, str):
            # YAML 1.1 reads exponent literals without a dot ("1e-10") as strings
            try:
                v = float(v)
            except ValueError:
                pass
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where!r} must be a number")
        return float(v)
    if isinstance(default, str):
        if not isinstance(v, str):
            raise ConfigError(f"{where!r} must be a string")
        return v
    if isinstance(default, list):
        if not isinstance(v, list):
            raise ConfigError(f"{where!r} must be a list")
        return v
    return v


def validate(cfg: dict) -> None:
    """Semantic checks run before any computation."""
    pr = cfg["problem"]
    if pr["sigma"] not in (-1.0, 1.0):
        raise ConfigError("problem.sigma must be -1 or +1")
    if not pr["p"] > 0:
        raise ConfigError("problem.p must be positive")
    if pr["n"] < 1:
        raise ConfigError("problem.n must be at least 1")
    for g in ("grid", "renormalized_grid", "limiting"):
        if not cfg[g]["L"] > 0 or cfg[g]["npoints"] < 5:
            raise ConfigError(f"{g} needs L > 0 and npoints >= 5")
    c = cfg["continuation"]
    for k in ("step", "step_min", "step_max", "tol_newton", "event_bracket", "E_switch"):
        if not c[k] > 0:
            raise ConfigError(f"continuation.{k} must be positive")
    if not 0 < c["E_min"] < c["E_max"]:
        raise ConfigError("continuation needs 0 < E_min < E_max")
    if c["direction"] not in (-1, 1):
        raise ConfigError("continuation.direction must be -1 or 1")
    if c["mode"] not in ("natural", "arclength"):
        raise ConfigError("continuation.mode must be natural or arclength")
    s = cfg["seed"]
    if s["kind"] not in ("zero", "infinity"):
        raise ConfigError("seed.kind must be zero or infinity")
    if s["kind"] == "zero" and not s["amplitude"] > 0:
        raise ConfigError("amplitude must be positive")
    if s["kind"] == "infinity" and len(s["centers"]) != len(s["signs"]):
        raise ConfigError("seed.centers and seed.signs differ in length")
    for k, v in cfg["diagnostics"]["tolerances"].items():
        if not v > 0:
            raise ConfigError(f"diagnostics.tolerances.{k} must be positive")
    w = cfg["diagnostics"]["scaling_window"]
    if len(w) != 2 or not 0 < w[0] < w[1]:
        raise ConfigError("diagnostics.scaling_window must be [lo, hi] with 0 < lo < hi")
    try:
        potential_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"potential: {exc}") from exc


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the YAML file, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must be a mapping")
        _merge(cfg, data)
    for dotted, v in (overrides or {}).items():
        node = {}
        cur = node
        keys = dotted.split(".")
        for k in keys[:-1]:
            cur = cur.setdefault(k, {})
        cur[keys[-1]] = v
        _merge(cfg, node)
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def potential_spec(cfg) -> PotentialSpec:
    d = {k: v for k, v in cfg["potential"].items() if v is not None}
    return PotentialSpec.from_dict(d)


def problem_spec(cfg) -> ProblemSpec:
    pr = cfg["problem"]
    return ProblemSpec(pr["sigma"], pr["p"], pr["n"], potential_spec(cfg))


def _grid(d, n) -> Grid:
    return Grid("line" if n == 1 else "radial", float(d["L"]), int(d["npoints"]), n)


def continuation_config(cfg) -> ContinuationConfig:
    c = {k: v for k, v in cfg["continuation"].items() if k in _CONT}
    return ContinuationConfig(**c)


# branch files ---------------------------------------------------------------------

def _grid_dict(g: Grid):
    return {"frame": g.frame, "L": g.L, "npoints": g.npoints, "n": g.n}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(".bin")


def save_branch(branch: Branch, path, cfg: dict) -> None:
    """JSON header plus a little-endian float64 sidecar holding every ψ block."""
    path = Path(path)
    blocks, offset = [], 0

    def put(values):
        nonlocal offset
        a = np.ascontiguousarray(values, dtype="<f8")
        blocks.append(a.tobytes())
        rec = {"offset": offset, "length": int(a.size)}
        offset += a.nbytes
        return rec

    records = []
    for q in branch.points:
        r = q.scalars()
        r["psi"] = put(q.psi.values)
        r["extras"] = q.extras
        records.append(r)
    events = []
    for ev in branch.events:
        e = ev.summary()
        e["kernel_vector"] = put(ev.kernel_vector.values)
        e["psi_star"] = put(ev.psi_star.values)
        events.append(e)
    prob = branch.problem
    header = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "branch": {"id": branch.id, "seed_kind": branch.seed_kind, "status": branch.status,
                   "symmetric": branch.symmetric, "notes": branch.notes},
        "problem": {"sigma": prob.sigma, "p": prob.p, "n": prob.n,
                    "potential": prob.potential.to_dict() if prob.potential else None},
        "grids": {k: _grid_dict(d.grid) for k, d in sorted(branch.discretizations.items())},
        "data_file": sidecar(path).name,
        "record_count": len(records),
        "records": records,
        "events": events,
    }
    _atomic_write(sidecar(path), b"".join(blocks))
    text = json.dumps(header, indent=1, sort_keys=True, default=_json_default) + "\n"
    _atomic_write(path, text.encode("utf-8"))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _inertia(d):
    return Inertia(d["n_neg"], d["n_zero"], d["n_pos"], d["tol_zero"])


def load_branch(path):
    """Returns (branch, header)."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("unsupported branch file schema version")
    raw = np.fromfile(path.parent / header["data_file"], dtype="<f8")

    def get(ref):
        i = ref["offset"] // 8
        return raw[i:i + ref["length"]].astype(float)

    pr = header["problem"]
    pot = PotentialSpec.from_dict(pr["potential"]) if pr["potential"] else None
    prob = ProblemSpec(pr["sigma"], pr["p"], pr["n"], pot)
    discs = {}
    for frame, g in header["grids"].items():
        discs[frame] = Discretization(prob, Grid(g["frame"], g["L"], g["npoints"], g["n"]), frame)
    meta = header["branch"]
    b = Branch(meta["id"], discs, [], meta["seed_kind"], [], meta["status"],
               meta["symmetric"], list(meta["notes"]))
    for r in header["records"]:
        d = discs[r["frame"]]
        b.points.append(BranchPoint(
            r["E"], Field(d.grid, get(r["psi"])), r["frame"], r["N"], r["Q"], r["energy"],
            r["G"], r["Vterm"], _inertia(r["lplus_inertia"]), list(r["lplus_min_eigs"]),
            r["lminus_min_eig"], r["newton_residual"], r["iterations"], dict(r["extras"]), d))
    for e in header["events"]:
        g = discs[e["frame"]].grid
        b.events.append(BifurcationEvent(
            e["kind"], e["E_star"], Field(g, get(e["kernel_vector"])),
            _inertia(e["inertia_before"]), _inertia(e["inertia_after"]),
            e["symmetry_of_kernel"], e["eigenvalue"], tuple(e["bracket"]),
            Field(g, get(e["psi_star"])), e["frame"], e["id"]))
    return b, header


def verify_record(branch: Branch, i: int) -> float:
    """|recomputed residual norm - stored newton_residual| for record i."""
    q = branch.points[i]
    d = branch.disc(q.frame)
    return abs(d.norm(d.residual_unknowns(q.psi.unknowns, q.E)) - q.newton_residual)


# commands ------------------------------------------------------------------------

def _outdir(cfg) -> Path:
    p = Path(cfg["output"]["dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_limiting(cfg) -> list[Path]:
    pr = cfg["problem"]
    lim = cfg["limiting"]
    grid = _grid(lim, pr["n"])
    prof = solve_uinfinity(grid=grid, sigma=pr["sigma"], p=pr["p"], n=pr["n"], tol=lim["tol"])
    out = _outdir(cfg)
    csv_path, json_path = out / "uinf.csv", out / "uinf.json"
    export_profile_csv(prof, csv_path)
    export_profile_json(prof, json_path)
    return [csv_path, json_path]


def cmd_seed(cfg, path=None) -> Path:
    prob = problem_spec(cfg)
    n = prob.n
    g, gr = _grid(cfg["grid"], n), _grid(cfg["renormalized_grid"], n)
    s = cfg["seed"]
    cc = continuation_config(cfg)
    if s["kind"] == "zero":
        lin = linear_ground_state(prob.potential, g)
        pt = seed_from_zero(prob, lin, s["amplitude"], grid=g, tol=cc.tol_newton, n_eigs=cc.n_eigs)
        kind = {"kind": "zero", "amplitude": s["amplitude"]}
    else:
        pr = cfg["problem"]
        lim = cfg["limiting"]
        prof = solve_uinfinity(grid=_grid(lim, n), sigma=pr["sigma"], p=pr["p"], n=n,
                               tol=lim["tol"])
        tpl = ProfileTemplate([float(c) for c in s["centers"]], [int(x) for x in s["signs"]],
                              float(s["E"]))
        pt = seed_from_infinity(prob, tpl, prof, grid=gr, tol=cc.tol_newton,
                                E_switch=cc.E_switch, symmetric=cc.symmetric, n_eigs=cc.n_eigs)
        kind = {"kind": "infinity", "template": tpl.to_dict()}
    b = make_branch(s["id"], prob, g, gr, pt, kind, cc.symmetric)
    path = Path(path) if path else _outdir(cfg) / f"{s['id']}.json"
    save_branch(b, path, cfg)
    return path


def cmd_continue(cfg, path, output=None) -> Path:
    b, header = load_branch(path)
    cc = continuation_config(cfg)
    sw = cfg["switch"]
    if sw["event"] is not None:
        ev = next((e for e in b.events if e.id == sw["event"]), None)
        if ev is None:
            raise ConfigError(f"no event {sw['event']!r} on branch {b.id!r}")
        b = switch_branch(ev, b, float(sw["delta"]), cc)
        if output is None:
            output = Path(path).with_name(f"{b.id}.json")
    else:
        b.symmetric = cc.symmetric or b.symmetric
        continue_branch(b, cfg["continuation"]["direction"], cc)
    out = Path(output) if output else Path(path)
    save_branch(b, out, cfg)
    return out


def cmd_diagnose(cfg, path, output=None) -> tuple[dict, bool]:
    b, _ = load_branch(path)
    dc = cfg["diagnostics"]
    tol = dc["tolerances"]
    reports, ok = {}, True
    for name in ("stationarity", "pohozaev"):
        if not dc[name]:
            continue
        if name == "pohozaev" and not (b.problem.potential is None
                                       or b.problem.potential.has_derivatives):
            reports[name] = {"skipped": "no derivative available"}
            continue
        r = diag.identity_report(b, name, tol[name])
        reports[name] = r.to_dict()
        ok &= r.passed
    for name, fn in (("energy_mass", diag.energy_mass_relation), ("dq_law", diag.dq_law)):
        if not dc[name]:
            continue
        try:
            r = fn(b, tol[name])
        except ValueError as exc:
            reports[name] = {"skipped": str(exc)}
            continue
        reports[name] = r.to_dict()
        ok &= r.passed
    if dc["scaling"]:
        r = diag.scaling_exponents(b, tuple(dc["scaling_window"]))
        d = r.to_dict()
        d["passed"] = all(abs(r.slopes[k] - r.targets[k]) < tol["scaling_slope"] for k in r.slopes)
        reports["scaling"] = d
        ok &= d["passed"]
    if dc["limit_profile"] or dc["morse"]:
        prob = b.problem
        grid = b.disc(PHYSICAL).grid
        cps = critical_points(prob.potential, grid)
        lim = cfg["limiting"]
        prof = solve_uinfinity(grid=_grid(lim, prob.n), sigma=prob.sigma, p=prob.p, n=prob.n,
                               tol=lim["tol"])
        rep = diag.limit_profile_report(b, cps, prof, dc["last"], tol["remainder"])
        if dc["limit_profile"]:
            reports["limit_profile"] = rep
            ok &= rep["status"] == "classified"
        if dc["morse"]:
            checks = []
            for row in rep["points"]:
                if not row["classified"]:
                    continue
                t = row["template"]
                tpl = ProfileTemplate(t["centers"], t["signs"], t["E"])
                checks.append({"E": row["E"], **diag.morse_index_check(b.point_at(row["E"]), tpl, cps)})
            reports["morse"] = checks
            ok &= all(c["passed"] is not False for c in checks)
    reports["stability"] = [diag.stability_label(b, i).to_dict() for i in range(len(b.points))]
    reports["passed"] = bool(ok)
    out = Path(output) if output else Path(path).with_suffix(".report.json")
    diag.write_json(reports, out)
    return reports, bool(ok)


def cmd_diagram(paths, output) -> Path:
    branches = [load_branch(p)[0] for p in paths]
    rows = diag.diagram_rows(branches)
    diag.write_diagram_csv(rows, output)
    return Path(output)


# argument parsing -----------------------------------------------------------------

def _flag_paths():
    for path, _ in _leaves(DEFAULTS):
        yield ".".join(path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlsbranch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="YAML run configuration")
        g = p.add_argument_group("config overrides (YAML values, flag > file > default)")
        for key in _flag_paths():
            g.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE", default=None)
        return p

    common(sub.add_parser("limiting", help="compute the limiting profile u_inf"))
    p = common(sub.add_parser("seed", help="seed a branch from zero or from infinity"))
    p.add_argument("-o", "--output")
    p = common(sub.add_parser("continue", help="extend a branch or switch at an event"))
    p.add_argument("branch")
    p.add_argument("-o", "--output")
    p = common(sub.add_parser("diagnose", help="identity, scaling and stability reports"))
    p.add_argument("branch")
    p.add_argument("-o", "--output")
    p = sub.add_parser("diagram", help="merged diagram CSV of several branches")
    p.add_argument("branches", nargs="+")
    p.add_argument("-o", "--output", required=True)
    return ap


def _overrides(ns) -> dict:
    out = {}
    for k, v in vars(ns).items():
        if k.startswith("set:") and v is not None:
            try:
                out[k[4:]] = yaml.safe_load(v)
            except yaml.YAMLError as exc:
                raise ConfigError(f"bad value for --{k[4:]}: {exc}") from exc
    return out


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "diagram":
            print(cmd_diagram(ns.branches, ns.output))
            return EXIT_OK
        cfg = load_config(ns.config, _overrides(ns))
        if ns.command == "limiting":
            for f in cmd_limiting(cfg):
                print(f)
        elif ns.command == "seed":
            print(cmd_seed(cfg, ns.output))
        elif ns.command == "continue":
            print(cmd_continue(cfg, ns.branch, ns.output))
        elif ns.command == "diagnose":
            reports, ok = cmd_diagnose(cfg, ns.branch, ns.output)
            for k, r in reports.items():
                if isinstance(r, dict) and "passed" in r:
                    print(f"{k}: {'PASS' if r['passed'] else 'FAIL'}")
            return EXIT_OK if ok else EXIT_IDENTITY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ArithmeticError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
