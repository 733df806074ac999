"""Command-line driver: ``jqclf {check,synthesize,simulate,iiss,report} CONFIG``.

Exit status: 0 when every verdict passes, 2 on a verdict failure, 1 on
operational errors (bad configuration, missing artifacts, integrator
failures). All JSON output is written with sorted keys so identical
configurations give byte-identical files.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import fields as F
from .exprparser import ParseError, parse
from .fields import DomainError, ScalarField, VectorField
from .iiss import DFunction, build_iiss, validate_D
from .sampling import Sampler
from .sim import Disturbance, IntegrationError, iiss_trajectory_bound, lyapunov_monotonicity, simulate_closed_loop, write_csv
from .synthesis import Settings, SynthesisError, SynthesisResult, synthesize
from .systems import ControlAffineSystem, FullyNonlinearSystem, SystemError_, builtin
from .verify import _jsonable, check_H1, check_H2, check_weak_jq

__all__ = ["main", "load_config", "CONFIG_SCHEMA", "config_hash", "build_problem"]

_EXPR_LIST = {"type": "array", "items": {"type": "string"}, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dynamics"],
    "additionalProperties": False,
    "properties": {
        "dynamics": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["affine", "nonlinear", "builtin"]},
                "name": {"enum": ["two-link-manipulator", "harmonic-oscillator"]},
                "f": _EXPR_LIST,
                "g": {"type": "array", "items": _EXPR_LIST, "minItems": 1},
                "F": _EXPR_LIST,
                "m": {"type": "integer", "minimum": 1},
            },
            "allOf": [
                {"if": {"properties": {"kind": {"const": "builtin"}}}, "then": {"required": ["name"]}},
                {"if": {"properties": {"kind": {"const": "affine"}}}, "then": {"required": ["f", "g"]}},
                {"if": {"properties": {"kind": {"const": "nonlinear"}}}, "then": {"required": ["F", "m"]}},
            ],
        },
        "V": {"type": "string"},
        "G": {"oneOf": [{"type": "string"}, _EXPR_LIST]},
        "D": {"type": "string"},
        "D_declared_divergent": {"type": "boolean"},
        "weak_jq_l": {"type": "integer", "minimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "xi_max": {"type": "number", "exclusiveMinimum": 0},
        "region_radius": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "levels": {"type": "integer", "minimum": 4},
        "radii": {"type": "integer", "minimum": 4},
        "workers": {"type": "integer", "minimum": 1},
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "sphere_samples": {"type": "integer", "minimum": 1},
                "level_samples": {"type": "integer", "minimum": 1},
                "fresh_samples": {"type": "integer", "minimum": 1},
                "tube_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["rk4", "rkf45"]},
                "h": {"type": "number", "exclusiveMinimum": 0},
                "atol": {"type": "number", "exclusiveMinimum": 0},
                "rtol": {"type": "number", "exclusiveMinimum": 0},
                "hold": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "feedback": {"enum": ["synthesized", "reference"]},
                "disturbance": {"$ref": "#/definitions/disturbance"},
            },
        },
        "iiss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "d_max": {"type": "number", "exclusiveMinimum": 0},
                "disturbances": {"type": "array", "items": {"$ref": "#/definitions/disturbance"}},
            },
        },
        "output_dir": {"type": "string"},
    },
    "definitions": {
        "disturbance": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["zero", "constant", "decaying-exponential", "sinusoid", "piecewise-table"]}},
        }
    },
}

DEFAULTS = {
    "epsilon": 1.0,
    "xi_max": 1.0,
    "region_radius": 10.0,
    "seed": 0,
    "levels": 64,
    "radii": 64,
    "sampling": {"samples": 10_000, "fresh_samples": 10_000, "tube_tol": 1e-3},
    "integrator": {"method": "rkf45", "atol": 1e-9, "rtol": 1e-9},
    "simulation": {"T": 200.0, "feedback": "synthesized"},
    "iiss": {"T": 50.0, "d_max": 5.0, "disturbances": []},
    "output_dir": "out",
}

# excluded from the config hash: they must not change any result
_NOT_HASHED = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path_or_dict) -> dict:
    """Validate against the schema and fill defaults; errors name the offending field."""
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        try:
            raw = json.loads(Path(path_or_dict).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path_or_dict}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}") from None
    if raw["dynamics"]["kind"] != "builtin" and "V" not in raw:
        raise ConfigError("config error at V: 'V' is a required property for non-builtin dynamics")
    if raw["dynamics"]["kind"] != "builtin" and "G" not in raw:
        raise ConfigError("config error at G: 'G' is a required property for non-builtin dynamics")
    return _merge(DEFAULTS, raw)


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _NOT_HASHED}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# problem construction

class Problem:
    """Systems and fields resolved from a configuration."""

    def __init__(self, system: ControlAffineSystem, V: ScalarField, G: VectorField, sysF: FullyNonlinearSystem | None, bundle=None):
        self.system = system
        self.V = V
        self.G = G
        self.sysF = sysF
        self.bundle = bundle

    @property
    def synthesis_system(self):
        return self.sysF if self.sysF is not None else self.system

    @property
    def simulation_system(self):
        return self.sysF if self.sysF is not None else self.system


def _scalar(source: str, n: int, m: int = 0, where: str = "") -> callable:
    try:
        expr = parse(source, n, m)
    except ParseError as err:
        raise ConfigError(f"config error at {where}: {err}") from None

    def fn(x, u=()):
        return expr.evaluate_generic(expr.bind(x, u))

    return fn


def _vector_field(sources, n: int, where: str, name: str) -> VectorField:
    if isinstance(sources, str):
        sources = [sources] * n
    if len(sources) != n:
        raise ConfigError(f"config error at {where}: expected {n} components, got {len(sources)}")
    comps = [_scalar(s, n, 0, f"{where}/{i}") for i, s in enumerate(sources)]
    return VectorField(lambda x: [c(x) for c in comps], n, name=name)


def build_problem(cfg: dict) -> Problem:
    dyn = cfg["dynamics"]
    kind = dyn["kind"]
    bundle = None
    if kind == "builtin":
        bundle = builtin(dyn["name"])
        system = bundle.system
        n = system.n
        V = ScalarField(_scalar(cfg["V"], n, 0, "V"), n, name="V") if "V" in cfg else bundle.V
        G = _vector_field(cfg["G"], n, "G", "G") if "G" in cfg else bundle.G
        return Problem(system, V, G, None, bundle)
    if kind == "affine":
        n = len(dyn["f"])
        f = _vector_field(dyn["f"], n, "dynamics/f", "f")
        g = [_vector_field(col, n, f"dynamics/g/{k}", f"g{k + 1}") for k, col in enumerate(dyn["g"])]
        system = ControlAffineSystem(f, g, name="affine")
        sysF = None
    else:
        n, m = len(dyn["F"]), dyn["m"]
        comps = [_scalar(s, n, m, f"dynamics/F/{i}") for i, s in enumerate(dyn["F"])]
        sysF = FullyNonlinearSystem(lambda x, u: [c(x, u) for c in comps], n, m, name="nonlinear")
        from .systems import affine_from_nonlinear

        system = affine_from_nonlinear(sysF)
    V = ScalarField(_scalar(cfg["V"], n, 0, "V"), n, name="V")
    G = _vector_field(cfg["G"], n, "G", "G")
    return Problem(system, V, G, sysF, None)


def _settings(cfg: dict) -> Settings:
    s = cfg["sampling"]
    return Settings(
        epsilon=float(cfg["epsilon"]),
        xi_max=float(cfg["xi_max"]),
        region_radius=float(cfg["region_radius"]),
        seed=int(cfg["seed"]),
        n_radii=int(cfg["radii"]),
        n_levels=int(cfg["levels"]),
        sphere_samples=s.get("sphere_samples"),
        level_samples=s.get("level_samples"),
        fresh_samples=int(s["fresh_samples"]),
        workers=int(cfg.get("workers", 1)),
    )


def _sampler(cfg: dict) -> Sampler:
    return Sampler(seed=int(cfg["seed"]), radius=float(cfg["region_radius"]), count=int(cfg["sampling"]["samples"]), workers=int(cfg.get("workers", 1)))


def _write_json(path: Path, payload: dict, cfg: dict) -> None:
    payload = dict(payload)
    payload["config_hash"] = config_hash(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")


def _out(cfg: dict) -> Path:
    return Path(cfg["output_dir"])


# ---------------------------------------------------------------------------
# commands

def _checks(cfg: dict, prob: Problem) -> dict:
    sampler = _sampler(cfg)
    sys_ = prob.system
    certs = {
        "H1": check_H1(prob.V, sys_.f, sampler),
        "H2": check_H2(prob.V, sys_.f, sys_.g, prob.G, sampler, tube_tol=float(cfg["sampling"]["tube_tol"])),
    }
    if "D" in cfg:
        D = DFunction.from_expression(cfg["D"], cfg.get("D_declared_divergent", True))
        certs["H3"] = validate_D(D, prob.V, F.lie_derivatives(prob.V, sys_.g), sampler)
    l = cfg.get("weak_jq_l")
    if l is not None:
        certs["weak_jq"] = check_weak_jq(prob.V, sys_.f, sys_.g, int(l), sampler)
    return certs


def cmd_check(cfg: dict) -> int:
    prob = build_problem(cfg)
    certs = _checks(cfg, prob)
    for name, cert in certs.items():
        _write_json(_out(cfg) / f"{name}.json", cert.to_json(), cfg)
        print(f"{name}: {cert.verdict} (worst margin {cert.worst_margin:.6g}, {cert.samples} samples)")
    return 0 if all(c.passed for c in certs.values()) else 2


def _synthesis_path(cfg: dict) -> Path:
    return _out(cfg) / "synthesis.json"


def cmd_synthesize(cfg: dict, force: bool = False) -> int:
    prob = build_problem(cfg)
    if not force:
        sampler = _sampler(cfg)
        pre = {
            "H1": check_H1(prob.V, prob.system.f, sampler),
            "H2": check_H2(prob.V, prob.system.f, prob.system.g, prob.G, sampler, tube_tol=float(cfg["sampling"]["tube_tol"])),
        }
        failed = [k for k, c in pre.items() if not c.passed]
        if failed:
            for k in failed:
                print(f"refusing to synthesize: {k} fails (witness {pre[k].witness}); use --force to override", file=sys.stderr)
            return 2
    res = synthesize(prob.synthesis_system, prob.V, prob.G, _settings(cfg))
    _write_json(_synthesis_path(cfg), res.to_json(), cfg)
    for c in res.constraint_report:
        print(f"{c.id}: {'pass' if c.ok else 'FAIL'} (margin {c.margin:.6g}, {c.samples} samples)")
    print(f"synthesis verdict: {res.verdict}")
    return 0 if res.verdict != "fail" else 2


def _load_synthesis(cfg: dict, prob: Problem) -> SynthesisResult | None:
    path = _synthesis_path(cfg)
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data.get("config_hash") != config_hash(cfg):
        raise ConfigError(f"{path} was produced by a different configuration; rerun synthesize")
    return SynthesisResult.from_json(data, prob.system, prob.V, prob.G, prob.sysF)


def _iiss_from(cfg: dict, prob: Problem, res: SynthesisResult):
    D = DFunction.from_expression(cfg["D"], cfg.get("D_declared_divergent", True))
    sampler = Sampler(seed=int(cfg["seed"]), radius=float(cfg["region_radius"]), count=int(cfg["sampling"]["fresh_samples"]))
    return build_iiss(res, D, sampler, float(cfg["iiss"]["d_max"]))


def _run(cfg, prob, feedback, x0, T, disturbance, observables):
    integ = cfg["integrator"]
    return simulate_closed_loop(
        prob.simulation_system if feedback[1] == "synthesized" else prob.bundle.raw,
        feedback[0],
        x0,
        T,
        disturbance,
        method=integ["method"],
        h=integ.get("h"),
        atol=integ["atol"],
        rtol=integ["rtol"],
        observables=observables,
        hold=integ.get("hold"),
    )


def _feedback_choice(cfg, prob, res):
    mode = cfg["simulation"]["feedback"]
    if mode == "reference":
        if prob.bundle is None or prob.bundle.raw_feedback is None:
            raise ConfigError("config error at simulation/feedback: no reference feedback for this system")
        raw_fb = prob.bundle.raw_feedback
        return (lambda x: np.array([float(F.base_value(v)) for v in raw_fb(list(x))]), "reference")
    if res is None:
        raise ConfigError(f"missing artifact {_synthesis_path(cfg)}: run synthesize first or select the reference feedback")
    return (lambda x: res.feedback(np.asarray(x)[:, None])[:, 0], "synthesized")


def cmd_simulate(cfg: dict, x0=None, T=None) -> int:
    prob = build_problem(cfg)
    res = _load_synthesis(cfg, prob) if cfg["simulation"]["feedback"] == "synthesized" else None
    fb = _feedback_choice(cfg, prob, res)
    simc = cfg["simulation"]
    x0 = x0 if x0 is not None else simc.get("x0")
    if x0 is None:
        raise ConfigError("config error at simulation/x0: initial state required")
    n = prob.system.n
    if len(x0) != n:
        raise ConfigError(f"config error at simulation/x0: expected {n} entries")
    T = float(T if T is not None else simc["T"])
    m = prob.system.m
    dist_cfg = simc.get("disturbance", {"kind": "zero"})
    disturbance = Disturbance(dist_cfg["kind"], {k: v for k, v in dist_cfg.items() if k != "kind"}, m)
    obs = {"V": prob.V}
    if fb[1] == "synthesized":
        obs["Vsharp"] = res.Vsharp
    elif prob.bundle.Vsharp is not None:
        obs["Vsharp"] = prob.bundle.Vsharp
    iiss_res = None
    if fb[1] == "synthesized" and "D" in cfg and prob.sysF is None:
        iiss_res = _iiss_from(cfg, prob, res)
        obs["Utilde"] = iiss_res.Utilde
    traj = _run(cfg, prob, fb, x0, T, disturbance, obs)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(traj, out / "trajectory.csv")
    summary = traj.summary()
    summary["feedback"] = fb[1]
    summary["max_increase"] = {k: lyapunov_monotonicity(traj, k) for k in ("V", "Vsharp") if k in traj.observables}
    if iiss_res is None:
        summary["iiss_bound"] = "not evaluated"
        verdict_ok = True
    else:
        cert = iiss_trajectory_bound(traj, iiss_res.Utilde, int(cfg["seed"]), float(cfg["region_radius"]))
        summary["iiss_bound"] = cert.verdict
        verdict_ok = cert.passed
    _write_json(out / "simulation.json", summary, cfg)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return 0 if verdict_ok else 2


def cmd_iiss(cfg: dict) -> int:
    if "D" not in cfg:
        raise ConfigError("config error at D: 'D' is required for the iiss command")
    prob = build_problem(cfg)
    if prob.sysF is not None:
        raise ConfigError("config error at dynamics: the iiss construction needs control-affine dynamics")
    res = _load_synthesis(cfg, prob)
    if res is None:
        raise ConfigError(f"missing artifact {_synthesis_path(cfg)}: run synthesize first")
    ii = _iiss_from(cfg, prob, res)
    payload = ii.to_json()
    ok = ii.verdict != "fail"
    ic = cfg["iiss"]
    runs = []
    x0 = ic.get("x0") or cfg["simulation"].get("x0")
    fb = (lambda x: res.feedback(np.asarray(x)[:, None])[:, 0], "synthesized")
    for k, dcfg in enumerate(ic.get("disturbances", [])):
        if x0 is None:
            raise ConfigError("config error at iiss/x0: initial state required for trajectory bounds")
        dist = Disturbance(dcfg["kind"], {a: b for a, b in dcfg.items() if a != "kind"}, prob.system.m)
        traj = _run(cfg, prob, fb, x0, float(ic["T"]), dist, {"Utilde": ii.Utilde})
        cert = iiss_trajectory_bound(traj, ii.Utilde, int(cfg["seed"]), float(cfg["region_radius"]))
        runs.append({"disturbance": dist.to_json(), "certificate": cert.to_json()})
        ok = ok and cert.passed
    payload["trajectory_bounds"] = runs
    _write_json(_out(cfg) / "iiss.json", payload, cfg)
    for name, c in ii.certificates.items():
        print(f"{name}: {c.verdict} (worst margin {c.worst_margin:.6g})")
    for r in runs:
        print(f"trajectory bound ({r['disturbance']['kind']}): {r['certificate']['verdict']}")
    return 0 if ok else 2


def _write_dat(path: Path, x, y, header: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for a, b in zip(x, y):
            fh.write("%.17g %.17g\n" % (a, b))


def cmd_report(cfg: dict) -> int:
    out = _out(cfg)
    synth = out / "synthesis.json"
    traj = out / "trajectory.csv"
    missing = [str(p) for p in (synth, traj) if not p.exists()]
    if len(missing) == 2:
        raise ConfigError("missing artifacts: " + ", ".join(missing))
    written = []
    if synth.exists():
        data = json.loads(synth.read_text())
        table = data["delta_table"]
        s = table["s"]
        for key, fname in (("delta", "delta.dat"), ("delta_prime", "delta_prime.dat"), ("delta_a", "delta_a.dat"), ("P", "P.dat"), ("omega", "omega.dat")):
            _write_dat(out / fname, s, table[key], f"s {key}")
            written.append(fname)
        for key in ("xi", "xibar", "Omega", "alpha1", "alpha2", "alpha3", "alpha4", "rho"):
            env = data["envelopes"][key]
            _write_dat(out / f"{key}.dat", env["breakpoints"], env["values"], f"s {key}")
            written.append(f"{key}.dat")
    if traj.exists():
        lines = traj.read_text().splitlines()
        header = lines[0].split(",")
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]) if len(lines) > 1 else np.zeros((0, len(header)))
        t = rows[:, 0]
        for col, fname in (("V", "v_vs_t.dat"), ("Vsharp", "vsharp_vs_t.dat"), ("Utilde", "utilde_vs_t.dat")):
            if col in header:
                _write_dat(out / fname, t, rows[:, header.index(col)], f"t {col}")
                written.append(fname)
        xcols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        _write_dat(out / "norm_vs_t.dat", t, np.linalg.norm(rows[:, xcols], axis=1), "t |x|")
        written.append("norm_vs_t.dat")
    for m in missing:
        print(f"note: {m} not found; its reports were skipped")
    print("wrote " + ", ".join(sorted(written)))
    return 0


# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jqclf", description="Strict CLF and bounded damping feedback synthesis.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("check", "synthesize", "simulate", "iiss", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("config", help="JSON configuration file")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--radius", type=float, help="region radius R")
        sp.add_argument("--workers", type=int)
        if name == "synthesize":
            sp.add_argument("--force", action="store_true", help="skip the assumption pre-checks")
        if name == "simulate":
            sp.add_argument("--x0", type=float, nargs="+")
            sp.add_argument("--T", type=float)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg["output_dir"] = args.output
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.epsilon is not None:
            cfg["epsilon"] = args.epsilon
        if args.radius is not None:
            cfg["region_radius"] = args.radius
        if args.workers is not None:
            cfg["workers"] = args.workers
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, force=args.force)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.x0, args.T)
        if args.command == "iiss":
            return cmd_iiss(cfg)
        return cmd_report(cfg)
    except SynthesisError as err:
        loc = "".join(f" [{k}={v}]" for k, v in (("constraint", err.constraint), ("level", err.level)) if v is not None)
        print(f"synthesis aborted: {err}{loc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, DomainError, SystemError_, IntegrationError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
