"""Command-line front end.

Subcommands: fit, transfer, simulate, batch, validate.  Every command reads
an optional JSON config (schema version 1, objects may pull in other files
with ``{"$include": "path.json"}``), validates it before computing, and
writes its outputs under ``--out-dir``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 fall or
abort.  Failures also leave a machine-readable ``error.json``.
"""
from __future__ import annotations

import argparse
import copy
import datetime as dt
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .profiles import HEIGHT_KNOTS, SurfaceError, SurfaceSet, build_synthetic_surfaces

log = logging.getLogger("downstep")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_FALL = 0, 2, 3, 4
CLI_DEFAULT_STEPS = 16  # leaves room after the downstep for the recovery count


class ConfigError(Exception):
    pass


# -- config loading ----------------------------------------------------------------------------


def load_schema(name: str) -> dict:
    text = resources.files("downstep").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def resolve_includes(obj, base: Path, stack=()):
    """Replace ``{"$include": path, ...}`` objects by the included document.

    Keys next to ``$include`` override the included ones.  Paths are relative
    to the including file.
    """
    if isinstance(obj, list):
        return [resolve_includes(v, base, stack) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "$include" in obj:
        path = (base / obj["$include"]).resolve()
        if path in stack:
            raise ConfigError(f"circular include of {path}")
        inc = resolve_includes(_read_json(path), path.parent, stack + (path,))
        if not isinstance(inc, dict):
            raise ConfigError(f"{path}: included document must be an object")
        rest = {k: v for k, v in obj.items() if k != "$include"}
        merged = dict(inc)
        merged.update(resolve_includes(rest, base, stack))
        return merged
    return {k: resolve_includes(v, base, stack) for k, v in obj.items()}


def validate_document(doc, schema_name: str):
    import jsonschema

    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name} schema: {where}: {e.message}") from None


def load_config(path) -> tuple[dict, Path]:
    """Resolved and validated config plus the directory relative paths refer to."""
    if path is None:
        cfg, base = {"schema_version": 1}, Path.cwd()
    else:
        path = Path(path)
        cfg = resolve_includes(_read_json(path), path.parent.resolve(), (path.resolve(),))
        base = path.parent.resolve()
    validate_document(cfg, "config")
    return cfg, base


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _path(base: Path, p) -> Path | None:
    return None if p is None else (base / p)


def load_surfaces(cfg: dict, base: Path) -> SurfaceSet:
    p = _path(base, cfg.get("surfaces"))
    if p is None:
        return build_synthetic_surfaces()
    doc = _read_json(p)
    validate_document(doc, "surfaces")
    try:
        return SurfaceSet.from_dict(doc)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{p}: {e}") from None


def load_fit(path: Path):
    from .collocation import FitResult

    doc = _read_json(path)
    validate_document(doc, "fit")
    return FitResult.from_dict(doc)


# -- output --------------------------------------------------------------------------------


class OutputWriter:
    """Single writer for a run directory; each file is written exactly once."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written = []

    def text(self, rel: str, content: str) -> Path:
        p = self.root / rel
        if p in self.written:
            raise RuntimeError(f"{p} written twice")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)
        self.written.append(p)
        return p

    def json(self, rel: str, doc) -> Path:
        return self.text(rel, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def adopt(self, paths):
        self.written.extend(paths)


def _error(out: OutputWriter | None, code: int, kind: str, message: str, **extra) -> int:
    doc = {"error": kind, "message": message, "exit_code": code, **extra}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out is not None:
        p = out.root / "error.json"
        out.root.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return code


# -- fit ------------------------------------------------------------------------------------


def run_fit(cfg: dict, base: Path, scenario: str | None, height: float | None):
    from .collocation import FitError, build_nlp, problem_from_surfaces, solve_fit

    sec = dict(cfg.get("fit", {}))
    scenario = scenario or sec.get("scenario", "flat")
    height = sec.get("height", 0.0) if height is None else height
    if scenario == "flat":
        height = 0.0
    elif height <= 0:
        raise ConfigError("downstep fits need a positive height")
    frozen = None
    if scenario != "flat":
        src = _path(base, sec.get("frozen_from"))
        if src is None:
            raise ConfigError("missing frozen parameters: downstep fits need a flat-ground fit artifact (fit.frozen_from)")
        flat = load_fit(src)
        frozen = (tuple(flat.stiffness_coeffs), float(flat.damping))
    ss = load_surfaces(cfg, base)
    kw = {k: sec[k] for k in ("w", "duration_weight", "stiffness_prior", "min_damping") if k in sec}
    try:
        pb = problem_from_surfaces(ss, scenario, height, N=sec.get("N", 8), frozen=frozen, **kw)
        return solve_fit(build_nlp(pb), max_iter=sec.get("max_iter", 300))
    except FitError as e:
        raise ConfigError(str(e)) from None


def cmd_fit(args) -> int:
    out = OutputWriter(args.out_dir)
    try:
        cfg, base = load_config(args.config)
        r = run_fit(cfg, base, args.scenario, args.height)
    except ConfigError as e:
        return _error(out, EXIT_CONFIG, "config", str(e))
    out.text("fit.json", r.dumps() + "\n")
    log.info("fit: %s (K = %s, D = %.3f, %.1f s)", r.message, r.stiffness_coeffs, r.damping, r.elapsed)
    if not r.success:
        return _error(out, EXIT_SOLVER, "solver", r.message, kkt=r.kkt)
    return EXIT_OK


# -- transfer --------------------------------------------------------------------------------


def cmd_transfer(args) -> int:
    from .transfer import MorphologyParams, transfer_surfaces

    out = OutputWriter(args.out_dir)
    try:
        cfg, base = load_config(args.config)
        if "transfer" not in cfg:
            raise ConfigError("config has no transfer section")
        morph = MorphologyParams.from_dict(cfg["transfer"]["morphology"])
        human = load_surfaces(cfg, base)
        robot = transfer_surfaces(human, morph)
    except (ConfigError, ValueError) as e:
        # SurfaceError is a ValueError and names the failed check
        kind = "surfaces" if isinstance(e, SurfaceError) else "config"
        return _error(out, EXIT_CONFIG, kind, str(e))
    out.text("robot_surfaces.json", robot.dumps() + "\n")
    return EXIT_OK


# -- simulate --------------------------------------------------------------------------------


def scenario_config(sec: dict, base: Path, scenario=None, height=None):
    """ScenarioConfig from a simulation section; flags override the file."""
    from .sim import ScenarioConfig

    sec = dict(sec)
    sec.pop("model", None)
    sec.pop("toy", None)
    fit = _path(base, sec.pop("fit_artifact", None))
    if scenario is not None:
        sec["scenario"] = scenario
    if height is not None:
        sec["height"] = height
    sec.setdefault("total_steps", CLI_DEFAULT_STEPS)
    if fit is not None:
        leg = load_fit(fit).leg_params()
        sec["leg"] = {"stiffness_coeffs": leg.stiffness_coeffs, "damping": leg.damping, **sec.get("leg", {})}
    try:
        return ScenarioConfig.from_dict(sec)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"simulation: {e}") from None


def normalized_com(result) -> float:
    """Lowest CoM height above the lowest stance foot, over the nominal height."""
    log = result.log
    c0, c1 = log.column("contact_0").astype(bool), log.column("contact_1").astype(bool)
    f0, f1 = log.column("foot0_z"), log.column("foot1_z")
    ground = np.minimum(np.where(c0, f0, np.inf), np.where(c1, f1, np.inf))
    ok = np.isfinite(ground)
    if not np.any(ok):
        return float("nan")
    return float(np.min(log.column("z")[ok] - ground[ok]) / result.config.hlip_z0)


def simulate_outputs(result) -> dict:
    """rel path -> text for one aSLIP run (figures excluded)."""
    from .report import panel_tables

    summary = dict(result.summary)
    summary["min_normalized_com"] = normalized_com(result)
    summary["config"] = result.config.to_dict()
    files = {"trajectory.csv": result.log.to_csv(),
             "summary.json": json.dumps(summary, indent=1, sort_keys=True) + "\n"}
    for name, text in panel_tables(result).items():
        files[f"plots/{name}.csv"] = text
    return files


def run_toy(sec: dict):
    from .tsc import ToyBiped, simulate_toy

    toy = dict(sec.get("toy", {}))
    model = ToyBiped()
    z0 = model.com(model.standing_pose(), np.zeros(7))[0]
    A, f = toy.get("amplitude", 0.02), toy.get("frequency", 1.0)
    w = 2 * np.pi * f

    def z_des(t):
        return z0 + A * np.sin(w * t), A * w * np.cos(w * t), -A * w * w * np.sin(w * t)

    return simulate_toy(model, z_des, duration=toy.get("duration", 2.0), Kp=toy.get("Kp", 100.0),
                        Kd=toy.get("Kd", 20.0), z0_offset=toy.get("initial_offset", 0.01), c=toy.get("c", 0.3),
                        delta_F=toy.get("delta_F", 0.0))


def cmd_simulate(args) -> int:
    from .sim import SimulationError, run_scenario
    from .tsc import TscError

    out = OutputWriter(args.out_dir)
    try:
        cfg, base = load_config(args.config)
        sec = dict(cfg.get("simulation", {}))
        model = args.model or sec.get("model", "aslip")
        if model == "toy":
            try:
                run = run_toy(sec)
            except TscError as e:
                return _error(out, EXIT_SOLVER, "solver", str(e), diagnostics=e.diagnostics)
            return _write_toy(out, run)
        sc = scenario_config(sec, base, args.scenario, args.height)
        ss = load_surfaces(cfg, base)
    except ConfigError as e:
        return _error(out, EXIT_CONFIG, "config", str(e))
    try:
        result = run_scenario(sc, ss)
    except SimulationError as e:
        return _error(out, EXIT_SOLVER, "solver", str(e))
    for rel, text in simulate_outputs(result).items():
        out.text(rel, text)
    if not args.no_figures:
        from .report import panel_tables, render_figures

        (out.root / "plots").mkdir(exist_ok=True)
        title = f"{sc.scenario} h = {sc.height:.3f} m"
        out.adopt(render_figures(panel_tables(result), out.root / "plots", title))
    if result.summary["fell"]:
        return _error(out, EXIT_FALL, "fall", str(result.summary["failure"]))
    return EXIT_OK


def _write_toy(out: OutputWriter, run) -> int:
    from .report import render_toy, toy_table

    table = toy_table(run)
    err = run.z_com - run.z_des
    tube_ok = np.isnan(run.grf) | ((run.grf >= run.tube[:, :, 0] - 1e-7) & (run.grf <= run.tube[:, :, 1] + 1e-7))
    summary = {"model": "toy", "ticks": int(run.t.size), "fallbacks": int(run.fallback.sum()),
               "max_height_error": float(np.max(np.abs(err))),
               "final_height_error": float(abs(err[-1])), "tube_violations": int(np.sum(~tube_ok))}
    out.text("toy.csv", table)
    out.json("summary.json", summary)
    out.adopt(render_toy(table, out.root))
    return EXIT_OK


# -- batch ------------------------------------------------------------------------------------


def batch_conditions(cfg: dict) -> list[tuple[str, str, float]]:
    sec = cfg.get("batch", {})
    heights = sec.get("heights", list(HEIGHT_KNOTS[1:]))
    conds = [("flat-0.000", "flat", 0.0)] if sec.get("include_flat", True) else []
    for s in sec.get("scenarios", ["planned", "unplanned"]):
        conds += [(f"{s}-{h:.3f}", s, float(h)) for h in heights]
    return conds


def _run_condition(job):
    """Worker: one condition, returns texts so the parent does all writing."""
    from .sim import run_scenario

    name, sc, surf_doc = job
    try:
        ss = SurfaceSet.from_dict(surf_doc) if surf_doc is not None else None
        result = run_scenario(sc, ss)
        return name, result.summary, simulate_outputs(result), normalized_com(result), None
    except Exception as e:  # isolate the failure to this condition
        return name, None, {}, None, f"{type(e).__name__}: {e}"


def summary_row(name, summary, norm, error) -> dict:
    if summary is None:
        return {"condition": name, "peak_grf": None, "min_normalized_com": None, "velocity_deviation": None,
                "steps_to_recover": None, "fell": True, "error": error}

    def num(v):
        return None if v is None or not np.isfinite(v) else float(v)

    return {"condition": name, "peak_grf": num(summary["peak_grf"]), "min_normalized_com": num(norm),
            "velocity_deviation": num(summary["max_velocity_deviation"]),
            "steps_to_recover": summary["steps_to_recover"], "fell": bool(summary["fell"]),
            "error": summary["failure"]}


def cmd_batch(args) -> int:
    out = OutputWriter(args.out_dir)
    try:
        cfg, base = load_config(args.config)
        sec = cfg.get("simulation", {})
        overrides = cfg.get("batch", {}).get("overrides", {})
        conds = batch_conditions(cfg)
        unknown = set(overrides) - {c[0] for c in conds}
        if unknown:
            raise ConfigError(f"overrides for unknown conditions: {sorted(unknown)}")
        jobs = []
        for name, scenario, h in conds:
            s = copy.deepcopy(sec)
            s.update(overrides.get(name, {}))
            jobs.append((name, scenario_config(s, base, scenario, h)))
        ss = load_surfaces(cfg, base) if cfg.get("surfaces") else None
    except ConfigError as e:
        return _error(out, EXIT_CONFIG, "config", str(e))
    doc = ss.to_dict() if ss is not None else None
    work = [(n, sc, doc) for n, sc in jobs]
    threads = max(1, args.threads)
    if threads == 1:
        results = [_run_condition(j) for j in work]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_condition, work))
    runs, rows = {}, []
    for name, summary, files, norm, error in results:
        runs[name] = {}
        for rel, text in files.items():
            runs[name][rel] = str(out.text(f"{name}/{rel}", text).relative_to(out.root))
        rows.append(summary_row(name, summary, norm, error))
        log.info("%s: %s", name, "ok" if not rows[-1]["fell"] else f"failed ({rows[-1]['error']})")
    manifest = {
        "tool_version": __version__,
        "config_hash": config_hash(cfg),
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "scenarios": [c[0] for c in conds],
        "runs": runs,
        "summary": rows,
    }
    out.json("manifest.json", manifest)
    from .report import _csv

    cols = ("condition", "peak_grf", "min_normalized_com", "velocity_deviation", "steps_to_recover", "fell", "error")
    out.text("summary.csv", _csv(cols, ([r[c] if r[c] is not None else "" for c in cols] for r in rows)))
    if any(summary is None for _, summary, *_ in results):
        return EXIT_SOLVER
    return EXIT_FALL if any(r["fell"] for r in rows) else EXIT_OK


def check_manifest(path: Path):
    """Schema check plus: every listed output exists and parses."""
    doc = _read_json(path)
    validate_document(doc, "manifest")
    for name, files in doc["runs"].items():
        for rel in files.values():
            p = path.parent / rel
            if not p.exists():
                raise ConfigError(f"{name}: missing output {rel}")
            if p.suffix == ".json":
                _read_json(p)
            elif p.suffix == ".csv":
                text = p.read_text()
                if not text.strip():
                    raise ConfigError(f"{name}: empty output {rel}")
    return doc


# -- validate ----------------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        if args.config is not None or not (args.fit or args.surfaces or args.manifest):
            load_config(args.config)
        for p in args.fit or []:
            load_fit(Path(p))
        for p in args.surfaces or []:
            validate_document(_read_json(Path(p)), "surfaces")
        for p in args.manifest or []:
            check_manifest(Path(p))
    except ConfigError as e:
        return _error(None, EXIT_CONFIG, "config", str(e))
    print("ok")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--seed", type=int, default=0, help="reserved; runs are deterministic")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    cond = argparse.ArgumentParser(add_help=False)
    cond.add_argument("--scenario", choices=("flat", "planned", "unplanned"))
    cond.add_argument("--height", type=float, choices=HEIGHT_KNOTS, metavar="{0,0.025,0.05,0.075,0.10}")

    p = argparse.ArgumentParser(prog="downstep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, cond], help="fit leg stiffness and damping to reference surfaces")
    sub.add_parser("transfer", parents=[common], help="scale human surfaces to the robot")
    s = sub.add_parser("simulate", parents=[common, cond], help="run one scenario")
    s.add_argument("--model", choices=("aslip", "toy"))
    s.add_argument("--no-figures", action="store_true", help="write plot CSVs only")
    sub.add_parser("batch", parents=[common], help="run the planned, unplanned and flat condition grid")
    v = sub.add_parser("validate", parents=[common], help="check a config and artifacts against their schemas")
    v.add_argument("--fit", action="append")
    v.add_argument("--surfaces", action="append")
    v.add_argument("--manifest", action="append")
    return p


COMMANDS = {"fit": cmd_fit, "transfer": cmd_transfer, "simulate": cmd_simulate, "batch": cmd_batch,
            "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _error(None, EXIT_CONFIG, "config", "--threads must be at least 1")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
