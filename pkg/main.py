import argparse
import logging
import math
import os
import sys

MIN_PYTHON = (3, 12)

if sys.version_info < MIN_PYTHON:
    raise RuntimeError("subopt requires Python 3.12 or newer.")

import numpy as np

import records
from config import ConfigError, apply_overrides, build_configuration, de_settings, load_run_config, problem_from
from constraints import RESTRICTED1D, InfeasibleProblemError
from experiments import ExperimentRecord, compare_1d, check_monotone, fit_models, fit_scaling, scaling_study, success_fraction, sweep_many
from log_utils import enforce_logs_quota, setup_logging
from optimizer import OracleRefusedError, grid_oracle, run_de
from physics import CoincidentEmittersError, Polarization, build_hamiltonian, collective_modes, mode_report
from structures import chain_gaps

logger = logging.getLogger("subopt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SWEEP_FAILED = 4
EXIT_ORACLE_REFUSED = 5

SUCCESS_THRESHOLD = 0.9

COMMANDS = {
    "modes": "collective modes of a fixed configuration",
    "optimize": "differential-evolution search for the slowest-decaying configuration",
    "sweep": "optimize over an r_min grid with regular baselines",
    "scaling": "loss scaling with array size and power-law / exponential fits",
    "compare1d": "optimized chain vs periodic and modulated chains",
    "oracle": "brute-force grid minimum for N = 2, 3",
}


def _out(cfg, name: str) -> str:
    out_dir = cfg["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _write_records(cfg, recs: list[ExperimentRecord]) -> None:
    rows = [r.to_dict() for r in recs]
    with records.RecordWriter(_out(cfg, "records.jsonl")) as writer:
        writer.extend(rows)
    records.write_csv(_out(cfg, "records.csv"), rows)


def _record_status(recs: list[ExperimentRecord]) -> int:
    frac = success_fraction(recs)
    failed = sum(1 for r in recs if not r.ok)
    if failed:
        logger.warning("%d of %d point(s) failed", failed, len(recs))
    return EXIT_OK if frac >= SUCCESS_THRESHOLD else EXIT_SWEEP_FAILED


def cmd_modes(cfg) -> int:
    if cfg["configuration"] is None:
        raise ConfigError("the modes command needs a configuration", "configuration")
    emitters = build_configuration(cfg["configuration"])
    pol = Polarization.parse(cfg["polarization"])
    modes = collective_modes(build_hamiltonian(emitters, pol))
    report = mode_report(modes, emitters)

    per_mode = []
    for j, mode in enumerate(modes):
        rows = [a for a in report if a.mode_index == j]
        per_mode.append({
            "index": j,
            "shift": mode.shift,
            "decay": mode.decay,
            "weights": [a.weight for a in rows],
            "phases": [a.phase for a in rows],
        })
    records.write_json_atomic(_out(cfg, "modes.json"), {
        "polarization": pol.value,
        "configuration": emitters.to_list(),
        "decay_sum": float(np.sum(modes.decays)),
        "modes": per_mode,
    })
    records.write_csv(
        _out(cfg, "modes.csv"),
        [a._asdict() for a in report],
        ("mode_index", "atom", "x", "y", "weight", "phase"),
    )
    table = records.format_table(
        ("mode", "shift", "decay", "|psi|^2", "arg psi"),
        [(m["index"], m["shift"], m["decay"], m["weights"], m["phases"]) for m in per_mode],
    )
    records.write_text(_out(cfg, "modes.txt"), table)
    print(table, end="")
    return EXIT_OK


def cmd_optimize(cfg) -> int:
    problem = problem_from(cfg)
    run = run_de(problem, de_settings(cfg), jobs=cfg["jobs"])
    best = run.best_configuration
    records.write_json_atomic(_out(cfg, "derun.json"), run.to_dict())
    records.save_configuration(
        _out(cfg, "best_configuration.json"),
        best,
        best_gamma=run.best_gamma,
        polarization=problem.polarization.value,
        layout=problem.layout,
        r_min=problem.constraints.r_min,
    )
    if problem.layout == RESTRICTED1D:
        gaps = chain_gaps(best)
        records.write_csv(_out(cfg, "gaps.csv"), [{"index": i, "gap": float(g)} for i, g in enumerate(gaps)], ("index", "gap"))
    print(f"best gamma = {records.fmt(run.best_gamma)} (seed {run.seed_used}, {run.generations_used} generation(s))")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    sw = cfg["sweep"]
    n_list = sw["n_list"] or [sw["n"]]
    pols = sw["polarizations"] or [cfg["polarization"]]
    recs = sweep_many(n_list, pols, sw["r_min_grid"], de_settings(cfg), sw["confinement_radius"], sw["baselines"], cfg["jobs"])
    _write_records(cfg, recs)
    for n in n_list:
        for pol in pols:
            de_recs = [r for r in recs if r.n == n and r.polarization == pol and r.mode == "free2d"]
            for lo, hi in check_monotone(de_recs):
                logger.warning("n=%d %s: loss at r_min=%.3f exceeds loss at r_min=%.3f", n, pol, lo, hi)
    table = records.format_table(
        ("n", "r_min", "pol", "mode", "best_gamma", "geometry", "character", "flags"),
        [(r.n, r.r_min, r.polarization, r.mode, r.best_gamma, r.geometry_class, r.mode_character, ",".join(r.flags) or r.error)
         for r in recs],
    )
    records.write_text(_out(cfg, "summary.txt"), table)
    print(table, end="")
    return _record_status(recs)


def _synthetic_records(cfg) -> list[ExperimentRecord]:
    sc = cfg["scaling"]
    planted = sc["synthetic"]
    out = []
    for n in sc["n_list"]:
        if planted["model"] == "power_law":
            gamma = planted["amplitude"] * n ** planted["exponent"]
        else:
            gamma = planted["amplitude"] * math.exp(planted["exponent"] * n)
        out.append(ExperimentRecord(n, sc["r_min"], cfg["polarization"], f"synthetic:{planted['model']}", gamma, None))
    return out


def cmd_scaling(cfg) -> int:
    sc = cfg["scaling"]
    if sc["synthetic"] is not None:
        recs = _synthetic_records(cfg)
        ns, gammas = [r.n for r in recs], [r.best_gamma for r in recs]
        fits = {"synthetic": fit_scaling(ns, gammas)}
        alternatives = {"synthetic": fit_models(ns, gammas)}
    else:
        study = scaling_study(sc["n_list"], sc["r_min"], Polarization.parse(cfg["polarization"]), sc["families"], de_settings(cfg), cfg["jobs"])
        recs, fits, alternatives = study.records, study.fits, study.alternatives
    _write_records(cfg, recs)
    rows = []
    for family, fit in fits.items():
        alt = alternatives[family]
        rows.append((family, fit.model, fit.amplitude, fit.exponent, fit.r_squared,
                     alt["power_law"].r_squared, alt["exponential"].r_squared))
    table = records.format_table(("family", "model", "amplitude", "exponent", "r2", "r2_power_law", "r2_exponential"), rows)
    records.write_text(_out(cfg, "fits.txt"), table)
    records.write_json_atomic(_out(cfg, "fits.json"), {
        "fits": {f: fit.to_dict() for f, fit in fits.items()},
        "alternatives": {f: {m: v.to_dict() for m, v in alt.items()} for f, alt in alternatives.items()},
    })
    print(table, end="")
    return _record_status(recs)


def cmd_compare1d(cfg) -> int:
    cp = cfg["compare1d"]
    rows = compare_1d(cp["n"], cp["r_min_grid"], de_settings(cfg), Polarization.parse(cfg["polarization"]), cfg["jobs"])
    recs = [rec for row in rows for rec in row.records()]
    _write_records(cfg, recs)
    columns = ("n", "r_min", "confinement_radius", "optimized_free", "periodic_chain", "modulated_chain")
    records.write_csv(_out(cfg, "compare1d.csv"), [row.to_row() for row in rows], columns)
    gaps = []
    profile = []
    for row in rows:
        gaps.extend({"r_min": row.r_min, "curve": "optimized_free", "index": i, "gap": g} for i, g in enumerate(row.optimized_gaps))
        gaps.extend({"r_min": row.r_min, "curve": "modulated_chain", "index": i, "gap": g} for i, g in enumerate(row.modulated_gaps))
        profile.extend({"r_min": row.r_min, "atom": i, "weight": w} for i, w in enumerate(row.optimized_profile))
    records.write_csv(_out(cfg, "gaps.csv"), gaps, ("r_min", "curve", "index", "gap"))
    records.write_csv(_out(cfg, "profile.csv"), profile, ("r_min", "atom", "weight"))
    table = records.format_table(columns, [tuple(row.to_row()[c] for c in columns) for row in rows])
    print(table, end="")
    return _record_status(recs)


def cmd_oracle(cfg) -> int:
    problem = problem_from(cfg)
    orc = cfg["oracle"]
    result = grid_oracle(problem, orc["radial_step"], orc["angle_step"], orc["r_max"])
    payload = {"status": "ok" if result.feasible else "infeasible", "problem": problem.to_dict()}
    payload.update(result.to_dict())
    payload.update({"radial_step": orc["radial_step"], "angle_step": orc["angle_step"], "r_max": orc["r_max"]})
    records.write_json_atomic(_out(cfg, "oracle.json"), payload)
    if not result.feasible:
        print("infeasible: the oracle grid holds no feasible configuration")
        return EXIT_INFEASIBLE
    print(f"oracle gamma = {records.fmt(result.gamma_min)} over {result.points_evaluated} point(s)")
    return EXIT_OK


HANDLERS = {
    "modes": cmd_modes,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "scaling": cmd_scaling,
    "compare1d": cmd_compare1d,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subopt", description="Subradiant planar emitter arrays: spectra and optimization")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=None, help="Run configuration (.json or .toml)")
        p.add_argument("--seed", type=int, default=None, help="Base RNG seed (unsigned 64-bit)")
        p.add_argument("--jobs", type=int, default=None, help="Worker processes (default: available CPUs)")
        p.add_argument("--out", default=None, help="Output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log_path = setup_logging(args.command)
    try:
        cfg = apply_overrides(load_run_config(args.config), seed=args.seed, jobs=args.jobs, out=args.out)
        enforce_logs_quota(cfg["output"]["logs_quota_mb"], keep=[log_path])
        logger.info("Running %s with config %s", args.command, args.config or "<defaults>")
        records.write_json_atomic(_out(cfg, "run_config.json"), cfg)
        return HANDLERS[args.command](cfg)
    except (ConfigError, CoincidentEmittersError) as exc:
        logger.error("Configuration error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblemError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OracleRefusedError as exc:
        logger.error("Oracle refused: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE_REFUSED


if __name__ == "__main__":
    sys.exit(main())
