import copy
import json
import os
import re
import tomllib
from typing import Any, Dict, Optional, Sequence

from rapidfuzz import fuzz, process

from constraints import LAYOUTS, Constraints
from optimizer import CROSSOVER_BASES, SEED_MODULUS, DeSettings, Problem
from physics import EmitterConfiguration, Polarization
from records import SCHEMA_VERSION
from structures import ModulatedChainParams, modulated_chain, rectangular_fragment, regular_chain, triangular_fragment

DEFAULT_RUN_CONFIG: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "jobs": None,
    "polarization": "sigma_z",
    "configuration": None,
    "problem": {
        "n": 3,
        "r_min": 0.3,
        "confinement_radius": None,
        "layout": "free2d",
    },
    "de": {
        "population_size": None,
        "f_range": [0.5, 1.0],
        "crossover_rate": 0.7,
        "max_generations": 3000,
        "stop_rel_dispersion": 0.01,
        "stop_spread": 1e-4,
        "restarts": 8,
        "crossover_base": "candidate",
    },
    "sweep": {
        "n": 6,
        "n_list": None,
        "polarizations": None,
        "r_min_grid": {"start": 0.1, "stop": 1.2, "step": 0.05},
        "confinement_radius": 5.0,
        "baselines": True,
    },
    "scaling": {
        "n_list": [10, 12, 14, 16, 18, 20, 22, 24, 26],
        "r_min": 0.3,
        "families": ["periodic", "modulated"],
        "synthetic": None,
    },
    "compare1d": {
        "n": 14,
        "r_min_grid": [0.2, 0.3, 0.4, 0.5],
    },
    "oracle": {
        "radial_step": 0.01,
        "angle_step": 0.01,
        "r_max": 3.0,
    },
    "output": {
        "dir": "results",
        "logs_quota_mb": 300.0,
    },
}

GENERATORS: Dict[str, tuple[str, ...]] = {
    "chain": ("n", "a"),
    "triangle": ("n", "a"),
    "rectangle": ("rows", "cols", "a"),
    "modulated": ("n", "r_min", "r_max"),
}
_INT_PARAMS = {"n", "rows", "cols"}

SCALING_MODELS = ("power_law", "exponential")
MAX_SCALING_N = 26


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: Optional[int] = None, column: Optional[int] = None):
        where = path or "<config>"
        if line is not None:
            where += f":{line}" + (f":{column}" if column is not None else "")
        super().__init__(f"{where}: {message}")
        self.field = path
        self.line = line
        self.column = column


def _defaults() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULT_RUN_CONFIG)


def _suggest(key: str, choices: Sequence[str]) -> str:
    match = process.extractOne(key, list(choices), scorer=fuzz.ratio, score_cutoff=60)
    return f" (did you mean '{match[0]}'?)" if match else ""


def _reject_unknown(raw: Dict[str, Any], allowed: Sequence[str], where: str) -> None:
    for key in raw:
        if key not in allowed:
            path = f"{where}.{key}" if where else str(key)
            raise ConfigError(f"unknown key '{key}'{_suggest(str(key), allowed)}", path)


def _coerce_float(value: Any, path: str, minimum: Optional[float] = None, strict: bool = False) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", path)
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", path) from None
    if out != out or out in (float("inf"), float("-inf")):
        raise ConfigError(f"expected a finite number, got {value!r}", path)
    if minimum is not None and (out <= minimum if strict else out < minimum):
        bound = ">" if strict else ">="
        raise ConfigError(f"must be {bound} {minimum}, got {out}", path)
    return out


def _coerce_int(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ConfigError(f"expected an integer, got {value!r}", path)
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected an integer, got {value!r}", path) from None
    if minimum is not None and out < minimum:
        raise ConfigError(f"must be >= {minimum}, got {out}", path)
    return out


def _coerce_optional(value: Any, coerce, path: str, **kw):
    return None if value is None else coerce(value, path, **kw)


def _coerce_choice(value: Any, choices: Sequence[str], path: str) -> str:
    text = str(value).strip().lower()
    if text not in choices:
        raise ConfigError(f"expected one of {list(choices)}, got {value!r}{_suggest(text, choices)}", path)
    return text


def _coerce_bool(value: Any, path: str) -> bool:
    if isinstance(value, bool):
        return value
    raise ConfigError(f"expected true/false, got {value!r}", path)


def _coerce_polarization(value: Any, path: str) -> str:
    try:
        return Polarization.parse(value).value
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def _coerce_int_list(value: Any, path: str, minimum: int = 1) -> list[int]:
    if isinstance(value, dict):
        return [int(round(v)) for v in _coerce_grid(value, path)]
    if not isinstance(value, list) or not value:
        raise ConfigError("expected a non-empty list of integers", path)
    return [_coerce_int(v, f"{path}[{i}]", minimum) for i, v in enumerate(value)]


def _coerce_grid(value: Any, path: str) -> list[float]:
    """Explicit list, or {start, stop, step} with stop included."""
    if isinstance(value, dict):
        _reject_unknown(value, ("start", "stop", "step"), path)
        try:
            start, stop, step = value["start"], value["stop"], value["step"]
        except KeyError as exc:
            raise ConfigError(f"range needs start, stop and step (missing {exc.args[0]})", path) from None
        start = _coerce_float(start, f"{path}.start", 0.0, strict=True)
        stop = _coerce_float(stop, f"{path}.stop")
        step = _coerce_float(step, f"{path}.step", 0.0, strict=True)
        count = int(round((stop - start) / step)) + 1 if stop >= start else 0
        grid = [round(start + k * step, 10) for k in range(count)]
    elif isinstance(value, list):
        grid = [_coerce_float(v, f"{path}[{i}]", 0.0, strict=True) for i, v in enumerate(value)]
    else:
        raise ConfigError("expected a list of numbers or a {start, stop, step} range", path)
    if not grid:
        raise ConfigError("grid is empty", path)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("grid must be strictly ascending", path)
    return grid


def _coerce_positions(value: Any, path: str) -> list[list[float]]:
    if not isinstance(value, list) or not value:
        raise ConfigError("positions must be a non-empty list of [x, y] pairs", path)
    out = []
    for i, p in enumerate(value):
        if not isinstance(p, (list, tuple)) or len(p) != 2:
            raise ConfigError(f"expected [x, y], got {p!r}", f"{path}[{i}]")
        out.append([_coerce_float(p[0], f"{path}[{i}][0]"), _coerce_float(p[1], f"{path}[{i}][1]")])
    return out


def parse_generator_spec(text: str, path: str = "configuration") -> Dict[str, Any]:
    """'chain n=6 a=0.3' -> {'generator': 'chain', 'n': 6, 'a': 0.3}."""
    tokens = str(text).split()
    if not tokens:
        raise ConfigError("empty generator spec", path)
    spec: Dict[str, Any] = {"generator": tokens[0]}
    for tok in tokens[1:]:
        key, sep, val = tok.partition("=")
        if not sep or not key or not val:
            raise ConfigError(f"expected key=value, got {tok!r}", path)
        spec[key] = val
    return spec


def _coerce_configuration(value: Any, path: str = "configuration") -> Optional[Dict[str, Any]]:
    if value is None:
        return None
    if isinstance(value, str):
        value = parse_generator_spec(value, path)
    if isinstance(value, list):
        return {"positions": _coerce_positions(value, path)}
    if not isinstance(value, dict):
        raise ConfigError("expected positions, a generator mapping or a generator string", path)
    if "positions" in value:
        _reject_unknown(value, ("positions",), path)
        return {"positions": _coerce_positions(value["positions"], f"{path}.positions")}
    name = _coerce_choice(value.get("generator", ""), tuple(GENERATORS), f"{path}.generator")
    params = GENERATORS[name]
    _reject_unknown(value, ("generator",) + params, path)
    out: Dict[str, Any] = {"generator": name}
    for p in params:
        if p not in value:
            raise ConfigError(f"generator '{name}' needs '{p}'", f"{path}.{p}")
        if p in _INT_PARAMS:
            out[p] = _coerce_int(value[p], f"{path}.{p}", 1)
        else:
            out[p] = _coerce_float(value[p], f"{path}.{p}", 0.0, strict=True)
    return out


def build_configuration(spec: Dict[str, Any]) -> EmitterConfiguration:
    if "positions" in spec:
        return EmitterConfiguration.from_list(spec["positions"])
    name = spec["generator"]
    try:
        if name == "chain":
            return regular_chain(spec["n"], spec["a"])
        if name == "triangle":
            return triangular_fragment(spec["n"], spec["a"])
        if name == "rectangle":
            return rectangular_fragment(spec["rows"], spec["cols"], spec["a"])
        return modulated_chain(ModulatedChainParams(spec["n"], spec["r_min"], spec["r_max"]))
    except ValueError as exc:
        raise ConfigError(str(exc), "configuration") from None


def _section(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError("expected a section (mapping)", name)
    _reject_unknown(value, tuple(DEFAULT_RUN_CONFIG[name]), name)
    return value


def _merge(cfg: Dict[str, Any], name: str, raw: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(cfg[name])
    out.update(_section(raw, name))
    return out


def coerce_run_config(raw: Any) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    _reject_unknown(raw, tuple(DEFAULT_RUN_CONFIG), "")
    cfg = _defaults()

    version = raw.get("schema_version", SCHEMA_VERSION)
    if _coerce_int(version, "schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})", "schema_version")
    seed = _coerce_int(raw.get("seed", cfg["seed"]), "seed", 0)
    if seed >= SEED_MODULUS:
        raise ConfigError("seed must fit in an unsigned 64-bit integer", "seed")
    cfg["seed"] = seed
    cfg["jobs"] = _coerce_optional(raw.get("jobs"), _coerce_int, "jobs", minimum=1)
    cfg["polarization"] = _coerce_polarization(raw.get("polarization", cfg["polarization"]), "polarization")
    cfg["configuration"] = _coerce_configuration(raw.get("configuration"))

    pr = _merge(cfg, "problem", raw)
    cfg["problem"] = {
        "n": _coerce_int(pr["n"], "problem.n", 2),
        "r_min": _coerce_float(pr["r_min"], "problem.r_min", 0.0, strict=True),
        "confinement_radius": _coerce_optional(pr["confinement_radius"], _coerce_float, "problem.confinement_radius", minimum=0.0, strict=True),
        "layout": _coerce_choice(pr["layout"], LAYOUTS, "problem.layout"),
    }

    de = _merge(cfg, "de", raw)
    f_range = de["f_range"]
    if not isinstance(f_range, list) or len(f_range) != 2:
        raise ConfigError("expected [low, high]", "de.f_range")
    cfg["de"] = {
        "population_size": _coerce_optional(de["population_size"], _coerce_int, "de.population_size", minimum=4),
        "f_range": [_coerce_float(f_range[0], "de.f_range[0]", 0.0, strict=True), _coerce_float(f_range[1], "de.f_range[1]", 0.0, strict=True)],
        "crossover_rate": _coerce_float(de["crossover_rate"], "de.crossover_rate", 0.0, strict=True),
        "max_generations": _coerce_int(de["max_generations"], "de.max_generations", 0),
        "stop_rel_dispersion": _coerce_float(de["stop_rel_dispersion"], "de.stop_rel_dispersion", 0.0),
        "stop_spread": _coerce_float(de["stop_spread"], "de.stop_spread", 0.0),
        "restarts": _coerce_int(de["restarts"], "de.restarts", 1),
        "crossover_base": _coerce_choice(de["crossover_base"], CROSSOVER_BASES, "de.crossover_base"),
    }
    if cfg["de"]["f_range"][0] > cfg["de"]["f_range"][1]:
        raise ConfigError("low must not exceed high", "de.f_range")
    if cfg["de"]["crossover_rate"] > 1.0:
        raise ConfigError("must lie in (0, 1]", "de.crossover_rate")

    sw = _merge(cfg, "sweep", raw)
    pols = sw["polarizations"]
    cfg["sweep"] = {
        "n": _coerce_int(sw["n"], "sweep.n", 2),
        "n_list": _coerce_optional(sw["n_list"], _coerce_int_list, "sweep.n_list", minimum=2),
        "polarizations": None if pols is None else [_coerce_polarization(p, f"sweep.polarizations[{i}]") for i, p in enumerate(pols)],
        "r_min_grid": _coerce_grid(sw["r_min_grid"], "sweep.r_min_grid"),
        "confinement_radius": _coerce_float(sw["confinement_radius"], "sweep.confinement_radius", 0.0, strict=True),
        "baselines": _coerce_bool(sw["baselines"], "sweep.baselines"),
    }

    sc = _merge(cfg, "scaling", raw)
    n_list = _coerce_int_list(sc["n_list"], "scaling.n_list", 2)
    if len(set(n_list)) < 4:
        raise ConfigError("needs at least 4 distinct sizes", "scaling.n_list")
    if max(n_list) > MAX_SCALING_N:
        raise ConfigError(f"sizes are capped at {MAX_SCALING_N}", "scaling.n_list")
    families = sc["families"]
    if not isinstance(families, list) or not families:
        raise ConfigError("expected a non-empty list", "scaling.families")
    cfg["scaling"] = {
        "n_list": n_list,
        "r_min": _coerce_float(sc["r_min"], "scaling.r_min", 0.0, strict=True),
        "families": [_coerce_choice(f, ("periodic", "modulated", "restricted1d"), f"scaling.families[{i}]") for i, f in enumerate(families)],
        "synthetic": _coerce_synthetic(sc["synthetic"]),
    }

    cp = _merge(cfg, "compare1d", raw)
    cfg["compare1d"] = {
        "n": _coerce_int(cp["n"], "compare1d.n", 3),
        "r_min_grid": _coerce_grid(cp["r_min_grid"], "compare1d.r_min_grid"),
    }

    orc = _merge(cfg, "oracle", raw)
    cfg["oracle"] = {
        "radial_step": _coerce_float(orc["radial_step"], "oracle.radial_step", 0.0, strict=True),
        "angle_step": _coerce_float(orc["angle_step"], "oracle.angle_step", 0.0, strict=True),
        "r_max": _coerce_optional(orc["r_max"], _coerce_float, "oracle.r_max", minimum=0.0, strict=True),
    }

    out = _merge(cfg, "output", raw)
    cfg["output"] = {
        "dir": str(out["dir"]),
        "logs_quota_mb": _coerce_float(out["logs_quota_mb"], "output.logs_quota_mb", 0.0),
    }
    return cfg


def _coerce_synthetic(value: Any) -> Optional[Dict[str, Any]]:
    """Planted Gamma(N) model; replaces computation in the scaling command."""
    if value is None:
        return None
    if not isinstance(value, dict):
        raise ConfigError("expected a mapping {model, amplitude, exponent}", "scaling.synthetic")
    _reject_unknown(value, ("model", "amplitude", "exponent"), "scaling.synthetic")
    return {
        "model": _coerce_choice(value.get("model", "power_law"), SCALING_MODELS, "scaling.synthetic.model"),
        "amplitude": _coerce_float(value.get("amplitude", 1.0), "scaling.synthetic.amplitude", 0.0, strict=True),
        "exponent": _coerce_float(value.get("exponent", -3.0), "scaling.synthetic.exponent"),
    }


_TOML_POS = re.compile(r"line (\d+), column (\d+)")


def _read_raw(path: str) -> Any:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    if path.lower().endswith(".toml"):
        try:
            return tomllib.loads(data.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            m = _TOML_POS.search(str(exc))
            line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
            raise ConfigError(f"TOML parse error: {exc}", path, line, col) from None
    try:
        return json.loads(data.decode("utf-8-sig"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error: {exc.msg}", path, exc.lineno, exc.colno) from None


def load_run_config(path: Optional[str] = None) -> Dict[str, Any]:
    if path is None:
        return coerce_run_config({})
    if not os.path.exists(path):
        raise ConfigError("config file not found", path)
    return coerce_run_config(_read_raw(path))


def apply_overrides(cfg: Dict[str, Any], seed: Optional[int] = None, jobs: Optional[int] = None, out: Optional[str] = None) -> Dict[str, Any]:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        if not 0 <= seed < SEED_MODULUS:
            raise ConfigError("seed must fit in an unsigned 64-bit integer", "--seed")
        cfg["seed"] = int(seed)
    if jobs is not None:
        cfg["jobs"] = _coerce_int(jobs, "--jobs", 1)
    if out is not None:
        cfg["output"]["dir"] = str(out)
    return cfg


def de_settings(cfg: Dict[str, Any], restarts: Optional[int] = None) -> DeSettings:
    de = cfg["de"]
    try:
        return DeSettings(
            population_size=de["population_size"],
            f_range=tuple(de["f_range"]),
            crossover_rate=de["crossover_rate"],
            max_generations=de["max_generations"],
            stop_rel_dispersion=de["stop_rel_dispersion"],
            stop_spread=de["stop_spread"],
            restarts=restarts or de["restarts"],
            seed=cfg["seed"],
            crossover_base=de["crossover_base"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "de") from None


def problem_from(cfg: Dict[str, Any]) -> Problem:
    pr = cfg["problem"]
    try:
        c = Constraints.for_layout(pr["layout"], pr["n"], pr["r_min"], pr["confinement_radius"])
        return Problem(pr["n"], c, Polarization.parse(cfg["polarization"]), pr["layout"])
    except ValueError as exc:
        raise ConfigError(str(exc), "problem") from None
