#!/usr/bin/env python3
"""
Command-line runner for the difference delay equation toolkit.

USAGE:
    ddec check systems/scalar_pi.json
    ddec simulate systems/scalar_pi.json --T 4 --h 1e-3
    ddec synthesize systems/scalar_pi.json --T 7 --lambda 1e-9 --out results

Every subcommand reads a system file and writes CSV/JSON artifacts into the
output directory. Exit status: 0 on success (controllable up to the scanned
region for check), 2 when check finds the system uncontrollable, 1 on error
with diagnostic.json written.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from delay_system import DelaySystem, GridFunction, load_system, parse_real, system_to_dict
from errors import ConfigError, DdecError, GridError
from freq_analysis import (Outcome, check_controllability, default_rectangle, min_rank_margin_scan,
                           verdict_to_dict)
from fundamental import (DEFAULT_MAX_ATOMS, DEFAULT_MAX_MATRIX_ENTRIES, fundamental_solution,
                         fundamental_to_dict, renewal_defect)
from measure_algebra import build_QP, invert_Q, measure_to_dict, neumann_report_to_dict
from simulator import solve_ivp
from synthesis import curve_to_frame, residual_curve, synthesize_control, verify_control

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "fundamental", "invert-q", "check", "synthesize", "residual-curve")
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNCONTROLLABLE = 2
DEFAULT_CURVE_POINTS = 6
_SCAN_POINTS = 100


@dataclass
class RunConfig:
    """Fully resolved parameters of one invocation."""

    subcommand: str
    system_path: Path
    out: Path
    T: float
    h: float
    lam: Optional[float] = None
    q: float = 2.0
    re_min: float = -10.0
    re_max: Optional[float] = None
    im_max: Optional[float] = None
    rank_tol: float = 1e-8
    tol: Optional[float] = None
    window: Optional[float] = None
    t_list: List[float] = field(default_factory=list)
    initial: Optional[Path] = None
    control: Optional[Path] = None
    target: Optional[Path] = None
    max_atoms: int = DEFAULT_MAX_ATOMS
    max_entries: int = DEFAULT_MAX_MATRIX_ENTRIES
    threads: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = str(value) if isinstance(value, Path) else value
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddec", description="Difference delay equation toolkit")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("system", help="System description (JSON)")
    parser.add_argument("--config", help="Run file (JSON) with default values for the flags below")
    parser.add_argument("--T", type=parse_real, dest="T")
    parser.add_argument("--h", type=parse_real)
    parser.add_argument("--lambda", type=parse_real, dest="lam")
    parser.add_argument("--q", type=parse_real)
    parser.add_argument("--re-min", type=parse_real, dest="re_min")
    parser.add_argument("--re-max", type=parse_real, dest="re_max")
    parser.add_argument("--im-max", type=parse_real, dest="im_max")
    parser.add_argument("--rank-tol", type=parse_real, dest="rank_tol")
    parser.add_argument("--tol", type=parse_real)
    parser.add_argument("--window", type=parse_real)
    parser.add_argument("--t-list", dest="t_list", help="Comma-separated horizons for residual-curve")
    parser.add_argument("--initial", help="Initial segment CSV (t, x1..xd) for simulate")
    parser.add_argument("--control", help="Control CSV (t, u1..um) for simulate")
    parser.add_argument("--target", help="Target segment CSV (t, x1..xd) for synthesize")
    parser.add_argument("--max-atoms", type=int, dest="max_atoms")
    parser.add_argument("--max-entries", type=int, dest="max_entries")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="Output directory")
    return parser


_RUN_FILE_KEYS = {"T", "h", "lam", "lambda", "q", "re_min", "re_max", "im_max", "rank_tol", "tol",
                  "window", "t_list", "initial", "control", "target", "max_atoms", "max_entries",
                  "threads", "out"}
_REAL_KEYS = {"T", "h", "lam", "q", "re_min", "re_max", "im_max", "rank_tol", "tol", "window"}


def _read_run_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"run file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed run file {path.name}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("run file must be a JSON object")
    unknown = set(raw) - _RUN_FILE_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in run file: {sorted(unknown)}")
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    for key in _REAL_KEYS & set(raw):
        if raw[key] is not None:
            raw[key] = _real_setting(key, raw[key])
    return raw


def _real_setting(key: str, value: Any) -> float:
    try:
        return parse_real(value)
    except DdecError as e:
        raise ConfigError(f"invalid value for {key}: {e}")


def _env_settings(env: Mapping[str, str]) -> Dict[str, Any]:
    settings: Dict[str, Any] = {}
    try:
        if env.get("DDEC_THREADS"):
            settings["threads"] = int(env["DDEC_THREADS"])
        if env.get("DDEC_MAX_ATOMS"):
            settings["max_atoms"] = int(env["DDEC_MAX_ATOMS"])
        if env.get("DDEC_MAX_MATRIX_ENTRIES"):
            settings["max_entries"] = int(float(env["DDEC_MAX_MATRIX_ENTRIES"]))
    except ValueError as e:
        raise ConfigError(f"invalid DDEC_* environment value: {e}")
    settings["out"] = env.get("DDEC_OUTPUT_DIR") or "output"
    return settings


def _parse_t_list(value: Any) -> List[float]:
    if isinstance(value, str):
        parts = [part for part in value.split(",") if part.strip()]
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        raise ConfigError(f"invalid horizon list: {value!r}")
    return [_real_setting("t_list", part) for part in parts]


def _check_ranges(config: RunConfig) -> None:
    if not (math.isfinite(config.T) and config.T > 0):
        raise ConfigError(f"T must be positive, got {config.T}")
    if not config.h > 0:
        raise ConfigError(f"h must be positive, got {config.h}")
    if config.lam is not None and not config.lam > 0:
        raise ConfigError(f"lambda must be positive, got {config.lam}")
    if not config.q >= 1:
        raise ConfigError(f"q must be >= 1, got {config.q}")
    if not 0 < config.rank_tol < 1:
        raise ConfigError(f"rank_tol must lie in (0, 1), got {config.rank_tol}")
    if config.tol is not None and not config.tol > 0:
        raise ConfigError(f"tol must be positive, got {config.tol}")
    if config.window is not None and not config.window > 0:
        raise ConfigError(f"window must be positive, got {config.window}")
    if config.re_max is not None and config.re_max <= config.re_min:
        raise ConfigError(f"re_max must exceed re_min, got [{config.re_min}, {config.re_max}]")
    if config.im_max is not None and not config.im_max > 0:
        raise ConfigError(f"im_max must be positive, got {config.im_max}")
    if config.max_atoms < 1 or config.max_entries < 1:
        raise ConfigError("max_atoms and max_entries must be positive")
    if config.threads is not None and config.threads < 1:
        raise ConfigError(f"threads must be positive, got {config.threads}")
    if any(T <= 0 for T in config.t_list) or sorted(config.t_list) != config.t_list:
        raise ConfigError(f"t_list must be sorted positive horizons, got {config.t_list}")


def parse_config(argv: Sequence[str], env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Resolve a RunConfig from argv, the optional run file and the environment.

    Precedence: flag > run file > environment > built-in default. Defaults
    that depend on the system (T = 2 d L_N + L_1, h = 1e-3 L_1) are resolved
    after loading the system file.
    """
    env = os.environ if env is None else env
    args = _build_parser().parse_args(list(argv))
    values = _env_settings(env)
    if args.config:
        values.update(_read_run_file(Path(args.config)))
    for key, value in vars(args).items():
        if key not in ("subcommand", "system", "config") and value is not None:
            values[key] = value

    system = load_system(args.system)
    first = float(system.delays[0])
    values.setdefault("T", system.time_bound + first)
    values.setdefault("h", 1e-3 * first)
    if "t_list" in values:
        values["t_list"] = _parse_t_list(values["t_list"])
    elif args.subcommand == "residual-curve":
        values["t_list"] = np.linspace(system.max_delay, values["T"], DEFAULT_CURVE_POINTS).tolist()
    for key in ("out", "initial", "control", "target"):
        if values.get(key) is not None:
            values[key] = Path(values[key])
    try:
        config = RunConfig(subcommand=args.subcommand, system_path=Path(args.system), **values)
    except TypeError as e:
        raise ConfigError(f"invalid run configuration: {e}")
    _check_ranges(config)
    return config


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, complex):
        return {"re": to_jsonable(value.real), "im": to_jsonable(value.imag)}
    if isinstance(value, Path):
        return str(value)
    return value


def float_text(value: float) -> str:
    """A finite float with 17 significant digits, kept a JSON float."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite float {value!r} is not JSON")
    text = f"{value:.17g}"
    if text.lstrip("-").isdigit():
        text += ".0"
    return text


class FixedDigitsEncoder(json.JSONEncoder):
    """JSONEncoder that writes every float with float_text."""

    def iterencode(self, o: Any, _one_shot: bool = False):
        encoder = (json.encoder.encode_basestring_ascii if self.ensure_ascii
                   else json.encoder.encode_basestring)
        return json.encoder._make_iterencode(
            {} if self.check_circular else None, self.default, encoder, self.indent, float_text,
            self.key_separator, self.item_separator, self.sort_keys, self.skipkeys, _one_shot)(o, 0)


def write_json(data: Dict[str, Any], path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, cls=FixedDigitsEncoder, indent=2, sort_keys=False)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def load_grid_csv(path: Path, q: float = 2.0) -> GridFunction:
    """Read a uniformly sampled function from a CSV whose first column is t."""
    if not path.exists():
        raise FileNotFoundError(f"Grid file not found: {path}")
    frame = pd.read_csv(path)
    if frame.shape[0] < 2 or frame.shape[1] < 2:
        raise GridError(f"{path.name} needs a t column, one value column and two rows")
    try:
        times = frame.iloc[:, 0].to_numpy(dtype=float)
        values = frame.iloc[:, 1:].to_numpy(dtype=float)
    except ValueError as e:
        raise GridError(f"{path.name} holds non-numeric values: {e}")
    steps = np.diff(times)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(times[-1])):
        raise GridError(f"{path.name} is not sampled on a uniform increasing grid")
    h = (times[-1] - times[0]) / (times.size - 1)
    return GridFunction(times[0], h, values, q)


def _unit_segment(system: DelaySystem, h: float, q: float) -> GridFunction:
    return GridFunction.constant(np.ones(system.d), -system.max_delay, 0.0, h, q)


def _simulate(config: RunConfig, system: DelaySystem) -> int:
    phi = load_grid_csv(config.initial, config.q) if config.initial else _unit_segment(system, config.h, config.q)
    u = load_grid_csv(config.control, config.q) if config.control else None
    traj = solve_ivp(system, phi, u, config.T, config.h)
    traj.save_csv(config.out / "trajectory.csv")
    return EXIT_OK


def _fundamental(config: RunConfig, system: DelaySystem) -> int:
    fs = fundamental_solution(system, config.T, config.h, max_atoms=config.max_atoms)
    data = fundamental_to_dict(fs)
    data["renewal_defect"] = renewal_defect(system, fs)
    write_json(data, config.out / "fundamental.json")
    return EXIT_OK


def _invert_q(config: RunConfig, system: DelaySystem) -> int:
    window = 2.0 * system.max_delay if config.window is None else config.window
    tol = 1e-8 if config.tol is None else config.tol
    Q, _ = build_QP(system, config.h)
    Qinv, report = invert_Q(Q, window, tol)
    write_json({"inverse": measure_to_dict(Qinv), "report": neumann_report_to_dict(report)},
               config.out / "qinv.json")
    return EXIT_OK


def _check(config: RunConfig, system: DelaySystem) -> int:
    rectangle = default_rectangle(system, config.re_min, config.re_max, config.im_max)
    tol = 1e-10 if config.tol is None else config.tol
    verdict = check_controllability(system, rectangle, config.rank_tol, tol, config.threads)
    verdict.scan_margin, _ = min_rank_margin_scan(system, rectangle, _SCAN_POINTS)
    write_json(verdict_to_dict(verdict), config.out / "verdict.json")
    logger.info(verdict.message)
    if verdict.outcome == Outcome.CONTROLLABLE_UP_TO_REGION:
        return EXIT_OK
    return EXIT_UNCONTROLLABLE


def _target(config: RunConfig, system: DelaySystem) -> GridFunction:
    if config.target:
        return load_grid_csv(config.target, config.q)
    return _unit_segment(system, config.h, config.q)


def _synthesize(config: RunConfig, system: DelaySystem) -> int:
    psi = _target(config, system)
    result = synthesize_control(system, psi, config.T, config.h, config.lam, config.q,
                                threads=config.threads, max_entries=config.max_entries,
                                max_atoms=config.max_atoms)
    result.save_control_csv(config.out / "control.csv")
    verified = verify_control(system, result.control, psi, config.T, config.q)
    write_json({
        "residual": result.residual,
        "verified_residual": verified,
        "lambda": result.lam,
        "sigma_max": result.sigma_max,
        "condition": result.condition,
        "T": result.T,
        "h": result.h,
        "q": result.q,
        "time_bound": system.time_bound,
        "above_time_bound": result.T > system.time_bound,
        "config": config.to_dict(),
    }, config.out / "synthesis.json")
    return EXIT_OK


def _residual_curve(config: RunConfig, system: DelaySystem) -> int:
    psi = _target(config, system)
    curve = residual_curve(system, psi, config.t_list, config.h, config.lam, config.q,
                           threads=config.threads, max_entries=config.max_entries,
                           max_atoms=config.max_atoms)
    path = config.out / "residual_curve.csv"
    curve_to_frame(curve).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Residual curve written to {path}")
    return EXIT_OK


_HANDLERS = {
    "simulate": _simulate,
    "fundamental": _fundamental,
    "invert-q": _invert_q,
    "check": _check,
    "synthesize": _synthesize,
    "residual-curve": _residual_curve,
}


def execute(config: RunConfig) -> int:
    """Run one subcommand and return its exit status."""
    system = load_system(config.system_path)
    config.out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running {config.subcommand} on {config.system_path.name} (T={config.T:.6g}, h={config.h:.3g})")
    write_json({"config": config.to_dict(), "system": system_to_dict(system)}, config.out / "run.json")
    return _HANDLERS[config.subcommand](config, system)


def write_diagnostic(out: Path, code: str, message: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return write_json({"status": "error", "code": code, "message": message}, out / "diagnostic.json")


class DdecRunner:
    """Environment, logging and error reporting around parse_config and execute."""

    def __init__(self):
        load_dotenv()
        self.log_level = os.getenv("DDEC_LOG_LEVEL", "INFO").upper()
        self.output_dir = Path(os.getenv("DDEC_OUTPUT_DIR", "output"))
        logging.basicConfig(level=getattr(logging, self.log_level, logging.INFO),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        self.logger = logging.getLogger(__name__)

    def run(self, argv: Sequence[str]) -> int:
        out = self.output_dir
        try:
            config = parse_config(argv)
            out = config.out
            return execute(config)
        except DdecError as e:
            self.logger.error(f"{e.code}: {e}")
            write_diagnostic(out, e.code, str(e))
        except FileNotFoundError as e:
            self.logger.error(f"file not found: {e}")
            write_diagnostic(out, "file_not_found", str(e))
        except Exception as e:
            self.logger.exception(f"Unexpected error: {e}")
            write_diagnostic(out, "internal_error", str(e))
        return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Console entry point."""
    runner = DdecRunner()
    return runner.run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
