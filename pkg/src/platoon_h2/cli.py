"""Command-line front end: design, analyze, sweep and simulate formations.

Every run resolves to a :class:`RunConfig` (built-in defaults, then an
optional JSON config file, then explicit flags) and produces a
:class:`ResultEnvelope` written as CSV or JSON.  CSV outputs start with a
``#`` comment line carrying the tool version and the resolved config.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import enum
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import PlatoonError, SpecError
from .homotopy import DirectionMode, HomotopySettings, homotopy_continue
from .lyapunov import PerformanceReport, performance
from .model import FormationSpec, Model, StateWeight, StructuredGain, assemble
from .scaling import (
    ClosedFormUnavailable,
    ControllerFamily,
    FamilyKind,
    FitModel,
    PenaltyRule,
    closed_form_performance,
    fit_scaling,
    simulate_variance,
    sweep,
)
from .symmetric import GradientSettings, gradient_descend, analytic_symmetric_no_follower

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class Command(str, enum.Enum):
    DESIGN_SYMMETRIC = "design-symmetric"
    DESIGN_HOMOTOPY = "design-homotopy"
    ANALYZE = "analyze"
    SWEEP = "sweep"
    SIMULATE = "simulate"


class OutputFormat(str, enum.Enum):
    CSV = "csv"
    JSON = "json"


class WeightChoice(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


class ConfigError(SpecError):
    pass


# ---------------------------------------------------------------------------
# option table


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false"):
        return v.lower() == "true"
    raise ValueError(f"expected a boolean, got {v!r}")


def _int(v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _opt_float(v):
    return None if v is None else _float(v)


def _opt_str(v):
    return None if v is None else str(v)


def _penalty(v):
    return None if v is None else str(PenaltyRule.parse(v) if isinstance(v, str) else v)


def parse_grid(text) -> List[int]:
    """``a:b:s`` (inclusive) or a comma list."""
    if isinstance(text, (list, tuple)):
        grid = [_int(v) for v in text]
    elif ":" in str(text):
        parts = str(text).split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {text!r} must look like start:stop:step")
        a, b, s = (int(p) for p in parts)
        if s < 1 or b < a:
            raise ValueError(f"grid {text!r} is empty")
        grid = list(range(a, b + 1, s))
    else:
        grid = [int(p) for p in str(text).split(",") if p.strip()]
    if not grid or min(grid) < 1:
        raise ValueError("grid entries must be >= 1")
    return grid


def _choice(enum_cls):
    def conv(v):
        return enum_cls(v).value

    return conv


ALL = frozenset(Command)
SINGLE_N = ALL - {Command.SWEEP}
FAMILY_CMDS = frozenset({Command.ANALYZE, Command.SWEEP, Command.SIMULATE})


@dataclass(frozen=True)
class Option:
    name: str
    convert: Callable
    default: Any
    commands: frozenset
    help: str


OPTIONS = [
    Option("n", lambda v: None if v is None else _int(v), None, SINGLE_N, "number of vehicles N"),
    Option("model", _choice(Model), "single", ALL, "vehicle model"),
    Option("follower", _bool, True, ALL, "fictitious follower present"),
    Option("r", _opt_float, None, ALL, "control penalty (default 1)"),
    Option("penalty", _penalty, None, ALL, "penalty rule constant:v, linear:c or sqrt:c"),
    Option("weight", _choice(WeightChoice), "global", frozenset({Command.DESIGN_SYMMETRIC, Command.DESIGN_HOMOTOPY}),
           "state weight Q_d"),
    Option("seed", _int, 0, ALL, "random seed"),
    Option("grad_tol", _opt_float, None, frozenset({Command.DESIGN_SYMMETRIC, Command.DESIGN_HOMOTOPY}),
           "gradient-norm stopping tolerance"),
    Option("max_iters", _int, 50000, frozenset({Command.DESIGN_SYMMETRIC}), "gradient descent iteration cap"),
    Option("alpha", _float, 1.0, ALL - {Command.DESIGN_SYMMETRIC}, "position gain alpha"),
    Option("beta", _opt_float, None, ALL - {Command.DESIGN_SYMMETRIC}, "velocity gain beta"),
    Option("eps_steps", _int, 20, frozenset({Command.DESIGN_HOMOTOPY}), "number of epsilon steps"),
    Option("eps_min", _float, 1e-4, frozenset({Command.DESIGN_HOMOTOPY}), "first epsilon"),
    Option("direction", _choice(DirectionMode), "full_newton", frozenset({Command.DESIGN_HOMOTOPY}),
           "Newton direction"),
    Option("family", _opt_str, None, FAMILY_CMDS, "controller family"),
    Option("gain", _opt_str, None, frozenset({Command.ANALYZE, Command.SIMULATE}), "gain profile CSV"),
    Option("n_grid", parse_grid, "10:100:10", frozenset({Command.SWEEP}), "formation sizes a:b:s or list"),
    Option("horizon", _float, 200.0, frozenset({Command.SIMULATE}), "simulated time"),
    Option("dt", _opt_float, None, frozenset({Command.SIMULATE}), "integration step"),
    Option("paths", _int, 32, frozenset({Command.SIMULATE}), "number of sample paths"),
]
OPTION_BY_NAME = {o.name: o for o in OPTIONS}
GENERAL_KEYS = ("out", "format")


@dataclass(frozen=True)
class RunConfig:
    command: Command
    spec: FormationSpec
    options: Dict[str, Any] = field(default_factory=dict)
    output_path: Optional[str] = None
    format: OutputFormat = OutputFormat.CSV

    def to_dict(self) -> Dict[str, Any]:
        d = {"command": self.command.value}
        d.update(self.options)
        d["out"] = self.output_path
        d["format"] = self.format.value
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        if "command" not in data:
            raise ConfigError("config is missing 'command'")
        command = data.pop("command")
        return resolve(command, {}, data)


def _check_keys(command: Command, values: Dict[str, Any], source: str):
    for key in values:
        if key in GENERAL_KEYS:
            continue
        opt = OPTION_BY_NAME.get(key)
        if opt is None:
            raise ConfigError(f"unknown key {key!r} in {source}")
        if command not in opt.commands:
            raise ConfigError(f"key {key!r} does not apply to {command.value} ({source})")


def resolve(command, file_values: Dict[str, Any], flag_values: Dict[str, Any]) -> RunConfig:
    """Merge defaults, config-file values and flags into a validated config."""
    try:
        command = Command(command)
    except ValueError:
        raise ConfigError(f"unknown command {command!r}") from None
    _check_keys(command, file_values, "config file")
    _check_keys(command, flag_values, "flags")
    merged = {o.name: o.default for o in OPTIONS if command in o.commands}
    merged.update(file_values)
    merged.update(flag_values)
    out = merged.pop("out", None)
    fmt = merged.pop("format", "csv")
    opts = {}
    for key, value in merged.items():
        try:
            opts[key] = OPTION_BY_NAME[key].convert(value)
        except (ValueError, TypeError, SpecError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
    try:
        fmt = OutputFormat(fmt)
    except ValueError:
        raise ConfigError(f"format must be csv or json, got {fmt!r}") from None
    if opts["r"] is not None and opts["penalty"] is not None:
        raise ConfigError("give either --r or --penalty, not both")
    if command is Command.SWEEP:
        if opts["r"] is not None:
            opts["penalty"], opts["r"] = str(PenaltyRule("constant", opts["r"])), None
        if opts["penalty"] is None:
            opts["penalty"] = str(PenaltyRule())
        n = opts["n_grid"][0]
    else:
        if opts.get("gain"):
            profile_n = read_gain_csv(opts["gain"]).n
            if opts["n"] is not None and opts["n"] != profile_n:
                raise ConfigError(f"n={opts['n']} disagrees with gain profile length {profile_n}")
            opts["n"] = profile_n
        n = opts["n"]
        if n is None:
            raise ConfigError(f"{command.value} requires --n")
        if n < 1:
            raise ConfigError(f"n must be >= 1, got {n}")
    if command in FAMILY_CMDS:
        fam, gain = opts.get("family"), opts.get("gain")
        if command is Command.SWEEP and fam is None:
            raise ConfigError("sweep requires --family")
        if command is not Command.SWEEP and (fam is None) == (gain is None):
            raise ConfigError(f"{command.value} needs exactly one of --family or --gain")
        if fam is not None:
            try:
                opts["family"] = FamilyKind(fam).value
            except ValueError:
                raise ConfigError(f"unknown family {fam!r}") from None
    if command is Command.DESIGN_SYMMETRIC and opts["model"] != "single":
        raise ConfigError("design-symmetric supports the single-integrator model only")
    if command is Command.SIMULATE and opts["paths"] < 2:
        raise ConfigError("paths must be >= 2")
    if command is Command.DESIGN_HOMOTOPY and not 0 < opts["eps_min"] < 1:
        raise ConfigError("eps_min must lie in (0, 1)")
    try:
        spec = FormationSpec(n, opts["model"], opts["follower"], _penalty_r(opts, n))
    except SpecError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(command, spec, opts, out, fmt)


def _penalty_r(opts, n) -> float:
    if opts["penalty"] is not None:
        return PenaltyRule.parse(opts["penalty"]).r(n)
    return 1.0 if opts["r"] is None else opts["r"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="platoon-h2", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in Command:
        p = sub.add_parser(command.value)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file; flags override it")
        p.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
        p.add_argument("--format", default=argparse.SUPPRESS, choices=[f.value for f in OutputFormat])
        for opt in OPTIONS:
            if command not in opt.commands:
                continue
            flag = "--" + opt.name.replace("_", "-")
            if opt.convert is _bool:
                p.add_argument(flag, dest=opt.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=opt.help)
            else:
                p.add_argument(flag, dest=opt.name, default=argparse.SUPPRESS, help=opt.help)
    return parser


def parse_config(argv: Sequence[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(list(argv)))
    command = ns.pop("command")
    file_values = {}
    cfg_path = ns.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path) as fh:
                file_values = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {cfg_path} is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        file_command = file_values.pop("command", command)
        if file_command != command:
            raise ConfigError(f"config file is for {file_command!r}, not {command!r}")
    return resolve(command, file_values, ns)


# ---------------------------------------------------------------------------
# gain profiles


def read_gain_csv(path: str) -> StructuredGain:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read gain profile {path}: {exc.strerror}") from None
    rows = list(csv.DictReader(lines))
    if not rows:
        raise ConfigError(f"gain profile {path} has no rows")
    cols = set(rows[0])
    if not {"n", "forward", "backward"} <= cols:
        raise ConfigError(f"gain profile {path} needs columns n,forward,backward[,velocity]")
    rows.sort(key=lambda r: int(r["n"]))
    if [int(r["n"]) for r in rows] != list(range(1, len(rows) + 1)):
        raise ConfigError(f"gain profile {path} must list n = 1..N")
    try:
        f = [float(r["forward"]) for r in rows]
        b = [float(r["backward"]) for r in rows]
        v = [float(r["velocity"]) for r in rows] if "velocity" in cols else None
    except ValueError as exc:
        raise ConfigError(f"gain profile {path}: {exc}") from None
    return StructuredGain(f, b, v)


def gain_rows(gain: StructuredGain) -> List[Dict[str, Any]]:
    rows = []
    for i in range(gain.n):
        row = {"n": i + 1, "forward": float(gain.forward[i]), "backward": float(gain.backward[i])}
        if gain.velocity is not None:
            row["velocity"] = float(gain.velocity[i])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands


def _weight(cfg: RunConfig) -> StateWeight:
    if cfg.options.get("weight") == "local":
        return StateWeight.local(cfg.spec)
    return StateWeight.global_(cfg.spec)


def _family(cfg: RunConfig) -> ControllerFamily:
    o = cfg.options
    penalty = PenaltyRule.parse(o["penalty"]) if o["penalty"] else PenaltyRule("constant", cfg.spec.r)
    return ControllerFamily(o["family"], o["alpha"], o["beta"], penalty)


def _homotopy_settings(cfg: RunConfig, family: Optional[ControllerFamily] = None) -> HomotopySettings:
    o = cfg.options
    beta = o.get("beta")
    if beta is None:
        beta = 3.0
    kw = dict(alpha=o.get("alpha", 1.0), beta=beta)
    if cfg.command is Command.DESIGN_HOMOTOPY:
        kw.update(
            epsilon_schedule=np.logspace(math.log10(o["eps_min"]), 0.0, o["eps_steps"]),
            grad_tol=o["grad_tol"],
            direction_mode=o["direction"],
        )
    return HomotopySettings(**kw)


def _report_dict(rep: Optional[PerformanceReport]):
    return None if rep is None else rep.as_dict()


def _gain_for(cfg: RunConfig):
    if cfg.options.get("gain"):
        return cfg.spec, read_gain_csv(cfg.options["gain"]), None
    family = _family(cfg)
    spec = family.spec_for(cfg.spec, cfg.spec.n)
    return spec, family.design(spec, _homotopy_settings(cfg, family)), family


def run_design_symmetric(cfg: RunConfig) -> Dict[str, Any]:
    spec = cfg.spec
    weight = _weight(cfg)
    if weight.kind.value != "global":
        raise ConfigError("design-symmetric minimizes the Q = I objective only")
    settings = GradientSettings(
        grad_tol=cfg.options["grad_tol"] or GradientSettings.grad_tol, max_iters=cfg.options["max_iters"]
    )
    if spec.has_follower:
        rec = gradient_descend(spec, settings, full_output=True)
        k, iters, gnorm = rec.k, rec.iterations, rec.grad_norm
    else:
        k, iters, gnorm = analytic_symmetric_no_follower(spec), 0, 0.0
    gain = k.to_structured_gain(spec)
    rep = performance(assemble(spec, gain), spec)
    return {
        "k": [float(v) for v in k.k],
        "iterations": iters,
        "grad_norm": float(gnorm),
        "performance": rep.as_dict(),
        "gain": gain_rows(gain),
    }


def run_design_homotopy(cfg: RunConfig) -> Dict[str, Any]:
    spec = cfg.spec
    trace = homotopy_continue(spec, _weight(cfg), _homotopy_settings(cfg))
    gain = trace.final.gain
    rep = performance(assemble(spec, gain), spec, _weight(cfg))
    return {
        "trace": [
            {"epsilon": rec.epsilon, "objective_j": rec.objective_j, "grad_norm": rec.grad_norm,
             "newton_iters": rec.newton_iters}
            for rec in trace.records
        ],
        "performance": rep.as_dict(),
        "gain": gain_rows(gain),
    }


def run_analyze(cfg: RunConfig) -> Dict[str, Any]:
    spec, gain, family = _gain_for(cfg)
    if spec.is_double != (gain.velocity is not None):
        raise ConfigError("gain profile does not match the selected model")
    rep = performance(assemble(spec, gain), spec)
    closed = None
    if family is not None:
        try:
            closed = closed_form_performance(family, spec)
        except ClosedFormUnavailable:
            pass
    return {
        "family": family.name if family else "custom",
        "r": spec.r,
        "performance": rep.as_dict(),
        "closed_form": _report_dict(closed),
        "gain": gain_rows(gain),
    }


def run_sweep(cfg: RunConfig) -> Dict[str, Any]:
    family = _family(cfg)
    template = cfg.spec
    result = sweep(family, cfg.options["n_grid"], template, _homotopy_settings(cfg, family))
    rows = [
        {
            "family": family.name,
            "N": row.n,
            "r": row.r,
            "pi_g": row.pi_g,
            "pi_l": row.pi_l,
            "pi_ctr": row.pi_ctr,
            "objective_j": row.objective_j,
            "closed_form": _report_dict(row.closed_form),
            "error": row.error,
        }
        for row in result.rows
    ]
    fits = {}
    for measure in ("g", "l", "ctr"):
        try:
            fit = fit_scaling(result, measure, FitModel.FREE_EXPONENT)
            fits[measure] = {"a": fit.a, "exponent": fit.exponent, "rms_residual": fit.rms_residual}
        except PlatoonError as exc:
            fits[measure] = {"error": str(exc)}
    return {"rows": rows, "fits": fits}


def run_simulate(cfg: RunConfig) -> Dict[str, Any]:
    spec, gain, _ = _gain_for(cfg)
    sys_ = assemble(spec, gain)
    o = cfg.options
    est = simulate_variance(sys_, spec, o["horizon"], o["dt"], o["seed"], o["paths"])
    rep = performance(sys_, spec)
    return {
        "estimates": [
            {"quantity": q, "estimate": getattr(est, "pi_" + q), "std_error": getattr(est, "se_" + q),
             "lyapunov": getattr(rep, "pi_" + q)}
            for q in ("g", "l", "ctr")
        ],
        "dt": est.dt,
        "steps": est.steps,
        "paths": est.n_paths,
    }


RUNNERS = {
    Command.DESIGN_SYMMETRIC: run_design_symmetric,
    Command.DESIGN_HOMOTOPY: run_design_homotopy,
    Command.ANALYZE: run_analyze,
    Command.SWEEP: run_sweep,
    Command.SIMULATE: run_simulate,
}


# ---------------------------------------------------------------------------
# serialization


@dataclass(frozen=True)
class ResultEnvelope:
    tool_version: str
    config_echo: RunConfig
    payload: Dict[str, Any]
    timestamp: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool_version": self.tool_version,
            "config_echo": self.config_echo.to_dict(),
            "payload": self.payload,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResultEnvelope":
        return cls(data["tool_version"], RunConfig.from_dict(data["config_echo"]), data["payload"], data["timestamp"])


def timestamp() -> str:
    """UTC now, or ``SOURCE_DATE_EPOCH`` when set so reruns are byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return when.isoformat(timespec="seconds")


def fmt_float(v) -> str:
    if isinstance(v, bool) or not isinstance(v, (float, np.floating)):
        return str(v)
    return format(float(v), ".17g")


def _csv_table(payload: Dict[str, Any], command: Command):
    if command is Command.SWEEP:
        return ["family", "N", "r", "pi_g", "pi_l", "pi_ctr", "objective_j"], payload["rows"]
    if command is Command.SIMULATE:
        return ["quantity", "estimate", "std_error", "lyapunov"], payload["estimates"]
    if command is Command.ANALYZE:
        row = dict(payload["performance"], family=payload["family"], N=payload["performance"]["n_vehicles"],
                   r=payload["r"])
        return ["family", "N", "r", "pi_g", "pi_l", "pi_ctr", "objective_j"], [row]
    rows = payload["gain"]
    cols = ["n", "forward", "backward"] + (["velocity"] if rows and "velocity" in rows[0] else [])
    return cols, rows


def render(envelope: ResultEnvelope, fmt: OutputFormat) -> str:
    if fmt is OutputFormat.JSON:
        return json.dumps(envelope.to_dict(), indent=2, allow_nan=True) + "\n"
    cols, rows = _csv_table(envelope.payload, envelope.config_echo.command)
    buf = io.StringIO()
    header = {"tool_version": envelope.tool_version, "config": envelope.config_echo.to_dict()}
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([fmt_float(row[c]) for c in cols])
    return buf.getvalue()


def emit(envelope: ResultEnvelope, fmt: OutputFormat, path: Optional[str] = None, stream=None) -> int:
    text = render(envelope, fmt)
    if path is None:
        (stream or sys.stdout).write(text)
        return len(text.encode())
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    return len(text.encode())


def load_envelope(path: str) -> ResultEnvelope:
    with open(path) as fh:
        return ResultEnvelope.from_dict(json.load(fh))


def execute(cfg: RunConfig) -> ResultEnvelope:
    payload = RUNNERS[cfg.command](cfg)
    return ResultEnvelope(__version__, cfg, payload, timestamp())


def _error_record(exc: BaseException, code: int) -> str:
    return json.dumps({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}})


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("PLATOON_H2_LOG", "WARNING").upper())
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        emit(execute(cfg), cfg.format, cfg.output_path)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ConfigError, SpecError) as exc:
        return _fail(exc, EXIT_USAGE)
    except PlatoonError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except OSError as exc:
        return _fail(exc, EXIT_IO)


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(_error_record(exc, code) + "\n")
    return code

if __name__ == "__main__":
    sys.exit(main())
