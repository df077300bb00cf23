"""Configure and launch coupled runs and the benchmark experiment suites.

Configuration is a TOML document with sections [problem], [coupling],
[accel], [integrators], [grid], [transport], and [output]; unknown keys are
rejected by name.  Subcommands: ``run`` (one coupled simulation, in-process
or over TCP), ``table`` (average-iteration table over multi-rate setups and
window sizes), ``recovery`` (exact-recovery pass/fail matrix), and ``order``
(convergence-order study).  All CSV output uses full round-trip float
precision and is byte-stable across repeated runs.
"""

from __future__ import annotations

import argparse
import math
import socket
import sys
import time
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .accel import AccelConfig
from .errors import (
    ChannelClosed,
    ConfigError,
    MaxIterationsExceeded,
    NonPositive,
    WfcplError,
)
from .heat import HeatParticipant, ManufacturedSolution
from .orchestrator import (
    CouplingConfig,
    WindowReport,
    average_iterations,
    run_all_windows,
    run_simulation,
)
from .transport import (
    ParticipantEndpoint,
    ParticipantSession,
    ROLE_DIRICHLET,
    ROLE_NEUMANN,
    SocketChannel,
    serve_participant,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3

#: Exact-recovery thresholds (paper setup): coupling tolerance and the
#: L2-error bound below which the solution counts as exact.
RECOVERY_TOL = 1e-12
RECOVERY_THRESHOLD = 1e-12


@dataclass(frozen=True)
class ProblemConfig:
    g_kind: str = "tri"
    alpha: int = 1


@dataclass(frozen=True)
class CouplingSection:
    scheme: str = "wi"
    n_D: int = 1
    n_N: int = 1
    p: int = 1
    dt_window: float = 1.0
    t_end: float = 1.0
    tol_rel: float = 1e-5
    max_iterations: int = 100
    on_max_iterations: str = "abort"


@dataclass(frozen=True)
class AccelSection:
    scheme: str = "qn"
    omega: float = 0.5
    qr2_epsilon: float = 1e-3
    weighting: str = "residual-sum"
    residual_view: str = "auto"


@dataclass(frozen=True)
class IntegratorsSection:
    dirichlet: str = "ie"
    neumann: str = "ie"
    sdc_sweeps: int = 48


@dataclass(frozen=True)
class GridSection:
    h: float = 0.05


@dataclass(frozen=True)
class TransportSection:
    mode: str = "inprocess"
    address: str = "127.0.0.1"
    port: int = 7463


@dataclass(frozen=True)
class OutputSection:
    csv_path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    coupling: CouplingSection = field(default_factory=CouplingSection)
    accel: AccelSection = field(default_factory=AccelSection)
    integrators: IntegratorsSection = field(default_factory=IntegratorsSection)
    grid: GridSection = field(default_factory=GridSection)
    transport: TransportSection = field(default_factory=TransportSection)
    output: OutputSection = field(default_factory=OutputSection)


_SECTIONS = {
    "problem": ProblemConfig,
    "coupling": CouplingSection,
    "accel": AccelSection,
    "integrators": IntegratorsSection,
    "grid": GridSection,
    "transport": TransportSection,
    "output": OutputSection,
}

_CHOICES = {
    ("problem", "g_kind"): ("pol", "tri"),
    ("coupling", "scheme"): ("sc", "wi"),
    ("coupling", "on_max_iterations"): ("abort", "continue"),
    ("accel", "scheme"): ("full", "relaxation", "qn"),
    ("accel", "weighting"): ("none", "residual-sum"),
    ("accel", "residual_view"): ("auto", "all-substeps", "last-substep", "end-value"),
    ("integrators", "dirichlet"): ("ie", "tr", "sdc"),
    ("integrators", "neumann"): ("ie", "tr", "sdc"),
    ("transport", "mode"): ("inprocess", "tcp"),
}


def _coerce(section: str, key: str, value, target_type) -> object:
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is str and isinstance(value, str):
        lowered = value.lower()
        choices = _CHOICES.get((section, key))
        if choices and lowered not in choices:
            raise ConfigError(
                f"{section}.{key}: {value!r} not one of {sorted(choices)}"
            )
        return lowered if choices else value
    if not isinstance(value, target_type) or isinstance(value, bool) and target_type is not bool:
        raise ConfigError(
            f"{section}.{key}: expected {target_type.__name__}, got {value!r}"
        )
    return value


def config_from_dict(doc: dict) -> ExperimentConfig:
    sections = {}
    for name, value in doc.items():
        cls = _SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be a table")
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in value.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            target = cls.__dataclass_fields__[key].type
            target_type = {"str": str, "int": int, "float": float}.get(target, str)
            kwargs[key] = _coerce(name, key, raw, target_type)
        sections[name] = cls(**kwargs)
    return ExperimentConfig(**sections)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    cfg = config_from_dict(doc)
    validate_config(cfg)
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in sorted(_SECTIONS):
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in sorted(fields(section), key=lambda f: f.name):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply repeatable ``section.key=value`` overrides."""
    for item in overrides:
        head, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section_name, dot, key = head.strip().partition(".")
        if not dot:
            raise ConfigError(f"override key {head!r} must be section.key")
        cls = _SECTIONS.get(section_name)
        if cls is None:
            raise ConfigError(f"unknown config section {section_name!r}")
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        target = cls.__dataclass_fields__[key].type
        raw = raw.strip()
        try:
            if target == "int":
                value = int(raw)
            elif target == "float":
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        value = _coerce(section_name, key, value, {"str": str, "int": int, "float": float}[target])
        section = replace(getattr(cfg, section_name), **{key: value})
        cfg = replace(cfg, **{section_name: section})
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    """Check all numeric fields against the module invariants before any run."""
    try:
        resolved_accel(cfg)
        coupling_config(cfg)
        manufactured(cfg)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.grid.h > 0 or abs(round(1.0 / cfg.grid.h) - 1.0 / cfg.grid.h) > 1e-9:
        raise ConfigError(f"grid.h = {cfg.grid.h} must divide the unit square")
    if cfg.integrators.sdc_sweeps < 0:
        raise ConfigError("integrators.sdc_sweeps must be nonnegative")
    if not 0 < cfg.transport.port < 65536:
        raise ConfigError(f"transport.port = {cfg.transport.port} out of range")


def resolved_accel(cfg: ExperimentConfig) -> AccelConfig:
    view = cfg.accel.residual_view
    if view == "auto":
        view = "end-value" if cfg.coupling.scheme == "sc" else "all-substeps"
    return AccelConfig(cfg.accel.scheme, cfg.accel.omega, cfg.accel.qr2_epsilon,
                       cfg.accel.weighting, view)


def coupling_config(cfg: ExperimentConfig) -> CouplingConfig:
    c = cfg.coupling
    return CouplingConfig(c.scheme, c.n_D, c.n_N, c.p, c.dt_window, c.t_end,
                          c.tol_rel, c.max_iterations, resolved_accel(cfg),
                          c.on_max_iterations)


def manufactured(cfg: ExperimentConfig) -> ManufacturedSolution:
    return ManufacturedSolution(cfg.problem.g_kind, cfg.problem.alpha)


def build_participants(cfg: ExperimentConfig):
    msol = manufactured(cfg)
    d = HeatParticipant("dirichlet", cfg.coupling.n_D, cfg.integrators.dirichlet,
                        msol, cfg.grid.h, cfg.integrators.sdc_sweeps)
    n = HeatParticipant("neumann", cfg.coupling.n_N, cfg.integrators.neumann,
                        msol, cfg.grid.h, cfg.integrators.sdc_sweeps)
    return d, n


# -- experiment drivers ----------------------------------------------------


def window_csv_rows(reports: list[WindowReport], end_errors: list[float] | None):
    """CSV rows: one line per window with the full residual trajectory."""
    header = "window,iterations,converged,final_residual,l2_error_window_end,residual_history"
    rows = [header]
    for i, r in enumerate(reports):
        err = ""
        if end_errors is not None and i < len(end_errors):
            err = repr(end_errors[i])
        history = ";".join(repr(v) for v in r.residual_norms)
        rows.append(
            f"{r.window_index},{r.iterations},{int(r.converged)},"
            f"{repr(r.residual_norms[-1])},{err},{history}"
        )
    return rows


def combined_end_errors(d: HeatParticipant, n: HeatParticipant) -> list[float]:
    errors = []
    for d_errs, n_errs in zip(d.error_log, n.error_log):
        errors.append(math.hypot(d_errs[-1][1], n_errs[-1][1]))
    return errors


def run_single(cfg: ExperimentConfig):
    """One coupled in-process run; returns (reports, csv rows)."""
    d, n = build_participants(cfg)
    failed = None
    try:
        reports = run_simulation(d, n, coupling_config(cfg))
    except MaxIterationsExceeded as exc:
        reports = exc.reports
        failed = exc
    rows = window_csv_rows(reports, combined_end_errors(d, n))
    return reports, rows, failed


TABLE_VARIANTS = ("rel-WI", "QN-SC", "rQN-WI", "QN-WI")


def variant_config(cfg: ExperimentConfig, variant: str, n_d: int, n_n: int,
                   dt: float) -> ExperimentConfig:
    coupling = replace(cfg.coupling, n_D=n_d, n_N=n_n, dt_window=dt,
                       p=min(cfg.coupling.p, n_d, n_n))
    if variant == "rel-WI":
        accel = replace(cfg.accel, scheme="relaxation", residual_view="auto")
        coupling = replace(coupling, scheme="wi")
    elif variant == "QN-WI":
        accel = replace(cfg.accel, scheme="qn", residual_view="all-substeps")
        coupling = replace(coupling, scheme="wi")
    elif variant == "rQN-WI":
        accel = replace(cfg.accel, scheme="qn", residual_view="last-substep")
        coupling = replace(coupling, scheme="wi")
    elif variant == "QN-SC":
        accel = replace(cfg.accel, scheme="qn", residual_view="end-value")
        coupling = replace(coupling, scheme="sc")
    else:
        raise ConfigError(f"unknown table variant {variant!r}")
    return replace(cfg, coupling=coupling, accel=accel)


def run_iteration_table(cfg: ExperimentConfig, dts: list[float],
                        setups: list[tuple[int, int]],
                        variants=TABLE_VARIANTS):
    """Average coupling iterations per window for each (variant, setup, dt).

    Returns CSV rows labeled with the exact scheme/view/substep/degree tuple
    of every cell."""
    rows = ["variant,scheme,residual_view,n_D,n_N,p,dt_window,avg_iterations,all_converged"]
    results = {}
    for variant in variants:
        for n_d, n_n in setups:
            for dt in dts:
                vcfg = variant_config(cfg, variant, n_d, n_n, dt)
                ccfg = coupling_config(vcfg)
                d, n = build_participants(vcfg)
                reports = run_simulation(d, n, ccfg)
                avg = average_iterations(reports)
                results[(variant, n_d, n_n, dt)] = avg
                rows.append(
                    f"{variant},{ccfg.scheme},{ccfg.accel.residual_view},"
                    f"{n_d},{n_n},{ccfg.degree},{repr(dt)},{repr(avg)},"
                    f"{int(all(r.converged for r in reports))}"
                )
    return results, rows


def recovery_case_passes(cfg: ExperimentConfig) -> tuple[bool, float]:
    """Run one recovery cell; pass if the L2 error stays below 1e-12.

    Waveform runs check every substep of both sides; single-value runs check
    the end of each window (the only time at which data is exchanged)."""
    d, n = build_participants(cfg)
    reports = run_simulation(d, n, coupling_config(cfg))
    del reports
    worst = 0.0
    for part in (d, n):
        for window_errors in part.error_log:
            if cfg.coupling.scheme == "sc":
                worst = max(worst, window_errors[-1][1])
            else:
                worst = max(worst, max(e for _, e in window_errors))
    return worst < RECOVERY_THRESHOLD, worst


def run_recovery_matrix(cfg: ExperimentConfig, cases, multirate, dts):
    """Pass/fail grid over cases x multi-rate setups x window sizes.

    ``cases`` holds (alpha, integrator, p) triples; setups where p exceeds
    min(n_D, n_N) cannot build their interpolants and are skipped."""
    rows = ["alpha,integrator,p,scheme,n_D,n_N,dt_window,passed,worst_l2_error"]
    results = {}
    for alpha, integrator, p in cases:
        for n_d, n_n in multirate:
            if cfg.coupling.scheme == "wi" and p > min(n_d, n_n):
                continue
            for dt in dts:
                coupling = replace(cfg.coupling, n_D=n_d, n_N=n_n, p=p,
                                   dt_window=dt, tol_rel=RECOVERY_TOL)
                problem = replace(cfg.problem, g_kind="pol", alpha=alpha)
                integ = replace(cfg.integrators, dirichlet=integrator,
                                neumann=integrator)
                case_cfg = replace(cfg, coupling=coupling, problem=problem,
                                   integrators=integ)
                ok, worst = recovery_case_passes(case_cfg)
                results[(alpha, integrator, p, n_d, n_n, dt)] = (ok, worst)
                rows.append(
                    f"{alpha},{integrator},{p},{cfg.coupling.scheme},"
                    f"{n_d},{n_n},{repr(dt)},{int(ok)},{repr(worst)}"
                )
    return results, rows


def compute_observed_order(errors, dts) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    errors = np.asarray(errors, dtype=float)
    dts = np.asarray(dts, dtype=float)
    if errors.shape != dts.shape or errors.ndim != 1 or len(errors) < 2:
        raise NonPositive("need equally many errors and window sizes (>= 2)")
    if np.any(errors <= 0) or np.any(dts <= 0):
        raise NonPositive("errors and window sizes must be positive")
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    return float(slope)


def run_order_study(cfg: ExperimentConfig, dts: list[float]):
    """Final-time L2 errors per refinement level plus the observed order."""
    if len(dts) < 3:
        raise ConfigError("order study needs at least 3 refinement levels")
    errors = []
    for dt in dts:
        coupling = replace(cfg.coupling, dt_window=dt)
        level_cfg = replace(cfg, coupling=coupling)
        d, n = build_participants(level_cfg)
        run_simulation(d, n, coupling_config(level_cfg))
        errors.append(combined_end_errors(d, n)[-1])
    order = compute_observed_order(errors, dts)
    rows = ["dt_window,l2_error_at_t_end"]
    rows.extend(f"{repr(dt)},{repr(err)}" for dt, err in zip(dts, errors))
    rows.append(f"observed_order,{repr(order)}")
    return errors, order, rows


# -- TCP plumbing ----------------------------------------------------------


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ConfigError(f"expected host:port, got {text!r}")
    return host, int(port)


def run_orchestrator_tcp(cfg: ExperimentConfig, listen: str):
    host, port = _parse_hostport(listen)
    ccfg = coupling_config(cfg)
    m = round(1.0 / cfg.grid.h) + 1
    entries = ccfg.handshake_entries(m)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(2)
    sessions = {}
    try:
        while len(sessions) < 2:
            conn, _ = server.accept()
            session = ParticipantSession(SocketChannel(conn), entries)
            session.handshake()
            sessions[session.peer_role] = session
    finally:
        server.close()
    if set(sessions) != {ROLE_DIRICHLET, ROLE_NEUMANN}:
        raise ChannelClosed("need exactly one dirichlet and one neumann participant")
    failed = None
    try:
        reports = run_all_windows(sessions[ROLE_DIRICHLET], sessions[ROLE_NEUMANN], ccfg)
    except MaxIterationsExceeded as exc:
        reports = exc.reports
        failed = exc
    return reports, window_csv_rows(reports, None), failed


def run_participant_tcp(cfg: ExperimentConfig, connect: str, role_name: str):
    host, port = _parse_hostport(connect)
    ccfg = coupling_config(cfg)
    d, n = build_participants(cfg)
    if role_name == "dirichlet":
        participant, role = d, ROLE_DIRICHLET
    elif role_name == "neumann":
        participant, role = n, ROLE_NEUMANN
    else:
        raise ConfigError(f"role must be dirichlet or neumann, got {role_name!r}")
    m = participant.interface_size()
    endpoint = ParticipantEndpoint(participant, role, ccfg.handshake_entries(m),
                                   ccfg.scheme, ccfg.degree, ccfg.window_of)
    sock = None
    for attempt in range(100):
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            break
        except OSError:
            if attempt == 99:
                raise
            time.sleep(0.1)
    serve_participant(sock, endpoint)
    return participant


# -- command line ----------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config, "rb") as fh:
            cfg = parse_config(fh.read().decode("utf-8"))
    else:
        cfg = ExperimentConfig()
    cfg = apply_overrides(cfg, args.override or [])
    validate_config(cfg)
    return cfg


def _write_rows(rows: list[str], path: str | None) -> None:
    text = "\n".join(rows) + "\n"
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _pair_list(text: str) -> list[tuple[int, int]]:
    pairs = []
    for tok in text.split(";"):
        tok = tok.strip()
        if not tok:
            continue
        a, _, b = tok.partition(",")
        pairs.append((int(a), int(b)))
    return pairs


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--out", help="CSV output path (default: stdout)")

    parser = argparse.ArgumentParser(prog="wfcpl",
                                     description="partitioned waveform-coupling benchmark driver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="run one coupled simulation")
    p_run.add_argument("--listen", metavar="HOST:PORT",
                       help="tcp mode: act as orchestrator, await two participants")
    p_run.add_argument("--connect", metavar="HOST:PORT",
                       help="tcp mode: act as a participant, connect to the orchestrator")
    p_run.add_argument("--role", choices=("dirichlet", "neumann"),
                       help="participant role in tcp mode")

    p_table = sub.add_parser("table", parents=[common], help="average-iterations table")
    p_table.add_argument("--dts", default="5.0,2.0,1.0,0.5,0.2,0.1",
                         help="comma-separated window sizes")
    p_table.add_argument("--setups", default="1,1;1,3;1,5;3,1;3,3;3,5;5,1;5,3;5,5",
                         help="semicolon-separated n_D,n_N pairs")

    p_rec = sub.add_parser("recovery", parents=[common], help="exact-recovery matrix")
    p_rec.add_argument("--cases", default="1,ie,1;2,tr,2;3,sdc,3",
                       help="semicolon-separated alpha,integrator,p triples")
    p_rec.add_argument("--setups", default="1,1;1,2;1,3;1,5;2,1;2,2;2,3;2,5;"
                                           "3,1;3,2;3,3;3,5;5,1;5,2;5,3;5,5")
    p_rec.add_argument("--dts", default="0.0125,0.025,0.05,0.1,0.2,0.5,1.0")

    p_ord = sub.add_parser("order", parents=[common], help="convergence-order study")
    p_ord.add_argument("--dts", default="0.25,0.125,0.0625,0.03125,0.015625")

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            if args.connect:
                if not args.role:
                    print("config error: --connect requires --role", file=sys.stderr)
                    return EXIT_CONFIG
                run_participant_tcp(cfg, args.connect, args.role)
                return EXIT_OK
            if args.listen:
                reports, rows, failed = run_orchestrator_tcp(cfg, args.listen)
            else:
                reports, rows, failed = run_single(cfg)
            _write_rows(rows, args.out or cfg.output.csv_path or None)
            if failed is not None:
                print(f"not converged: {failed}", file=sys.stderr)
                return EXIT_NOT_CONVERGED
        elif args.command == "table":
            _, rows = run_iteration_table(cfg, _float_list(args.dts),
                                          _pair_list(args.setups))
            _write_rows(rows, args.out or cfg.output.csv_path or None)
        elif args.command == "recovery":
            cases = []
            for tok in args.cases.split(";"):
                alpha, integ, p = tok.split(",")
                cases.append((int(alpha), integ.strip(), int(p)))
            _, rows = run_recovery_matrix(cfg, cases, _pair_list(args.setups),
                                          _float_list(args.dts))
            _write_rows(rows, args.out or cfg.output.csv_path or None)
        elif args.command == "order":
            _, _, rows = run_order_study(cfg, _float_list(args.dts))
            _write_rows(rows, args.out or cfg.output.csv_path or None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MaxIterationsExceeded as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except WfcplError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
