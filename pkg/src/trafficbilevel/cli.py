"""Command line runner for bilevel experiments.

Configuration is a flat text file of ``key = value`` lines with dotted
keys, ``#`` comments and blank lines.  Every key is optional and falls back
to the capacity-expansion protocol defaults; unknown keys are rejected.

Subcommands:

``run``       outer loop for every D in ``solver.D_list``; ``trace_D*.csv``,
              ``summary.csv`` and, with ``flags.record_errors``, ``inner_D*.csv``
``diagnose``  ``certificate.csv``, ``constants.csv`` and ``rates.csv``
``toy``       lower-level dynamics of the toy game: ``inner_D*.csv``,
              ``spectra.csv`` and ``toy_summary.csv``
``plot``      re-render figures from the CSVs already in an output directory

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .applications import NetworkDesign, toy_bilevel, toy_instance, toy_start
from .bilevel import BilevelConfig, Box, run_algorithm1
from .errors import DataError, DomainError, NumericalError
from .jacobian import build_MU, exact_jacobian
from .lower_solver import log_interior_floor, reference_solve
from .network import bundled_path, k_shortest_paths, load_tntp, rescale_flow_unit
from .plotting import FORMATS, render_report
from .routing_game import LowerProblem, RoutingGame

log = logging.getLogger("trafficbilevel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------------ config


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


# key in the file -> (attribute, parser)
_KEYS = {
    "problem": ("problem", _choice("network", "toy")),
    "data.network": ("network", str),
    "data.trips": ("trips", str),
    "data.expansion": ("expansion", str),
    "data.flow_unit": ("flow_unit", float),
    "paths.k": ("k_paths", int),
    "solver.eta": ("eta", float),
    "solver.alpha": ("alpha", float),
    "solver.beta": ("beta", float),
    "solver.K": ("K", int),
    "solver.D": ("D", int),
    "solver.D_list": ("D_list", _int_list),
    "upper.theta": ("theta", float),
    "flags.record_errors": ("record_errors", _bool),
    "flags.diagnostics": ("diagnostics", _bool),
    "flags.seed": ("seed", int),
    "toy.blocks": ("toy_blocks", int),
    "toy.block_size": ("toy_block_size", int),
    "toy.weight": ("toy_weight", float),
    "toy.spectra_every": ("spectra_every", int),
    "diag.horizon": ("horizon", int),
    "diag.samples": ("samples", int),
    "diag.lmi_max_dim": ("lmi_max_dim", int),
    "diag.transient_tol": ("transient_tol", float),
    "output.dir": ("out_dir", str),
    "output.figures": ("figures", _choice("none", *FORMATS)),
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "network"
    network: str = "pkg:SiouxFalls_net.tntp"
    trips: str = "pkg:SiouxFalls_trips.tntp"
    expansion: str = "pkg:SiouxFalls_expansion.csv"
    flow_unit: float = 1e5
    k_paths: int = 5
    eta: float = 0.01
    alpha: float = 0.5
    beta: float = 0.25
    K: int = 100
    D: int | None = None
    D_list: tuple[int, ...] = (40, 60, 80, 100, 120)
    theta: float = 0.001
    record_errors: bool = False
    diagnostics: bool = False
    seed: int = 0
    toy_blocks: int = 2
    toy_block_size: int = 30
    toy_weight: float = 0.1
    spectra_every: int = 10
    horizon: int = 2000
    samples: int = 20
    lmi_max_dim: int = 600
    transient_tol: float = 1e-3
    out_dir: str = "out"
    figures: str = "png"
    base_dir: str = "."

    def __post_init__(self) -> None:
        positive = ("flow_unit", "k_paths", "eta", "alpha", "K", "toy_blocks", "horizon", "samples")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("beta", "theta", "spectra_every", "lmi_max_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.toy_block_size < 2:
            raise ConfigError("toy.block_size must be at least 2")
        if not self.sweep or any(d < 1 for d in self.sweep):
            raise ConfigError("inner iteration counts must be at least 1")

    @property
    def sweep(self) -> tuple[int, ...]:
        return (self.D,) if self.D is not None else self.D_list

    def resolve(self, ref: str) -> Path:
        if ref.startswith("pkg:"):
            return bundled_path(ref[4:])
        p = Path(ref)
        return p if p.is_absolute() else Path(self.base_dir) / p


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    values: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, parse = _KEYS[key]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if "D" in values and "D_list" in values:
        raise ConfigError("give either solver.D or solver.D_list, not both")
    return ExperimentConfig(base_dir=base_dir, **values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=str(path.parent))


# --------------------------------------------------------------------- problems


@dataclass
class Instance:
    upper: object
    prob: LowerProblem
    box: Box
    y0: np.ndarray
    h0: np.ndarray


def build_instance(cfg: ExperimentConfig) -> Instance:
    if cfg.problem == "toy":
        game, upper, (lo, hi), y0 = toy_bilevel(cfg.seed, cfg.toy_blocks, cfg.toy_block_size, cfg.toy_weight)
        return Instance(upper, LowerProblem(game, cfg.eta), Box(lo, hi), y0, game.layout.uniform())
    try:
        net, demand = load_tntp(cfg.resolve(cfg.network), cfg.resolve(cfg.trips), cfg.resolve(cfg.expansion))
    except OSError as exc:
        raise DataError(f"cannot read data file: {exc}") from None
    net, demand = rescale_flow_unit(net, demand, cfg.flow_unit)
    space = k_shortest_paths(net, demand, cfg.k_paths)
    game = RoutingGame(net, space)
    upper = NetworkDesign(game, cfg.theta)
    lo, hi = upper.box()
    log.info("network: %d links, %d OD pairs, %d path variables", net.n_links, len(demand), space.layout.dim)
    return Instance(upper, LowerProblem(game, cfg.eta), Box(lo, hi), lo.copy(), game.layout.uniform())


# ------------------------------------------------------------------------ output


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row width {len(row)} does not match header in {path.name}")
            w.writerow([_cell(v) for v in row])
    return path


def _inner_rows(eps_h, eps_r):
    return [(t, eh, er) for t, (eh, er) in enumerate(zip(eps_h, eps_r))]


# ------------------------------------------------------------------- subcommands


def run_experiment(cfg: ExperimentConfig, out: Path) -> list[Path]:
    inst = build_instance(cfg)
    written = []
    summary = []
    for D in cfg.sweep:
        bcfg = BilevelConfig(K=cfg.K, D=D, beta=cfg.beta, alpha=cfg.alpha, box=inst.box,
                             record_errors=cfg.record_errors, reference_alpha=cfg.alpha)
        log.info("running K=%d, D=%d", cfg.K, D)
        trace = run_algorithm1(inst.upper, inst.prob, bcfg, inst.y0, inst.h0)
        nan = [float("nan")] * trace.K
        eps_h = trace.eps_h or nan
        eps_r = trace.eps_r or nan
        rows = [
            (k, trace.objective[k], trace.stationarity_sq[k], eps_h[k], eps_r[k], trace.wall_ms[k])
            for k in range(trace.K)
        ]
        written.append(write_csv(out / f"trace_D{D}.csv",
                                 ["k", "objective", "stationarity_sq", "eps_h", "eps_r", "wall_ms"], rows))
        if 0 in trace.inner:
            inner = trace.inner[0]
            written.append(write_csv(out / f"inner_D{D}.csv", ["t", "eps_h", "eps_r"],
                                     _inner_rows(inner["eps_h"], inner["eps_r"])))
        summary.append((D, trace.K, trace.objective[-1], trace.stationarity_sq[-1], trace.mean_wall_ms()))
    written.append(write_csv(out / "summary.csv",
                             ["D", "K", "final_objective", "final_stationarity_sq", "mean_wall_ms"], summary))
    if cfg.diagnostics:
        written += run_diagnostics(cfg, out, inst)
    return written


def _lower_point(cfg: ExperimentConfig, inst: Instance | None):
    """Lower problem and upper decision at which diagnostics are evaluated."""
    if cfg.problem == "toy":
        game, y = toy_instance(cfg.seed, cfg.toy_blocks, cfg.toy_block_size)
        return LowerProblem(game, cfg.eta), y
    inst = inst or build_instance(cfg)
    return inst.prob, inst.y0


def run_diagnostics(cfg: ExperimentConfig, out: Path, inst: Instance | None = None) -> list[Path]:
    prob, y = _lower_point(cfg, inst)
    layout = prob.layout
    h_star = reference_solve(prob, y)
    rng = np.random.default_rng([cfg.seed, 3])
    samples = [(h_star, y), (layout.uniform(), y)]
    samples += [(layout.random_interior(rng), y) for _ in range(cfg.samples)]
    const = diag.estimate_constants(prob, samples)
    written = [write_csv(out / "constants.csv", list(const.as_row()), [list(const.as_row().values())])]

    hess_bound = getattr(prob.model, "hessian_bound", None)
    L_g = max(const.L_g, hess_bound()) if hess_bound else const.L_g
    # the certificate needs a guaranteed floor, so prefer a global gradient bound
    grad_bound = getattr(prob.model, "gradient_bound", None)
    log_nu = log_interior_floor(prob.eta, grad_bound(), layout.max_size) if grad_bound else const.log_nu_min
    nu = math.exp(log_nu)
    alpha_bar = diag.admissible_step(prob.eta, L_g)
    steps = [cfg.alpha] if cfg.alpha <= alpha_bar else [cfg.alpha, 0.9 * alpha_bar]
    cert_rows = []
    header = None
    for alpha in steps:
        admissible = alpha <= alpha_bar
        if not 0 < nu < 1:
            log.warning("interior floor underflows (log nu = %.4g); certificate not evaluated", log_nu)
            continue
        cert = diag.stability_constants(prob.eta, alpha, L_g, nu, strict=False)
        if layout.dim * 3 <= cfg.lmi_max_dim or cfg.lmi_max_dim == 0:
            try:
                cert = diag.certify(prob, y, h_star, alpha, L_g, nu) if admissible else _lmi_only(
                    prob, y, h_star, cert)
            except NumericalError as exc:
                log.warning("LMI not evaluated at alpha=%g: %s", alpha, exc)
        row = {"admissible": admissible, "alpha_bar": alpha_bar, **cert.as_row()}
        header = list(row)
        cert_rows.append(list(row.values()))
    if header is None:
        header = ["admissible", "alpha_bar"] + [f.name for f in fields(diag.StabilityCertificate)]
    written.append(write_csv(out / "certificate.csv", header, cert_rows))

    rate_rows = []
    R_star = exact_jacobian(prob, y, h_star)
    for alpha in steps:
        tr = diag.trace_inner(prob, y, layout.uniform(), alpha, cfg.horizon, h_star, R_star)
        for name, errors, theory in (
            ("eps_h", tr.eps_h, 1.0 - prob.eta * alpha),
            ("eps_r", tr.eps_r, 1.0 - prob.eta * alpha / 2.0),
        ):
            pts = diag.positive_prefix(errors)
            fitted = diag.fit_rate(pts) if len(pts) >= 3 else float("nan")
            rate_rows.append((name, alpha, fitted, theory, len(pts), fitted <= theory + 0.01))
    written.append(write_csv(out / "rates.csv",
                             ["quantity", "alpha", "fitted_rate", "theory_rate", "n_points", "within"], rate_rows))
    return written


def _lmi_only(prob, y, h_star, cert):
    M = build_MU(prob, h_star, h_star, y, cert.alpha).M
    P = cert.C_P * np.diag(1.0 / h_star)
    mine = diag.lmi_check(M, P, cert.lam, cert.eps_bar, cert.s, cert.omega)
    return replace(cert, lmi_min_eig=mine, passed=mine >= -diag.LMI_TOL)


def run_toy(cfg: ExperimentConfig, out: Path) -> list[Path]:
    game, y = toy_instance(cfg.seed, cfg.toy_blocks, cfg.toy_block_size)
    prob = LowerProblem(game, cfg.eta)
    h0 = toy_start(game, cfg.seed)
    h_star = reference_solve(prob, y)
    R_star = exact_jacobian(prob, y, h_star)
    T = max(cfg.sweep)
    tr = diag.trace_inner(prob, y, h0, cfg.alpha, T, h_star, R_star, spectra_every=cfg.spectra_every)
    written = []
    for D in cfg.sweep:
        written.append(write_csv(out / f"inner_D{D}.csv", ["t", "eps_h", "eps_r"],
                                 _inner_rows(tr.eps_h[: D + 1], tr.eps_r[: D + 1])))
    if cfg.spectra_every:
        written.append(write_csv(out / "spectra.csv", ["t", "rho", "norm", "gap_to_fixed_point"],
                                 list(zip(tr.spectra_t, tr.rho, tr.norm, tr.M_gap))))
    t_peak = int(np.argmax(tr.eps_r))
    t0 = next((t for t, g in zip(tr.spectra_t, tr.M_gap) if g <= cfg.transient_tol), None)
    written.append(write_csv(
        out / "toy_summary.csv",
        ["T", "t_peak_eps_r", "max_eps_r", "final_eps_r", "final_eps_h", "max_rho", "transient_T0"],
        [(T, t_peak, max(tr.eps_r), tr.eps_r[-1], tr.eps_h[-1], max(tr.rho, default=None), t0)],
    ))
    return written


# -------------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficbilevel", description="Bilevel traffic experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("run", "outer-loop runs over the D sweep"),
        ("diagnose", "stability certificate, constants and rates"),
        ("toy", "lower-level dynamics of the toy game"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="overrides flags.seed")
    p = sub.add_parser("plot", help="render figures from an output directory")
    p.add_argument("dir")
    p.add_argument("--format", choices=FORMATS, default="png")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "plot":
            for p in render_report(args.dir, args.format):
                print(p)
            return EXIT_OK
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out) if args.out else cfg.resolve(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runner = {"run": run_experiment, "diagnose": run_diagnostics, "toy": run_toy}[args.command]
        written = runner(cfg, out)
        if cfg.figures != "none":
            written += render_report(out, cfg.figures)
        for p in written:
            print(p)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DomainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
