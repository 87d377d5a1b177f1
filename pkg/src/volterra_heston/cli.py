"""Batch commands over the library, driven by a JSON config.

Every output embeds the fully resolved config: CSV files start with a
``# config=<json>`` line, JSON files carry a ``config`` key, and the binary
path file ends with a ``VHCF`` trailer.  Passing any output back through
``--config`` reruns the same computation and rewrites the same bytes.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .curves import check_admissible
from .errors import BlowupError, DomainError, NumericalFailure
from .grid import TOLERANCES
from .kernels import conv_measure_fun, kernel_gamma_check, reconstruct_shifted_kernel, resolvent_first_kind
from .lift import discretize_measure
from .montecarlo import simulate
from .transform import characteristic_function, lift_characteristic_function, option_prices

log = logging.getLogger("volterra_heston")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

COLUMNS = {
    "charfn": "z,re,im",
    "price": "strike,price,iv",
    "simulate": "t,mean_v,sd_v,mean_s,sd_s,frac_v_negative",
    "lift-compare": "n,l2_error,cf_error,runtime_s",
}


def fmt(x) -> str:
    """Shortest round-trip text for a float; integral values lose the trailing ``.0``."""
    s = repr(float(x) + 0.0)
    return s[:-2] if s.endswith(".0") else s


class Writer:
    def __init__(self, out: Path, cfg: dict, plot: bool):
        self.out, self.plot = out, plot
        self.header = "# config=" + cfgmod.dumps(cfg) + "\n"
        self.cfg = cfg
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, columns: str, rows) -> Path:
        body = "".join(",".join(fmt(v) for v in row) + "\n" for row in rows)
        path = self.out / name
        path.write_text(self.header + columns + "\n" + body)
        log.info("wrote %s", path)
        return path

    def series(self, name: str, x, y) -> None:
        if self.plot:
            self.csv(f"plot_{name}.csv", "x,y", zip(x, y))

    def json(self, name: str, doc: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps({"config": self.cfg, **doc}, indent=2, sort_keys=True) + "\n")
        log.info("wrote %s", path)
        return path


def cmd_kernel_check(cfg: dict, w: Writer, threads: int) -> int:
    _, k, _, grid = cfgmod.build(cfg)
    opts = cfg["kernel_check"]
    gamma = kernel_gamma_check(k, grid, opts["n_levels"])
    L = resolvent_first_kind(k, grid)
    residual = float(np.max(np.abs(conv_measure_fun(L, k)[1:] - 1.0)))
    residual_tol = TOLERANCES["resolvent_closed_form" if L.closed_form else "resolvent_deconvolved"]
    _, recon = reconstruct_shifted_kernel(k, opts["shift"], grid)
    checks = {
        "gamma": gamma.passed,
        "resolvent": residual <= residual_tol,
        "reconstruction": recon <= opts["reconstruction_tol"],
    }
    report = {
        "pass": all(checks.values()),
        "checks": checks,
        "gamma_fit": gamma.gamma_fit,
        "gamma_stored": gamma.gamma_stored,
        "resolvent_residual": residual,
        "resolvent_tolerance": residual_tol,
        "reconstruction_error": recon,
    }
    w.json("kernel_check.json", report)
    w.series("kernel", grid.times[1:], k(grid.times[1:]))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["pass"] else EXIT_NUMERICAL


def cmd_curve_check(cfg: dict, w: Writer, threads: int) -> int:
    _, k, g0, grid = cfgmod.build(cfg)
    opts = cfg["admissibility"]
    rep = check_admissible(g0, k, grid, shift_ladder=opts["ladder"], tol=opts["tol"]).to_dict()
    w.json("curve_check.json", {"report": rep})
    w.series("curve", grid.times, g0.on_grid(grid))
    print(json.dumps({"pass": rep["pass"], "worst_violation": rep["worst_violation"]}))
    return EXIT_OK if rep["pass"] else EXIT_NUMERICAL


def cmd_charfn(cfg: dict, w: Writer, threads: int) -> int:
    params, k, g0, grid = cfgmod.build(cfg)
    z = np.asarray(cfg["charfn"]["z"], dtype=float)
    cf = np.atleast_1d(characteristic_function(params, k, g0, z, grid))
    w.csv("charfn.csv", COLUMNS["charfn"], zip(z, cf.real, cf.imag))
    w.series("charfn_re", z, cf.real)
    w.series("charfn_im", z, cf.imag)
    return EXIT_OK


def cmd_price(cfg: dict, w: Writer, threads: int) -> int:
    params, k, g0, grid = cfgmod.build(cfg)
    opts = cfg["price"]
    res = option_prices(params, k, g0, opts["strikes"], grid, kind=opts["kind"], damping=opts["damping"])
    w.csv("price.csv", COLUMNS["price"], zip(res.strikes, res.price, res.implied_vol))
    w.series("price", res.strikes, res.price)
    w.series("implied_vol", res.strikes, res.implied_vol)
    return EXIT_OK


def cmd_simulate(cfg: dict, w: Writer, threads: int) -> int:
    params, k, g0, grid = cfgmod.build(cfg)
    ps = simulate(params, g0, k, grid, int(cfg["simulate"]["n_paths"]), cfg["seed"], threads=threads)
    blob = cfgmod.dumps(cfg).encode()
    path = w.out / "paths.bin"
    path.write_bytes(ps.to_bytes() + cfgmod.CONFIG_TRAILER + struct.pack("<Q", len(blob)) + blob)
    rows = ps.summary_rows()
    w.csv("summary.csv", COLUMNS["simulate"], rows)
    w.series("mean_v", [r[0] for r in rows], [r[1] for r in rows])
    print(json.dumps({"paths": str(path), "n_paths": ps.n_paths, "truncation_fraction": ps.truncation_fraction}))
    return EXIT_OK


def cmd_lift_compare(cfg: dict, w: Writer, threads: int) -> int:
    params, k, g0, grid = cfgmod.build(cfg)
    opts = cfg["lift"]
    z = np.asarray(opts["z"], dtype=float)
    reference = characteristic_function(params, k, g0, z, grid)
    rows = []
    for n in opts["n"]:
        start = time.perf_counter()
        dm = discretize_measure(k, n, T=grid.T, dt=grid.dt, rule=opts["rule"])
        cf = lift_characteristic_function(params, dm, g0, z, grid)
        runtime = time.perf_counter() - start
        l2 = dm.l2_error(k, grid.dt, grid.T)
        rows.append((n, l2, float(np.max(np.abs(cf - reference))), runtime))
    w.csv("lift_compare.csv", COLUMNS["lift-compare"], rows)
    w.series("lift_l2_error", [r[0] for r in rows], [r[1] for r in rows])
    w.series("lift_cf_error", [r[0] for r in rows], [r[2] for r in rows])
    return EXIT_OK


COMMANDS = {
    "kernel-check": (cmd_kernel_check, "Hoelder fit, resolvent residual and shifted-kernel reconstruction error. "
                                       "Writes kernel_check.json; exit 1 if any diagnostic misses its threshold."),
    "curve-check": (cmd_curve_check, "Admissibility of the input curve on a shift ladder. Writes curve_check.json; "
                                     "exit 1 if the curve fails."),
    "charfn": (cmd_charfn, "Characteristic function of log S_T. Writes charfn.csv with columns " + COLUMNS["charfn"]),
    "price": (cmd_price, "European prices by Fourier inversion. Writes price.csv with columns " + COLUMNS["price"]),
    "simulate": (cmd_simulate, "Monte Carlo paths. Writes paths.bin (header '<4sIQQd': magic VHPS, version, n_paths, "
                               "n_steps, dt; then V and log S as row-major little-endian f8; then the config trailer) "
                               "and summary.csv with columns " + COLUMNS["simulate"]),
    "lift-compare": (cmd_lift_compare, "Finite-factor kernel against the full kernel for each node count. Writes "
                                       "lift_compare.csv with columns " + COLUMNS["lift-compare"]
                                       + " (runtime_s is wall-clock and the only non-reproducible field)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volterra-heston", description=__doc__.splitlines()[0],
                                     epilog="Exit codes: 0 pass, 1 numerical failure, 2 usage or config error. "
                                            "VH_LOG sets the log level (DEBUG, INFO, WARNING, ...).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text.split(".")[0], description=text)
        p.add_argument("--config", required=True, type=Path, help="JSON config, or any output file of an earlier run")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed (u64)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("--emit-plot-data", action="store_true", help="also write plot_<series>.csv files with x,y")
    return parser


def _error(kind: str, exc: Exception, **extra) -> None:
    print(json.dumps({"error": kind, "message": str(exc), **extra}, sort_keys=True))


def main(argv=None) -> int:
    level = os.environ.get("VH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1 or (args.seed is not None and not 0 <= args.seed < 2**64):
        _error("usage", ValueError("--threads must be >= 1 and --seed must fit in u64"))
        return EXIT_USAGE
    try:
        cfg = cfgmod.load(args.config, seed=args.seed)
        writer = Writer(args.out, cfg, args.emit_plot_data)
        func = COMMANDS[args.command][0]
        return func(cfg, writer, args.threads)
    except cfgmod.ConfigError as exc:
        _error("config", exc)
        return EXIT_USAGE
    except BlowupError as exc:
        _error("blowup", exc, blowup_time=exc.last_valid_time)
        return EXIT_NUMERICAL
    except NumericalFailure as exc:
        _error("numerical", exc, residual=exc.residual)
        return EXIT_NUMERICAL
    except DomainError as exc:
        _error("domain", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
