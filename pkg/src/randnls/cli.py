"""Command-line front end.

Four subcommands, each writing RFC-4180 CSV (CRLF line ends, header row):

``sample-size``
    Loose and tight sufficient (or rank-``r`` necessary) sample sizes over a
    range of δ.
``trace-coverage``
    Empirical coverage of the trace estimator on a named fixture.
``extremal-verify``
    Monte-Carlo check of the closed-form extremal envelope on a simplex grid.
``invert``
    Synthetic DC-resistivity inversion with one solver variant (or the
    vanilla baseline).

Parameters come from three layers: built-in defaults, then a flat
``key = value`` config file (``--config``), then command-line flags. With
``--out DIR`` every output goes to ``DIR`` under a common run stem
``<subcommand>-<digest>``, next to a ``<stem>.manifest`` that lists the
resolved parameters, versions and output files. The digest hashes the
resolved parameters, so reruns with the same inputs overwrite the same files
with the same bytes. Without ``--out`` the main CSV goes to stdout.

Exit codes: 0 success, 1 a verification found a violation, 2 usage error,
3 configuration error, 4 numerical failure.
"""

import argparse
import csv
import hashlib
import io
import math
import os
import sys
from importlib import metadata

import numpy as np
import scipy

from .errors import ConfigurationError, DomainError, InterfaceError, NumericalError
from .sample_size_bounds import (
    ToleranceBudget, loose_sufficient, sufficient, necessary, SIDES,
)
from .trace_estimation import FIXTURES, fixture, empirical_coverage
from .extremal_gamma import envelope_sweep, extremal_envelope
from .dc_resistivity import synthesize, write_grid, TRANSFERS, NOISE_PCT
from .stochastic_nls import (
    Dataset, SolverConfig, VARIANTS, full_misfit, solve, PCG_ITERS, PCG_TOL, MAX_STEP,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


# name -> (type, default, help); names double as config-file keys
OPTIONS = {
    "sample-size": {
        "eps": (float, 0.1, "relative accuracy"),
        "delta_min": (float, 0.01, "first delta"),
        "delta_max": (float, 0.3, "last delta (inclusive)"),
        "delta_step": (float, 0.01, "delta increment"),
        "r": (int, 1, "rank; r > 1 gives the necessary sizes"),
    },
    "trace-coverage": {
        "fixture": (str, "rank1", f"one of {', '.join(FIXTURES)}"),
        "fixture_seed": (int, 0, "seed of random fixtures"),
        "eps": (float, 0.1, "relative accuracy"),
        "delta": (float, 0.1, "failure probability"),
        "side": (str, "lower", f"one of {', '.join(SIDES)}"),
        "n": (int, 0, "sample size; 0 uses the sufficient bound"),
        "trials": (int, 10_000, "independent estimates"),
        "seed": (int, 0, "probe seed"),
    },
    "extremal-verify": {
        "alpha": (float, 0.5, "gamma shape"),
        "beta": (float, 0.5, "gamma rate"),
        "n": (int, 3, "number of summands"),
        "x": (_floats, [0.25, 0.5, 2.5, 4.0], "evaluation points, comma separated"),
        "step": (float, 0.1, "simplex grid spacing"),
        "samples": (int, 100_000, "Monte-Carlo samples per grid point"),
        "seed": (int, 0, "root seed"),
        "z": (float, 4.0, "standard errors of slack"),
    },
    "invert": {
        "example": (str, "E1", "E1 or E2"),
        "variant": (str, "i", "i..viii or vanilla"),
        "grid": (int, 32, "cells per side of the inversion grid"),
        "p": (int, 15, "source/receiver rows; s = p^2"),
        "noise_pct": (float, NOISE_PCT, "relative noise level"),
        "data_seed": (int, 0, "noise seed"),
        "seed": (int, 1, "probe seed"),
        "transfer": (str, "loglogistic", f"one of {', '.join(TRANSFERS)}"),
        "kappa": (float, 1.0, "cross-validation decrease factor"),
        "cv_eps": (float, 0.05, ""), "cv_delta": (float, 0.3, ""),
        "uc_eps": (float, 0.1, ""), "uc_delta": (float, 0.3, ""),
        "stop_eps": (float, 0.1, ""), "stop_delta": (float, 0.1, ""),
        "n0": (int, 1, "initial fitting sample size"),
        "max_iters": (int, 200, "outer iteration limit"),
        "pcg_iters": (int, PCG_ITERS, "inner CG limit"),
        "pcg_tol": (float, PCG_TOL, "inner CG tolerance"),
        "max_step": (_opt_float, MAX_STEP, "largest step entry; none disables"),
        "exact_at_s": (_bool, True, "exact misfit once a sample size reaches s"),
        "gate_when_saturated": (_bool, True, "run the stop checks when n_k = s"),
    },
}


def read_config(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="randnls", description="Randomized trace estimation and stochastic inversion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--out", help="output directory; stdout if omitted")
        for key, (typ, default, text) in opts.items():
            # SUPPRESS keeps unset flags out of the namespace, so the
            # config file can fill them in
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ,
                           default=argparse.SUPPRESS, help=f"{text} (default {default})")
    return parser


def resolve(command, flags, config=None):
    """Defaults, overridden by ``config`` strings, overridden by ``flags``."""
    opts = OPTIONS[command]
    params = {k: v[1] for k, v in opts.items()}
    for key, text in (config or {}).items():
        if key not in opts:
            raise ConfigurationError(f"unknown config key {key!r} for {command}")
        try:
            params[key] = opts[key][0](text)
        except ValueError as exc:
            raise ConfigurationError(f"config key {key}: {exc}")
    params.update({k: v for k, v in flags.items() if k in opts})
    return params


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def version_stamp():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return f"artifact {own}; numpy {np.__version__}; scipy {scipy.__version__}"


def run_stem(command, params):
    text = "\n".join(f"{k}={_fmt(params[k])}" for k in sorted(params))
    return f"{command}-{hashlib.sha256(text.encode()).hexdigest()[:12]}"


class Outputs:
    """Collects named outputs, then writes them with a manifest or to stdout."""

    def __init__(self, command, params, config_path, out_dir):
        self.command, self.params = command, params
        self.config_path, self.out_dir = config_path, out_dir
        self.stem = run_stem(command, params)
        self.files = []  # (suffix, text)

    def add(self, suffix, text):
        self.files.append((suffix, text))

    def manifest(self):
        lines = [
            "# run manifest",
            f"subcommand {self.command}",
            f"config {self.config_path or ''}",
            f"seed {_fmt(self.params.get('seed', ''))}",
            f"output_dir {self.out_dir or ''}",
            f"version {version_stamp()}",
        ]
        lines += [f"param {k} {_fmt(self.params[k])}" for k in sorted(self.params)]
        lines += [f"output {self.stem}.{suffix}" for suffix, _ in self.files]
        return "\n".join(lines) + "\n"

    def flush(self, stdout):
        if self.out_dir is None:
            stdout.write(self.files[0][1])
            return
        os.makedirs(self.out_dir, exist_ok=True)
        for suffix, text in self.files + [("manifest", self.manifest())]:
            path = os.path.join(self.out_dir, f"{self.stem}.{suffix}")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)


def _delta_grid(lo, hi, step):
    if not (0 < lo <= hi < 1) or not (step > 0):
        raise UsageError("need 0 < delta-min <= delta-max < 1 and delta-step > 0")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 12) for i in range(count)]


def cmd_sample_size(params, out):
    eps, r = params["eps"], params["r"]
    if not (0 < eps < 1) or r < 1:
        raise UsageError("need 0 < eps < 1 and r >= 1")
    rows = []
    for delta in _delta_grid(params["delta_min"], params["delta_max"], params["delta_step"]):
        t = ToleranceBudget(eps, delta)
        if r == 1:
            tight = [sufficient(t, side).n for side in SIDES]
        else:
            tight = [necessary(t, side, r).n for side in SIDES]
        loose = loose_sufficient(t)
        ratios = [loose / n if n else None for n in tight[:2]]
        rows.append([eps, delta, r, loose, *tight, *ratios])
    header = ["eps", "delta", "r", "loose", "tight_lower", "tight_upper",
              "tight_two_sided", "ratio_lower", "ratio_upper"]
    out.add("csv", to_csv(header, rows))
    return EXIT_OK


def cmd_trace_coverage(params, out):
    if params["side"] not in SIDES:
        raise UsageError(f"side must be one of {SIDES}")
    if params["fixture"] not in FIXTURES:
        raise UsageError(f"fixture must be one of {sorted(FIXTURES)}")
    t = ToleranceBudget(params["eps"], params["delta"])
    op = fixture(params["fixture"], params["fixture_seed"])
    n = params["n"]
    if n <= 0:
        n = sufficient(t, params["side"]).n
        if n is None:
            raise ConfigurationError("sample-size scan exhausted")
    res = empirical_coverage(op, t, params["side"], n, params["trials"], params["seed"])
    threshold = 1.0 - t.delta - 4.0 * res.std_error
    passed = res.coverage >= threshold
    header = ["fixture", "side", "eps", "delta", "n", "trials", "seed",
              "coverage", "std_error", "threshold", "passed"]
    row = [params["fixture"], params["side"], t.eps, t.delta, n, res.trials,
           params["seed"], res.coverage, res.std_error, threshold, passed]
    out.add("csv", to_csv(header, [row]))
    return EXIT_OK if passed else EXIT_FAILED


def cmd_extremal_verify(params, out):
    xs = params["x"]
    if not xs or min(xs) < 0:
        raise UsageError("x must be a non-empty list of nonnegative numbers")
    checks = envelope_sweep(params["alpha"], params["beta"], params["n"], xs,
                            params["step"], params["samples"], params["seed"], params["z"])
    rows = []
    for c in checks:
        env = c.envelope
        rows.append([c.alpha, c.beta, c.n, c.x, env.regime,
                     " ".join(repr(v) for v in c.weights.lambdas),
                     c.estimate, c.std_error, env.m, env.M, c.inside])
    header = ["alpha", "beta", "n", "x", "regime", "weights", "estimate",
              "std_error", "m", "M", "inside"]
    out.add("csv", to_csv(header, rows))
    return EXIT_OK if all(c.inside for c in checks) else EXIT_FAILED


def cmd_invert(params, out):
    variant = params["variant"]
    if variant != "vanilla" and variant not in VARIANTS:
        raise UsageError(f"variant must be vanilla or one of {', '.join(VARIANTS)}")
    if params["example"] not in ("E1", "E2"):
        raise UsageError("example must be E1 or E2")
    ex = synthesize(params["example"], params["grid"], params["p"],
                    noise_pct=params["noise_pct"], seed=params["data_seed"],
                    transfer=params["transfer"])
    cfg = SolverConfig.for_variant(
        variant, ex.rho, kappa=params["kappa"],
        cv_budget=ToleranceBudget(params["cv_eps"], params["cv_delta"]),
        uc_budget=ToleranceBudget(params["uc_eps"], params["uc_delta"]),
        stop_budget=ToleranceBudget(params["stop_eps"], params["stop_delta"]),
        n0=params["n0"], max_outer_iters=params["max_iters"], seed=params["seed"],
        pcg_iters=params["pcg_iters"], pcg_tol=params["pcg_tol"],
        max_step=params["max_step"], exact_at_s=params["exact_at_s"],
        gate_when_saturated=params["gate_when_saturated"],
    )
    ds = Dataset(ex.layout.sources, ex.data)
    report = solve(ex.forward_model(), ds, cfg, np.zeros(ex.grid.n_cells))
    # post-hoc check on a separate model, outside the solver's count
    full = full_misfit(ex.forward_model(), ds, report.final_model)
    header = ["example", "variant", "seed", "termination", "outer_iterations",
              "pde_solves", "final_phi_estimate", "full_misfit", "rho", "full_over_rho"]
    row = [params["example"], variant, params["seed"], report.termination,
           report.outer_iterations, report.pde_solve_count, report.final_phi_estimate,
           full, ex.rho, full / ex.rho]
    out.add("summary.csv", to_csv(header, [row]))
    out.add("iterations.csv", report.to_csv())
    out.add("report.txt", report.to_text())
    grid = io.StringIO()
    write_grid(ex.transfer(report.final_model), ex.grid, grid)
    out.add("mu.grid", grid.getvalue())
    return EXIT_OK


COMMANDS = {
    "sample-size": cmd_sample_size,
    "trace-coverage": cmd_trace_coverage,
    "extremal-verify": cmd_extremal_verify,
    "invert": cmd_invert,
}


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    flags = vars(ns)
    command = flags.pop("command")
    config_path, out_dir = flags.pop("config", None), flags.pop("out", None)
    try:
        config = read_config(config_path) if config_path else None
        params = resolve(command, flags, config)
        out = Outputs(command, params, config_path, out_dir)
        code = COMMANDS[command](params, out)
        out.flush(stdout)
        return code
    except UsageError as exc:
        stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (ConfigurationError, DomainError, InterfaceError, OSError) as exc:
        stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
