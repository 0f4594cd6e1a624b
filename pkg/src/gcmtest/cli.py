"""Command-line front end.

Exit codes: 0 success, 1 input error, 2 statistical degeneracy, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import secrets
import sys
from pathlib import Path

import numpy as np

from . import simlab
from ._stats import MC_STREAM, TEST_STREAM, stream
from .core import expected_cond_cov_ci, gcm_test, naive_resid_corr_test
from .data import read_csv
from .errors import DataError, DegenerateStatisticError, InsufficientSampleError
from .multi import FeatureLift, multi_gcm_test
from .nofreelunch import rkhs_log_norm_sq
from .regression import KernelSpec, kernel_diagnostics, make_backend

log = logging.getLogger("gcmtest")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULTS = {
    "backend": "linear",
    "family": "gaussian",
    "bandwidth": 1.0,
    "lam": "auto",
    "k": None,
    "alpha": 0.05,
    "seed": None,
    "B": 5000,
    "lift": "raw",
    "split": True,
    "power": False,
    "n_grid": list(simlab.DEFAULT_N_GRID),
    "reps": simlab.DEFAULT_REPS,
    "test": "gcm",
    "format": "csv",
    "a_grid": [2.0, 6.0, 12.0, 18.0],
    "output": None,
}
# commands that run simulations default to the kernel backend
SIM_DEFAULTS = {"backend": "krr", "n_grid_nfl": [100]}


class _InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _sig(x):
    """Round floats to 9 significant digits for stable serialisation."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.9g}") if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _sig(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_sig(v) for v in x]
    if isinstance(x, dict):
        return {k: _sig(v) for k, v in x.items()}
    return x


def _dump_json(obj) -> str:
    return json.dumps(_sig(obj), indent=2, sort_keys=True) + "\n"


def _emit(text: str, output) -> None:
    if output:
        try:
            Path(output).write_text(text)
        except OSError as exc:
            raise _InputError(f"cannot write {output}: {exc}") from exc
    else:
        sys.stdout.write(text)


def _float_list(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _lam(s: str):
    if s in ("auto", "loocv"):
        return s
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda must be a number, 'auto' or 'loocv': {s!r}") from None


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="CSV with x*, y*, z* columns")
    p.add_argument("--config", help="JSON file with default values for these flags")
    p.add_argument("--backend", choices=["linear", "krr", "knn"])
    p.add_argument("--family", choices=["gaussian", "sobolev_first_order"])
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--lam", type=_lam, help="KRR penalty: number, 'auto' (spectral rule) or 'loocv'")
    p.add_argument("--k", type=int, help="neighbours for the knn backend (default round(sqrt(n)))")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcmtest", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("test", help="univariate GCM test on a CSV file")
    _add_common(p)

    p = sub.add_parser("test-multi", help="max-statistic GCM test on a CSV file")
    _add_common(p)
    p.add_argument("--B", type=int, help="Monte-Carlo draws for the calibration")
    p.add_argument("--lift", choices=["raw", "square", "abs"])

    p = sub.add_parser("estimate-cov", help="estimate E cov(X, Y | Z) with a confidence interval")
    _add_common(p)
    p.add_argument("--split", dest="split", action="store_true", default=None)
    p.add_argument("--no-split", dest="split", action="store_false")

    p = sub.add_parser("simulate", help="rejection rates on a simulation model")
    _add_common(p, data=False)
    p.add_argument("--model", required=True, choices=list(simlab.MODELS))
    p.add_argument("--a", type=float, help="f_a frequency for models a, b and nfl")
    p.add_argument("--power", dest="power", action="store_true", default=None)
    p.add_argument("--no-power", dest="power", action="store_false")
    p.add_argument("--n-grid", type=_int_list)
    p.add_argument("--reps", type=int)
    p.add_argument("--test", choices=["gcm", "naive", "multi"])
    p.add_argument("--B", type=int)
    p.add_argument("--format", choices=["csv", "json"])

    p = sub.add_parser("nfl-demo", help="rejection rates of the f_a null over a grid of a")
    _add_common(p, data=False)
    p.add_argument("--n", "--n-grid", dest="n_grid", type=_int_list)
    p.add_argument("--a-grid", type=_float_list)
    p.add_argument("--reps", type=int)
    p.add_argument("--format", choices=["csv", "json"])

    p = sub.add_parser("krr-diag", help="Gram spectrum and tuned lambda for the z block of a CSV")
    _add_common(p)
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    conf: dict = {}
    if getattr(args, "config", None):
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise _InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(conf, dict):
            raise _InputError("config file must hold a JSON object")
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
    defaults = dict(DEFAULTS)
    if args.command in ("simulate", "nfl-demo"):
        defaults["backend"] = SIM_DEFAULTS["backend"]
        if args.command == "nfl-demo":
            defaults["n_grid"] = SIM_DEFAULTS["n_grid_nfl"]
    out = {}
    for key, val in vars(args).items():
        if val is not None:
            out[key] = val
        elif key in conf:
            out[key] = conf[key]
        else:
            out[key] = defaults.get(key)
    for key in ("n_grid", "a_grid"):
        if isinstance(out.get(key), str):
            out[key] = _float_list(out[key]) if key == "a_grid" else _int_list(out[key])
    if not 0.0 < float(out.get("alpha") or 0.05) < 1.0:
        raise _InputError(f"alpha must lie in (0, 1), got {out['alpha']}")
    if out.get("seed") is None:
        out["seed"] = secrets.randbits(32)
        print(f"seed: {out['seed']}", file=sys.stderr)
    return out


def _backend(opts: dict):
    kernel = KernelSpec(opts["family"], float(opts["bandwidth"]))
    return make_backend(opts["backend"], kernel=kernel, lam=opts["lam"], k=opts["k"])


def cmd_test(opts: dict) -> int:
    data = read_csv(opts["data"])
    if data.d_x != 1 or data.d_y != 1:
        raise _InputError("test needs exactly one x and one y column; use test-multi")
    backend = _backend(opts)
    res = gcm_test(data, backend, alpha=opts["alpha"])
    report = {
        "statistic": res.statistic,
        "tau_N": res.tau_n,
        "tau_D": res.tau_d,
        "p_value": res.p_value,
        "reject": res.reject,
        "n": res.n,
        "backend": backend.tag,
        "seed": opts["seed"],
    }
    _emit(_dump_json(report), opts["output"])
    return EXIT_OK


def cmd_test_multi(opts: dict) -> int:
    data = read_csv(opts["data"])
    backend = _backend(opts)
    lift = FeatureLift(opts["lift"], opts["lift"])
    res = multi_gcm_test(data, backend, alpha=opts["alpha"], B=int(opts["B"]),
                         seed=stream(opts["seed"], MC_STREAM), lift=lift)
    report = {
        "t_matrix": res.t_matrix,
        "s_n": res.s_n,
        "g_quantile": res.g_quantile,
        "p_value": res.p_value,
        "reject": res.reject,
        "draws": res.draws,
        "n": data.n,
        "lift": opts["lift"],
        "backend": backend.tag,
        "seed": opts["seed"],
    }
    _emit(_dump_json(report), opts["output"])
    return EXIT_OK


def cmd_estimate_cov(opts: dict) -> int:
    data = read_csv(opts["data"])
    backend = _backend(opts)
    est = expected_cond_cov_ci(data, backend, alpha=opts["alpha"], split=bool(opts["split"]),
                               rng=stream(opts["seed"], TEST_STREAM))
    report = {
        "rho_hat": est.rho_hat,
        "ci_lower": est.ci_lower,
        "ci_upper": est.ci_upper,
        "sigma_hat": est.sigma_hat,
        "split": est.split_used,
        "n_eval": est.n_eval,
        "seed": opts["seed"],
    }
    _emit(_dump_json(report), opts["output"])
    return EXIT_OK


def _test_config(opts: dict) -> simlab.TestConfig:
    return simlab.TestConfig(opts.get("test") or "gcm", opts["backend"], float(opts["bandwidth"]),
                             opts["k"], int(opts.get("B") or DEFAULTS["B"]))


def _sim_backend_config(opts: dict):
    cfg = _test_config(opts)
    backend = _backend(opts)
    kind = cfg.kind

    def run(data, alpha, rng):
        if kind == "multi" or (kind == "gcm" and data.d_x * data.d_y > 1):
            return multi_gcm_test(data, backend, alpha=alpha, B=cfg.B, seed=rng).reject
        if kind == "naive":
            return naive_resid_corr_test(data, backend, alpha=alpha).reject
        return gcm_test(data, backend, alpha=alpha).reject

    run.__name__ = f"{kind}:{backend.tag}"
    return run


def cmd_simulate(opts: dict) -> int:
    try:
        spec = simlab.ModelSpec(opts["model"], bool(opts["power"]), opts.get("a"))
    except ValueError as exc:
        raise _InputError(str(exc)) from exc
    if int(opts["reps"]) < 1:
        raise _InputError("--reps must be at least 1")
    report = simlab.rejection_rate(spec, _sim_backend_config(opts), opts["n_grid"], int(opts["reps"]),
                                   float(opts["alpha"]), int(opts["seed"]))
    for n, rate, ok in zip(report.n_values, report.rates, report.band_pass):
        log.info("n=%d rate=%.3f band=%.3f pass=%s", n, rate, report.band, ok)
    text = report.to_csv() if opts["format"] == "csv" else report.to_json() + "\n"
    _emit(text, opts["output"])
    return EXIT_OK


def cmd_nfl(opts: dict) -> int:
    runner = _sim_backend_config(opts)
    rows = []
    for a in opts["a_grid"]:
        if not a > 0:
            raise _InputError(f"a must be positive, got {a}")
        spec = simlab.ModelSpec("nfl", a=float(a))
        rep = simlab.rejection_rate(spec, runner, opts["n_grid"], int(opts["reps"]),
                                    float(opts["alpha"]), int(opts["seed"]))
        for n, rate, se, ok in zip(rep.n_values, rep.rates, rep.mc_stderr, rep.band_pass):
            rows.append({"n": n, "a": float(a), "reps": rep.reps, "rate": rate, "stderr": se,
                         "band": rep.band, "pass": ok, "log_rkhs_norm_sq": rkhs_log_norm_sq(a)})
    if opts["format"] == "json":
        text = _dump_json({"rows": rows, "seed": opts["seed"], "backend": runner.__name__})
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["n", "a"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
    _emit(text, opts["output"])
    return EXIT_OK


def cmd_krr_diag(opts: dict) -> int:
    data = read_csv(opts["data"])
    kernel = KernelSpec(opts["family"], float(opts["bandwidth"]))
    diag = kernel_diagnostics(data.z_block, kernel)
    mu, lam = diag.eigenvalues, diag.lambda_hat
    report = {
        "n": data.n,
        "kernel": kernel.tag,
        "lambda_hat": lam,
        "objective_at_min": diag.objective_at_min,
        "effective_dof": float(np.sum(mu / (mu + lam))),
        "eigenvalues_top": mu[:10],
    }
    _emit(_dump_json(report), opts["output"])
    return EXIT_OK


COMMANDS = {
    "test": cmd_test,
    "test-multi": cmd_test_multi,
    "estimate-cov": cmd_estimate_cov,
    "simulate": cmd_simulate,
    "nfl-demo": cmd_nfl,
    "krr-diag": cmd_krr_diag,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = _resolve(args)
        return COMMANDS[args.command](opts)
    except (DegenerateStatisticError, InsufficientSampleError) as exc:
        print(f"degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (DataError, _InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - last-resort contract
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
