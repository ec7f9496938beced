"""Command-line interface.

Every subcommand prints a JSON document to stdout. With ``--out-dir`` the
same document is written to ``result.json`` together with any curve CSV
(header ``p_a,value,stderr``) and a ``manifest.json`` describing the run;
without it the manifest goes to stderr.

Exit codes: 0 success, 2 input or domain error, 3 statistical-validity error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import child_rng, resolve_seed
from .balance import (
    Metric,
    acceptance_from_scores,
    analytic_variance_remaining,
    build_acceptance_set,
)
from .dataio import read_table, write_curve_csv
from .errors import DomainError, InadmissibleAssignmentError, RerandError
from .inference import OutcomeVector, fiducial_interval, min_p_value_curve, randomization_test
from .numerics import MVNSpec
from .randset import AssignmentVector, DesignSpace, count_randomizations
from .simharness import (
    StudyConfig,
    run_selector_study,
    semisynthetic_build,
    synthetic_trial_table,
    tau_sampling_report,
)
from .threshold import (
    PriorSpec,
    apriori_p_a,
    design_expected_pvalue,
    design_grid,
    expected_pvalue_curve,
    heuristic_grid,
    heuristic_p_a,
    implied_lambda,
    kasy_degenerate_set,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_DOMAIN, EXIT_VALIDITY = 0, 2, 3


class ConfigError(DomainError):
    pass


# -- output -----------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    """JSON with insertion key order, shortest round-trip floats, infinities as strings."""
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs of one invocation and writes them at the end."""

    def __init__(self, args):
        self.args = args
        self.start = time.perf_counter()
        self.inputs: dict[str, str] = {}
        self.curves: dict[str, tuple[list, tuple, str]] = {}
        self.tables: dict[str, tuple[list, tuple]] = {}

    def input(self, path) -> Path:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = _sha256(path)
        return path

    def curve(self, name: str, rows, ylabel: str, header=("p_a", "value", "stderr")):
        self.curves[name] = (list(rows), header, ylabel)

    def table(self, name: str, rows, header):
        self.tables[name] = (list(rows), header)

    def manifest(self, seed) -> dict:
        params = {
            k: v for k, v in sorted(vars(self.args).items())
            if k not in ("func", "threads", "out_dir", "figures")
        }
        return {
            "subcommand": self.args.command,
            "params": params,
            "root_seed": seed,
            "version": __version__,
            "inputs": self.inputs,
            "duration_s": time.perf_counter() - self.start,
        }

    def finish(self, result: dict, seed=None) -> None:
        text = dumps(result)
        sys.stdout.write(text)
        out = self.args.out_dir
        manifest = dumps(self.manifest(seed))
        if out is None:
            sys.stderr.write(manifest)
            return
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(text)
        for name, (rows, header, ylabel) in self.curves.items():
            write_curve_csv(out / f"{name}.csv", rows, header)
            if self.args.figures:
                from .plotting import plot_curve

                plot_curve(rows, out / f"{name}.png", ylabel=ylabel)
        for name, (rows, header) in self.tables.items():
            write_curve_csv(out / f"{name}.csv", rows, header)
        (out / "manifest.json").write_text(manifest)


# -- shared argument handling -----------------------------------------------


def _space(args, required: bool = True) -> DesignSpace | None:
    if getattr(args, "pairs", None) is not None:
        if args.n is not None or args.treated is not None:
            raise DomainError("--pairs cannot be combined with --n/--treated")
        return DesignSpace.consecutive_pairs(args.pairs)
    if args.n is None:
        if required:
            raise DomainError("give --n (and optionally --treated) or --pairs")
        return None
    treated = args.n // 2 if args.treated is None else args.treated
    return DesignSpace.complete(args.n, treated)


def _n_candidates(args) -> int:
    if getattr(args, "n_cand", None) is not None:
        if args.n_cand < 1:
            raise DomainError("--n-cand must be positive")
        return int(args.n_cand)
    return count_randomizations(_space(args))


def _columns(text) -> list[str] | None:
    if text is None:
        return None
    cols = [c.strip() for c in text.split(",") if c.strip()]
    if not cols:
        raise DomainError("--columns is empty")
    return cols


def _acceptance(args, space: DesignSpace, x):
    """Acceptance set from the rule flags; the whole candidate set by default."""
    metric = Metric.parse(args.metric)
    if getattr(args, "kasy", False):
        if x is None:
            raise DomainError("--kasy needs covariates")
        return kasy_degenerate_set(space, x, metric)
    if args.threshold is None and (args.pa is None or args.pa >= 1.0):
        if x is None:
            n_cand = count_randomizations(space)
            return acceptance_from_scores(space, metric, np.zeros(n_cand), 1.0, 0.0)
        return build_acceptance_set(space, x, metric, p_a=1.0, threads=args.threads)
    if x is None:
        raise DomainError("an acceptance rule needs covariates (--columns)")
    if args.threshold is not None and args.pa is not None:
        raise DomainError("give only one of --pa and --threshold")
    return build_acceptance_set(
        space, x, metric, p_a=args.pa, threshold=args.threshold, threads=args.threads
    )


def _trial(args, run: Run):
    """Outcome vector, design space and covariates from a data CSV."""
    table = read_table(run.input(args.data))
    y = table.numeric(args.outcome)
    w_raw = table.numeric(args.assignment)
    if not np.all((w_raw == 0) | (w_raw == 1)):
        raise DomainError(f"assignment column {args.assignment!r} must hold 0/1 values")
    n = table.n_rows
    treated = tuple(int(i) for i in np.flatnonzero(w_raw))
    w = AssignmentVector(n, treated)
    if args.pairs is not None:
        space = DesignSpace.consecutive_pairs(args.pairs)
        if space.n != n:
            raise DomainError(f"--pairs {args.pairs} implies {space.n} units but the data has {n}")
    else:
        if not 0 < len(treated) < n:
            raise DomainError("need at least one treated and one control unit")
        space = DesignSpace.complete(n, len(treated))
    cols = _columns(args.columns)
    x = table.matrix(cols) if cols else None
    return OutcomeVector(y, w), space, x


# -- subcommands ------------------------------------------------------------


def cmd_count(args, run: Run):
    space = _space(args)
    n_cand = count_randomizations(space)
    text = f"{n_cand}\n"
    sys.stdout.write(text)
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(dumps({"n_candidates": n_cand}))
        (out / "manifest.json").write_text(dumps(run.manifest(None)))
    else:
        sys.stderr.write(dumps(run.manifest(None)))


def cmd_balance(args, run: Run):
    table = read_table(run.input(args.covariates))
    cols = _columns(args.columns) or table.header
    x = table.matrix(cols)
    n = x.shape[0]
    if args.pairs is not None:
        space = DesignSpace.consecutive_pairs(args.pairs)
        if space.n != n:
            raise DomainError(f"--pairs {args.pairs} implies {space.n} units but the data has {n}")
    else:
        space = DesignSpace.complete(n, n // 2 if args.treated is None else args.treated)
    if args.threshold is None and args.pa is None:
        args.pa = 1.0
    aset = _acceptance(args, space, x)
    result = {"metric": aset.metric.value, "rule": aset.rule, **aset.summary()}
    if aset.tie_count is not None:
        result["tie_count"] = aset.tie_count
    if args.members:
        run.table("members", zip(aset.indices.tolist(), aset.scores.tolist()), ("index", "score"))
    run.finish(result)


def cmd_test(args, run: Run):
    y, space, x = _trial(args, run)
    aset = _acceptance(args, space, x)
    res = randomization_test(y, aset, args.tau0, alternative=args.alternative, seed=args.seed)
    run.finish({**res.to_dict(), "acceptance": aset.summary()}, args.seed)


def cmd_interval(args, run: Run):
    y, space, x = _trial(args, run)
    aset = _acceptance(args, space, x)
    fi = fiducial_interval(y, aset, args.alpha, args.method, seed=args.seed)
    run.finish({**fi.to_dict(), "acceptance": aset.summary()}, args.seed)


def cmd_curve(args, run: Run):
    n_cand = _n_candidates(args)
    grid = heuristic_grid(n_cand, args.points)
    if args.mode == "minp":
        rows = [(p, v, 0.0) for p, v in min_p_value_curve(n_cand, grid)]
        ylabel = "minimum p-value"
    else:
        if args.k is None:
            raise DomainError("--mode variance needs --k")
        rows = [(float(p), analytic_variance_remaining(float(p), args.k), 0.0) for p in grid]
        ylabel = "variance remaining"
    run.curve("curve", rows, ylabel)
    run.finish({"mode": args.mode, "n_candidates": n_cand, "points": len(rows),
                "first": rows[0], "last": rows[-1]})


def cmd_choose(args, run: Run):
    if args.procedure == "apriori":
        if args.beta_target is None:
            raise DomainError("apriori needs --beta-target")
        choice = apriori_p_a(args.beta_target, _n_candidates(args))
        run.finish({
            "procedure": "apriori",
            "p_a": choice.p_a,
            "reference_size": choice.reference_size,
            "min_p_value": choice.min_p_value,
            "n_candidates": choice.n_candidates,
        })
        return
    if args.procedure == "heuristic":
        if args.lam is None:
            raise DomainError("heuristic needs --lambda")
        kw = {}
        if args.v_mode == "empirical":
            table = read_table(run.input(args.covariates)) if args.covariates else None
            if table is None:
                raise DomainError("empirical variance needs --covariates")
            x = table.matrix(_columns(args.columns) or table.header)
            space = DesignSpace.complete(x.shape[0], x.shape[0] // 2 if args.treated is None else args.treated)
            kw = {"x": x, "space": space, "metric": Metric.parse(args.metric)}
            n_cand = count_randomizations(space)
            k = x.shape[1]
        else:
            n_cand = _n_candidates(args)
            k = args.k
        choice = heuristic_p_a(args.lam, k, n_cand, args.v_mode, grid_size=args.points, **kw)
        lam_range = implied_lambda(choice.p_a, k, n_cand, args.v_mode, grid_size=args.points, **kw)
        run.curve("curve", choice.rows(), "objective")
        run.finish({
            "procedure": "heuristic",
            "lambda": args.lam,
            "p_a": choice.p_a,
            "min_p_value": float(choice.min_p[choice.grid == choice.p_a][0]),
            "variance_remaining": float(choice.variance[choice.grid == choice.p_a][0]),
            "implied_lambda": None if lam_range is None else list(lam_range),
            "n_candidates": n_cand,
        })
        return
    # prior-informed design curve
    seed = resolve_seed(args.seed)
    if args.covariates:
        table = read_table(run.input(args.covariates))
        x = table.matrix(_columns(args.columns) or table.header)
        space = DesignSpace.complete(x.shape[0], x.shape[0] // 2 if args.treated is None else args.treated)
        covariates, k = x, x.shape[1]
    else:
        space = _space(args)
        if args.k is None:
            raise DomainError("design without --covariates needs --k")
        k = args.k
        covariates = MVNSpec.isotropic(k)
    beta = MVNSpec(np.full(k, args.beta_mean), np.eye(k) * args.prior_sd**2)
    prior = PriorSpec(beta, args.tau_mean, args.tau_sd, args.noise_sd, covariates, space.n)
    grid = design_grid(count_randomizations(space), args.points, args.min_count)
    curve = design_expected_pvalue(prior, space, grid, args.mc_iters, seed,
                                   metric=args.metric, threads=args.threads)
    run.curve("curve", curve.rows(), "expected p-value")
    run.finish({"procedure": "design", "p_a": curve.argmin_p_a, **curve.to_dict()}, seed)


# -- config-driven subcommands ----------------------------------------------

_STUDY_KEYS = {
    "n_grid", "tau_grid", "replications", "p_a_grid", "grid_points", "seed", "design_mc_iters",
    "truth_mc_iters", "beta", "noise", "noise_is_variance", "prior_sd", "prior_noise_sd",
    "baseline_draws",
}
_SEMI_KEYS = {
    "data", "covariates", "outcome", "arm", "treated_label", "control_label", "fraction",
    "seed", "design_mc_iters", "tau_mc_iters", "grid_points", "min_count", "p_a_grid",
    "synthetic",
}
_SYNTH_KEYS = {"n", "k", "tau", "beta", "noise_sd", "seed"}


def load_config(path, command: str, allowed: set[str], run: Run) -> dict:
    path = run.input(path)
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = cfg.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: key 'schema_version' must be {SCHEMA_VERSION}, got {version!r}")
    kind = cfg.pop("command", command)
    if kind != command:
        raise ConfigError(f"{path}: key 'command' is {kind!r}, expected {command!r}")
    for key in cfg:
        if key not in allowed:
            raise ConfigError(f"{path}: unknown key {key!r}")
    cfg["_dir"] = Path(path).parent
    return cfg


def _study_config(cfg: dict, args) -> StudyConfig:
    kw = {k: v for k, v in cfg.items() if k in _STUDY_KEYS}
    for key in ("n_grid", "tau_grid", "beta", "p_a_grid"):
        if key in kw and kw[key] is not None:
            if not isinstance(kw[key], list):
                raise ConfigError(f"key {key!r} must be a list")
            kw[key] = tuple(kw[key])
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.replications is not None:
        kw["replications"] = args.replications
    kw["seed"] = resolve_seed(kw.get("seed"))
    try:
        return StudyConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args, run: Run):
    cfg = load_config(args.config, "simulate", _STUDY_KEYS, run)
    config = _study_config(cfg, args)
    report = run_selector_study(config, threads=args.threads)
    run.table("cells", report.rows(), ("n", "tau", "bias", "rmse", "baseline_rmse", "relative_rmse"))
    run.finish(report.to_dict(), config.seed)


def cmd_semisynthetic(args, run: Run):
    cfg = load_config(args.config, "semisynthetic", _SEMI_KEYS, run)
    seed = resolve_seed(args.seed if args.seed is not None else cfg.get("seed"))
    if cfg.get("data"):
        path = Path(cfg["data"])
        if not path.is_absolute():
            path = cfg["_dir"] / path
        table = read_table(run.input(path))
        for key in ("covariates", "outcome", "arm"):
            if key not in cfg:
                raise ConfigError(f"missing key {key!r}")
        x = table.matrix(cfg["covariates"])
        y = table.numeric(cfg["outcome"])
        arms = table.text(cfg["arm"])
        names = cfg["covariates"]
        true_tau = None
    else:
        synth = dict(cfg.get("synthetic") or {})
        for key in synth:
            if key not in _SYNTH_KEYS:
                raise ConfigError(f"unknown key 'synthetic.{key}'")
        synth.setdefault("seed", int(child_rng(seed, "synthetic").integers(2**31)))
        x, y, arms = synthetic_trial_table(**synth)
        names = [f"x{i}" for i in range(x.shape[1])]
        true_tau = float(synth.get("tau", 1.0))
    model, idx = semisynthetic_build(
        x, y, arms, float(cfg.get("fraction", 0.1)), seed,
        treated_label=cfg.get("treated_label"), control_label=cfg.get("control_label"), names=names,
    )
    source = model.source(idx)
    space = DesignSpace.complete(idx.size, idx.size // 2)
    n_cand = count_randomizations(space)
    grid = cfg.get("p_a_grid") or design_grid(n_cand, int(cfg.get("grid_points", 12)), int(cfg.get("min_count", 1)))
    curve = expected_pvalue_curve(source, space, grid, int(cfg.get("design_mc_iters", 300)),
                                  child_rng(seed, "design"), threads=args.threads)
    taus = tau_sampling_report(source, space, curve.p_a, int(cfg.get("tau_mc_iters", 300)),
                               child_rng(seed, "tau"))
    run.curve("curve", curve.rows(), "expected p-value")
    run.curve("tau_sd", [(p, s, 0.0) for p, s, _ in taus.rows()], "sd of effect estimate")
    run.finish({
        "n_rows": int(x.shape[0]),
        "subsample_size": int(idx.size),
        "n_candidates": n_cand,
        "coefficients": dict(zip(model.fit.names, model.fit.coef.tolist())),
        "treatment_effect_fit": model.tau_hat,
        "true_tau": true_tau,
        "design": curve.to_dict(),
        "tau_sampling": taus.to_dict(),
    }, seed)


# -- parser -----------------------------------------------------------------


def _add_space(p, treated=True):
    p.add_argument("--n", type=int, help="number of units")
    if treated:
        p.add_argument("--treated", type=int, help="number treated (default n/2)")
    p.add_argument("--pairs", type=int, metavar="K", help="K consecutive matched pairs")


def _add_rule(p):
    p.add_argument("--metric", default="mahalanobis", choices=["m", "mahalanobis"])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pa", type=float, help="acceptance probability")
    g.add_argument("--threshold", type=float, help="balance score cutoff a")
    g.add_argument("--kasy", action="store_true", help="keep only the best-balanced assignment")


def _add_trial(p):
    p.add_argument("--data", required=True, help="CSV with outcome, assignment and covariates")
    p.add_argument("--outcome", default="y")
    p.add_argument("--assignment", default="w")
    p.add_argument("--columns", help="comma-separated covariate columns")
    p.add_argument("--pairs", type=int, metavar="K")
    p.add_argument("--treated", type=int, help=argparse.SUPPRESS)
    _add_rule(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed (default $RERAND_SEED)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out-dir", help="write result.json, curve CSVs and manifest.json here")
    common.add_argument("--figures", action="store_true", help="also render curve PNGs into --out-dir")

    parser = argparse.ArgumentParser(prog="rerand", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", parents=[common], help="number of candidate assignments")
    _add_space(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("balance", parents=[common], help="build an acceptance set from covariates")
    p.add_argument("--covariates", required=True)
    p.add_argument("--columns")
    p.add_argument("--treated", type=int)
    p.add_argument("--pairs", type=int, metavar="K")
    p.add_argument("--members", action="store_true", help="write members.csv (needs --out-dir)")
    _add_rule(p)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("test", parents=[common], help="randomization test of tau = tau0")
    _add_trial(p)
    p.add_argument("--tau0", type=float, default=0.0)
    p.add_argument("--alternative", default="two-sided", choices=["two-sided", "greater", "less"])
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("interval", parents=[common], help="fiducial interval by test inversion")
    _add_trial(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", default="grid_bisection", choices=["grid_bisection", "robbins_monro"])
    p.set_defaults(func=cmd_interval)

    p = sub.add_parser("curve", parents=[common], help="minimum p-value or variance curve")
    _add_space(p)
    p.add_argument("--n-cand", type=int)
    p.add_argument("--mode", default="minp", choices=["minp", "variance"])
    p.add_argument("--k", type=int)
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("choose", parents=[common], help="select an acceptance probability")
    p.add_argument("procedure", choices=["apriori", "heuristic", "design"])
    _add_space(p)
    p.add_argument("--n-cand", type=int)
    p.add_argument("--beta-target", "--beta", dest="beta_target", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--v-mode", default="analytic", choices=["analytic", "empirical"])
    p.add_argument("--covariates")
    p.add_argument("--columns")
    p.add_argument("--metric", default="mahalanobis", choices=["m", "mahalanobis"])
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--mc-iters", type=int, default=200)
    p.add_argument("--beta-mean", type=float, default=0.0)
    p.add_argument("--prior-sd", type=float, default=10.0)
    p.add_argument("--tau-mean", type=float, default=0.0)
    p.add_argument("--tau-sd", type=float, default=10.0)
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.set_defaults(func=cmd_choose)

    p = sub.add_parser("simulate", parents=[common], help="selector study from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--replications", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("semisynthetic", parents=[common], help="imputation-based design study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_semisynthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "points", "absent") is None:
        args.points = 16 if args.procedure == "design" else 512
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.figures and args.out_dir is None:
        parser.error("--figures needs --out-dir")
    if getattr(args, "members", False) and args.out_dir is None:
        parser.error("--members needs --out-dir")
    run = Run(args)
    try:
        args.func(args, run)
    except InadmissibleAssignmentError as exc:
        print(f"rerand: {exc}", file=sys.stderr)
        return EXIT_VALIDITY
    except (DomainError, RerandError) as exc:
        print(f"rerand: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
