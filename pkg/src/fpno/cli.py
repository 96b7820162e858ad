"""Command-line front end: ``fpno {mesh-info,gen-data,train,solve,bench}``.

Experiments are described by INI files (see ``configs/``). Exit codes: 0 for
success or a valid experimental outcome (divergence included), 2 for usage or
configuration errors, 3 for runtime aborts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
import time
from dataclasses import dataclass

from .exceptions import DataGenFailure, FormatError, FpnoError, TrainingAborted
from .grf import GaussianRandomField, GrfSpec
from .mesh import DEFAULT_HOLE, ElemKind, Ellipse, ProblemKind, build_unit_square_mesh
from .nn.fpno import FPNO
from .problems import NeoHookeanProblem, PoissonProblem
from .solvers import (LineSearchOptions, Outcome, SolveOptions, TrustRegionOptions,
                      incremental_loading, np_newton)
from .training import Dataset, generate_dataset, load_model, save_model, train, write_history

log = logging.getLogger("fpno")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
METHODS = ("newton-ls", "newton-tr", "np-newton-ls", "np-newton-tr", "ic-newton-ls")
CASES = ("I", "II", "III")
BENCH_COLUMNS = ("case", "method", "iters", "outcome", "time_s", "speedup_pct")


class ConfigError(FpnoError, ValueError):
    pass


# -- configuration ---------------------------------------------------------

def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _words(text):
    return [t for t in text.replace(",", " ").split() if t]


def _hole(text):
    text = text.strip().lower()
    if text in ("", "none"):
        return None
    if text == "default":
        return DEFAULT_HOLE
    vals = _floats(text)
    if len(vals) != 4:
        raise ConfigError("hole must be 'none', 'default' or 'cx, cy, a, b'")
    return Ellipse(vals[:2], vals[2:])


@dataclass
class ExperimentConfig:
    kind: ProblemKind
    seed: int
    out: str
    train_n: int
    solve_n: int
    hole: Ellipse | None
    grf: GrfSpec
    m: int
    load_range: tuple
    solver: SolveOptions
    ic_delta: float
    model_params: dict
    case_seed: int
    case_sigma: dict
    case_load: dict
    bench_cases: list
    bench_methods: list
    baseline: str

    @property
    def elem_kind(self):
        return ElemKind.P1_TRI if self.kind is ProblemKind.NONLINEAR_POISSON else ElemKind.Q1_QUAD

    def mesh(self, which="solve"):
        n = self.solve_n if which == "solve" else self.train_n
        return build_unit_square_mesh(n, self.elem_kind, hole=self.hole)

    def path(self, name):
        return os.path.join(self.out, name)


def load_config(path, seed=None, out=None, strict_paper=False):
    """Parse an experiment INI file; command-line flags override file values."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
        ex = cp["experiment"]
        kind = ProblemKind.parse(ex.get("problem"))
        base_dir = os.path.dirname(os.path.abspath(path))
        out_dir = out if out is not None else os.path.join(base_dir, ex.get("out", "out"))
        msh = cp["mesh"]
        grf = cp["grf"] if cp.has_section("grf") else {}
        data = cp["data"] if cp.has_section("data") else {}
        sol = cp["solver"] if cp.has_section("solver") else {}
        tr = cp["training"] if cp.has_section("training") else {}
        cases = cp["cases"] if cp.has_section("cases") else {}
        bench = cp["bench"] if cp.has_section("bench") else {}
        train_n = int(msh.get("train_n", "16"))
        hole = _hole(msh.get("hole", "none"))
        solver = SolveOptions(
            abs_tol=float(sol.get("abs_tol", "1e-15")),
            rel_tol=float(sol.get("rel_tol", "1e-9")),
            max_iters=int(sol.get("max_iters", "200")),
            divergence_cap=float(sol.get("divergence_cap", "1e4")),
            strict_paper=strict_paper or sol.get("strict_paper", "false").lower() == "true",
            ls=LineSearchOptions(), tr=TrustRegionOptions())
        model_params = {"kind": kind.value, "n": train_n,
                        "hole": None if hole is None else (*hole.center, *hole.semi_axes)}
        for key, conv in (("scaling_hidden", _ints), ("branch_hidden", _ints),
                          ("feature_hidden", _ints), ("trunk_hidden", _ints),
                          ("latent", int), ("se_reduction", int), ("learning_rate", float),
                          ("weight_decay", float), ("batch_size", int), ("max_epochs", int),
                          ("patience", int), ("loss_eps", float), ("random_state", int),
                          ("verbose", int)):
            if key in tr:
                model_params[key] = conv(tr[key])
        default_methods = ("newton-ls, np-newton-ls" if kind is ProblemKind.NONLINEAR_POISSON
                           else "newton-tr, ic-newton-ls, np-newton-ls, np-newton-tr")
        cfg = ExperimentConfig(
            kind=kind,
            seed=int(ex.get("seed", "0")) if seed is None else int(seed),
            out=out_dir,
            train_n=train_n,
            solve_n=int(msh.get("solve_n", str(train_n))),
            hole=hole,
            grf=GrfSpec(mean=float(grf.get("mean", "0")), sigma=float(grf.get("sigma", "0.1")),
                        ell=float(grf.get("ell", "0.1"))),
            m=int(data.get("m", "200")),
            load_range=_floats(data.get("load_range", "0, 2")),
            solver=solver,
            ic_delta=float(sol.get("ic_delta", "0.1")),
            model_params=model_params,
            case_seed=int(cases.get("seed", "1000")),
            case_sigma={"II": float(cases.get("sigma_ii", "0.1")),
                        "III": float(cases.get("sigma_iii", "1.0"))},
            case_load={"I": float(cases.get("load_i", "0.1")),
                       "II": float(cases.get("load_ii", "1.0"))},
            bench_cases=_words(bench.get("cases", "I, II, III" if kind is
                                         ProblemKind.NONLINEAR_POISSON else "I, II")),
            bench_methods=_words(bench.get("methods", default_methods)),
            baseline=bench.get("baseline", "newton-ls" if kind is ProblemKind.NONLINEAR_POISSON
                               else "newton-tr"),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing section or key {exc}") from None
    except (ValueError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for c in cfg.bench_cases:
        _check_case(cfg, c)
    for meth in cfg.bench_methods + [cfg.baseline]:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r} in [bench]")
    return cfg


def _check_case(cfg, case):
    allowed = CASES if cfg.kind is ProblemKind.NONLINEAR_POISSON else CASES[:2]
    if case not in allowed:
        raise ConfigError(f"case {case!r} not defined for {cfg.kind.value}; "
                          f"choose from {', '.join(allowed)}")


# -- experiment pieces ---------------------------------------------------------

def case_problem(cfg, case, mesh):
    """Benchmark instance: Poisson forcing (I: f = 1, II/III: GRF) or elastic load."""
    _check_case(cfg, case)
    if cfg.kind is ProblemKind.NONLINEAR_POISSON:
        if case == "I":
            return PoissonProblem(mesh, 1.0)
        spec = GrfSpec(mean=0.0, sigma=cfg.case_sigma[case], ell=cfg.grf.ell)
        return PoissonProblem(mesh, GaussianRandomField(mesh.nodes, spec).sample(cfg.case_seed))
    return NeoHookeanProblem(mesh, cfg.case_load[case])


def run_method(cfg, method, problem, model=None):
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    opts = cfg.solver
    if method == "ic-newton-ls":
        if not isinstance(problem, NeoHookeanProblem):
            raise ConfigError("incremental loading needs the hyperelastic problem")
        return incremental_loading(problem.with_top_displacement, problem.params.u_t,
                                   cfg.ic_delta, "LS", opts)
    inner = "TR" if method.endswith("tr") else "LS"
    return np_newton(problem, model if method.startswith("np-") else None, inner, opts)


def _require_model(cfg, methods):
    if not any(m.startswith("np-") for m in methods):
        return None
    path = cfg.path("model.bin")
    if not os.path.isfile(path):
        raise ConfigError(f"model file {path} not found; run 'train' first")
    return load_model(path)


def speedup_pct(t_base, t_new, base_converged=True, new_converged=True):
    """``(t_base / t_new - 1) * 100`` as a CSV field.

    ``inf`` when only the new method converged, empty when the new method failed.
    """
    if not new_converged:
        return ""
    if not base_converged:
        return "inf"
    return format((t_base / t_new - 1.0) * 100.0, ".17g")


# -- commands ------------------------------------------------------------

def cmd_mesh_info(cfg, args):
    mesh = cfg.mesh("train" if args.train_mesh else "solve")
    print(mesh.summary())
    return EXIT_OK


def cmd_gen_data(cfg, args):
    os.makedirs(cfg.out, exist_ok=True)
    mesh = cfg.mesh("train")
    t0 = time.perf_counter()
    data = generate_dataset(cfg.kind, mesh, cfg.m, seed=cfg.seed, opts=cfg.solver,
                            forcing_spec=cfg.grf, load_range=tuple(cfg.load_range))
    data.save(cfg.path("dataset.bin"))
    c = data.counts()
    print(f"m: {c['m']}")
    print(f"groups kept: {c['groups']}")
    print(f"discarded: {c['discarded']}")
    print(f"snapshots: {c['snapshots']} (train {c['train_snapshots']} / val {c['val_snapshots']})")
    print(f"time_s: {time.perf_counter() - t0:.3f}")
    print(f"dataset: {cfg.path('dataset.bin')}")
    return EXIT_OK


def cmd_train(cfg, args):
    path = cfg.path("dataset.bin")
    if not os.path.isfile(path):
        raise ConfigError(f"dataset {path} not found; run 'gen-data' first")
    data = Dataset.load(path)
    model = FPNO(**cfg.model_params)
    t0 = time.perf_counter()
    try:
        train(model, data)
    except TrainingAborted as exc:
        if exc.model is not None:
            save_model(exc.model, cfg.path("model.bin"))
        if exc.history is not None:
            write_history(exc.history, cfg.path("history.csv"))
        print(f"training aborted: {exc}; last good checkpoint kept", file=sys.stderr)
        return EXIT_ABORT
    save_model(model, cfg.path("model.bin"))
    write_history(model.history_, cfg.path("history.csv"))
    print(f"epochs run: {model.stopped_epoch_ + 1}")
    reason = "early stop (patience)" if model.early_stopped_ else "max_epochs reached"
    print(f"stopped at epoch: {model.stopped_epoch_} ({reason})")
    print(f"best epoch: {model.best_epoch_}")
    print(f"best val_rel_l2: {model.best_val_:.6g}")
    print(f"time_s: {time.perf_counter() - t0:.3f}")
    print(f"model: {cfg.path('model.bin')}")
    return EXIT_OK


def cmd_solve(cfg, args):
    os.makedirs(cfg.out, exist_ok=True)
    _check_case(cfg, args.case)
    model = _require_model(cfg, [args.method])
    problem = case_problem(cfg, args.case, cfg.mesh("solve"))
    rep = run_method(cfg, args.method, problem, model)
    out = cfg.path(f"solve_{args.case}_{args.method}.csv")
    rep.write_csv(out)
    print(f"outcome: {rep.outcome.value}")
    print(f"iterations: {rep.iterations}")
    print(f"final rel_res: {rep.relative_history()[-1]:.3e}")
    print(f"report: {out}")
    return EXIT_OK


def bench_rows(cfg, model=None):
    """Run the case x method matrix; rows come back in declared order."""
    mesh = cfg.mesh("solve")
    methods = [cfg.baseline] + [m for m in cfg.bench_methods if m != cfg.baseline]
    rows = []
    for case in cfg.bench_cases:
        problem = case_problem(cfg, case, mesh)
        base = None
        for method in methods:
            try:
                rep = run_method(cfg, method, problem, model)
                ok = rep.outcome is Outcome.CONVERGED
                row = {"case": case, "method": method, "iters": rep.iterations,
                       "outcome": rep.outcome.value, "time_s": rep.wall_time, "ok": ok}
            except FpnoError as exc:
                log.warning("case %s method %s failed: %s", case, method, exc)
                row = {"case": case, "method": method, "iters": "", "outcome": "ERROR",
                       "time_s": math.nan, "ok": False}
            if method == cfg.baseline:
                base = row
                row["speedup_pct"] = ""
            else:
                row["speedup_pct"] = speedup_pct(base["time_s"], row["time_s"], base["ok"],
                                                 row["ok"])
            rows.append(row)
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            t = r["time_s"]
            w.writerow([r["case"], r["method"], r["iters"], r["outcome"],
                        "" if not math.isfinite(t) else format(t, ".17g"), r["speedup_pct"]])


def cmd_bench(cfg, args):
    os.makedirs(cfg.out, exist_ok=True)
    model = _require_model(cfg, cfg.bench_methods)
    rows = bench_rows(cfg, model)
    out = cfg.path("bench.csv")
    write_bench_csv(rows, out)
    for r in rows:
        print(f"{r['case']:>4} {r['method']:<14} {r['outcome']:<20} iters={r['iters']} "
              f"speedup={r['speedup_pct'] or '-'}")
    print(f"summary: {out}")
    return EXIT_OK


COMMANDS = {"mesh-info": cmd_mesh_info, "gen-data": cmd_gen_data, "train": cmd_train,
            "solve": cmd_solve, "bench": cmd_bench}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment INI file")
    common.add_argument("--seed", type=int, help="override the dataset seed of the config")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--strict-paper", action="store_true",
                        help="always accept the preconditioned point (no residual safeguard)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="fpno", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("mesh-info", parents=[common], help="print mesh node/element/tag counts")
    p.add_argument("--train-mesh", action="store_true", help="describe the training mesh")
    sub.add_parser("gen-data", parents=[common], help="generate the Newton snapshot dataset")
    sub.add_parser("train", parents=[common], help="train the neural preconditioner")
    p = sub.add_parser("solve", parents=[common], help="solve one benchmark case")
    p.add_argument("--case", required=True, choices=CASES)
    p.add_argument("--method", required=True, choices=METHODS)
    sub.add_parser("bench", parents=[common], help="run the case x method matrix")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          strict_paper=args.strict_paper)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"fpno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataGenFailure, FormatError, FpnoError) as exc:
        print(f"fpno: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
