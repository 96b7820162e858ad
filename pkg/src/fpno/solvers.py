"""Newton solvers: line search, dogleg trust region, incremental loading, and the
neural right-preconditioned variants.

Every solver works on free-dof vectors of a problem exposing ``residual(u)``
and ``jacobian(u)`` (the latter returning a square sparse matrix), and returns
a :class:`SolveReport`.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ElementInversion, ModelNaN, SingularMatrix
from .linalg import lu_factorize, norm2, solve
from .nn.fpno import fpno_apply

log = logging.getLogger(__name__)

MAX_SINGULAR_TR_STEPS = 5


class Outcome(str, enum.Enum):
    CONVERGED = "CONVERGED"
    DIVERGED = "DIVERGED"
    MAX_ITERS = "MAX_ITERS"
    LINEAR_SOLVE_FAILED = "LINEAR_SOLVE_FAILED"


class Status(str, enum.Enum):
    CONTINUE = "CONTINUE"
    CONVERGED = "CONVERGED"
    DIVERGED = "DIVERGED"


@dataclass(frozen=True)
class LineSearchOptions:
    c1: float = 1e-4
    lam_min: float = 1e-12
    max_backtracks: int = 40


@dataclass(frozen=True)
class TrustRegionOptions:
    delta0: float = 1.0
    delta_max: float = 1e3
    eta_accept: float = 1e-4
    shrink: float = 0.25
    grow: float = 2.0

    def __post_init__(self):
        if not (self.shrink < 1.0 < self.grow):
            raise ValueError("need shrink < 1 < grow")


@dataclass(frozen=True)
class SolveOptions:
    abs_tol: float = 1e-15
    rel_tol: float = 1e-9
    max_iters: int = 200
    ls: LineSearchOptions = field(default_factory=LineSearchOptions)
    tr: TrustRegionOptions = field(default_factory=TrustRegionOptions)
    divergence_cap: float = 1e4
    record_iterates: bool = False
    # apply the learned preconditioner even when it increases the residual
    strict_paper: bool = False

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.divergence_cap > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class SolveReport:
    outcome: Outcome
    residual_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    precond_used: list = field(default_factory=list)
    wall_time: float = 0.0
    solution: np.ndarray | None = None
    iterates: list | None = None
    message: str = ""
    # per-increment reports of an incremental-loading solve
    increments: list | None = None

    @property
    def iterations(self):
        """Newton steps taken; restart rows of concatenated histories don't count."""
        return sum(1 for s in self.step_history if s is not None)

    @property
    def converged(self):
        return self.outcome is Outcome.CONVERGED

    def relative_history(self):
        r0 = self.residual_history[0]
        if r0 == 0:
            return [0.0 for _ in self.residual_history]
        return [r / r0 for r in self.residual_history]

    def to_csv(self):
        """Rows ``iter,res_norm,rel_res,step,precond_used``.

        ``step`` and ``precond_used`` are empty on rows that start a solve.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "res_norm", "rel_res", "step", "precond_used"])
        rel = self.relative_history()
        rows = zip(self.residual_history, rel, self.step_history, self.precond_used)
        for i, (r, q, step, used) in enumerate(rows):
            writer.writerow([i, _fmt(r), _fmt(q), "" if step is None else _fmt(step),
                             "" if used is None else str(int(used))])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(x):
    return format(float(x), ".17g")


def check_convergence(r_norm, r0_norm, opts=SolveOptions()):
    if r0_norm == 0:
        return Status.CONVERGED
    if r_norm <= opts.abs_tol or r_norm <= opts.rel_tol * r0_norm:
        return Status.CONVERGED
    if not math.isfinite(r_norm) or r_norm > opts.divergence_cap * r0_norm:
        return Status.DIVERGED
    return Status.CONTINUE


def _try_residual(problem, u):
    try:
        r = problem.residual(u)
    except ElementInversion:
        return None
    if not np.all(np.isfinite(r)):
        return None
    return r


def cubic_backtrack(problem, u, r, p, slope, opts):
    """Backtracking on ``phi = 0.5 |F|^2`` with a quadratic first and cubic later
    interpolants, each new step clamped to ``[0.1, 0.5]`` of the previous one.

    Returns ``(lam, u_new, r_new, accepted)``. Element inversion at a trial point
    counts as insufficient decrease. When no step passes the Armijo test before
    ``lam`` drops below ``lam_min`` the last trial step is taken anyway.
    """
    ls = opts.ls
    phi0 = 0.5 * float(np.dot(r, r))
    lam = 1.0
    lam_prev = phi_prev = None
    for _ in range(ls.max_backtracks + 1):
        u_t = u + lam * p
        r_t = _try_residual(problem, u_t)
        phi_t = math.inf if r_t is None else 0.5 * float(np.dot(r_t, r_t))
        if phi_t <= phi0 + ls.c1 * lam * slope:
            return lam, u_t, r_t, True
        if lam <= ls.lam_min:
            break
        if not math.isfinite(phi_t):
            lam_new = 0.1 * lam
        elif lam_prev is None or not math.isfinite(phi_prev):
            lam_new = -slope * lam * lam / (2.0 * (phi_t - phi0 - lam * slope))
        else:
            lam_new = _cubic_step(lam, phi_t, lam_prev, phi_prev, phi0, slope)
        if not math.isfinite(lam_new):
            lam_new = 0.1 * lam
        lam_prev, phi_prev = lam, phi_t
        lam = max(min(lam_new, 0.5 * lam), 0.1 * lam, ls.lam_min)
    if r_t is None:
        return lam, u_t, None, False
    return lam, u_t, r_t, False


def _cubic_step(lam, phi, lam_p, phi_p, phi0, slope):
    t1 = phi - phi0 - lam * slope
    t2 = phi_p - phi0 - lam_p * slope
    denom = lam - lam_p
    a = (t1 / lam ** 2 - t2 / lam_p ** 2) / denom
    b = (-lam_p * t1 / lam ** 2 + lam * t2 / lam_p ** 2) / denom
    if a == 0.0:
        return -slope / (2.0 * b)
    disc = b * b - 3.0 * a * slope
    if disc < 0:
        return 0.5 * lam
    if b <= 0:
        return (-b + math.sqrt(disc)) / (3.0 * a)
    return -slope / (b + math.sqrt(disc))


def dogleg_step(J, r, delta, fac=None):
    """Dogleg minimiser of ``0.5 |r + J s|^2`` over ``|s| <= delta``.

    ``fac`` is an LU factorisation of ``J`` or ``None`` when it is singular, in
    which case only the Cauchy direction is used.
    """
    g = J.T @ r
    gnorm = norm2(g)
    if fac is not None:
        pn = solve(fac, -r)
        if norm2(pn) <= delta:
            return pn
    if gnorm == 0.0:
        return np.zeros_like(r)
    Jg = J @ g
    jg2 = float(np.dot(Jg, Jg))
    if jg2 == 0.0:
        return -(delta / gnorm) * g
    pc = -(gnorm * gnorm / jg2) * g
    pcn = norm2(pc)
    if pcn >= delta:
        return -(delta / gnorm) * g
    if fac is None:
        return pc
    d = pn - pc
    a = float(np.dot(d, d))
    b = 2.0 * float(np.dot(pc, d))
    c = pcn * pcn - delta * delta
    tau = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    return pc + tau * d


class _TrustRegion:
    def __init__(self, opts):
        self.opts = opts
        self.delta = opts.tr.delta0

    def step(self, problem, u, r):
        """One trust-region iteration from ``u``; returns ``(u, r, delta_used, ok)``."""
        tr = self.opts.tr
        J = problem.jacobian(u)
        try:
            fac = lu_factorize(J)
        except SingularMatrix:
            fac = None
        delta = self.delta
        s = dogleg_step(J, r, delta, fac)
        model = r + J @ s
        pred = 0.5 * float(np.dot(r, r)) - 0.5 * float(np.dot(model, model))
        u_t = u + s
        r_t = _try_residual(problem, u_t)
        if r_t is None or pred <= 0:
            rho = -math.inf
        else:
            ared = 0.5 * float(np.dot(r, r)) - 0.5 * float(np.dot(r_t, r_t))
            rho = ared / pred
        snorm = norm2(s)
        if rho < 0.25:
            self.delta = tr.shrink * delta
        elif rho > 0.75 and snorm >= 0.99 * delta:
            self.delta = min(tr.grow * delta, tr.delta_max)
        if rho > tr.eta_accept:
            return u_t, r_t, delta, fac is not None
        return u, r, delta, fac is not None


def _ls_step(problem, u, r, opts):
    J = problem.jacobian(u)
    fac = lu_factorize(J)
    p = solve(fac, -r)
    slope = float(np.dot(r, J @ p))
    lam, u_new, r_new, _ = cubic_backtrack(problem, u, r, p, slope, opts)
    return u_new, r_new, lam


def newton_ls(problem, u0=None, opts=SolveOptions()):
    """Newton's method with cubic backtracking line search."""
    return np_newton(problem, None, "LS", opts, u0=u0)


def newton_tr(problem, u0=None, opts=SolveOptions()):
    """Newton's method globalised by a dogleg trust region."""
    return np_newton(problem, None, "TR", opts, u0=u0)


def np_newton(problem, model, inner="LS", opts=SolveOptions(), u0=None, transfer=None):
    """Right-preconditioned Newton: ``v = M(u)`` followed by one inner step from ``v``.

    With ``model=None`` this is the plain inner solver. Unless
    ``opts.strict_paper`` is set, a preconditioned point whose residual exceeds
    that of ``u`` is discarded for the iteration.
    """
    inner = str(inner).upper()
    if inner not in ("LS", "TR"):
        raise ValueError(f"inner solver must be LS or TR, got {inner!r}")
    start = time.perf_counter()
    u = problem.initial_guess() if u0 is None else np.array(u0, dtype=float)
    report = SolveReport(outcome=Outcome.MAX_ITERS)
    if opts.record_iterates:
        report.iterates = [u.copy()]
    r = _try_residual(problem, u)
    if r is None:
        report.outcome = Outcome.DIVERGED
        report.message = "initial guess not admissible"
        report.solution = u
        return report
    r0 = norm2(r)
    rnorm = r0
    report.residual_history.append(r0)
    report.step_history.append(None)
    report.precond_used.append(None)
    status = check_convergence(r0, r0, opts)
    tr = _TrustRegion(opts) if inner == "TR" else None
    use_model = model is not None
    singular_streak = 0

    for _ in range(opts.max_iters):
        if status is not Status.CONTINUE:
            break
        v, rv, used = u, r, False
        if use_model:
            try:
                v_pre = fpno_apply(model, u, problem, residual=r, transfer=transfer)
            except ModelNaN:
                log.warning("model produced non-finite output; falling back to plain Newton")
                use_model = False
                report.message = "model NaN: preconditioner disabled"
            else:
                rv_pre = _try_residual(problem, v_pre)
                if rv_pre is not None and (opts.strict_paper or norm2(rv_pre) <= rnorm):
                    v, rv, used = v_pre, rv_pre, True
        try:
            if tr is None:
                u_new, r_new, step = _ls_step(problem, v, rv, opts)
            else:
                u_new, r_new, step, factored = tr.step(problem, v, rv)
                singular_streak = 0 if factored else singular_streak + 1
                if singular_streak > MAX_SINGULAR_TR_STEPS:
                    raise SingularMatrix("Jacobian singular on consecutive iterations")
        except SingularMatrix:
            report.outcome = Outcome.LINEAR_SOLVE_FAILED
            report.message = "singular Jacobian"
            break
        if r_new is None:
            report.outcome = Outcome.DIVERGED
            report.message = "element inversion at accepted step"
            status = Status.DIVERGED
            break
        report.step_history.append(step)
        report.precond_used.append(used)
        u, r = u_new, r_new
        rnorm = norm2(r)
        report.residual_history.append(rnorm)
        if opts.record_iterates:
            report.iterates.append(u.copy())
        status = check_convergence(rnorm, r0, opts)
    if status is Status.CONVERGED:
        report.outcome = Outcome.CONVERGED
    elif status is Status.DIVERGED:
        report.outcome = Outcome.DIVERGED
    if report.outcome is Outcome.DIVERGED and not report.message:
        report.message = "relative residual exceeded the divergence cap"
    report.solution = u
    report.wall_time = time.perf_counter() - start
    return report


def incremental_loading(problem_family, u_t_total, delta=0.1, inner="LS",
                        opts=SolveOptions(), model=None):
    """Ramp the top displacement in steps of ``delta``, warm-starting each solve.

    ``problem_family(u_t)`` builds the problem at load ``u_t``. Residual
    histories of the increments are concatenated.
    """
    steps = u_t_total / delta
    nsteps = int(round(steps))
    if nsteps < 1 or abs(steps - nsteps) > 1e-12 * max(1.0, abs(steps)):
        raise ValueError(f"delta={delta} does not divide u_t={u_t_total}")
    start = time.perf_counter()
    total = SolveReport(outcome=Outcome.CONVERGED)
    u = None
    increments = []
    for k in range(1, nsteps + 1):
        problem = problem_family(k * delta if k < nsteps else u_t_total)
        rep = np_newton(problem, model, inner, opts, u0=u)
        increments.append(rep)
        total.residual_history.extend(rep.residual_history)
        total.step_history.extend(rep.step_history)
        total.precond_used.extend(rep.precond_used)
        u = rep.solution
        if not rep.converged:
            total.outcome = Outcome.DIVERGED
            total.message = f"increment {k} ended {rep.outcome.value}"
            break
    total.solution = u
    total.increments = increments
    total.wall_time = time.perf_counter() - start
    return total
