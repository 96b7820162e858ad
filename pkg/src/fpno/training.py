"""Newton-snapshot datasets, model training and persistence."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import io
from .exceptions import DataGenFailure, DimensionError, ElementInversion, FormatError
from .grf import GaussianRandomField, GrfSpec
from .linalg import norm2
from .mesh import ProblemKind, mesh_from_descriptor
from .nn.fpno import FPNO
from .problems import make_problem
from .solvers import Outcome, SolveOptions, np_newton

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_rel_l2")
FORCING_SPEC = GrfSpec(mean=0.0, sigma=0.1, ell=0.1)
LOAD_RANGE = (0.0, 2.0)
GUESS_RANGE = (1e-4, 1e-2)
LOAD_STEP = 0.1
VAL_FRACTION = 0.1
MAX_DISCARD_FRACTION = 0.5


@dataclass
class Dataset:
    """Snapshots ``(zeta_j, u_j^(i), u_j^*)`` grouped by initial guess.

    Vectors are full-dof (constrained entries hold their prescribed values,
    residual rows hold zeros there). Snapshots of group ``j`` occupy rows
    ``offsets[j]:offsets[j+1]``.
    """

    kind: str
    mesh_desc: dict
    zeta: np.ndarray
    u_ref: np.ndarray
    offsets: np.ndarray
    iterates: np.ndarray
    residuals: np.ndarray
    val_groups: np.ndarray
    seed: int = 0
    requested: int = 0
    discarded: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_groups(self):
        return len(self.zeta)

    @property
    def num_snapshots(self):
        return len(self.iterates)

    def group_index(self):
        """Group id of every snapshot row."""
        return np.repeat(np.arange(self.num_groups), np.diff(self.offsets))

    def split_groups(self, which):
        if which not in ("train", "val", "all"):
            raise ValueError(f"unknown split {which!r}")
        if which == "all":
            return np.arange(self.num_groups)
        val = self.val_groups.astype(bool)
        return np.flatnonzero(val if which == "val" else ~val)

    def arrays(self, which="train"):
        """``(X, y, residuals, zeta)`` rows for the snapshots of one split."""
        groups = self.split_groups(which)
        gid = self.group_index()
        rows = np.flatnonzero(np.isin(gid, groups))
        owner = gid[rows]
        return (self.iterates[rows], self.u_ref[owner], self.residuals[rows],
                self.zeta[owner])

    def counts(self):
        tr = self.split_groups("train")
        va = self.split_groups("val")
        sizes = np.diff(self.offsets)
        return {"m": self.requested, "groups": self.num_groups, "discarded": self.discarded,
                "snapshots": self.num_snapshots, "train_snapshots": int(sizes[tr].sum()),
                "val_snapshots": int(sizes[va].sum())}

    # -- persistence ------------------------------------------------------

    def to_bytes(self):
        header = {"kind": self.kind, "mesh": self.mesh_desc, "seed": int(self.seed),
                  "requested": int(self.requested), "discarded": int(self.discarded),
                  "meta": self.meta}
        arrays = {"zeta": self.zeta, "u_ref": self.u_ref, "offsets": self.offsets,
                  "iterates": self.iterates, "residuals": self.residuals,
                  "val_groups": self.val_groups}
        return io.dumps("dataset", header, arrays)

    def save(self, path):
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def from_bytes(cls, blob):
        _, head, arrays = io.loads(blob, "dataset")
        try:
            return cls(kind=head["kind"], mesh_desc=head["mesh"], zeta=arrays["zeta"],
                       u_ref=arrays["u_ref"], offsets=arrays["offsets"],
                       iterates=arrays["iterates"], residuals=arrays["residuals"],
                       val_groups=arrays["val_groups"], seed=head["seed"],
                       requested=head["requested"], discarded=head["discarded"],
                       meta=head.get("meta", {}))
        except KeyError as exc:
            raise FormatError(f"dataset container lacks {exc}") from None

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


save_dataset = Dataset.save
load_dataset = Dataset.load


def _initial_guess(field_, problem, rng, target_range=GUESS_RANGE):
    """GRF draw per component on the free dofs, max-norm log-uniform in ``target_range``."""
    d = problem.dofmap.ncomp
    g = np.stack([field_.draw(rng) for _ in range(d)], axis=1).ravel()[problem.dofmap.free_dofs]
    lo, hi = np.log10(target_range[0]), np.log10(target_range[1])
    t = 10.0 ** rng.uniform(lo, hi)
    gmax = np.abs(g).max()
    return g * (t / gmax) if gmax > 0 else g


def _warm_start(mesh, u_t, inner, opts, delta=LOAD_STEP):
    """Solution at the penultimate load of a uniform ramp to ``u_t`` (free dofs).

    The ramp has ``ceil(u_t / delta)`` equal increments; ``None`` when one of
    the intermediate solves fails.
    """
    k = max(1, int(np.ceil(u_t / delta - 1e-12)))
    u = None
    for i in range(1, k):
        problem = make_problem(ProblemKind.NEO_HOOKEAN, mesh, [u_t * i / k])
        rep = np_newton(problem, None, inner, opts, u0=u)
        if rep.outcome is not Outcome.CONVERGED:
            return None
        u = rep.solution
    if u is None:
        u = make_problem(ProblemKind.NEO_HOOKEAN, mesh, [u_t]).initial_guess()
    return u


def generate_dataset(kind, mesh, m, seed=0, opts=None, inner=None,
                     forcing_spec=FORCING_SPEC, load_range=LOAD_RANGE,
                     val_fraction=VAL_FRACTION):
    """Solve ``m`` sampled instances and keep every Newton iterate.

    Group ``j`` draws its parameters and initial guess from the generator
    seeded ``[seed, 0, j]``. Poisson groups start from the scaled random guess.
    Hyperelastic groups add it to the solution of the previous load of a ramp
    in steps of at most ``LOAD_STEP``, and the snapshots are the iterates of
    that final increment. Groups whose solve does not converge are dropped;
    more than half dropped raises :class:`DataGenFailure`.
    """
    kind = ProblemKind.parse(kind)
    if m < 1:
        raise ValueError("need at least one group")
    inner = "LS" if inner is None else inner
    opts = replace(SolveOptions() if opts is None else opts, record_iterates=True)
    field_ = GaussianRandomField(mesh.nodes, forcing_spec)
    zetas, refs, iters, ress, sizes = [], [], [], [], []
    discarded = 0
    for j in range(m):
        rng = np.random.default_rng([seed, 0, j])
        if kind is ProblemKind.NONLINEAR_POISSON:
            zeta = field_.draw(rng)
        else:
            zeta = np.array([rng.uniform(*load_range)])
        problem = make_problem(kind, mesh, zeta)
        u0 = _initial_guess(field_, problem, rng)
        rep = None
        try:
            if kind is ProblemKind.NEO_HOOKEAN:
                base = _warm_start(mesh, float(zeta[0]), inner, replace(opts, record_iterates=False))
                u0 = None if base is None else base + u0
            if u0 is not None:
                rep = np_newton(problem, None, inner, opts, u0=u0)
        except ElementInversion:
            rep = None
        ok = rep is not None and rep.outcome is Outcome.CONVERGED
        if ok:
            # reference accuracy measured against the zero-interior guess
            r_ref = norm2(problem.residual(rep.solution))
            r_zero = norm2(problem.residual(problem.initial_guess()))
            ok = r_ref <= max(opts.rel_tol * r_zero, opts.abs_tol)
        if not ok:
            discarded += 1
            log.info("group %d discarded (%s)", j, "inversion" if rep is None else rep.outcome.value)
            continue
        u_star = problem.full(rep.solution)
        zetas.append(np.asarray(zeta, dtype=float))
        refs.append(u_star)
        for u in rep.iterates:
            iters.append(problem.full(u))
            res = np.zeros(problem.dofmap.num_dofs)
            res[problem.dofmap.free_dofs] = problem.residual(u)
            ress.append(res)
        sizes.append(len(rep.iterates))
    if discarded > MAX_DISCARD_FRACTION * m:
        raise DataGenFailure(f"{discarded} of {m} groups failed to converge")
    ngroups = len(sizes)
    # at least one group on each side once there are two groups
    n_val = min(max(int(round(val_fraction * ngroups)), 1), ngroups - 1) if ngroups > 1 else 0
    val = np.zeros(ngroups, dtype=np.int64)
    val[np.random.default_rng([seed, 1]).permutation(ngroups)[:n_val]] = 1
    return Dataset(kind=kind.value, mesh_desc=mesh.descriptor(), zeta=np.array(zetas),
                   u_ref=np.array(refs), offsets=np.concatenate([[0], np.cumsum(sizes)]),
                   iterates=np.array(iters), residuals=np.array(ress), val_groups=val,
                   seed=int(seed), requested=int(m), discarded=int(discarded),
                   meta={"inner": inner})


def _mesh_params(desc):
    hole = desc.get("hole")
    if hole is not None:
        hole = (*hole["center"], *hole["semi_axes"])
    return {"n": int(desc["n"]), "hole": hole}


def train(model, data, config=None):
    """Fit ``model`` on the training split with early stopping on the validation split.

    ``config`` holds estimator parameter overrides. The model is rebound to the
    dataset's problem kind and mesh. Returns ``(model, history)``.
    """
    params = {"kind": data.kind, **_mesh_params(data.mesh_desc), **(config or {})}
    model.set_params(**params)
    X, y, R, Z = data.arrays("train")
    if len(X) == 0:
        raise ValueError("dataset has no training snapshots")
    val = data.arrays("val")
    eval_set = val if len(val[0]) else None
    model.fit(X, y, R, Z, eval_set=eval_set)
    return model, model.history_


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([int(row["epoch"]), f"{row['train_loss']:.17g}",
                             f"{row['val_rel_l2']:.17g}"])


def read_history(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_rel_l2": float(r["val_rel_l2"])} for r in reader]


# -- model persistence ---------------------------------------------------

def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _from_json(name, value):
    if isinstance(value, list):
        return tuple(value)
    return value


def model_to_bytes(model):
    if not hasattr(model, "network_"):
        raise ValueError("model has not been initialised")
    params = {k: _jsonable(v) for k, v in model.get_params().items()}
    net = model.network_
    header = {
        "params": params,
        "mesh": model.mesh_.descriptor(),
        "spec": {"n_dofs": int(model.n_dofs_), "n_zeta": int(model.n_zeta_),
                 "ncomp": int(model.ncomp_), "latent": int(model.latent),
                 "activations": "gelu hidden, linear heads, softmax gates",
                 "shapes": [list(p.shape) for p in net.parameters()]},
        "fit": {"best_epoch": int(getattr(model, "best_epoch_", -1)),
                "stopped_epoch": int(getattr(model, "stopped_epoch_", -1)),
                "early_stopped": bool(getattr(model, "early_stopped_", False)),
                "best_val": float(getattr(model, "best_val_", float("nan")))},
    }
    arrays = {f"p{i:04d}": p for i, p in enumerate(net.parameters())}
    return io.dumps("model", header, arrays)


def model_from_bytes(blob):
    _, head, arrays = io.loads(blob, "model")
    try:
        params = {k: _from_json(k, v) for k, v in head["params"].items()}
        model = FPNO(**params).initialize()
        net_params = model.network_.parameters()
        if len(net_params) != len(arrays):
            raise FormatError("parameter count does not match the architecture")
        for i, p in enumerate(net_params):
            saved = arrays[f"p{i:04d}"]
            if saved.shape != p.shape:
                raise FormatError(f"parameter {i} has shape {saved.shape}, expected {p.shape}")
            p[...] = saved
        if model.mesh_.descriptor() != head["mesh"]:
            raise FormatError("stored mesh descriptor does not match the rebuilt mesh")
        fit = head["fit"]
    except (KeyError, TypeError, DimensionError) as exc:
        raise FormatError(f"malformed model container: {exc}") from None
    model.best_epoch_ = fit["best_epoch"]
    model.stopped_epoch_ = fit["stopped_epoch"]
    model.early_stopped_ = fit.get("early_stopped", False)
    model.best_val_ = fit["best_val"]
    return model


def save_model(model, path):
    blob = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def dataset_mesh(data):
    return mesh_from_descriptor(data.mesh_desc)
