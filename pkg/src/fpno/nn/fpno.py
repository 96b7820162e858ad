"""Fixed-point neural operator and its scikit-learn style estimator.

For an iterate ``u`` with residual ``r = F(u)`` the operator returns

    G(u) = u + eta * G_B(u, zeta),   eta = tanh(|r|_2 * N(r / |r|_2)),

so a root of ``F`` is a fixed point and ``eta`` may take either sign.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import DimensionError, ModelNaN, StateError, TrainingAborted
from ..linalg import norm2
from ..mesh import (ElemKind, Ellipse, ProblemKind, boundary_dofs, build_transfer,
                    build_unit_square_mesh)
from .layers import Module, resnet
from .mionet import MioNet
from .optim import AdamW, EarlyStopping, rel_mse_loss, relative_l2

log = logging.getLogger(__name__)


class FpnoNetwork(Module):
    """Scaling network ``N`` and MIONet backbone ``G_B`` over a fixed mesh."""

    def __init__(self, n_dofs, n_zeta, ncomp, scaling_hidden, branch_hidden, feature_hidden,
                 trunk_hidden, latent, reduction=4, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.scaling = resnet([n_dofs, *scaling_hidden, 1], se=True, reduction=reduction,
                              rng=rng, zero_last=True)
        self.backbone = MioNet([n_dofs, *branch_hidden, ncomp * latent],
                               [n_zeta, *feature_hidden, latent],
                               [2, *trunk_hidden, latent],
                               latent=latent, ncomp=ncomp, reduction=reduction, rng=rng)
        self._cache = None

    def parameters(self):
        return self.scaling.parameters() + self.backbone.parameters()

    def gradients(self):
        return self.scaling.gradients() + self.backbone.gradients()

    def step_size(self, r_unit, r_norm):
        return np.tanh(r_norm * self.scaling.forward(r_unit)[:, 0])

    def forward(self, u, r_unit, r_norm, zeta, coords, mask):
        """Batched ``u + eta * mask * G_B(u, zeta)``; ``mask`` zeroes constrained dofs."""
        s = self.scaling.forward(r_unit)[:, 0]
        eta = np.tanh(r_norm * s)
        corr = self.backbone.forward(u, zeta, coords) * mask
        self._cache = (eta, corr, r_norm, mask)
        return u + eta[:, None] * corr

    def backward(self, dpred):
        if self._cache is None:
            raise StateError("backward called before forward")
        eta, corr, r_norm, mask = self._cache
        deta = np.sum(dpred * corr, axis=1)
        ds = deta * (1.0 - eta * eta) * r_norm
        self.scaling.backward(ds[:, None])
        self.backbone.backward(eta[:, None] * dpred * mask)


def _unit_residuals(residuals):
    norms = np.linalg.norm(residuals, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return residuals / safe[:, None], norms


def paper_architecture(kind):
    """Layer widths of the full-size networks (hidden widths and latent size)."""
    ProblemKind.parse(kind)
    return dict(scaling_hidden=(512, 512), branch_hidden=(512, 512, 512),
                feature_hidden=(512, 512, 512), trunk_hidden=(512, 512, 512), latent=256)


class FPNO(TransformerMixin, BaseEstimator):
    """Fixed-point neural operator trained on Newton snapshots of one mesh.

    ``fit`` and ``transform`` take full-dof iterates ``X`` (one row per snapshot)
    together with their residuals and PDE parameters ``zeta``; ``y`` holds the
    reference solutions.

    Parameters
    ----------
    kind : {"poisson", "neo_hookean"}
    n : int
        Cells per side of the structured training mesh.
    hole : tuple (cx, cy, a, b) or None
        Elliptical hole of the training mesh.
    scaling_hidden, branch_hidden, feature_hidden, trunk_hidden : tuple of int
        Hidden widths of the scaling net and the three MIONet subnets.
    latent : int
        MIONet latent width ``p``.
    se_reduction : int
        Reduction ratio of the squeeze-excitation gate.
    learning_rate, weight_decay, batch_size, max_epochs, patience, loss_eps
        Optimisation settings (AdamW with decoupled decay, relative MSE loss).
    random_state : int
        Seeds both the initialisation and the minibatch shuffling.
    """

    def __init__(self, kind="poisson", n=16, hole=None, scaling_hidden=(64, 64),
                 branch_hidden=(64, 64, 64), feature_hidden=(64, 64, 64),
                 trunk_hidden=(64, 64, 64), latent=32, se_reduction=4, learning_rate=1e-4,
                 weight_decay=5e-4, batch_size=100, max_epochs=5000, patience=1000,
                 loss_eps=1e-4, random_state=0, verbose=0):
        self.kind = kind
        self.n = n
        self.hole = hole
        self.scaling_hidden = scaling_hidden
        self.branch_hidden = branch_hidden
        self.feature_hidden = feature_hidden
        self.trunk_hidden = trunk_hidden
        self.latent = latent
        self.se_reduction = se_reduction
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.loss_eps = loss_eps
        self.random_state = random_state
        self.verbose = verbose

    # -- construction -----------------------------------------------------

    def _build_mesh(self):
        kind = ProblemKind.parse(self.kind)
        elem = ElemKind.P1_TRI if kind is ProblemKind.NONLINEAR_POISSON else ElemKind.Q1_QUAD
        hole = None
        if self.hole is not None:
            cx, cy, a, b = self.hole
            hole = Ellipse((cx, cy), (a, b))
        return build_unit_square_mesh(self.n, elem, hole=hole)

    def initialize(self):
        """Build the mesh bindings and a freshly initialised network.

        The last scaling layer starts at zero, so the untrained operator is the
        identity map.
        """
        kind = ProblemKind.parse(self.kind)
        self.mesh_ = self._build_mesh()
        dofmap = boundary_dofs(self.mesh_, kind)
        self.ncomp_ = dofmap.ncomp
        self.n_dofs_ = dofmap.num_dofs
        self.n_zeta_ = self.mesh_.num_nodes if kind is ProblemKind.NONLINEAR_POISSON else 1
        self.coords_ = np.asarray(self.mesh_.nodes, dtype=float)
        self.mask_ = dofmap.free_mask().astype(float)
        self.n_features_in_ = self.n_dofs_
        rng = np.random.default_rng([int(self.random_state), 0])
        self.network_ = FpnoNetwork(self.n_dofs_, self.n_zeta_, self.ncomp_,
                                    self.scaling_hidden, self.branch_hidden,
                                    self.feature_hidden, self.trunk_hidden, self.latent,
                                    self.se_reduction, rng)
        self._transfers = {}
        return self

    # -- validation -------------------------------------------------------

    def _check_inputs(self, X, residuals, zeta):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
        zeta = np.asarray(zeta, dtype=float)
        if zeta.ndim == 1:
            zeta = zeta.reshape(len(X), -1) if zeta.size == len(X) * self.n_zeta_ else zeta[None]
        if X.shape[1] != self.n_dofs_:
            raise DimensionError(f"X has {X.shape[1]} columns, model expects {self.n_dofs_}")
        if residuals.shape != X.shape:
            raise DimensionError("residuals must match X in shape")
        if zeta.shape != (len(X), self.n_zeta_):
            raise DimensionError(f"zeta must have shape ({len(X)}, {self.n_zeta_})")
        for name, arr in (("X", X), ("residuals", residuals), ("zeta", zeta)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        return X, residuals, zeta

    # -- sklearn API ------------------------------------------------------

    def transform(self, X, residuals, zeta):
        """Apply the operator to each row of ``X``."""
        check_is_fitted(self, "network_")
        X, residuals, zeta = self._check_inputs(X, residuals, zeta)
        r_unit, r_norm = _unit_residuals(residuals)
        return self.network_.forward(X, r_unit, r_norm, zeta, self.coords_, self.mask_)

    predict = transform

    def score(self, X, y, residuals, zeta):
        """Negative mean relative L2 error (higher is better)."""
        return -float(np.mean(relative_l2(self.transform(X, residuals, zeta), y)))

    def fit(self, X, y, residuals, zeta, eval_set=None):
        """Train with AdamW on the relative MSE of the operator output against ``y``.

        ``eval_set = (X, y, residuals, zeta)`` drives early stopping and model
        selection; without it the training set is used. The parameters of the
        best validation epoch are kept.
        """
        self.initialize()
        X, residuals, zeta = self._check_inputs(X, residuals, zeta)
        y = np.asarray(y, dtype=float)
        if y.shape != X.shape:
            raise DimensionError("y must match X in shape")
        if eval_set is None:
            Xv, yv, rv, zv = X, y, residuals, zeta
        else:
            Xv, rv, zv = self._check_inputs(eval_set[0], eval_set[2], eval_set[3])
            yv = np.asarray(eval_set[1], dtype=float)
        if len(X) == 0:
            raise ValueError("empty training set")
        batch = min(int(self.batch_size), len(X))
        self.run_training(X, y, residuals, zeta, (Xv, yv, rv, zv), batch)
        return self

    def run_training(self, X, y, residuals, zeta, val, batch):
        net = self.network_
        params = net.parameters()
        grads = net.gradients()
        opt = AdamW(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        stopper = EarlyStopping(self.patience)
        shuffle = np.random.default_rng([int(self.random_state), 1])
        r_unit, r_norm = _unit_residuals(residuals)
        Xv, yv, rv, zv = val
        rv_unit, rv_norm = _unit_residuals(rv)
        best = [p.copy() for p in params]
        self.history_ = []
        self.best_epoch_ = -1
        self.best_val_ = math.inf
        self.early_stopped_ = False
        for epoch in range(int(self.max_epochs)):
            order = shuffle.permutation(len(X))
            losses = []
            for start in range(0, len(order), batch):
                idx = order[start:start + batch]
                pred = net.forward(X[idx], r_unit[idx], r_norm[idx], zeta[idx],
                                   self.coords_, self.mask_)
                loss, dpred = rel_mse_loss(pred, y[idx], self.loss_eps, return_grad=True)
                if not math.isfinite(loss):
                    self._restore(best)
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}", self,
                                          self.history_)
                net.zero_grad()
                net.backward(dpred)
                opt.step(grads)
                losses.append(loss * len(idx))
            train_loss = float(np.sum(losses) / len(X))
            pred_v = net.forward(Xv, rv_unit, rv_norm, zv, self.coords_, self.mask_)
            val_err = float(np.mean(relative_l2(pred_v, yv)))
            self.history_.append({"epoch": epoch, "train_loss": train_loss,
                                  "val_rel_l2": val_err})
            if val_err < self.best_val_:
                self.best_val_ = val_err
                self.best_epoch_ = epoch
                best = [p.copy() for p in params]
            if self.verbose and epoch % self.verbose == 0:
                log.info("epoch %d train %.4e val %.4e", epoch, train_loss, val_err)
            if stopper.update(val_err):
                self.early_stopped_ = True
                break
        self.stopped_epoch_ = len(self.history_) - 1
        self._restore(best)

    def _restore(self, arrays):
        for p, saved in zip(self.network_.parameters(), arrays):
            p[...] = saved

    # -- mesh binding -----------------------------------------------------

    def transfer_to(self, mesh):
        """Transfer operators between the training mesh and ``mesh`` (cached)."""
        check_is_fitted(self, "network_")
        key = id(mesh)
        cached = self._transfers.get(key)
        if cached is None or cached[0] is not mesh:
            ops = build_transfer(self.mesh_, mesh)
            cached = (mesh, ops, ops.for_components(self.ncomp_))
            self._transfers[key] = cached
        return cached[1], cached[2]


def fpno_apply(model, u, problem, residual=None, transfer=None):
    """Preconditioned point ``v`` for the free-dof iterate ``u`` of ``problem``.

    The networks run on the training mesh: the normalised residual, the iterate
    and nodal parameters are restricted there and the correction is prolonged
    back. ``eta`` uses the residual norm on the solve mesh, so a root of
    ``F`` is returned unchanged.
    """
    check_is_fitted(model, "network_")
    r = problem.residual(u) if residual is None else residual
    r_norm = norm2(r)
    if r_norm == 0.0:
        return u
    if transfer is None:
        node_ops, dof_ops = model.transfer_to(problem.mesh)
    else:
        node_ops, dof_ops = transfer, transfer.for_components(model.ncomp_)
    free = problem.dofmap.free_dofs
    u_full = problem.full(u)
    r_full = np.zeros(problem.dofmap.num_dofs)
    r_full[free] = r / r_norm
    zeta = problem.parameter_vector()
    if not dof_ops.identity:
        u_full_c = dof_ops.R @ u_full
        r_full = dof_ops.R @ r_full
        if len(zeta) == problem.mesh.num_nodes and len(zeta) != 1:
            zeta = node_ops.R @ zeta
    else:
        u_full_c = u_full
    net = model.network_
    eta = float(net.step_size(r_full[None], np.array([r_norm]))[0])
    corr = net.backbone.forward(u_full_c[None], zeta[None], model.coords_)[0]
    if not dof_ops.identity:
        corr = dof_ops.P @ corr
    v = u + eta * corr[free]
    if not np.all(np.isfinite(v)):
        raise ModelNaN("preconditioner produced non-finite values")
    return v
