"""Residual and Jacobian assembly for the nonlinear Poisson and Neo-Hookean problems.

Both problems act on vectors of *free* dofs. Dirichlet values are substituted
before element evaluation, and rows/columns of constrained dofs are dropped
from the assembled residual and tangent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, ElementInversion, Unsupported
from .linalg import csr_from_arrays
from .mesh import ElemKind, ProblemKind, boundary_dofs, element_geometry


@dataclass(frozen=True, eq=False)
class ProblemParams:
    forcing: np.ndarray | None = None
    u_t: float = 0.0
    E: float = 1.0
    nu: float = 0.49
    mu: float = field(init=False)
    lame_lambda: float = field(init=False)

    def __post_init__(self):
        if not self.nu < 0.5:
            raise ValueError(f"Poisson ratio must be < 0.5, got {self.nu}")
        object.__setattr__(self, "mu", self.E / (2 * (1 + self.nu)))
        object.__setattr__(self, "lame_lambda",
                           self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu)))


class NonlinearProblem:
    """Common plumbing: dof substitution and sparse scatter of element arrays."""

    kind: ProblemKind
    ncomp: int

    def __init__(self, mesh, dofmap, params):
        self.mesh = mesh
        self.dofmap = dofmap
        self.params = params
        self.geometry = element_geometry(mesh)
        nv = mesh.elements.shape[1]
        d = self.ncomp
        ldofs = (d * mesh.elements[:, :, None] + np.arange(d)[None, None, :]).reshape(
            len(mesh.elements), nv * d)
        self._ldofs = ldofs
        free_index = np.full(dofmap.num_dofs, -1, dtype=np.int64)
        free_index[dofmap.free_dofs] = np.arange(dofmap.num_free)
        rows = np.broadcast_to(ldofs[:, :, None], ldofs.shape + (ldofs.shape[1],))
        cols = np.broadcast_to(ldofs[:, None, :], rows.shape)
        fr, fc = free_index[rows].ravel(), free_index[cols].ravel()
        keep = (fr >= 0) & (fc >= 0)
        self._jac_keep = keep
        self._jac_rows = fr[keep]
        self._jac_cols = fc[keep]

    @property
    def num_free(self):
        return self.dofmap.num_free

    def full(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.num_free,):
            raise DimensionError(f"expected {self.num_free} free dofs, got shape {u.shape}")
        return self.dofmap.full(u)

    def free(self, u_full):
        return np.asarray(u_full, dtype=float)[self.dofmap.free_dofs]

    def initial_guess(self):
        """Zero on free dofs; prescribed values enter through substitution."""
        return np.zeros(self.num_free)

    def _scatter_vector(self, local):
        full = np.bincount(self._ldofs.ravel(), weights=local.ravel(),
                           minlength=self.dofmap.num_dofs)
        return full[self.dofmap.free_dofs]

    def _scatter_matrix(self, local):
        vals = local.reshape(-1)[self._jac_keep]
        n = self.num_free
        return csr_from_arrays(self._jac_rows, self._jac_cols, vals, n, n)

    def residual(self, u):
        raise NotImplementedError

    def jacobian(self, u):
        raise NotImplementedError

    def parameter_vector(self):
        """Input of the feature branch of the neural preconditioner."""
        raise NotImplementedError


class PoissonProblem(NonlinearProblem):
    """``-div(q(u) grad u) = f`` with ``q(u) = q0 + q2 u^2``, ``u = 1`` on x = 1."""

    kind = ProblemKind.NONLINEAR_POISSON
    ncomp = 1

    def __init__(self, mesh, forcing, q0=0.01, q2=1.0):
        if mesh.elem_kind is not ElemKind.P1_TRI:
            raise Unsupported("nonlinear Poisson uses P1 triangles")
        forcing = np.broadcast_to(np.asarray(forcing, dtype=float), (mesh.num_nodes,)).copy()
        super().__init__(mesh, boundary_dofs(mesh, self.kind), ProblemParams(forcing=forcing))
        self.q0 = q0
        self.q2 = q2
        geo = self.geometry
        fe = forcing[mesh.elements]
        # load term sum_q w |J| f(x_q) phi_v(x_q); independent of u
        self._load = np.einsum("eq,eq,qv->ev", geo.wdet, fe @ geo.phi.T, geo.phi)

    def q(self, u):
        return self.q0 + self.q2 * u * u

    def dq(self, u):
        return 2.0 * self.q2 * u

    def _fields(self, u):
        geo = self.geometry
        ue = self.full(u)[self.mesh.elements]
        uq = ue @ geo.phi.T
        gu = np.einsum("eqva,ev->eqa", geo.grad, ue)
        return uq, gu

    def residual(self, u):
        geo = self.geometry
        uq, gu = self._fields(u)
        flux = (geo.wdet * self.q(uq))[..., None] * gu
        local = np.einsum("eqa,eqva->ev", flux, geo.grad) - self._load
        return self._scatter_vector(local)

    def jacobian(self, u):
        geo = self.geometry
        uq, gu = self._fields(u)
        stiff = np.einsum("eq,eqva,eqwa->evw", geo.wdet * self.q(uq), geo.grad, geo.grad)
        gdot = np.einsum("eqa,eqva->eqv", gu, geo.grad)
        conv = np.einsum("eq,eqv,qw->evw", geo.wdet * self.dq(uq), gdot, geo.phi)
        return self._scatter_matrix(stiff + conv)

    def parameter_vector(self):
        return self.params.forcing.copy()


class NeoHookeanProblem(NonlinearProblem):
    """Compressible Neo-Hookean body in plane strain, top edge pulled to ``(0, u_t)``.

    The 2D deformation gradient is embedded as a 3x3 tensor with ``F33 = 1``, so
    ``I_c = tr(F^T F) + 1`` and ``J = det F``.
    """

    kind = ProblemKind.NEO_HOOKEAN
    ncomp = 2

    def __init__(self, mesh, u_t, E=1.0, nu=0.49):
        if mesh.elem_kind is not ElemKind.Q1_QUAD:
            raise Unsupported("hyperelasticity uses Q1 quadrilaterals")
        super().__init__(mesh, boundary_dofs(mesh, self.kind, top_displacement=u_t),
                         ProblemParams(u_t=float(u_t), E=E, nu=nu))

    def with_top_displacement(self, u_t):
        return NeoHookeanProblem(self.mesh, u_t, E=self.params.E, nu=self.params.nu)

    def _kinematics(self, u):
        geo = self.geometry
        ue = self.full(u).reshape(-1, 2)[self.mesh.elements]
        F = np.einsum("evc,eqva->eqca", ue, geo.grad)
        F[..., 0, 0] += 1.0
        F[..., 1, 1] += 1.0
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        if not np.all(J > 0):
            raise ElementInversion("det F <= 0 at a quadrature point")
        Finv = np.empty_like(F)
        Finv[..., 0, 0] = F[..., 1, 1] / J
        Finv[..., 1, 1] = F[..., 0, 0] / J
        Finv[..., 0, 1] = -F[..., 0, 1] / J
        Finv[..., 1, 0] = -F[..., 1, 0] / J
        return F, J, Finv

    def energy(self, u):
        F, J, _ = self._kinematics(u)
        mu, lam = self.params.mu, self.params.lame_lambda
        ic = np.einsum("eqca,eqca->eq", F, F) + 1.0
        psi = 0.5 * mu * (ic - 3.0) - mu * np.log(J) + 0.5 * lam * (J - 1.0) ** 2
        return float(np.sum(self.geometry.wdet * psi))

    def stress(self, F, J, Finv):
        """First Piola-Kirchhoff stress ``mu (F - F^-T) + lam (J - 1) J F^-T``."""
        mu, lam = self.params.mu, self.params.lame_lambda
        FinvT = np.swapaxes(Finv, -1, -2)
        return mu * (F - FinvT) + (lam * (J - 1.0) * J)[..., None, None] * FinvT

    def residual(self, u):
        geo = self.geometry
        F, J, Finv = self._kinematics(u)
        P = self.stress(F, J, Finv)
        local = np.einsum("eq,eqca,eqva->evc", geo.wdet, P, geo.grad)
        return self._scatter_vector(local.reshape(len(local), -1))

    def jacobian(self, u):
        geo = self.geometry
        F, J, Finv = self._kinematics(u)
        mu, lam = self.params.mu, self.params.lame_lambda
        eye = np.eye(2)
        # dP_iA / dF_kB
        A = mu * np.einsum("ik,AB->iAkB", eye, eye)[None, None]
        A = A + ((mu - lam * (J - 1.0) * J)[..., None, None, None, None]
                 * np.einsum("...Ak,...Bi->...iAkB", Finv, Finv))
        A = A + ((lam * (2.0 * J - 1.0) * J)[..., None, None, None, None]
                 * np.einsum("...Ai,...Bk->...iAkB", Finv, Finv))
        local = np.einsum("eq,eqiAkB,eqvA,eqwB->eviwk", geo.wdet, A, geo.grad, geo.grad)
        ne, nv = local.shape[:2]
        return self._scatter_matrix(local.reshape(ne, 2 * nv, 2 * nv))

    def parameter_vector(self):
        return np.array([self.params.u_t])


def make_problem(kind, mesh, zeta, **kwargs):
    """Instantiate a benchmark problem from its parameter record ``zeta``."""
    kind = ProblemKind.parse(kind)
    if kind is ProblemKind.NONLINEAR_POISSON:
        return PoissonProblem(mesh, zeta, **kwargs)
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    return NeoHookeanProblem(mesh, float(zeta[0]), **kwargs)


def linear_elasticity_stiffness(mesh, mu, lame_lambda):
    """Small-strain stiffness over free dofs, assembled from the isotropic tensor."""
    prob = NeoHookeanProblem(mesh, 0.0)
    geo = prob.geometry
    eye = np.eye(2)
    C = (mu * (np.einsum("ik,AB->iAkB", eye, eye) + np.einsum("iB,Ak->iAkB", eye, eye))
         + lame_lambda * np.einsum("iA,kB->iAkB", eye, eye))
    local = np.einsum("eq,iAkB,eqvA,eqwB->eviwk", geo.wdet, C, geo.grad, geo.grad)
    ne, nv = local.shape[:2]
    return prob._scatter_matrix(local.reshape(ne, 2 * nv, 2 * nv))


__all__ = ["ProblemParams", "NonlinearProblem", "PoissonProblem", "NeoHookeanProblem",
           "make_problem", "linear_elasticity_stiffness"]
