"""Structured 2D meshes, nodal dof maps, quadrature and inter-mesh transfer.

Meshes live on the unit square. Nodes of the underlying ``(n+1) x (n+1)``
grid are numbered row by row (``j * (n + 1) + i`` for ``x = i/n, y = j/n``);
elements removed by a hole mask take their orphaned nodes with them and the
surviving nodes are renumbered in grid order.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import InvalidMesh, TransferError, Unsupported


class ElemKind(str, enum.Enum):
    P1_TRI = "P1_TRI"
    Q1_QUAD = "Q1_QUAD"


class Tag(enum.IntEnum):
    INTERIOR = 0
    GAMMA_DIRICHLET = 1
    GAMMA_NEUMANN = 2
    GAMMA_BOTTOM = 3
    GAMMA_TOP = 4
    GAMMA_OTHER = 5


class ProblemKind(str, enum.Enum):
    NONLINEAR_POISSON = "poisson"
    NEO_HOOKEAN = "neo_hookean"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            "poisson": cls.NONLINEAR_POISSON,
            "np": cls.NONLINEAR_POISSON,
            "nonlinear_poisson": cls.NONLINEAR_POISSON,
            "neo_hookean": cls.NEO_HOOKEAN,
            "neohookean": cls.NEO_HOOKEAN,
            "he": cls.NEO_HOOKEAN,
            "hyperelasticity": cls.NEO_HOOKEAN,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise Unsupported(f"unknown problem kind {value!r}") from None


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        dx = (pts[:, 0] - self.center[0]) / self.semi_axes[0]
        dy = (pts[:, 1] - self.center[1]) / self.semi_axes[1]
        return dx * dx + dy * dy < 1.0


# Hole used for the hyperelastic benchmark: axes 0.6 x 0.5 centred in the square.
DEFAULT_HOLE = Ellipse(center=(0.5, 0.5), semi_axes=(0.3, 0.25))


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    elements: np.ndarray
    elem_kind: ElemKind
    boundary_tags: np.ndarray
    n: int
    grid_index: np.ndarray
    hole: Ellipse | None = None
    hole_mask: frozenset = field(default_factory=frozenset)

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_elements(self):
        return len(self.elements)

    def tag_histogram(self):
        counts = Counter(Tag(t).name for t in self.boundary_tags)
        return {t.name: counts.get(t.name, 0) for t in Tag}

    def descriptor(self):
        """JSON-friendly record sufficient to rebuild the mesh."""
        hole = None
        if self.hole is not None:
            hole = {"center": list(self.hole.center), "semi_axes": list(self.hole.semi_axes)}
        return {"n": self.n, "kind": self.elem_kind.value, "hole": hole,
                "convention": self._convention}

    @property
    def _convention(self):
        tags = set(int(t) for t in self.boundary_tags)
        if tags & {Tag.GAMMA_BOTTOM, Tag.GAMMA_TOP}:
            return "elasticity"
        return "poisson"

    def summary(self):
        lines = [f"kind: {self.elem_kind.value}", f"nodes: {self.num_nodes}",
                 f"elements: {self.num_elements}"]
        for name, count in self.tag_histogram().items():
            lines.append(f"tag {name}: {count}")
        return "\n".join(lines)


def mesh_from_descriptor(desc):
    hole = desc.get("hole")
    if hole is not None:
        hole = Ellipse(tuple(hole["center"]), tuple(hole["semi_axes"]))
    return build_unit_square_mesh(desc["n"], desc["kind"], hole=hole,
                                  convention=desc.get("convention"))


def _grid_elements(n, kind):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    ll = j * (n + 1) + i
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    if kind is ElemKind.Q1_QUAD:
        return np.stack([ll, lr, ur, ul], axis=1)
    # split along the lower-left -> upper-right diagonal
    lower = np.stack([ll, lr, ur], axis=1)
    upper = np.stack([ll, ur, ul], axis=1)
    return np.stack([lower, upper], axis=1).reshape(-1, 3)


def build_unit_square_mesh(n, kind=ElemKind.P1_TRI, hole=None, convention=None):
    """Structured mesh of the unit square with ``n`` cells per side.

    ``convention`` selects the boundary tagging: ``"poisson"`` marks the
    ``x = 1`` edge GAMMA_DIRICHLET and the rest of the outer boundary
    GAMMA_NEUMANN; ``"elasticity"`` marks bottom and top edges and tags the
    remaining boundary GAMMA_OTHER. It defaults to poisson for triangles and
    elasticity for quadrilaterals. Nodes on the rim of a hole are GAMMA_OTHER.
    """
    kind = ElemKind(kind)
    if int(n) != n or n < 2:
        raise InvalidMesh(f"need n >= 2 subdivisions, got {n}")
    n = int(n)
    if convention is None:
        convention = "poisson" if kind is ElemKind.P1_TRI else "elasticity"
    if convention not in ("poisson", "elasticity"):
        raise Unsupported(f"unknown tagging convention {convention!r}")
    if hole is not None:
        (cx, cy), (a, b) = hole.center, hole.semi_axes
        if a <= 0 or b <= 0 or cx - a <= 0 or cx + a >= 1 or cy - b <= 0 or cy + b >= 1:
            raise InvalidMesh("hole must lie strictly inside the unit square")

    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    grid = np.stack([ii.ravel(), jj.ravel()], axis=1)
    coords = grid / n
    elements = _grid_elements(n, kind)

    removed = frozenset()
    if hole is not None:
        centroids = coords[elements].mean(axis=1)
        inside = hole.contains(centroids)
        removed = frozenset(np.flatnonzero(inside).tolist())
        elements = elements[~inside]
        if len(elements) == 0:
            raise InvalidMesh("hole removes every element")

    used = np.zeros(len(coords), dtype=bool)
    used[elements.ravel()] = True
    renumber = np.full(len(coords), -1, dtype=np.int64)
    renumber[used] = np.arange(used.sum())
    elements = renumber[elements]
    coords = coords[used]
    grid = grid[used]

    tags = np.full(len(coords), Tag.INTERIOR, dtype=np.int8)
    rim = _boundary_nodes(elements, len(coords))
    gi, gj = grid[:, 0], grid[:, 1]
    outer = (gi == 0) | (gi == n) | (gj == 0) | (gj == n)
    tags[rim & ~outer] = Tag.GAMMA_OTHER
    if convention == "poisson":
        tags[outer] = Tag.GAMMA_NEUMANN
        tags[gi == n] = Tag.GAMMA_DIRICHLET
    else:
        tags[outer] = Tag.GAMMA_OTHER
        tags[gj == 0] = Tag.GAMMA_BOTTOM
        tags[gj == n] = Tag.GAMMA_TOP

    for arr in (coords, elements, tags, grid):
        arr.setflags(write=False)
    return Mesh(nodes=coords, elements=elements, elem_kind=kind, boundary_tags=tags,
                n=n, grid_index=grid, hole=hole, hole_mask=removed)


def _boundary_nodes(elements, num_nodes):
    nv = elements.shape[1]
    edges = np.concatenate([elements[:, [k, (k + 1) % nv]] for k in range(nv)])
    edges.sort(axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    flag = np.zeros(num_nodes, dtype=bool)
    flag[uniq[counts == 1].ravel()] = True
    return flag


@dataclass(frozen=True, eq=False)
class DofMap:
    """Partition of the ``ncomp * num_nodes`` dofs into free and constrained sets.

    Dof ``node * ncomp + c`` is component ``c`` of the field at ``node``.
    """

    ncomp: int
    num_dofs: int
    free_dofs: np.ndarray
    constrained_dofs: np.ndarray
    constrained_values: np.ndarray

    @property
    def num_free(self):
        return len(self.free_dofs)

    def full(self, u_free):
        out = np.empty(self.num_dofs)
        out[self.free_dofs] = u_free
        out[self.constrained_dofs] = self.constrained_values
        return out

    def free_mask(self):
        mask = np.zeros(self.num_dofs, dtype=bool)
        mask[self.free_dofs] = True
        return mask


def boundary_dofs(mesh, problem_kind, top_displacement=0.0):
    """Dirichlet bookkeeping for the two benchmark problems.

    Poisson fixes ``u = 1`` on GAMMA_DIRICHLET. Elasticity fixes ``(0, 0)`` on
    GAMMA_BOTTOM and ``(0, top_displacement)`` on GAMMA_TOP.
    """
    kind = ProblemKind.parse(problem_kind)
    tags = mesh.boundary_tags
    if kind is ProblemKind.NONLINEAR_POISSON:
        ncomp = 1
        fixed_nodes = np.flatnonzero(tags == Tag.GAMMA_DIRICHLET)
        constrained = fixed_nodes
        values = np.ones(len(constrained))
    else:
        ncomp = 2
        bottom = np.flatnonzero(tags == Tag.GAMMA_BOTTOM)
        top = np.flatnonzero(tags == Tag.GAMMA_TOP)
        dofs = np.concatenate([2 * bottom, 2 * bottom + 1, 2 * top, 2 * top + 1])
        vals = np.concatenate([np.zeros(2 * len(bottom)), np.zeros(len(top)),
                               np.full(len(top), float(top_displacement))])
        order = np.argsort(dofs, kind="stable")
        constrained = dofs[order]
        values = vals[order]
    num_dofs = ncomp * mesh.num_nodes
    mask = np.ones(num_dofs, dtype=bool)
    mask[constrained] = False
    return DofMap(ncomp=ncomp, num_dofs=num_dofs, free_dofs=np.flatnonzero(mask),
                  constrained_dofs=np.asarray(constrained, dtype=np.int64),
                  constrained_values=np.asarray(values, dtype=float))


def element_quadrature(kind):
    """Reference points and weights: 3-point rule on the triangle (0,0),(1,0),(0,1)
    or the 2x2 Gauss rule on ``[-1, 1]^2``."""
    kind = ElemKind(kind)
    if kind is ElemKind.P1_TRI:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        wts = np.full(3, 1 / 6)
    else:
        g = 1 / np.sqrt(3.0)
        pts = np.array([[-g, -g], [g, -g], [g, g], [-g, g]])
        wts = np.ones(4)
    return pts, wts


def shape_functions(kind, pts):
    """Values ``(nq, nv)`` and reference gradients ``(nq, nv, 2)`` at ``pts``."""
    kind = ElemKind(kind)
    xi, et = pts[:, 0], pts[:, 1]
    if kind is ElemKind.P1_TRI:
        phi = np.stack([1 - xi - et, xi, et], axis=1)
        dphi = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
                               (len(pts), 3, 2)).copy()
        return phi, dphi
    sx = np.array([-1.0, 1.0, 1.0, -1.0])
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    phi = 0.25 * (1 + sx[None] * xi[:, None]) * (1 + sy[None] * et[:, None])
    dx = 0.25 * sx[None] * (1 + sy[None] * et[:, None])
    dy = 0.25 * sy[None] * (1 + sx[None] * xi[:, None])
    return phi, np.stack([dx, dy], axis=2)


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    """Quadrature data mapped to every element of a mesh."""

    phi: np.ndarray      # (nq, nv)
    grad: np.ndarray     # (ne, nq, nv, 2) physical gradients
    wdet: np.ndarray     # (ne, nq) weight * |det J|


def element_geometry(mesh):
    pts, wts = element_quadrature(mesh.elem_kind)
    phi, dref = shape_functions(mesh.elem_kind, pts)
    xe = mesh.nodes[mesh.elements]                       # (ne, nv, 2)
    jac = np.einsum("eva,qvb->eqab", xe, dref)           # dx_a / dxi_b
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(det <= 0):
        raise InvalidMesh("element with non-positive orientation")
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / det
    inv[..., 1, 1] = jac[..., 0, 0] / det
    inv[..., 0, 1] = -jac[..., 0, 1] / det
    inv[..., 1, 0] = -jac[..., 1, 0] / det
    grad = np.einsum("qvb,eqba->eqva", dref, inv)
    return ElementGeometry(phi=phi, grad=grad, wdet=det * wts[None, :])


@dataclass(frozen=True, eq=False)
class TransferOps:
    """Prolongation ``P`` (coarse -> fine) and restriction ``R`` (fine -> coarse)
    acting on dof vectors with ``ncomp`` interleaved components."""

    P: sp.csr_matrix
    R: sp.csr_matrix
    identity: bool = False

    def for_components(self, ncomp):
        if ncomp == 1:
            return self
        eye = sp.identity(ncomp, format="csr")
        return TransferOps(P=sp.kron(self.P, eye, format="csr"),
                           R=sp.kron(self.R, eye, format="csr"), identity=self.identity)


def _same_mesh(a, b):
    return (a is b) or (a.n == b.n and a.elem_kind is b.elem_kind and a.hole == b.hole
                        and np.array_equal(a.elements, b.elements))


def build_transfer(coarse, fine):
    """Nodal interpolation ``P`` and injection ``R`` between nested grids."""
    if _same_mesh(coarse, fine):
        eye = sp.identity(coarse.num_nodes, format="csr")
        return TransferOps(P=eye, R=eye.copy(), identity=True)
    if coarse.elem_kind is not fine.elem_kind or coarse.hole != fine.hole:
        raise TransferError("meshes differ in element kind or hole")
    if fine.n % coarse.n != 0:
        raise TransferError(f"fine grid n={fine.n} is not a refinement of n={coarse.n}")
    k = fine.n // coarse.n

    fine_lookup = {tuple(g): idx for idx, g in enumerate(fine.grid_index.tolist())}
    rows = []
    for c, (gi, gj) in enumerate(coarse.grid_index.tolist()):
        idx = fine_lookup.get((gi * k, gj * k))
        if idx is None:
            raise TransferError("coarse node has no coincident fine node")
        rows.append(idx)
    R = sp.csr_matrix((np.ones(coarse.num_nodes), (np.arange(coarse.num_nodes), rows)),
                      shape=(coarse.num_nodes, fine.num_nodes))

    # coarse cell (ci, cj) -> kept coarse elements in that cell
    n = coarse.n
    cells = {}
    for e, verts in enumerate(coarse.elements):
        g = coarse.grid_index[verts].min(axis=0)
        cells.setdefault((int(g[0]), int(g[1])), []).append(e)

    pts, _ = element_quadrature(coarse.elem_kind)
    pr, pc, pv = [], [], []
    for f, (gi, gj) in enumerate(fine.grid_index.tolist()):
        x, y = gi / fine.n, gj / fine.n
        ci = min(gi // k, n - 1)
        cj = min(gj // k, n - 1)
        candidates = []
        for di in (0, -1):
            for dj in (0, -1):
                cands = cells.get((ci + di, cj + dj))
                if cands:
                    candidates.extend(cands)
        weights = None
        for e in candidates:
            w = _local_coords(coarse, e, x, y)
            if w is not None:
                weights = (e, w)
                break
        if weights is None:
            raise TransferError("fine node not covered by any coarse element")
        e, w = weights
        for vert, val in zip(coarse.elements[e], w):
            if val != 0.0:
                pr.append(f)
                pc.append(vert)
                pv.append(val)
    P = sp.csr_matrix((pv, (pr, pc)), shape=(fine.num_nodes, coarse.num_nodes))
    return TransferOps(P=P, R=R)


def _local_coords(mesh, e, x, y, tol=1e-12):
    verts = mesh.nodes[mesh.elements[e]]
    if mesh.elem_kind is ElemKind.P1_TRI:
        a, b, c = verts
        m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
        xi, et = np.linalg.solve(m, [x - a[0], y - a[1]])
        lam = np.array([1 - xi - et, xi, et])
        if np.all(lam >= -tol):
            lam[np.abs(lam) < tol] = 0.0
            lam[np.abs(lam - 1) < tol] = 1.0
            return lam
        return None
    x0, y0 = verts[0]
    x1, y1 = verts[2]
    if not (x0 - tol <= x <= x1 + tol and y0 - tol <= y <= y1 + tol):
        return None
    s = (x - x0) / (x1 - x0)
    t = (y - y0) / (y1 - y0)
    w = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    w[np.abs(w) < tol] = 0.0
    w[np.abs(w - 1) < tol] = 1.0
    return w
