import numpy as np
import pytest
from hypothesis import given, strategies as st

from fpno.exceptions import InvalidMesh, TransferError, Unsupported
from fpno.mesh import (DEFAULT_HOLE, ElemKind, Ellipse, Tag, boundary_dofs, build_transfer,
                       build_unit_square_mesh, element_geometry, element_quadrature,
                       mesh_from_descriptor, shape_functions)


@pytest.mark.parametrize("n, nodes", [(32, 1089), (128, 16641)])
def test_poisson_node_counts(n, nodes):
    assert build_unit_square_mesh(n, ElemKind.P1_TRI).num_nodes == nodes


def test_smallest_quad_grid():
    m = build_unit_square_mesh(2, ElemKind.Q1_QUAD)
    assert m.num_nodes == 9
    assert m.num_elements == 4
    assert int(np.sum(m.boundary_tags != Tag.INTERIOR)) == 8


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("kind, per_cell", [(ElemKind.P1_TRI, 2), (ElemKind.Q1_QUAD, 1)])
def test_hand_counts(n, kind, per_cell):
    m = build_unit_square_mesh(n, kind)
    assert m.num_nodes == (n + 1) ** 2
    assert m.num_elements == per_cell * n * n
    assert int(np.sum(m.boundary_tags != Tag.INTERIOR)) == 4 * n


def test_too_coarse_rejected():
    with pytest.raises(InvalidMesh):
        build_unit_square_mesh(1)


def test_hole_swallowing_everything_rejected():
    with pytest.raises(InvalidMesh):
        build_unit_square_mesh(4, ElemKind.Q1_QUAD, hole=Ellipse((0.5, 0.5), (2.0, 2.0)))


def test_hole_mask_and_rim_tags(quad8_hole):
    m = quad8_hole
    assert m.num_elements < 64
    assert len(m.hole_mask) == 64 - m.num_elements
    centroids = m.nodes[m.elements].mean(axis=1)
    assert not np.any(DEFAULT_HOLE.contains(centroids))
    # every element index is valid and the node set has no orphans
    assert m.elements.max() == m.num_nodes - 1
    assert len(np.unique(m.elements)) == m.num_nodes
    rim = m.boundary_tags == Tag.GAMMA_OTHER
    interior_pts = m.nodes[rim]
    off_square = np.all((interior_pts > 1e-12) & (interior_pts < 1 - 1e-12), axis=1)
    assert off_square.any()


@pytest.mark.parametrize("kind", list(ElemKind))
def test_counterclockwise_orientation(kind):
    m = build_unit_square_mesh(3, kind, hole=None)
    xe = m.nodes[m.elements]
    a, b, c = xe[:, 0], xe[:, 1], xe[:, 2]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    assert np.all(cross > 0)


def test_every_node_tagged_once(tri4):
    assert tri4.boundary_tags.shape == (tri4.num_nodes,)
    assert set(np.unique(tri4.boundary_tags)) <= {int(t) for t in Tag}


def test_poisson_boundary_dofs():
    m = build_unit_square_mesh(32)
    dm = boundary_dofs(m, "poisson")
    assert len(dm.constrained_dofs) == 33
    assert np.all(dm.constrained_values == 1.0)
    assert np.allclose(m.nodes[dm.constrained_dofs, 0], 1.0)
    all_dofs = np.sort(np.concatenate([dm.free_dofs, dm.constrained_dofs]))
    assert np.array_equal(all_dofs, np.arange(m.num_nodes))


def test_elasticity_boundary_dofs():
    m = build_unit_square_mesh(2, ElemKind.Q1_QUAD)
    dm = boundary_dofs(m, "neo_hookean", top_displacement=1.0)
    full = dm.full(np.zeros(dm.num_free)).reshape(-1, 2)
    bottom = np.flatnonzero(np.isclose(m.nodes[:, 1], 0.0))
    top = np.flatnonzero(np.isclose(m.nodes[:, 1], 1.0))
    assert len(bottom) == len(top) == 3
    assert np.array_equal(full[bottom], np.zeros((3, 2)))
    assert np.array_equal(full[top], np.tile([0.0, 1.0], (3, 1)))
    assert dm.num_free + len(dm.constrained_dofs) == 2 * m.num_nodes


def test_unknown_problem_kind():
    with pytest.raises(Unsupported):
        boundary_dofs(build_unit_square_mesh(2), "stokes")


def test_quadrature_weights():
    _, w = element_quadrature(ElemKind.P1_TRI)
    assert np.isclose(w.sum(), 0.5)
    _, w = element_quadrature(ElemKind.Q1_QUAD)
    assert np.isclose(w.sum(), 4.0)


def test_triangle_rule_integrates_x():
    pts, w = element_quadrature(ElemKind.P1_TRI)
    assert np.isclose(np.dot(w, pts[:, 0]), 1 / 6, atol=1e-15)


@pytest.mark.parametrize("kind", list(ElemKind))
def test_partition_of_unity(kind):
    pts, _ = element_quadrature(kind)
    phi, dphi = shape_functions(kind, pts)
    assert np.allclose(phi.sum(axis=1), 1.0, atol=1e-14)
    assert np.allclose(dphi.sum(axis=1), 0.0, atol=1e-14)


@pytest.mark.parametrize("kind", list(ElemKind))
def test_geometry_area(kind):
    m = build_unit_square_mesh(5, kind)
    geo = element_geometry(m)
    assert np.isclose(geo.wdet.sum(), 1.0)


def test_descriptor_roundtrip(quad8_hole):
    m2 = mesh_from_descriptor(quad8_hole.descriptor())
    assert np.array_equal(m2.nodes, quad8_hole.nodes)
    assert np.array_equal(m2.elements, quad8_hole.elements)
    assert np.array_equal(m2.boundary_tags, quad8_hole.boundary_tags)


def test_summary_text():
    assert "nodes: 1089" in build_unit_square_mesh(32).summary()
    assert "elements: 4" in build_unit_square_mesh(2, ElemKind.Q1_QUAD).summary()


# -- transfer ---------------------------------------------------------------

def test_identity_transfer(tri4):
    ops = build_transfer(tri4, build_unit_square_mesh(4))
    assert ops.identity
    v = np.arange(tri4.num_nodes, dtype=float)
    assert np.array_equal(ops.P @ v, v) and np.array_equal(ops.R @ v, v)


def test_edge_midpoint_interpolation():
    coarse = build_unit_square_mesh(2)
    fine = build_unit_square_mesh(4)
    ops = build_transfer(coarse, fine)
    v = np.zeros(coarse.num_nodes)
    v[np.flatnonzero(np.all(np.isclose(coarse.nodes, [0.5, 0.0]), axis=1))] = 1.0
    out = ops.P @ v
    mid = np.flatnonzero(np.all(np.isclose(fine.nodes, [0.25, 0.0]), axis=1))
    assert np.isclose(out[mid], 0.5)


@pytest.mark.parametrize("kind", list(ElemKind))
def test_restrict_prolong_identity(kind, rng):
    coarse = build_unit_square_mesh(4, kind)
    fine = build_unit_square_mesh(8, kind)
    ops = build_transfer(coarse, fine)
    v = rng.standard_normal(coarse.num_nodes)
    assert np.array_equal(ops.R @ (ops.P @ v), v)
    dense = ops.R.toarray() @ ops.P.toarray()
    assert np.array_equal(dense, np.eye(coarse.num_nodes))


def test_bilinear_reproduced_exactly():
    coarse = build_unit_square_mesh(4, ElemKind.Q1_QUAD)
    fine = build_unit_square_mesh(8, ElemKind.Q1_QUAD)
    f = lambda p: 1 + 2 * p[:, 0] - 3 * p[:, 1] + 0.5 * p[:, 0] * p[:, 1]
    ops = build_transfer(coarse, fine)
    assert np.allclose(ops.P @ f(coarse.nodes), f(fine.nodes), atol=1e-13)


def test_vector_transfer_components(rng):
    coarse = build_unit_square_mesh(2, ElemKind.Q1_QUAD)
    fine = build_unit_square_mesh(4, ElemKind.Q1_QUAD)
    ops2 = build_transfer(coarse, fine).for_components(2)
    v = rng.standard_normal(2 * coarse.num_nodes)
    assert np.array_equal(ops2.R @ (ops2.P @ v), v)


def test_non_nested_rejected():
    with pytest.raises(TransferError):
        build_transfer(build_unit_square_mesh(4), build_unit_square_mesh(6))


@given(st.integers(2, 6), st.sampled_from(list(ElemKind)))
def test_transfer_consistency_property(n, kind):
    coarse = build_unit_square_mesh(n, kind)
    fine = build_unit_square_mesh(2 * n, kind)
    ops = build_transfer(coarse, fine)
    v = np.random.default_rng(n).standard_normal(coarse.num_nodes)
    assert np.array_equal(ops.R @ (ops.P @ v), v)
    # coincident nodes carry the coarse values exactly
    assert np.array_equal(ops.R @ (ops.P @ v), (ops.P @ v)[np.asarray(ops.R.indices)])
