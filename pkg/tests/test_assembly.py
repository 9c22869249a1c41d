import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from hcsaddle.assembly import (
    AssemblyError, _nodal_load, assemble, assemble_A, assemble_B, assemble_load, assemble_mass_D, assemble_primal,
    assemble_sigma, export_matrix_market, local_mass, local_stiffness,
)
from hcsaddle.mesh import Disk, DomainSpec, TriMesh, classify_and_order, generate_mesh, rectangle
from hcsaddle.solvers import cholesky
from hcsaddle.spectral import desk_geometries, mass_spectral_ratio

UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def test_local_stiffness_unit_triangle():
    K = local_stiffness(UNIT)
    np.testing.assert_allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)


def test_local_stiffness_kernel_and_scaling(rng):
    for _ in range(20):
        tri = rng.normal(size=(3, 2))
        K = local_stiffness(tri)
        np.testing.assert_allclose(K @ np.ones(3), 0, atol=1e-12 * np.abs(K).max())
        np.testing.assert_allclose(K, K.T)
        assert la.eigvalsh(K).min() > -1e-12
        s = rng.uniform(0.01, 100)
        np.testing.assert_allclose(local_stiffness(s * tri), K, rtol=1e-10, atol=1e-12)


def test_local_mass_unit_triangle():
    M = local_mass(UNIT)
    np.testing.assert_allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-15)
    assert 3 * M.sum(axis=1) == pytest.approx([0.5] * 3)


def test_local_mass_congruent():
    rot = np.array([[0.6, -0.8], [0.8, 0.6]])
    np.testing.assert_allclose(local_mass(UNIT @ rot.T + [3, -1]), local_mass(UNIT), atol=1e-15)


def test_degenerate_triangle_names_id():
    tris = np.stack([UNIT, np.array([[0, 0], [1, 1], [2, 2.0]])])
    with pytest.raises(AssemblyError, match="triangle 1"):
        local_stiffness(tris, ids=[0, 1])
    with pytest.raises(AssemblyError):
        local_mass(np.array([[0, 0], [1, 0], [2, 0.0]]))


def test_patch_stiffness_is_four(square_mesh):
    A = assemble_A(square_mesh)
    np.testing.assert_allclose(A.toarray(), [[4.0]])


def test_A_is_spd_with_partition(two_box_mesh):
    b = assemble(two_box_mesh)
    A = b.A.toarray()
    np.testing.assert_allclose(A, A.T)
    assert la.eigvalsh(A).min() > 0
    n = b.n
    whole = np.block([[b.A_DD.toarray(), b.A_D0.toarray()], [b.A_0D.toarray(), b.A_00.toarray()]])
    np.testing.assert_array_equal(whole, A)
    assert b.A_DD.shape == (n, n) and b.A_00.shape == (b.N - n, b.N - n)


def test_A_condition_grows_like_h_minus_two():
    conds = []
    for h in (1 / 8, 1 / 16):
        A = assemble_A(generate_mesh(DomainSpec(rectangle(0, 0, 1, 1), [], target_h=h))).toarray()
        w = la.eigvalsh(A)
        conds.append(w[-1] / w[0])
    assert conds[1] / conds[0] == pytest.approx(4.0, rel=0.3)


def test_B_blocks_kernel_and_rank(desk_four):
    for Bi in desk_four.B_blocks:
        assert np.abs(Bi @ np.ones(Bi.shape[0])).max() <= 1e-12
        w = la.eigvalsh(Bi.toarray())
        assert np.sum(np.abs(w) < 1e-10 * w.max()) == 1


def test_B_kills_per_inclusion_constants(desk_four, rng):
    u = rng.normal(size=desk_four.N)
    for i, (a, c) in enumerate(zip(desk_four.offsets[:-1], desk_four.offsets[1:])):
        u[a:c] = i + 1.5
    assert np.abs(desk_four.B @ u).max() <= 1e-12


def test_single_triangle_inclusion_block():
    nodes = np.array([[0, 0], [3, 0], [0, 3], [1, 1], [1.6, 1], [1, 1.6]], float)
    tris = np.array([[3, 4, 5], [0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4], [2, 0, 3], [2, 3, 5]])
    lab = np.array([-1, -1, -1, 0, 0, 0])
    elab = np.array([1, 0, 0, 0, 0, 0, 0])
    mesh = classify_and_order(TriMesh(nodes, tris, lab, elab, 1))
    B = assemble_B(mesh)[0].toarray()
    np.testing.assert_allclose(B, local_stiffness(nodes[[3, 4, 5]]), atol=1e-14)


def test_empty_inclusion_rejected(square_mesh):
    bad = TriMesh(square_mesh.nodes, square_mesh.triangles, square_mesh.node_label,
                  square_mesh.elem_label, 1, square_mesh.order, square_mesh.dof, (0,))
    with pytest.raises(AssemblyError, match="inclusion 1"):
        assemble_B(bad)


def test_unordered_mesh_rejected(square_mesh):
    with pytest.raises(AssemblyError, match="order"):
        assemble_A(square_mesh.with_labels())


def test_sigma_action(desk_four, rng):
    x = rng.normal(size=desk_four.n)
    zero = assemble_sigma(desk_four.B_blocks, np.zeros(4))
    assert np.all(zero @ x == 0)
    eps = np.array([1e-1, 2.0, 0.0, 3e-5])
    S = assemble_sigma(desk_four.B_blocks, eps)
    dense = la.block_diag(*[e * B.toarray() for e, B in zip(eps, desk_four.B_blocks)])
    np.testing.assert_allclose(S @ x, dense @ x, atol=1e-12)
    with pytest.raises(ValueError):
        assemble_sigma(desk_four.B_blocks, [1, 1, -1, 1])
    with pytest.raises(ValueError):
        assemble_sigma(desk_four.B_blocks, [1, 1])


def test_sigma_single_block(desk_one):
    S = assemble_sigma(desk_one.B_blocks, [2.0])
    np.testing.assert_allclose(S @ np.eye(desk_one.n), 2 * desk_one.B_blocks[0].toarray())


def test_load_vector(square_mesh, desk_one):
    assert np.all(assemble_load(square_mesh, 0.0) == 0)
    # uniform diagonals: the centre node touches 6 of the 8 triangles, each of area 1/8
    touching = np.sum(np.any(square_mesh.triangles == square_mesh.order[0], axis=1))
    assert touching == 6
    assert assemble_load(square_mesh, 50.0)[0] == pytest.approx(50 * touching * (1 / 8) / 3)
    mesh = generate_mesh(DomainSpec(Disk((0, 0), 1.0), [Disk((0, 0), 0.35)], target_h=0.2))
    full = _nodal_load(mesh, 1.0)
    assert full.sum() == pytest.approx(mesh.areas().sum(), abs=1e-10)


def test_load_callable_matches_constant(two_box_mesh):
    a = assemble_load(two_box_mesh, 50.0)
    b = assemble_load(two_box_mesh, lambda p: 50.0 + 0 * p[:, 0])
    np.testing.assert_allclose(a, b)
    c = assemble_load(two_box_mesh, lambda p: 50.0 + 0 * p[:, 0], quadrature="three-point")
    np.testing.assert_allclose(a, c)


def test_three_point_rule_exact_for_linear_load():
    mesh = TriMesh(UNIT, np.array([[0, 1, 2]]), np.zeros(3, int), np.zeros(1, int), 0)
    got = _nodal_load(mesh, lambda p: p[:, 0], "three-point")
    np.testing.assert_allclose(got, [1 / 24, 1 / 12, 1 / 24], atol=1e-15)
    with pytest.raises(AssemblyError, match="quadrature"):
        _nodal_load(mesh, lambda p: p[:, 0], "gauss7")


def test_primal_matches_sigma_assembly():
    # sigma = 1 + 1/eps inside the inclusion; eps = 1 gives sigma = 2
    m = generate_mesh(DomainSpec(Disk((0, 0), 1.0), [Disk((0, 0), 0.35)], target_h=0.15))
    b = assemble(m, [1.0])
    K = assemble_primal(b)
    coef = np.where(m.elem_label == 1, 2.0, 1.0)
    np.testing.assert_allclose(K.toarray(), assemble_A(m, coef).toarray(), atol=1e-12)


def test_primal_limits(desk_four):
    A = desk_four.A.toarray()
    K = assemble_primal(desk_four, np.full(4, 1e12)).toarray()
    assert np.linalg.norm(K - A) <= 1e-10 * np.linalg.norm(A)
    cholesky(assemble_primal(desk_four, np.full(4, 1e-8)))
    with pytest.raises(ValueError, match="eps"):
        assemble_primal(desk_four, [1e-2, 0.0, 1e-2, 1e-2])


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_mass_spectral_equivalence():
    # M_D ~ h^2 I with mesh independent constants
    ratios = []
    for h in (0.2, 0.1):
        m = generate_mesh(DomainSpec(Disk((0, 0), 1.0), desk_geometries()["four"], target_h=h))
        lo, hi = mass_spectral_ratio(assemble(m), h)
        assert lo > 0
        ratios.append(hi / lo)
    assert max(ratios) <= 50


def test_mass_D_integrates_inclusion_area(two_box_mesh):
    b = assemble(two_box_mesh)
    M = assemble_mass_D(two_box_mesh)
    np.testing.assert_allclose(M.toarray(), b.M_D.toarray())
    for i, (lo, hi) in enumerate(zip(b.offsets[:-1], b.offsets[1:])):
        ones = np.zeros(b.n)
        ones[lo:hi] = 1
        assert ones @ M @ ones == pytest.approx(0.0625, rel=1e-12)
    # no coupling between blocks
    assert M[: b.n_i[0], b.n_i[0]:].nnz == 0


def test_matrix_market_export(tmp_path, desk_one):
    from scipy.io import mmread
    p = tmp_path / "A.mtx"
    export_matrix_market(desk_one.A, p)
    back = sp.csr_matrix(mmread(p))
    assert abs(back - desk_one.A).max() == 0
