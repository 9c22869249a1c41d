import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from hcsaddle.assembly import assemble, assemble_primal
from hcsaddle.saddle import DimensionError, SaddleOperator, project_image, relative_residual, rhs
from hcsaddle.solvers import (
    BlockPinv, FactorizationError, LanczosBreakdown, PrecondAction, bd_pinv_apply, cholesky, direct_solve_dense,
    image_basis, lanczos_solve, pcg_solve, random_initial_guess, solve_chol,
)


def _spd(rng, n):
    X = rng.normal(size=(n, n))
    return X @ X.T + n * np.eye(n)


# ---------------------------------------------------------------- Cholesky


def test_cholesky_trivial():
    np.testing.assert_allclose(solve_chol(cholesky(sp.eye(5, format="csc")), np.arange(5.0)), np.arange(5.0))
    np.testing.assert_allclose(solve_chol(cholesky(sp.csc_matrix([[4.0]])), np.array([2.0])), [0.5])


def test_cholesky_random_spd(rng):
    A = _spd(rng, 50)
    Ainv = la.inv(A)
    f = cholesky(sp.csc_matrix(A))
    for _ in range(3):
        b = rng.normal(size=50)
        x = f.solve(b)
        np.testing.assert_allclose(x, Ainv @ b, rtol=0, atol=1e-11 * np.abs(Ainv @ b).max())


def test_cholesky_desk_residual(desk_four, rng):
    b = rng.normal(size=desk_four.N)
    x = cholesky(desk_four.A).solve(b)
    assert np.linalg.norm(desk_four.A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_cholesky_rejects_indefinite():
    A = sp.csc_matrix(np.diag([2.0, 1.0, -1.0, 3.0]))
    with pytest.raises(FactorizationError, match=r"pivot .* step \d+ \(row 2\)"):
        cholesky(A)


# ---------------------------------------------------------------- B_D pseudo-inverse


def test_pinv_kernel(desk_four):
    r = np.repeat([1.0, 2.0, -3.0, 0.25], desk_four.n_i)
    assert np.abs(bd_pinv_apply(desk_four.B_blocks, r)).max() <= 1e-12


def test_pinv_apply_back(desk_four, rng):
    P = BlockPinv(desk_four.B_blocks)
    x = rng.normal(size=desk_four.n)
    r = desk_four.B_D @ x
    y = P(r)
    np.testing.assert_allclose(desk_four.B_D @ y, r, atol=1e-10 * np.abs(r).max())
    np.testing.assert_allclose(y, project_image(x, desk_four.offsets), atol=1e-10 * np.abs(x).max())


def test_pinv_matches_dense_moore_penrose(desk):
    P = BlockPinv(desk.B_blocks)
    Bd = desk.B_D.toarray()
    ref = la.pinv(Bd, atol=1e-10 * np.abs(Bd).max())
    X = np.column_stack([P(e) for e in np.eye(desk.n)])
    np.testing.assert_allclose(X, ref, atol=1e-9)
    # the four Moore-Penrose identities
    np.testing.assert_allclose(Bd @ X @ Bd, Bd, atol=1e-9)
    np.testing.assert_allclose(X @ Bd @ X, X, atol=1e-9)
    np.testing.assert_allclose((Bd @ X).T, Bd @ X, atol=1e-9)
    np.testing.assert_allclose((X @ Bd).T, X @ Bd, atol=1e-9)


def test_pinv_small_block_eig_oracle(two_box_mesh):
    # 25x25 blocks; the eigendecomposition oracle uses the nonzero spectrum only
    b = assemble(two_box_mesh)
    P = BlockPinv(b.B_blocks)
    B1 = b.B_blocks[0].toarray()
    w, V = la.eigh(B1)
    keep = w > 1e-10 * w.max()
    ref = (V[:, keep] / w[keep]) @ V[:, keep].T
    got = np.column_stack([P(np.r_[e, np.zeros(b.n_i[1])])[: b.n_i[0]] for e in np.eye(b.n_i[0])])
    np.testing.assert_allclose(got, ref, atol=1e-9)


def test_pinv_disconnected_block_fails():
    # two separate edges: kernel of dimension two
    B = sp.csr_matrix(np.array([[1, -1, 0, 0], [-1, 1, 0, 0], [0, 0, 1, -1], [0, 0, -1, 1]], float))
    with pytest.raises(FactorizationError, match="block 1"):
        BlockPinv([B])


# ---------------------------------------------------------------- Lanczos


def test_lanczos_without_inclusions(square_mesh):
    b = assemble(square_mesh)
    op = SaddleOperator(b)
    _, rep = lanczos_solve(op, rhs(b), PrecondAction.from_blocks(b), tol=1e-10)
    assert rep.converged and rep.iterations <= 2


@pytest.mark.parametrize("eps", [1e-2, 1e-6])
def test_lanczos_matches_primal_oracle(desk, eps):
    blocks = desk.with_eps(np.full(desk.m, eps))
    op = SaddleOperator(blocks)
    tol = 1e-8
    z0 = random_initial_guess(op.N, op.n, op.offsets, 3)
    z, rep = lanczos_solve(op, rhs(blocks), PrecondAction.from_blocks(blocks), z0, tol=tol, seed=3)
    assert rep.converged
    assert relative_residual(op, z, rhs(blocks)) <= tol
    u_ref = la.solve(assemble_primal(blocks).toarray(), blocks.F, assume_a="pos")
    assert np.linalg.norm(z[: op.N] - u_ref) <= 10 * tol * np.linalg.norm(u_ref)
    # multipliers stay in Im B_D
    np.testing.assert_allclose(project_image(z[op.N:], op.offsets), z[op.N:], atol=1e-10)


def test_lanczos_limit_system_matches_dense(desk_four):
    op = SaddleOperator(desk_four, np.zeros(4))
    b = rhs(desk_four)
    z, rep = lanczos_solve(op, b, PrecondAction.from_blocks(desk_four), tol=1e-10)
    ref = direct_solve_dense(op, b)
    assert rep.converged
    np.testing.assert_allclose(z[: op.N], ref[: op.N], atol=1e-8 * np.abs(ref).max())


def test_lanczos_gauge_invariance(desk_four):
    """Shifting the initial multipliers by per-inclusion constants changes nothing."""
    blocks = desk_four.with_eps(np.full(4, 1e-4))
    op = SaddleOperator(blocks)
    H = PrecondAction.from_blocks(blocks)
    z0 = random_initial_guess(op.N, op.n, op.offsets, 11)
    shifted = z0.copy()
    shifted[op.N:] += np.repeat([5.0, -1.0, 2.0, 7.0], blocks.n_i)
    a, ra = lanczos_solve(op, rhs(blocks), H, z0, tol=1e-8)
    b, rb = lanczos_solve(op, rhs(blocks), H, shifted, tol=1e-8)
    assert ra.iterations == rb.iterations
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_lanczos_maxit_reports(desk_one):
    op = SaddleOperator(desk_one)
    _, rep = lanczos_solve(op, rhs(desk_one), PrecondAction.from_blocks(desk_one), tol=1e-14, maxit=3)
    assert not rep.converged and rep.iterations == 3
    assert len(rep.residual_history) == 4


def test_lanczos_breakdown_diagnostics(desk_one):
    op = SaddleOperator(desk_one)
    with pytest.raises(LanczosBreakdown) as exc:
        lanczos_solve(op, rhs(desk_one), PrecondAction.from_blocks(desk_one), tol=1e-12, breakdown_eps=1e300)
    assert "denominator" in exc.value.diagnostics


def test_lanczos_h_orthogonality(small_rings):
    blocks = small_rings.with_eps(np.full(small_rings.m, 1e-4))
    op = SaddleOperator(blocks)
    _, rep = lanczos_solve(op, rhs(blocks), PrecondAction.from_blocks(blocks),
                           random_initial_guess(op.N, op.n, op.offsets, 0), tol=1e-8, track_orthogonality=10)
    cos = np.asarray(rep.diagnostics["orthogonality"])
    assert cos.size == 9
    assert cos.max() <= 1e-8


def test_gamma_forms_agree_early(small_rings):
    blocks = small_rings.with_eps(np.full(small_rings.m, 1e-4))
    op = SaddleOperator(blocks)
    H = PrecondAction.from_blocks(blocks)
    z0 = random_initial_guess(op.N, op.n, op.offsets, 0)
    _, std = lanczos_solve(op, rhs(blocks), H, z0, tol=1e-3)
    _, pap = lanczos_solve(op, rhs(blocks), H, z0, tol=1e-3, maxit=2, gamma_form="paper")
    assert std.converged
    h0 = std.residual_history[:3]
    np.testing.assert_allclose(pap.residual_history[:3], h0, rtol=1e-8)
    # the literal variant loses the three-term orthogonality and stalls
    _, slow = lanczos_solve(op, rhs(blocks), H, z0, tol=1e-6, maxit=200, gamma_form="paper")
    assert not slow.converged
    with pytest.raises(ValueError):
        lanczos_solve(op, rhs(blocks), H, z0, gamma_form="other")


def test_lanczos_contrast_robust_small(small_rings):
    its = []
    for e in 10.0 ** -np.arange(1, 9):
        blocks = small_rings.with_eps(np.full(small_rings.m, e))
        op = SaddleOperator(blocks)
        _, rep = lanczos_solve(op, rhs(blocks), PrecondAction.from_blocks(blocks),
                               random_initial_guess(op.N, op.n, op.offsets, 0), tol=1e-6)
        assert rep.converged
        its.append(rep.iterations)
    assert max(its) - min(its) <= 2


def test_random_initial_guess_reproducible():
    off = np.array([0, 4, 9])
    a = random_initial_guess(20, 9, off, 5)
    np.testing.assert_array_equal(a, random_initial_guess(20, 9, off, 5))
    assert not np.array_equal(a, random_initial_guess(20, 9, off, 6))
    np.testing.assert_allclose(project_image(a[20:], off), a[20:])


def test_report_json_keys(desk_one):
    op = SaddleOperator(desk_one)
    _, rep = lanczos_solve(op, rhs(desk_one), PrecondAction.from_blocks(desk_one), tol=1e-6, seed=0)
    import json
    d = json.loads(rep.to_json())
    assert set(d) == {"method", "eps", "N", "n", "iterations", "converged", "tol", "seed",
                      "residual_history", "wall_ms"}


# ---------------------------------------------------------------- PCG


def test_pcg_on_A_is_immediate(desk_four):
    A = desk_four.A
    _, rep = pcg_solve(A, desk_four.F, cholesky(A), tol=1e-8)
    assert rep.converged and rep.iterations <= 2


def test_pcg_grows_with_contrast(small_rings):
    its = []
    P = cholesky(small_rings.A)
    for e in (1e-2, 1e-4, 1e-6):
        blocks = small_rings.with_eps(np.full(small_rings.m, e))
        _, rep = pcg_solve(assemble_primal(blocks), blocks.F, P, tol=1e-6)
        its.append(rep.iterations)
    assert its[0] < its[1] < its[2]


def test_pcg_matches_direct(desk_four):
    blocks = desk_four.with_eps(np.full(4, 1e-3))
    K = assemble_primal(blocks)
    tol = 1e-8
    x, rep = pcg_solve(K, blocks.F, cholesky(blocks.A), tol=tol)
    ref = la.solve(K.toarray(), blocks.F)
    assert rep.converged
    assert np.linalg.norm(x - ref) <= 10 * tol * np.linalg.norm(ref) * np.linalg.cond(K.toarray()) ** 0
    assert np.linalg.norm(K @ x - blocks.F) <= tol * np.linalg.norm(blocks.F)


def test_pcg_confirms_true_residual(small_rings):
    blocks = small_rings.with_eps(np.full(small_rings.m, 1e-8))
    K = assemble_primal(blocks)
    x, rep = pcg_solve(K, blocks.F, cholesky(blocks.A), tol=1e-6, maxit=300)
    true = np.linalg.norm(blocks.F - K @ x) / np.linalg.norm(blocks.F)
    if rep.converged:
        assert true <= 1e-6
    else:
        assert rep.iterations == 300


def test_pcg_maxit(desk_four):
    blocks = desk_four.with_eps(np.full(4, 1e-6))
    _, rep = pcg_solve(assemble_primal(blocks), blocks.F, None, tol=1e-12, maxit=5)
    assert not rep.converged and rep.iterations == 5


# ---------------------------------------------------------------- dense oracle


def test_direct_dense(desk_four, rng):
    I = np.eye(7)
    b = rng.normal(size=7)
    np.testing.assert_allclose(direct_solve_dense(I, b), b)
    op = SaddleOperator(desk_four, np.full(4, 1e-5))
    rb = rhs(desk_four)
    x = direct_solve_dense(op, rb)
    assert relative_residual(op, x, rb) <= 1e-10
    with pytest.raises(DimensionError):
        direct_solve_dense(np.eye(3001), np.ones(3001))


def test_image_basis(rng):
    off = np.array([0, 3, 8])
    W = image_basis(off)
    assert W.shape == (8, 6)
    np.testing.assert_allclose(W.T @ W, np.eye(6), atol=1e-14)
    np.testing.assert_allclose(W[:3].sum(axis=0), 0, atol=1e-14)
