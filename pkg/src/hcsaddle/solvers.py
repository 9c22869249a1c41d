"""Preconditioned Lanczos (minimized iterations), PCG baseline and direct oracles."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .saddle import DENSE_CAP, DimensionError, SaddleOperator, project_image

log = logging.getLogger(__name__)


class FactorizationError(np.linalg.LinAlgError):
    pass


class LanczosBreakdown(RuntimeError):
    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# Sparse Cholesky
# --------------------------------------------------------------------------


class CholeskyFactor:
    """Symmetric factorization ``P A P^T = L D L^T`` backed by SuperLU.

    Diagonal pivoting only, on a fill-reducing ordering of ``A + A^T``;
    a non-positive pivot means ``A`` is not SPD.
    """

    def __init__(self, A: sp.spmatrix):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise FactorizationError("matrix must be square")
        self.shape = A.shape
        if A.shape[0] == 0:
            self._lu = None
            return
        try:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from None
        d = lu.U.diagonal()
        bad = np.flatnonzero(~(d > 0))
        if bad.size:
            k = int(bad[0])
            raise FactorizationError(f"non-positive pivot {d[k]:.3e} at elimination step {k} "
                                     f"(row {int(lu.perm_c[k])}); matrix is not SPD")
        self._lu = lu

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return np.zeros_like(np.asarray(b, float))
        return self._lu.solve(np.asarray(b, dtype=float))

    __call__ = solve


def cholesky(A: sp.spmatrix) -> CholeskyFactor:
    return CholeskyFactor(A)


def solve_chol(factor: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    return factor.solve(b)


# --------------------------------------------------------------------------
# Pseudo-inverse of B_D
# --------------------------------------------------------------------------


class BlockPinv:
    """Moore-Penrose action of ``diag(B_1, ..., B_m)`` with ``ker B_i = span(1)``.

    Each block is factorized once as the SPD matrix ``B_i + (1/n_i) 1 1^T``,
    which coincides with ``B_i`` on mean-zero vectors and maps constants to
    constants.
    """

    def __init__(self, B_blocks: Sequence[sp.spmatrix]):
        self.sizes = [b.shape[0] for b in B_blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self._factors = []
        for i, B in enumerate(B_blocks, start=1):
            ni = B.shape[0]
            Bd = B.toarray() + np.full((ni, ni), 1.0 / ni)
            try:
                self._factors.append(la.cho_factor(Bd, lower=True))
            except la.LinAlgError:
                raise FactorizationError(f"block {i} is not positive definite after the rank-one "
                                         f"correction (disconnected inclusion submesh?)") from None

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        y = np.empty(self.n)
        for f, a, b in zip(self._factors, self.offsets[:-1], self.offsets[1:]):
            ri = r[a:b] - r[a:b].mean()
            yi = la.cho_solve(f, ri)
            y[a:b] = yi - yi.mean()
        return y


def bd_pinv_apply(B_blocks, r: np.ndarray) -> np.ndarray:
    return BlockPinv(B_blocks)(r)


@dataclass
class PrecondAction:
    """Action of ``H = diag(P_A^{-1}, B_D^+)`` on stacked vectors."""

    pa_solve: Callable[[np.ndarray], np.ndarray]
    bd_pinv: BlockPinv
    N: int

    @classmethod
    def from_blocks(cls, blocks, pa_solve=None) -> "PrecondAction":
        if pa_solve is None:
            pa_solve = cholesky(blocks.A)
        return cls(pa_solve, BlockPinv(blocks.B_blocks), blocks.N)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x, dtype=float)
        out[: self.N] = self.pa_solve(x[: self.N])
        out[self.N:] = self.bd_pinv(x[self.N:])
        return out


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual_history: list[float]
    converged: bool
    tol: float
    wall_ms: float = 0.0
    eps: list[float] | None = None
    N: int = 0
    n: int = 0
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("method", "eps", "N", "n", "iterations", "converged", "tol", "seed",
                                  "residual_history", "wall_ms")}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def random_initial_guess(N: int, n: int, offsets: np.ndarray, seed: int) -> np.ndarray:
    """Uniform ``[-1, 1]^{N+n}`` vector with the multiplier part moved into ``Im B_D``."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, N + n)
    z[N:] = project_image(z[N:], offsets)
    return z


# --------------------------------------------------------------------------
# Preconditioned Lanczos method of minimized iterations
# --------------------------------------------------------------------------


def lanczos_solve(op: SaddleOperator, b: np.ndarray, H: Callable[[np.ndarray], np.ndarray],
                  z0: np.ndarray | None = None, tol: float = 1e-6, maxit: int = 1000,
                  gamma_form: str = "standard", breakdown_eps: float = 1e-28,
                  seed: int | None = None, track_orthogonality: int = 0):
    """Solve ``op x = b`` minimizing the ``H``-norm of the residual.

    Directions obey ``y_k = H A y_{k-1} - alpha_k y_{k-1} - gamma_k y_{k-2}``
    with ``A y_k`` mutually ``H``-orthogonal.  ``gamma_form="paper"`` uses
    ``(AHAy_{k-1}, Ay_{k-1})_H / (Ay_{k-2}, Ay_{k-2})_H`` instead of the
    orthogonality-preserving ``(AHAy_{k-1}, Ay_{k-2})_H / (Ay_{k-2}, Ay_{k-2})_H``.

    Every iteration costs one operator and one preconditioner application.
    Breakdown is declared when ``(Ay_k, Ay_k)_H / |y_k|^2`` drops below
    ``breakdown_eps`` times its value at the first step.
    """
    if gamma_form not in ("standard", "paper"):
        raise ValueError(f"gamma_form must be 'standard' or 'paper', not {gamma_form!r}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    N, offsets = op.N, op.offsets
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("zero right-hand side")
    if z0 is None:
        z0 = random_initial_guess(N, op.n, offsets, 0 if seed is None else seed)
    z = np.array(z0, dtype=float, copy=True)
    z[N:] = project_image(z[N:], offsets)

    def proj(v):
        v[N:] = project_image(v[N:], offsets)
        return v

    r = op.apply(z) - b
    hist = [float(np.linalg.norm(r) / nb)]
    betas, alphas, gammas, dens = [], [], [], []
    ortho: list[float] = []
    converged = hist[0] <= tol
    # current and previous direction, its image A y, and H A y
    y = ay = w = None
    y_prev = ay_prev = w_prev = None
    d = d_prev = None
    d_first = None
    k = 0
    while not converged and k < maxit:
        k += 1
        if k == 1:
            y_new = proj(H(r))
            ay_new = op.apply(y_new)
        else:
            v = w  # H A y_{k-1}
            av = op.apply(v)
            alpha = float(av @ w) / d
            y_new = v - alpha * y
            ay_new = av - alpha * ay
            if k > 2:
                num = float(av @ w_prev) if gamma_form == "standard" else float(av @ w)
                gamma = num / d_prev
                y_new -= gamma * y_prev
                ay_new -= gamma * ay_prev
                gammas.append(gamma)
            alphas.append(alpha)
            y_new = proj(y_new)
        w_new = H(ay_new)
        d_new = float(w_new @ ay_new)
        # (Ay, Ay)_H scales with |y|^2; compare the Rayleigh-type ratio with the first one
        ratio = d_new / max(float(y_new @ y_new), np.finfo(float).tiny)
        if d_first is None:
            d_first = ratio
        if not ratio > breakdown_eps * d_first:
            diag = {"iteration": k, "denominator": d_new, "ratio": ratio, "first_ratio": d_first,
                    "alpha": alphas[-1:] or None, "gamma": gammas[-1:] or None}
            raise LanczosBreakdown(f"Lanczos breakdown at iteration {k}: (Ay, Ay)_H = {d_new:.3e}", diag)
        if track_orthogonality and k <= track_orthogonality and ay is not None:
            ortho.append(abs(float(w_new @ ay)) / np.sqrt(d_new * d))
        beta = float(r @ w_new) / d_new
        z -= beta * y_new
        r = op.apply(z) - b
        hist.append(float(np.linalg.norm(r) / nb))
        betas.append(beta)
        dens.append(d_new)
        y_prev, ay_prev, w_prev, d_prev = y, ay, w, d
        y, ay, w, d = y_new, ay_new, w_new, d_new
        converged = hist[-1] <= tol
    if not converged:
        log.info("Lanczos stopped at maxit=%d with relative residual %.3e", maxit, hist[-1])
    report = SolveReport(
        method="PL", iterations=k, residual_history=hist, converged=bool(converged), tol=tol,
        wall_ms=1e3 * (time.perf_counter() - t0), eps=[float(e) for e in op.eps], N=op.N, n=op.n, seed=seed,
        diagnostics={"beta": betas, "alpha": alphas, "gamma": gammas, "denominator": dens,
                     "orthogonality": ortho, "gamma_form": gamma_form},
    )
    return z, report


# --------------------------------------------------------------------------
# PCG baseline
# --------------------------------------------------------------------------


def pcg_solve(K: sp.spmatrix, F: np.ndarray, precond: Callable[[np.ndarray], np.ndarray] | None = None,
              tol: float = 1e-6, maxit: int = 10000, x0: np.ndarray | None = None):
    """Preconditioned conjugate gradients with a relative-residual stop (zero start by default).

    Convergence of the recursively updated residual is confirmed against the
    true residual ``F - K x``; if that check fails the true residual replaces
    the recursive one and the iteration continues.
    """
    t0 = time.perf_counter()
    F = np.asarray(F, dtype=float)
    nb = np.linalg.norm(F)
    if nb == 0:
        raise ValueError("zero right-hand side")
    M = precond if precond is not None else (lambda v: v.copy())
    x = np.zeros_like(F) if x0 is None else np.array(x0, dtype=float, copy=True)
    r = F - K @ x
    hist = [float(np.linalg.norm(r) / nb)]
    converged = hist[0] <= tol
    k = replaced = 0
    if not converged:
        zr = M(r)
        p = zr.copy()
        rz = float(r @ zr)
    while not converged and k < maxit:
        k += 1
        Kp = K @ p
        alpha = rz / float(p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        res = float(np.linalg.norm(r) / nb)
        if res <= tol:
            # confirm on the true residual; on failure continue from it
            r = F - K @ x
            res = float(np.linalg.norm(r) / nb)
            replaced += 1
            if res <= tol:
                hist.append(res)
                converged = True
                break
        hist.append(res)
        zr = M(r)
        rz_new = float(r @ zr)
        p = zr + (rz_new / rz) * p
        rz = rz_new
    report = SolveReport(method="PCG", iterations=k, residual_history=hist, converged=bool(converged), tol=tol,
                         wall_ms=1e3 * (time.perf_counter() - t0), N=K.shape[0],
                         diagnostics={"residual_replacements": replaced})
    return x, report


# --------------------------------------------------------------------------
# Dense oracle
# --------------------------------------------------------------------------


def image_basis(offsets: np.ndarray) -> np.ndarray:
    """Orthonormal basis (``n x (n - m)``) of the vectors with zero mean on every block."""
    blocks = []
    for a, b in zip(offsets[:-1], offsets[1:]):
        ni = int(b - a)
        blocks.append(la.null_space(np.ones((1, ni))))
    if not blocks:
        return np.zeros((0, 0))
    return la.block_diag(*blocks)


def direct_solve_dense(op, b: np.ndarray) -> np.ndarray:
    """Dense direct solve; saddle operators are solved on ``R^N x Im B_D``."""
    b = np.asarray(b, dtype=float)
    dim = op.shape[0]
    if dim > DENSE_CAP:
        raise DimensionError(f"dense solve capped at {DENSE_CAP}, got {dim}")
    if isinstance(op, SaddleOperator):
        W = la.block_diag(np.eye(op.N), image_basis(op.offsets)) if op.n else np.eye(op.N)
        Ad = op.to_dense()
        red = W.T @ Ad @ W
        y = la.solve(red, W.T @ b, assume_a="sym")
        return W @ y
    Ad = op.toarray() if sp.issparse(op) else np.asarray(op, dtype=float)
    try:
        return la.solve(Ad, b)
    except la.LinAlgError:
        return la.lstsq(Ad, b)[0]
