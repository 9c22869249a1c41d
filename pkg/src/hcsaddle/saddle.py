"""The block operator ``[[A, B^T], [B, -Sigma_eps]]`` acting on stacked ``(u, lambda)``."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .assembly import FemBlocks, _check_eps

DENSE_CAP = 3000


class DimensionError(ValueError):
    pass


def split(x: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    return x[:N], x[N:]


def stack(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(u, float), np.asarray(lam, float)])


def project_image(lam: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Remove the per-inclusion mean, i.e. project onto ``Im B_D``."""
    out = np.array(lam, dtype=float, copy=True)
    for a, b in zip(offsets[:-1], offsets[1:]):
        if b > a:
            out[a:b] -= out[a:b].mean()
    return out


def block_means(v: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.array([v[a:b].mean() for a, b in zip(offsets[:-1], offsets[1:])])


class SaddleOperator:
    """Matrix-free saddle operator over immutable :class:`FemBlocks`.

    ``eps`` all zero gives the limit operator of perfectly conducting
    inclusions.
    """

    def __init__(self, blocks: FemBlocks, eps=None):
        self.blocks = blocks
        self.eps = blocks.eps if eps is None else _check_eps(eps, blocks.m)
        self.N = blocks.N
        self.n = blocks.n
        self.offsets = blocks.offsets
        self._B_D = blocks.B_D
        self._sigma = sp.block_diag([e * b for e, b in zip(self.eps, blocks.B_blocks)], format="csr") \
            if blocks.m else sp.csr_matrix((0, 0))

    @property
    def shape(self) -> tuple[int, int]:
        d = self.N + self.n
        return d, d

    @property
    def is_limit(self) -> bool:
        return bool(np.all(self.eps == 0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.N + self.n,):
            raise DimensionError(f"expected a vector of length {self.N + self.n}, got shape {x.shape}")
        u, lam = x[: self.N], x[self.N:]
        y = np.empty_like(x)
        y[: self.N] = self.blocks.A @ u
        if self.n:
            y[: self.n] += self._B_D @ lam
            y[self.N:] = self._B_D @ u[: self.n] - self._sigma @ lam
        return y

    __matmul__ = apply

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.apply, rmatvec=self.apply, dtype=float)

    def to_sparse(self) -> sp.csr_matrix:
        Bt = self.blocks.B.T
        return sp.bmat([[self.blocks.A, Bt], [self.blocks.B, -self._sigma]], format="csr")

    def to_dense(self) -> np.ndarray:
        if self.shape[0] > DENSE_CAP:
            raise DimensionError(f"dense materialization capped at {DENSE_CAP}, operator has {self.shape[0]}")
        return self.to_sparse().toarray()


def build_saddle(blocks: FemBlocks, eps=None) -> SaddleOperator:
    return SaddleOperator(blocks, eps)


def rhs(blocks: FemBlocks) -> np.ndarray:
    return stack(blocks.F, np.zeros(blocks.n))


def relative_residual(op: SaddleOperator, x: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("relative residual undefined for a zero right-hand side")
    return float(np.linalg.norm(op.apply(x) - b) / nb)
