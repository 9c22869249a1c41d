"""Dense checks of the spectral properties behind the block preconditioner.

All routines work at desk scale: every dense matrix is capped at
``DENSE_CAP`` rows.  Generalized eigenproblems posed on ``lambda in Im B_D``
are solved in an explicit orthonormal basis of that subspace, so kernel
directions never appear as spurious zero eigenvalues.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .assembly import FemBlocks, assemble_primal
from .saddle import DENSE_CAP, DimensionError, SaddleOperator
from .solvers import cholesky, image_basis

GOLDEN_MINUS = (1.0 - np.sqrt(5.0)) / 2.0
GOLDEN_PLUS = (1.0 + np.sqrt(5.0)) / 2.0


def _cap(dim: int, what: str):
    if dim > DENSE_CAP:
        raise DimensionError(f"{what}: dimension {dim} exceeds the dense cap {DENSE_CAP}")


def schur_S00(blocks: FemBlocks) -> np.ndarray:
    """``A_DD - A_D0 A_00^{-1} A_0D`` as a dense ``n x n`` matrix."""
    _cap(blocks.n, "schur_S00")
    A_DD = blocks.A_DD.toarray()
    if blocks.n0 == 0:
        return A_DD
    A_0D = blocks.A_0D.toarray()
    X = cholesky(blocks.A_00).solve(A_0D)
    S = A_DD - blocks.A_D0 @ X
    return 0.5 * (S + S.T)


def BAinvBt(blocks: FemBlocks) -> np.ndarray:
    """``B A^{-1} B^T`` computed directly from a factorization of the full ``A``."""
    _cap(blocks.n, "B A^-1 B^T")
    Bt = blocks.B.T.toarray()
    X = cholesky(blocks.A).solve(Bt)
    S = blocks.B @ X
    return 0.5 * (S + S.T)


def verify_lemma1(blocks: FemBlocks) -> float:
    """Relative Frobenius gap between ``B A^{-1} B^T`` and ``B_D S00^{-1} B_D``."""
    lhs = BAinvBt(blocks)
    BD = blocks.B_D.toarray()
    rhs = BD @ la.cho_solve(la.cho_factor(schur_S00(blocks)), BD)
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))


@dataclass
class MuSpectrum:
    mu_min: float
    mu_max: float
    values: np.ndarray

    def __iter__(self):
        return iter((self.mu_min, self.mu_max, self.values))


def mu_spectrum(blocks: FemBlocks) -> MuSpectrum:
    """Eigenvalues of ``B A^{-1} B^T psi = mu B_D psi`` restricted to ``Im B_D``."""
    Q = image_basis(blocks.offsets)
    S = Q.T @ BAinvBt(blocks) @ Q
    Bm = Q.T @ (blocks.B_D @ Q)
    mu = la.eigh(0.5 * (S + S.T), 0.5 * (Bm + Bm.T), eigvals_only=True)
    return MuSpectrum(float(mu[0]), float(mu[-1]), mu)


def mu_spectrum_schur(blocks: FemBlocks, tol: float = 1e-10) -> np.ndarray:
    """Nonzero eigenvalues of ``B_D u = mu S00 u`` (the Schur-complement form)."""
    vals = la.eigh(blocks.B_D.toarray(), schur_S00(blocks), eigvals_only=True)
    return np.sort(vals[vals > tol * vals.max()])


def mu_spectrum_sqrt(blocks: FemBlocks) -> np.ndarray:
    """Eigenvalues of ``B_D^{1/2} S00^{-1} B_D^{1/2}`` on ``Im B_D``."""
    root = []
    for B in blocks.B_blocks:
        w, V = la.eigh(B.toarray())
        w = np.clip(w, 0.0, None)
        root.append((V * np.sqrt(w)) @ V.T)
    R = la.block_diag(*root)
    Q = image_basis(blocks.offsets)
    M = R @ la.cho_solve(la.cho_factor(schur_S00(blocks)), R)
    Mq = Q.T @ M @ Q
    return la.eigh(0.5 * (Mq + Mq.T), eigvals_only=True)


def _preconditioner_blocks(op: SaddleOperator, which: str) -> np.ndarray:
    blocks = op.blocks
    if which == "exact":
        lam = BAinvBt(blocks)
    elif which == "practical":
        lam = blocks.B_D.toarray()
    else:
        raise ValueError(f"preconditioner must be 'exact' or 'practical', not {which!r}")
    return la.block_diag(blocks.A.toarray(), lam)


def preconditioned_spectrum(op: SaddleOperator, which: str = "practical") -> np.ndarray:
    """Eigenvalues of ``op x = nu P x`` with ``u in R^N`` and ``lambda in Im B_D``.

    ``which="exact"`` takes ``P = diag(A, B A^{-1} B^T)``, ``"practical"``
    takes ``P = diag(A, B_D)``.
    """
    _cap(op.shape[0], "preconditioned_spectrum")
    W = la.block_diag(np.eye(op.N), image_basis(op.offsets))
    Ar = W.T @ op.to_dense() @ W
    Pr = W.T @ _preconditioner_blocks(op, which) @ W
    return la.eigh(0.5 * (Ar + Ar.T), 0.5 * (Pr + Pr.T), eigvals_only=True)


def nu_from_mu(mu: float, eps: float) -> tuple[float, float]:
    """Roots of ``nu - 1/(nu - 1) = -eps * mu``."""
    t = eps * mu
    disc = np.sqrt(5.0 + 2.0 * t + t * t)
    return (1.0 - t - disc) / 2.0, (1.0 - t + disc) / 2.0


def predicted_exact_spectrum(mu: np.ndarray, eps: float, N: int) -> np.ndarray:
    """Spectrum of the exactly preconditioned operator from the ``mu`` spectrum.

    The Rayleigh quotient entering the quadratic for ``nu`` is
    ``(B_D l, l) / (B A^{-1} B^T l, l) = 1 / mu``.  Besides the ``2 (n - m)``
    roots there are ``N - (n - m)`` eigenvalues equal to one.
    """
    mu = np.asarray(mu, dtype=float)
    lo, hi = nu_from_mu(1.0 / mu, eps)
    ones = np.ones(N - mu.size)
    return np.sort(np.concatenate([lo, ones, hi]))


def predicted_practical_spectrum(mu: np.ndarray, eps: float, N: int) -> np.ndarray:
    """Spectrum of ``op x = nu diag(A, B_D) x`` from the ``mu`` spectrum.

    Eliminating ``u`` gives ``(nu - 1)(nu + eps) = mu`` on ``Im B_D``, plus
    ``N - (n - m)`` unit eigenvalues.
    """
    mu = np.asarray(mu, dtype=float)
    disc = np.sqrt((1.0 + eps) ** 2 + 4.0 * mu)
    lo, hi = (1.0 - eps - disc) / 2.0, (1.0 - eps + disc) / 2.0
    return np.sort(np.concatenate([lo, np.ones(N - mu.size), hi]))


def verify_nu_prediction(blocks: FemBlocks, eps: float) -> float:
    """Largest gap between predicted and computed exact-preconditioner spectra (uniform eps)."""
    spec = mu_spectrum(blocks)
    op = SaddleOperator(blocks, np.full(blocks.m, float(eps)))
    computed = np.sort(preconditioned_spectrum(op, "exact"))
    predicted = predicted_exact_spectrum(spec.values, float(eps), blocks.N)
    return float(np.max(np.abs(computed - predicted)))


def limit_solution(blocks: FemBlocks) -> np.ndarray:
    """``u`` of the ``eps = 0`` system, found by collapsing each inclusion to one unknown."""
    N, off = blocks.N, blocks.offsets
    rows = np.arange(N)
    cols = np.empty(N, dtype=int)
    for i in range(blocks.m):
        cols[off[i]:off[i + 1]] = i
    cols[blocks.n:] = blocks.m + np.arange(blocks.n0)
    P = sp.csr_matrix((np.ones(N), (rows, cols)), shape=(N, blocks.m + blocks.n0))
    red = (P.T @ blocks.A @ P).tocsc()
    return P @ cholesky(red).solve(P.T @ blocks.F)


def verify_lemma5(blocks: FemBlocks, eps_sequence) -> tuple[list[float], float]:
    """Errors ``||u_eps - u_0||`` along ``eps_sequence`` and their fitted log-log slope."""
    eps_sequence = [float(e) for e in eps_sequence]
    _cap(blocks.N + blocks.n, "verify_lemma5")
    u0 = limit_solution(blocks)
    errs = []
    for e in eps_sequence:
        if e == 0.0:
            errs.append(float(np.linalg.norm(limit_solution(blocks) - u0)))
            continue
        K = assemble_primal(blocks, np.full(blocks.m, e))
        errs.append(float(np.linalg.norm(cholesky(K).solve(blocks.F) - u0)))
    pos = [(e, r) for e, r in zip(eps_sequence, errs) if e > 0 and r > 0]
    slope = float("nan")
    if len(pos) >= 2:
        x = np.log10([p[0] for p in pos])
        y = np.log10([p[1] for p in pos])
        slope = float(np.polyfit(x, y, 1)[0])
    return errs, slope


def mass_spectral_ratio(blocks: FemBlocks, h: float) -> tuple[float, float]:
    """Extreme eigenvalues of ``M_D`` divided by ``h^2``."""
    _cap(blocks.n, "mass_spectral_ratio")
    w = la.eigh(blocks.M_D.toarray(), eigvals_only=True)
    return float(w[0] / h ** 2), float(w[-1] / h ** 2)


@dataclass
class SpectralReport:
    mu_min: float = float("nan")
    mu_max: float = float("nan")
    nu_neg_range: tuple[float, float] = (float("nan"), float("nan"))
    nu_pos_range: tuple[float, float] = (float("nan"), float("nan"))
    lemma1_discrepancy: float = float("nan")
    refinement_series: list[dict] = field(default_factory=list)
    eps_series: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)


# --------------------------------------------------------------------------
# Desk-scale suite
# --------------------------------------------------------------------------


def desk_geometries():
    """One centred inclusion and four symmetric inclusions in the unit disk."""
    from .mesh import Disk

    one = [Disk((0.0, 0.0), 0.35)]
    four = [Disk((sx * 0.45, sy * 0.45), 0.25) for sx, sy in ((1, 1), (-1, 1), (1, -1), (-1, -1))]
    return {"one": one, "four": four}


def desk_blocks(inclusions, target_N: int, refine: int = 0) -> tuple[FemBlocks, float]:
    """Assemble a unit-disk mesh with about ``target_N`` free nodes, halved ``refine`` times."""
    import warnings

    from .assembly import assemble
    from .mesh import Disk, DomainSpec, generate_mesh

    h = np.sqrt(2 * np.pi / (np.sqrt(3) * target_N)) / 2 ** refine
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mesh = generate_mesh(DomainSpec(Disk((0.0, 0.0), 1.0), inclusions, target_h=h))
    return assemble(mesh), h


def verify_suite(target_N: int = 300, eps_values=(1e-2, 1e-4)) -> SpectralReport:
    """Run every spectral check on small unit-disk meshes and collect a report."""
    rep = SpectralReport()
    checks = rep.checks
    mu_min_all, mu_max_all = np.inf, -np.inf
    schur_gaps = []
    for name, incs in desk_geometries().items():
        coarse, h = desk_blocks(incs, target_N)
        fine, h2 = desk_blocks(incs, target_N, refine=1)
        schur_gaps.append(verify_lemma1(coarse))
        series = []
        for b, hh in ((coarse, h), (fine, h2)):
            s = mu_spectrum(b)
            gap4 = float(np.max(np.abs(mu_spectrum_schur(b) - s.values)))
            gap3 = float(np.max(np.abs(mu_spectrum_sqrt(b) - s.values)))
            series.append({"geometry": name, "h": hh, "N": b.N, "n": b.n, "mu_min": s.mu_min,
                           "mu_max": s.mu_max, "formulation_gap": max(gap3, gap4)})
            mu_min_all = min(mu_min_all, s.mu_min)
            mu_max_all = max(mu_max_all, s.mu_max)
        rep.refinement_series.extend(series)
        checks[f"mu_stable_{name}"] = abs(series[1]["mu_min"] - series[0]["mu_min"]) <= 0.25 * series[0]["mu_min"]
        checks[f"formulations_agree_{name}"] = max(r["formulation_gap"] for r in series) <= 1e-8
        for e in eps_values:
            dev = verify_nu_prediction(coarse, e)
            rep.eps_series.append({"geometry": name, "eps": e, "nu_prediction_gap": dev})
            checks[f"nu_prediction_{name}_{e:.0e}"] = dev <= 1e-7
        if name == "four":
            ev = preconditioned_spectrum(SaddleOperator(coarse), "exact")
            targets = np.array([GOLDEN_MINUS, 1.0, GOLDEN_PLUS])
            dist = np.min(np.abs(ev[:, None] - targets[None, :]), axis=1)
            checks["three_eigenvalues"] = float(dist.max()) <= 1e-8
            prac = preconditioned_spectrum(SaddleOperator(coarse, np.full(coarse.m, min(eps_values))), "practical")
            neg, pos = prac[prac < 0], prac[prac > 0]
            rep.nu_neg_range = (float(neg.min()), float(neg.max()))
            rep.nu_pos_range = (float(pos.min()), float(pos.max()))
            checks["nu_away_from_zero"] = float(np.min(np.abs(prac))) >= 0.05
            errs, slope = verify_lemma5(coarse, [1e-2, 1e-4, 1e-6])
            rep.eps_series.append({"geometry": name, "limit_errors": errs, "limit_slope": slope})
            checks["limit_error_decreasing"] = bool(np.all(np.diff(errs) < 0))
            checks["limit_error_slope"] = slope >= 0.5
    rep.mu_min, rep.mu_max = float(mu_min_all), float(mu_max_all)
    rep.lemma1_discrepancy = float(max(schur_gaps))
    checks["schur_identity"] = rep.lemma1_discrepancy <= 1e-10
    checks["mu_max_le_1"] = rep.mu_max <= 1 + 1e-8
    checks["mu_min_positive"] = rep.mu_min > 0
    return rep
