"""CP and Tucker decomposition of a known coefficient tensor.

The under-rank optimism formulas need the best low-rank approximation of
the true coefficient and its residual; ``cp_als`` / ``tucker_hooi``
produce both, plus the residual-orthogonality diagnostics that hold at
their stationary points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence, Union

import numpy as np

from .multiway import (
    NumericalError,
    khatri_rao,
    mode_multiply,
    mode_unfold,
    sym_eig,
    unvec,
    vec,
)

__all__ = [
    "CpFactors",
    "TuckerFactors",
    "ApproxResult",
    "cp_component_matrix",
    "cp_reconstruct",
    "tucker_reconstruct",
    "cp_als",
    "tucker_hooi",
    "residual_orthogonality_check",
]


@dataclass(frozen=True)
class CpFactors:
    """Rank-R CP decomposition: M factor matrices of shapes I_m x R."""

    factors: tuple

    def __init__(self, factors: Sequence[np.ndarray]):
        mats = tuple(np.asarray(f, dtype=float) for f in factors)
        if not mats:
            raise ValueError("need at least one factor matrix")
        ranks = {f.shape[1] for f in mats}
        if any(f.ndim != 2 for f in mats) or len(ranks) != 1:
            raise ValueError("all factors must be matrices sharing one column count")
        if mats[0].shape[1] < 1:
            raise ValueError("rank must be >= 1")
        object.__setattr__(self, "factors", mats)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)


@dataclass(frozen=True)
class TuckerFactors:
    """Tucker decomposition: core (R_1..R_M) plus factors I_m x R_m of full column rank."""

    core: np.ndarray
    factors: tuple

    def __init__(self, core: np.ndarray, factors: Sequence[np.ndarray]):
        core = np.asarray(core, dtype=float)
        mats = tuple(np.asarray(f, dtype=float) for f in factors)
        if core.ndim != len(mats):
            raise ValueError("core order must match the number of factors")
        for m, f in enumerate(mats):
            if f.ndim != 2 or f.shape[1] != core.shape[m]:
                raise ValueError(f"factor {m} columns must match core mode {m}")
            sv = np.linalg.svd(f, compute_uv=False)
            if sv[0] == 0.0 or (sv[-1] / sv[0]) ** 2 <= 1e-10:
                raise ValueError(f"factor {m} is numerically rank deficient")
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "factors", mats)

    @property
    def ranks(self) -> tuple:
        return self.core.shape

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)


@dataclass(frozen=True)
class ApproxResult:
    """Low-rank approximation plus the vectorized residual it leaves behind."""

    approx: Union[CpFactors, TuckerFactors]
    delta: np.ndarray
    delta_norm_sq: float
    iterations: int
    converged: bool
    objective_trace: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def cp_component_matrix(f: CpFactors) -> np.ndarray:
    """Matrix whose column r is the vectorized r-th rank-1 component
    beta_M^(r) (x) ... (x) beta_1^(r); shape prod(I_m) x R."""
    return reduce(khatri_rao, f.factors[::-1])


def cp_reconstruct(f: CpFactors) -> np.ndarray:
    g = cp_component_matrix(f)
    return unvec(g @ np.ones(f.rank), f.shape)


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    out = f.core
    for m, u in enumerate(f.factors):
        out = mode_multiply(out, u, m)
    return out


# ---------------------------------------------------------------------------
# CP alternating least squares
# ---------------------------------------------------------------------------

def _kr_excluding(factors, m: int) -> np.ndarray:
    mats = [factors[j] for j in range(len(factors) - 1, -1, -1) if j != m]
    return reduce(khatri_rao, mats)


def _balance_columns(factors):
    """Spread each component's norm equally across modes (components unchanged)."""
    nmodes = len(factors)
    norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])  # (M, R)
    total = np.prod(norms, axis=0)
    ok = (total > 1e-300) & np.all(norms > 0, axis=0)
    target = np.where(ok, total, 1.0) ** (1.0 / nmodes)
    safe = np.where(ok, norms, 1.0)
    for m in range(nmodes):
        factors[m] = factors[m] * np.where(ok, target / safe[m], 1.0)
    return factors


def cp_als(
    b,
    rank: int,
    *,
    max_iter: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
    restarts: int = 3,
) -> ApproxResult:
    """Best rank-``rank`` CP approximation of ``b`` by ALS with restarts.

    The objective ||b - reconstruction||^2 is non-increasing per full sweep;
    among restarts the lowest-objective solution wins (ties by restart
    index).  Non-finite values abort with a :class:`NumericalError` naming
    the sweep, guarding the known ill-posedness of best low-rank CP
    approximation.
    """
    b = np.asarray(b, dtype=float)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    shape = b.shape
    nmodes = b.ndim
    unfoldings = [mode_unfold(b, m) for m in range(nmodes)]
    b_norm_sq = float(np.dot(vec(b), vec(b)))

    best = None
    for j in range(max(1, restarts)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        factors = [rng.standard_normal((shape[m], rank)) for m in range(nmodes)]
        grams = [f.T @ f for f in factors]
        prev_obj = None
        obj = np.inf
        trace = []
        converged = False
        sweeps = 0
        for sweeps in range(1, max_iter + 1):
            for m in range(nmodes):
                z = _kr_excluding(factors, m)
                v = reduce(np.multiply, [grams[k] for k in range(nmodes) if k != m])
                rhs = (unfoldings[m] @ z).T
                try:
                    sol = np.linalg.solve(v, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.pinv(v) @ rhs
                factors[m] = sol.T
                grams[m] = factors[m].T @ factors[m]
            recon_vec = cp_component_matrix(CpFactors(factors)) @ np.ones(rank)
            obj = float(b_norm_sq - 2.0 * np.dot(recon_vec, vec(b)) + np.dot(recon_vec, recon_vec))
            if not np.isfinite(obj) or any(not np.isfinite(f).all() for f in factors):
                raise NumericalError(f"CP-ALS produced non-finite values at sweep {sweeps}")
            trace.append(obj)
            factors = _balance_columns(factors)
            grams = [f.T @ f for f in factors]
            if prev_obj is not None and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
                converged = True
                break
            prev_obj = obj
        cand = (obj, j, [f.copy() for f in factors], sweeps, converged, tuple(trace))
        if best is None or cand[0] < best[0]:
            best = cand

    _, _, factors, sweeps, converged, trace = best
    approx = CpFactors(factors)
    delta = vec(b) - cp_component_matrix(approx) @ np.ones(rank)
    return ApproxResult(
        approx=approx,
        delta=delta,
        delta_norm_sq=float(np.dot(delta, delta)),
        iterations=sweeps,
        converged=converged,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# Tucker via HOSVD init + HOOI
# ---------------------------------------------------------------------------

def _leading_eigvecs(mat: np.ndarray, k: int) -> np.ndarray:
    pair = sym_eig(mat)
    return pair.vectors[:, :k]


def tucker_hooi(b, ranks, *, max_iter: int = 500, tol: float = 1e-8) -> ApproxResult:
    """Truncated Tucker approximation: HOSVD initialization plus HOOI sweeps.

    Factors stay orthonormal (eigenvectors of unfolding Grams); the core is
    the least-squares fit given the factors, so the residual satisfies
    P~^T delta = 0 at return.
    """
    b = np.asarray(b, dtype=float)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != b.ndim:
        raise ValueError("one target rank per mode is required")
    for m, r in enumerate(ranks):
        if not 1 <= r <= b.shape[m]:
            raise ValueError(f"rank {r} out of range for mode {m} of size {b.shape[m]}")

    b_norm_sq = float(np.dot(vec(b), vec(b)))
    factors = []
    for m in range(b.ndim):
        bm = mode_unfold(b, m)
        factors.append(_leading_eigvecs(bm @ bm.T, ranks[m]))

    def _core(fs):
        out = b
        for m, u in enumerate(fs):
            out = mode_multiply(out, u.T, m)
        return out

    prev_obj = None
    obj = np.inf
    trace = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        for m in range(b.ndim):
            y = b
            for mm, u in enumerate(factors):
                if mm != m:
                    y = mode_multiply(y, u.T, mm)
            ym = mode_unfold(y, m)
            factors[m] = _leading_eigvecs(ym @ ym.T, ranks[m])
        core = _core(factors)
        obj = float(b_norm_sq - np.dot(vec(core), vec(core)))
        trace.append(obj)
        if obj <= 1e-15 * max(1.0, b_norm_sq):
            converged = True
            break
        if prev_obj is not None and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
            converged = True
            break
        prev_obj = obj

    approx = TuckerFactors(core=_core(factors), factors=factors)
    delta = vec(b) - vec(tucker_reconstruct(approx))
    return ApproxResult(
        approx=approx,
        delta=delta,
        delta_norm_sq=float(np.dot(delta, delta)),
        iterations=sweeps,
        converged=converged,
        objective_trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# residual orthogonality (stationarity diagnostics)
# ---------------------------------------------------------------------------

def residual_orthogonality_check(b, f: Union[CpFactors, TuckerFactors]) -> float:
    """Max violation of the residual-orthogonality identity for a fitted ``f``.

    CP: max_r |<v~_r, delta>| over the vectorized rank-1 components.
    Tucker: ||P~^T delta||_inf with P~ = U_M (x) ... (x) U_1.
    """
    b = np.asarray(b, dtype=float)
    if isinstance(f, CpFactors):
        g = cp_component_matrix(f)
        delta = vec(b) - g @ np.ones(f.rank)
        return float(np.max(np.abs(g.T @ delta), initial=0.0))
    if isinstance(f, TuckerFactors):
        delta = vec(b) - vec(tucker_reconstruct(f))
        t = unvec(delta, f.shape)
        for m, u in enumerate(f.factors):
            t = mode_multiply(t, u.T, m)
        return float(np.max(np.abs(vec(t)), initial=0.0))
    raise ValueError(f"unsupported factor type: {type(f).__name__}")
