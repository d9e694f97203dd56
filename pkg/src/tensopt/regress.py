"""Scalar-on-tensor regression fitters.

Low-rank CP and Tucker coefficients are fitted by block-coordinate ridge:
holding all but one block fixed, each mode factor (and the Tucker core) is
a linear ridge regression on transformed covariates, so the penalized
objective is non-increasing per sweep.  ``krr_fit`` is the closed-form
kernel ridge solver used for oracle experiments where the feature map
comes from known components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .decomp import (
    CpFactors,
    TuckerFactors,
    cp_component_matrix,
    cp_reconstruct,
    tucker_reconstruct,
)
from .multiway import (
    NumericalError,
    flatten_samples,
    inner,
    mode_multiply,
    ridge_solve,
    vec,
)

__all__ = [
    "Dataset",
    "FittedModel",
    "EnsembleModel",
    "cp_feature_map",
    "cp_feature_matrix",
    "tucker_feature_map",
    "tucker_feature_matrix",
    "krr_fit",
    "fit_cp_regression",
    "fit_tucker_regression",
    "predict",
    "predict_many",
    "ensemble_average",
]


@dataclass(frozen=True)
class Dataset:
    """Tensor covariates stacked as (n, I_1..I_M) with a length-n response vector."""

    covariates: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        # C-contiguous copy: identical bits in -> identical fits out,
        # regardless of how the caller assembled the batch
        covs = np.ascontiguousarray(self.covariates, dtype=float)
        y = np.asarray(self.responses, dtype=float).ravel()
        if covs.ndim < 2 or covs.shape[0] < 1:
            raise ValueError("need at least one covariate tensor")
        if covs.shape[0] != y.size:
            raise ValueError(f"covariate/response mismatch: {covs.shape[0]} vs {y.size}")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.covariates.shape[1:]


@dataclass(frozen=True)
class FittedModel:
    kind: str  # "cp" | "tucker"
    coefficient: Union[CpFactors, TuckerFactors]
    lam: float
    train_mse: float
    fit_meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple
    subset_sizes: tuple
    averaged: CpFactors
    ens_rank: int
    feature_matrix: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------

def cp_feature_map(f: CpFactors, x) -> np.ndarray:
    """Length-R features; component r is <beta_M^(r) (x) ... (x) beta_1^(r), vec(x)>."""
    x = np.asarray(x, dtype=float)
    if x.shape != f.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {f.shape}")
    return cp_component_matrix(f).T @ vec(x)


def cp_feature_matrix(f: CpFactors, covs) -> np.ndarray:
    """Stacked CP features, one row per sample."""
    covs = np.asarray(covs, dtype=float)
    if covs.shape[1:] != f.shape:
        raise ValueError(f"shape mismatch: {covs.shape[1:]} vs {f.shape}")
    return flatten_samples(covs) @ cp_component_matrix(f)


def _project_batch(covs: np.ndarray, mats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """Apply mat_m^T to mode m of every sample (skipping None entries)."""
    out = covs
    for m, u in enumerate(mats):
        if u is None:
            continue
        out = np.moveaxis(np.tensordot(out, u, axes=([m + 1], [0])), -1, m + 1)
    return out


def tucker_feature_map(f: TuckerFactors, x) -> np.ndarray:
    """Features P^T vec(x) with P = U_M (x) ... (x) U_1, computed by mode products."""
    x = np.asarray(x, dtype=float)
    if x.shape != f.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {f.shape}")
    t = x
    for m, u in enumerate(f.factors):
        t = mode_multiply(t, u.T, m)
    return vec(t)


def tucker_feature_matrix(f: TuckerFactors, covs) -> np.ndarray:
    covs = np.asarray(covs, dtype=float)
    if covs.shape[1:] != f.shape:
        raise ValueError(f"shape mismatch: {covs.shape[1:]} vs {f.shape}")
    return flatten_samples(_project_batch(covs, f.factors))


def krr_fit(features, y, lam: float) -> np.ndarray:
    """Kernel ridge weights w = (Phi^T Phi + lam I)^(-1) Phi^T y (lam > 0)."""
    if lam <= 0:
        raise ValueError("krr_fit requires lam > 0")
    return ridge_solve(features, y, lam)


# ---------------------------------------------------------------------------
# CP regression by block-coordinate ridge
# ---------------------------------------------------------------------------

def _mode_batch_unfold(covs: np.ndarray, mode: int) -> np.ndarray:
    """(n, I_m, prod of other modes) with columns in Kolda order."""
    arr = np.moveaxis(covs, mode + 1, 1)
    rev = (0, 1) + tuple(range(arr.ndim - 1, 1, -1))
    n, im = arr.shape[0], arr.shape[1]
    return arr.transpose(rev).reshape(n, im, -1)


def _kr_excluding(factors, m: int) -> np.ndarray:
    from .multiway import khatri_rao

    mats = [factors[j] for j in range(len(factors) - 1, -1, -1) if j != m]
    return reduce(khatri_rao, mats)


def _balance(factors):
    nmodes = len(factors)
    norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])
    total = np.prod(norms, axis=0)
    ok = (total > 1e-300) & np.all(norms > 0, axis=0)
    target = np.where(ok, total, 1.0) ** (1.0 / nmodes)
    safe = np.where(ok, norms, 1.0)
    for m in range(nmodes):
        factors[m] = factors[m] * np.where(ok, target / safe[m], 1.0)
    return factors


def _moment_estimate(covs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(1/n) sum_i y_i X_i, an unbiased estimate of the coefficient under a
    standard-Gaussian design; used only to warm-start the block updates."""
    from .multiway import unvec

    n = covs.shape[0]
    return unvec(flatten_samples(covs).T @ y / n, covs.shape[1:])


def fit_cp_regression(
    data: Dataset,
    rank: int,
    lam: Optional[float] = None,
    *,
    max_iter: int = 200,
    tol: float = 1e-7,
    seed: int = 0,
    init: str = "random",
    restarts: int = 1,
) -> FittedModel:
    """Rank-``rank`` CP regression by mode-wise ridge updates.

    ``lam`` penalizes sum_m ||B_m||^2 and defaults to 1e-6 * n (near
    unregularized).  Factor columns are norm-balanced after each sweep,
    which never increases the penalized objective.  ``init`` is "random"
    (seeded normal entries) or "moment" (warm start from a CP fit of the
    cross-moment estimate, which converges in far fewer sweeps).  With
    ``restarts`` > 1 the fit is repeated from differently seeded starts and
    the lowest penalized objective wins, guarding against the occasional
    poor local basin.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    covs, y = data.covariates, data.responses
    n = data.n
    shape = data.shape
    if lam is None:
        lam = 1e-6 * n
    unfolds = [_mode_batch_unfold(covs, m) for m in range(len(shape))]

    best = None
    for j in range(restarts):
        sub_seed = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(17, j)).generate_state(1)[0])
        rng = np.random.default_rng(np.random.SeedSequence(entropy=sub_seed))
        if init == "moment":
            from .decomp import cp_als

            warm = cp_als(_moment_estimate(covs, y), rank, restarts=1, max_iter=50,
                          tol=1e-6, seed=sub_seed)
            factors = [f.copy() for f in warm.approx.factors]
        elif init == "random":
            factors = [rng.standard_normal((s, rank)) for s in shape]
        else:
            raise ValueError(f"unknown init {init!r}")

        prev_obj = None
        rss = np.inf
        obj = np.inf
        converged = False
        sweeps = 0
        trace = []
        for sweeps in range(1, max_iter + 1):
            yhat = None
            for m in range(len(shape)):
                z = _kr_excluding(factors, m)
                design = unfolds[m] @ z
                design2d = design.transpose(0, 2, 1).reshape(n, -1)
                w = ridge_solve(design2d, y, lam)
                factors[m] = w.reshape(shape[m], rank, order="F")
                yhat = design2d @ w
            rss = float(np.dot(y - yhat, y - yhat))
            if not np.isfinite(rss):
                raise NumericalError(f"CP regression diverged at sweep {sweeps}")
            factors = _balance(factors)
            obj = rss + lam * sum(float(np.sum(f ** 2)) for f in factors)
            trace.append(obj)
            if prev_obj is not None and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
                converged = True
                break
            prev_obj = obj
        cand = (obj, j, rss, [f.copy() for f in factors], sweeps, converged, trace)
        if best is None or cand[0] < best[0]:
            best = cand

    _, _, rss, factors, sweeps, converged, trace = best
    coefficient = CpFactors(factors)
    return FittedModel(
        kind="cp",
        coefficient=coefficient,
        lam=float(lam),
        train_mse=rss / n,
        fit_meta={"iterations": sweeps, "converged": converged,
                  "objective_trace": tuple(trace)},
    )


# ---------------------------------------------------------------------------
# Tucker regression by alternating ridge
# ---------------------------------------------------------------------------

def fit_tucker_regression(
    data: Dataset,
    ranks,
    lam: Optional[float] = None,
    *,
    max_iter: int = 200,
    tol: float = 1e-7,
    seed: int = 0,
    init: str = "random",
) -> FittedModel:
    """Tucker regression: alternating ridge over the factor matrices and core.

    The core update given factors is exactly a ridge regression on the
    multilinear features P^T vec(X); factor updates are ridge regressions
    on core-contracted covariates.  ``init`` is "random" (seeded orthonormal
    factors) or "moment" (HOSVD of the cross-moment estimate).
    """
    covs, y = data.covariates, data.responses
    n = data.n
    shape = data.shape
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(shape):
        raise ValueError("one target rank per mode is required")
    for m, r in enumerate(ranks):
        if not 1 <= r <= shape[m]:
            raise ValueError(f"rank {r} out of range for mode {m} of size {shape[m]}")
    if lam is None:
        lam = 1e-6 * n

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(23,)))
    if init == "moment":
        from .multiway import mode_unfold, sym_eig

        bmom = _moment_estimate(covs, y)
        factors = []
        for m, r in enumerate(ranks):
            bm = mode_unfold(bmom, m)
            factors.append(sym_eig(bm @ bm.T).vectors[:, :r])
    elif init == "random":
        factors = []
        for s, r in zip(shape, ranks):
            q, _ = np.linalg.qr(rng.standard_normal((s, r)))
            factors.append(q)
    else:
        raise ValueError(f"unknown init {init!r}")

    def _core_features():
        return flatten_samples(_project_batch(covs, factors))

    def _fit_core(features):
        g = ridge_solve(features, y, lam)
        return g.reshape(ranks, order="F"), features @ g

    core, yhat = _fit_core(_core_features())
    prev_obj = None
    rss = float(np.dot(y - yhat, y - yhat))
    converged = False
    sweeps = 0
    trace = []
    for sweeps in range(1, max_iter + 1):
        for m in range(len(shape)):
            mats = [u if mm != m else None for mm, u in enumerate(factors)]
            proj = _project_batch(covs, mats)
            tm = _mode_batch_unfold(proj, m)  # (n, I_m, prod_{m'!=m} R_m')
            gm = np.moveaxis(core, m, 0).reshape(ranks[m], -1, order="F")
            design = tm @ gm.T
            design2d = design.transpose(0, 2, 1).reshape(n, -1)
            if not design2d.any():
                continue  # zero core: no information on this factor, keep its basis
            w = ridge_solve(design2d, y, lam)
            factors[m] = w.reshape(shape[m], ranks[m], order="F")
        core, yhat = _fit_core(_core_features())
        rss = float(np.dot(y - yhat, y - yhat))
        if not np.isfinite(rss):
            raise NumericalError(f"Tucker regression diverged at sweep {sweeps}")
        obj = rss + lam * (sum(float(np.sum(u ** 2)) for u in factors)
                           + float(np.sum(core ** 2)))
        trace.append(obj)
        if prev_obj is not None and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
            converged = True
            break
        prev_obj = obj

    coefficient = TuckerFactors(core=core, factors=factors)
    return FittedModel(
        kind="tucker",
        coefficient=coefficient,
        lam=float(lam),
        train_mse=rss / n,
        fit_meta={"iterations": sweeps, "converged": converged,
                  "objective_trace": tuple(trace)},
    )


# ---------------------------------------------------------------------------
# prediction and ensembling
# ---------------------------------------------------------------------------

def predict(model, x) -> float:
    """<<x, B_hat>> for a fitted tensor model, or phi(x)^T w for a KRR model
    given as a (feature_map, weights) pair."""
    if isinstance(model, tuple):
        feature_map, weights = model
        return float(np.dot(feature_map(x), np.asarray(weights, dtype=float)))
    b = cp_reconstruct(model.coefficient) if model.kind == "cp" \
        else tucker_reconstruct(model.coefficient)
    return inner(np.asarray(x, dtype=float), b)


def predict_many(model: FittedModel, covs) -> np.ndarray:
    b = cp_reconstruct(model.coefficient) if model.kind == "cp" \
        else tucker_reconstruct(model.coefficient)
    covs = np.asarray(covs, dtype=float)
    if covs.shape[1:] != b.shape:
        raise ValueError(f"shape mismatch: {covs.shape[1:]} vs {b.shape}")
    return flatten_samples(covs) @ vec(b)


def ensemble_average(members: Sequence[FittedModel], subset_sizes: Sequence[int],
                     rank_tol: float = 1e-8,
                     standardize_features: bool = False) -> EnsembleModel:
    """Average K CP members into one CP model.

    The averaged coefficient concatenates every member's components with the
    first-mode factors scaled by 1/K, which is a valid (not necessarily
    minimal) CP representation of the mean tensor.  ``ens_rank`` is the
    numerical column rank of the matrix of all vectorized rank-1 components,
    with singular values above ``rank_tol`` times the largest counted.
    ``standardize_features`` stores that matrix with unit-norm columns (the
    contractive normalization for ensemble feature maps); it does not change
    the averaged coefficient or the rank.
    """
    members = tuple(members)
    if not members:
        raise ValueError("need at least one ensemble member")
    if any(m.kind != "cp" for m in members):
        raise ValueError("ensemble members must be CP models")
    shapes = {m.coefficient.shape for m in members}
    if len(shapes) != 1:
        raise ValueError("ensemble members must share one covariate shape")
    sizes = tuple(int(s) for s in subset_sizes)
    if len(sizes) != len(members):
        raise ValueError("one subset size per member is required")
    k = len(members)

    nmodes = len(members[0].coefficient.factors)
    merged = []
    for m in range(nmodes):
        cols = [mem.coefficient.factors[m] for mem in members]
        block = np.concatenate(cols, axis=1)
        if m == 0:
            block = block / k
        merged.append(block)
    averaged = CpFactors(merged)

    g = np.concatenate([cp_component_matrix(mem.coefficient) for mem in members], axis=1)
    sv = np.linalg.svd(g, compute_uv=False)
    ens_rank = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    if standardize_features:
        norms = np.linalg.norm(g, axis=0)
        g = g / np.where(norms > 0, norms, 1.0)

    return EnsembleModel(members=members, subset_sizes=sizes,
                         averaged=averaged, ens_rank=ens_rank, feature_matrix=g)
