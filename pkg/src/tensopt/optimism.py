"""Closed-form expected Random-X optimism and the model-selection baselines.

One evaluator serves the true/over/under/plug-in rank cases for both CP
and Tucker models: they share the functional form

    (2 (sigma^2 + lam^2 v1/(v1+lam)^2) / n) * sum_r v_r^2/(v_r+lam)^2
        + (2 (||Delta||^2 + ||e||^2) / n) * sum_r v_r^2/(v_r+lam)^2

over the spectrum of the relevant feature covariance.  At lam = 0 the
ratio v^2/(v+lam)^2 is taken to be 1 for v > 0 and 0 for v = 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Optional, Sequence

import numpy as np

from .decomp import CpFactors, TuckerFactors, cp_component_matrix
from .multiway import sym_eig
from .regress import Dataset

__all__ = [
    "SpectrumSummary",
    "OptimismInputs",
    "CriterionReport",
    "cp_population_covariance",
    "tucker_kron_spectrum",
    "spectrum_from_gram",
    "optimism_closed_form",
    "proposition_gap",
    "ensemble_optimism_bound",
    "additive_disjoint_optimism",
    "rff_stationary_optimism",
    "aic_bic",
    "cp_param_count",
    "tucker_param_count",
    "cv_risk",
]


@dataclass(frozen=True)
class SpectrumSummary:
    """Descending nonnegative eigenvalues of a feature covariance."""

    eigenvalues: np.ndarray
    source: str = "empirical"  # "cp" | "tucker_kron" | "empirical"

    def __post_init__(self):
        v = np.sort(np.asarray(self.eigenvalues, dtype=float).ravel())[::-1].copy()
        if v.size:
            neg_tol = 1e-10 * max(1.0, float(v[0]))
            if v[-1] < -neg_tol:
                raise ValueError(f"eigenvalue {v[-1]:.3e} is negative beyond tolerance")
            v[v < 0] = 0.0
        object.__setattr__(self, "eigenvalues", v)

    def __len__(self) -> int:
        return int(self.eigenvalues.size)


@dataclass(frozen=True)
class OptimismInputs:
    """Scalar ingredients of the closed form."""

    sigma_sq: float
    lam: float
    n: int
    delta_norm_sq: float = 0.0
    err_norm_sq: float = 0.0

    def __post_init__(self):
        for name in ("sigma_sq", "lam", "delta_norm_sq", "err_norm_sq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass(frozen=True)
class CriterionReport:
    """Per-rank criterion values for a sweep row."""

    rank_label: object
    optimism_closed: Optional[float] = None
    optimism_mc_mean: Optional[float] = None
    optimism_mc_stderr: Optional[float] = None
    aic: Optional[float] = None
    bic: Optional[float] = None
    cv_risk: Optional[float] = None
    train_mse: Optional[float] = None
    test_mse: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimism_mc_stderr is not None and self.optimism_mc_stderr < 0:
            raise ValueError("mc stderr must be nonnegative")


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

def cp_population_covariance(f: CpFactors) -> np.ndarray:
    """Population feature covariance of the CP feature map under a
    standard-Gaussian design: the Gram matrix of the vectorized rank-1
    components."""
    g = cp_component_matrix(f)
    return g.T @ g


def spectrum_from_gram(gram: np.ndarray, source: str = "empirical") -> SpectrumSummary:
    return SpectrumSummary(eigenvalues=sym_eig(gram).values, source=source)


def tucker_kron_spectrum(f: TuckerFactors) -> SpectrumSummary:
    """Spectrum of U_M^T U_M (x) ... (x) U_1^T U_1: all cross products of the
    mode-wise Gram eigenvalues, sorted descending."""
    mode_values = [sym_eig(u.T @ u).values for u in f.factors]
    products = reduce(np.multiply.outer, mode_values).ravel()
    return SpectrumSummary(eigenvalues=products, source="tucker_kron")


# ---------------------------------------------------------------------------
# the unified closed form
# ---------------------------------------------------------------------------

def _shrink_ratios(v: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        return (v > 0).astype(float)
    return (v / (v + lam)) ** 2


def optimism_closed_form(spectrum: SpectrumSummary, inputs: OptimismInputs) -> float:
    """Expected Random-X optimism for a multilinear-kernel ridge fit.

    The true-rank case passes delta_norm_sq = err_norm_sq = 0; the over
    case supplies the larger spectrum; the under case adds the residual
    ||Delta||^2; the plug-in case adds the estimation error ||e||^2.
    """
    v = spectrum.eigenvalues
    if v.size == 0:
        return 0.0
    lam = inputs.lam
    ratios = _shrink_ratios(v, lam)
    s = float(ratios.sum())
    v1 = float(v[0])
    coef_extra = 0.0 if lam == 0.0 else lam**2 * v1 / (v1 + lam) ** 2
    base = 2.0 * (inputs.sigma_sq + coef_extra) / inputs.n * s
    excess = 2.0 * (inputs.delta_norm_sq + inputs.err_norm_sq) / inputs.n * s
    return base + excess


def proposition_gap(
    true_spec: SpectrumSummary,
    alt_spec: SpectrumSummary,
    inputs: OptimismInputs,
    case: str,
) -> float:
    """Signed optimism gap Opt_alt - Opt_true for a misspecified rank.

    ``case`` is "over" (alt spectrum from a larger rank, no residual) or
    "under" (alt spectrum plus the residual carried in ``inputs``).  Warns
    when lam is not small relative to the smallest positive eigenvalue,
    where the small-regularization comparison is not meaningful.
    """
    if case not in ("over", "under"):
        raise ValueError("case must be 'over' or 'under'")
    positive = [v[v > 0] for v in (true_spec.eigenvalues, alt_spec.eigenvalues)]
    vmin = min((float(p[-1]) for p in positive if p.size), default=0.0)
    if vmin > 0 and inputs.lam > 1e-3 * vmin:
        warnings.warn(
            "lam is not small relative to the smallest positive eigenvalue; "
            "the small-regularization gap comparison may not apply",
            RuntimeWarning,
            stacklevel=2,
        )
    true_inputs = OptimismInputs(
        sigma_sq=inputs.sigma_sq, lam=inputs.lam, n=inputs.n
    )
    alt_inputs = true_inputs if case == "over" else OptimismInputs(
        sigma_sq=inputs.sigma_sq,
        lam=inputs.lam,
        n=inputs.n,
        delta_norm_sq=inputs.delta_norm_sq,
        err_norm_sq=inputs.err_norm_sq,
    )
    return optimism_closed_form(alt_spec, alt_inputs) - optimism_closed_form(
        true_spec, true_inputs
    )


# ---------------------------------------------------------------------------
# ensemble bound and additive approximations
# ---------------------------------------------------------------------------

def ensemble_optimism_bound(member_optimisms: Sequence[float],
                            subset_sizes: Sequence[int], n: int) -> float:
    """Weighted average sum_k (n_k/n) Opt_k that upper-bounds the ensemble optimism."""
    opts = np.asarray(member_optimisms, dtype=float).ravel()
    sizes = np.asarray(subset_sizes, dtype=float).ravel()
    if opts.size != sizes.size:
        raise ValueError(f"length mismatch: {opts.size} vs {sizes.size}")
    if np.any(sizes <= 0) or np.any(sizes > n):
        raise ValueError("subset sizes must satisfy 0 < n_k <= n")
    return float(np.sum(sizes / n * opts))


def additive_disjoint_optimism(part_optimisms: Sequence[float]) -> float:
    """Total optimism of disjoint (block-orthogonal) feature groups: the sum."""
    return float(np.sum(np.asarray(part_optimisms, dtype=float)))


def rff_stationary_optimism(
    lengthscale: float,
    dim: int,
    n_pairs: int,
    seed: int,
    inputs: OptimismInputs,
    data: np.ndarray,
) -> float:
    """Optimism of a Gaussian-kernel ridge fit via random Fourier features.

    Draws ``n_pairs`` frequencies from the Gaussian kernel's spectral
    density N(0, I/lengthscale^2), builds the cos/sin pair features scaled
    by 1/sqrt(n_pairs), estimates each pair's 2x2 feature second moment
    from ``data`` (one input per row), and sums the per-pair closed-form
    optimisms, which is exact for the block structure of the pair map.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[1] != dim:
        raise ValueError(f"data has {data.shape[1]} columns, expected {dim}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(97,)))
    omegas = rng.standard_normal((n_pairs, dim)) / lengthscale
    proj = data @ omegas.T  # (n_samples, n_pairs)
    scale = 1.0 / np.sqrt(n_pairs)
    total = 0.0
    for j in range(n_pairs):
        z = np.column_stack([np.cos(proj[:, j]), np.sin(proj[:, j])]) * scale
        moment = z.T @ z / data.shape[0]
        total += optimism_closed_form(spectrum_from_gram(moment), inputs)
    return total


# ---------------------------------------------------------------------------
# information criteria and cross-validation
# ---------------------------------------------------------------------------

def cp_param_count(shape, rank: int) -> int:
    return int(rank) * int(np.sum(shape))


def tucker_param_count(shape, ranks) -> int:
    ranks = tuple(int(r) for r in ranks)
    return int(np.prod(ranks)) + int(np.sum(np.asarray(shape) * np.asarray(ranks)))


def aic_bic(train_rss: float, n: int, p_eff: int):
    """Gaussian-likelihood AIC/BIC with an explicit effective parameter count."""
    if train_rss <= 0:
        raise ValueError("train_rss must be positive")
    if n <= 1:
        raise ValueError("n must be > 1")
    base = n * np.log(train_rss / n)
    return float(base + 2 * p_eff), float(base + p_eff * np.log(n))


def cv_risk(data: Dataset, fitter: Callable, n_folds: int, seed: int) -> float:
    """K-fold cross-validated MSE with a deterministic seeded shuffle.

    Folds are contiguous blocks of the shuffled index set, of size
    floor(n/K) with the first n mod K folds one larger.  ``fitter`` maps a
    training :class:`Dataset` to a callable producing predictions for a
    stacked covariate batch.
    """
    n = data.n
    if not 2 <= n_folds <= n:
        raise ValueError(f"n_folds must be in [2, {n}]")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))
    perm = rng.permutation(n)
    base, rem = divmod(n, n_folds)
    risks = []
    start = 0
    for k in range(n_folds):
        size = base + (1 if k < rem else 0)
        held = perm[start:start + size]
        start += size
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        train = Dataset(covariates=data.covariates[mask], responses=data.responses[mask])
        predict_fn = fitter(train)
        preds = np.asarray(predict_fn(data.covariates[held]), dtype=float).ravel()
        resid = data.responses[held] - preds
        risks.append(float(np.mean(resid**2)))
    return float(np.mean(risks))
