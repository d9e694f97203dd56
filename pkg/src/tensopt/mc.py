"""Monte-Carlo estimation of expected Random-X optimism.

Each replicate draws fresh train/test data, fits the requested model, and
records test MSE minus train MSE; the mean over replicates approximates
the expected optimism.  Data streams are keyed by (seed, replicate, role)
and never by the candidate rank, so rank sweeps reuse the same replicate
data (common random numbers) and per-replicate differences between ranks
are meaningful.

The oracle KRR mode works in feature space: under a standard-Gaussian
design the fit touches the data only through the features Phi = X G and
the responses, which are jointly Gaussian with covariance G^T G, so the
features are sampled directly from N(0, G^T G).  This is an exact
distributional shortcut, not an approximation.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .decomp import (
    CpFactors,
    cp_als,
    cp_component_matrix,
    cp_reconstruct,
    tucker_hooi,
    tucker_reconstruct,
)
from .multiway import NumericalError, flatten_samples, vec
from .optimism import (
    CriterionReport,
    OptimismInputs,
    aic_bic,
    cp_param_count,
    cv_risk,
    ensemble_optimism_bound,
    optimism_closed_form,
    spectrum_from_gram,
    tucker_kron_spectrum,
    tucker_param_count,
)
from .regress import (
    Dataset,
    ensemble_average,
    fit_cp_regression,
    fit_tucker_regression,
    krr_fit,
    predict_many,
)
from .simgen import SimConfig, derive_rng, gen_design, gen_responses, gen_true_coefficient

__all__ = [
    "FitterSpec",
    "OptimismEstimate",
    "SweepReport",
    "mc_optimism",
    "sweep_ranks",
    "select_rank",
    "ensemble_experiment",
    "oracle_feature_spec",
    "closed_form_report",
]

_FAIL_FRACTION = 0.05


@dataclass(frozen=True)
class FitterSpec:
    """What to fit per replicate: 'oracle_cp' (KRR on known-component
    features), 'cp', or 'tucker' regression.

    MC fits default to the cross-moment warm start and a looser stopping
    rule than the standalone fitters: the flat directions of barely
    regularized over-ranked models drift for hundreds of sweeps with no
    measurable effect on the fit, and random starts occasionally land CP
    in poor local minima.
    """

    kind: str = "oracle_cp"
    lam: Optional[float] = None  # None: cfg.lam for oracle, 1e-6*n for cp/tucker
    max_iter: int = 40
    tol: float = 1e-5
    init: str = "moment"
    restarts: int = 1

    def __post_init__(self):
        if self.kind not in ("oracle_cp", "cp", "tucker"):
            raise ValueError(f"unknown fitter kind {self.kind!r}")
        if self.init not in ("moment", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass(frozen=True)
class OptimismEstimate:
    mean: float
    stderr: float
    replicates: int
    per_replicate: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    config: SimConfig
    elapsed: float

    def __post_init__(self):
        labels = [row.rank_label for row in self.rows]
        if len(set(map(str, labels))) != len(labels):
            raise ValueError("rank labels must be unique")

    def row(self, rank_label) -> CriterionReport:
        for r in self.rows:
            if r.rank_label == rank_label:
                return r
        raise KeyError(rank_label)


# ---------------------------------------------------------------------------
# oracle feature construction
# ---------------------------------------------------------------------------

def true_coefficient(cfg: SimConfig):
    """The experiment's planted coefficient (replicate-independent)."""
    rng = derive_rng(cfg.seed, 0, "coef")
    return gen_true_coefficient(cfg.true_kind, cfg.shape, cfg.true_rank, rng)


def oracle_feature_spec(cfg: SimConfig, rank: int) -> dict:
    """Gram/weights/residual of the oracle CP feature map at a target rank.

    True rank: the planted components.  Under: components of the best
    rank-R_t ALS approximation, with its residual norm.  Over: the true
    components padded with seeded random rank-1 components (the padded map
    still represents the signal exactly, with zero weights on the pads).
    """
    if cfg.true_kind != "cp":
        raise ValueError("oracle features require a CP true coefficient")
    coeff = true_coefficient(cfg)
    true_rank = coeff.rank
    g_true = cp_component_matrix(coeff)
    signal_var = float(np.ones(true_rank) @ (g_true.T @ g_true) @ np.ones(true_rank))
    if rank == true_rank:
        g = g_true
        weights = np.ones(true_rank)
        delta_sq = 0.0
    elif rank < true_rank:
        rng = derive_rng(cfg.seed, 0, "coef", extra=rank)
        als = cp_als(
            cp_reconstruct(coeff),
            rank,
            restarts=5,
            tol=1e-10,
            max_iter=2000,
            seed=int(rng.integers(2**63)),
        )
        g = cp_component_matrix(als.approx)
        weights = np.ones(rank)
        delta_sq = als.delta_norm_sq
    else:
        rng = derive_rng(cfg.seed, 0, "oracle_extra", extra=rank)
        pads = CpFactors([rng.standard_normal((s, rank - true_rank)) for s in cfg.shape])
        g = np.concatenate([g_true, cp_component_matrix(pads)], axis=1)
        weights = np.concatenate([np.ones(true_rank), np.zeros(rank - true_rank)])
        delta_sq = 0.0
    gram = g.T @ g
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * float(np.trace(gram)) / max(gram.shape[0], 1)
        chol = np.linalg.cholesky(gram + jitter * np.eye(gram.shape[0]))
    return {
        "gram": gram,
        "chol": chol,
        "weights": weights,
        "delta_norm_sq": float(delta_sq),
        "signal_var": signal_var,
    }


def closed_form_report(cfg: SimConfig, rank_label) -> float:
    """Closed-form optimism at a rank label, with spectra and residuals
    plugged from the planted coefficient."""
    sigma_sq = _population_sigma_sq(cfg)
    if cfg.true_kind == "cp":
        spec = oracle_feature_spec(cfg, int(rank_label))
        spectrum = spectrum_from_gram(spec["gram"], source="cp")
        inputs = OptimismInputs(
            sigma_sq=sigma_sq,
            lam=cfg.lam,
            n=cfg.n_train,
            delta_norm_sq=spec["delta_norm_sq"],
        )
        return optimism_closed_form(spectrum, inputs)
    coeff = true_coefficient(cfg)
    ranks = tuple(int(r) for r in rank_label)
    target = tucker_hooi(tucker_reconstruct(coeff), ranks, tol=1e-12)
    spectrum = tucker_kron_spectrum(target.approx)
    inputs = OptimismInputs(
        sigma_sq=sigma_sq,
        lam=cfg.lam,
        n=cfg.n_train,
        delta_norm_sq=target.delta_norm_sq,
    )
    return optimism_closed_form(spectrum, inputs)


def _population_sigma_sq(cfg: SimConfig) -> float:
    coeff = true_coefficient(cfg)
    b = cp_reconstruct(coeff) if isinstance(coeff, CpFactors) else tucker_reconstruct(coeff)
    return cfg.noise_frac**2 * float(np.dot(vec(b), vec(b)))


# ---------------------------------------------------------------------------
# replicate workers (top level for process pools)
# ---------------------------------------------------------------------------

def _mse(resid: np.ndarray) -> float:
    return float(np.dot(resid, resid) / resid.size)


def _oracle_replicate(payload: dict, rep: int) -> dict:
    cfg: SimConfig = payload["cfg"]
    chol = payload["chol"]
    weights = payload["weights"]
    delta = np.sqrt(payload["delta_norm_sq"])
    lam = payload["lam"]
    r = weights.size

    zs = {}
    for role, n in (("train_x", cfg.n_train), ("test_x", cfg.n_test)):
        z = derive_rng(cfg.seed, rep, role).standard_normal((n, r + 1))
        zs[role] = (z[:, :r] @ chol.T, delta * z[:, r])
    phi_tr, g_tr = zs["train_x"]
    phi_te, g_te = zs["test_x"]
    f_tr = phi_tr @ weights + g_tr
    f_te = phi_te @ weights + g_te
    sigma = cfg.noise_frac * float(np.std(f_tr, ddof=1)) if cfg.noise_frac > 0 else 0.0
    y_tr = f_tr + sigma * derive_rng(cfg.seed, rep, "train_noise").standard_normal(cfg.n_train)
    y_te = f_te + sigma * derive_rng(cfg.seed, rep, "test_noise").standard_normal(cfg.n_test)

    w = krr_fit(phi_tr, y_tr, lam) if lam > 0 else np.linalg.lstsq(phi_tr, y_tr, rcond=None)[0]
    train_mse = _mse(y_tr - phi_tr @ w)
    test_mse = _mse(y_te - phi_te @ w)
    out = {
        "optimism": test_mse - train_mse,
        "train_mse": train_mse,
        "test_mse": test_mse,
    }
    if "cv_folds" in payload:
        folds = payload["cv_folds"]
        data = Dataset(covariates=phi_tr, responses=y_tr)

        def fitter(train: Dataset):
            ww = krr_fit(flatten_samples(train.covariates), train.responses, lam) \
                if lam > 0 else np.linalg.lstsq(
                    flatten_samples(train.covariates), train.responses, rcond=None)[0]
            return lambda covs: flatten_samples(covs) @ ww

        out["cv_risk"] = cv_risk(data, fitter, folds, seed=_sub_seed(cfg.seed, rep))
    return out


def _tensor_replicate(payload: dict, rep: int) -> dict:
    cfg: SimConfig = payload["cfg"]
    fitter: FitterSpec = payload["fitter"]
    rank = payload["rank"]
    coeff = payload["coeff"]
    lam = payload["lam"]

    x_tr = gen_design(cfg.n_train, cfg.shape, derive_rng(cfg.seed, rep, "train_x"))
    x_te = gen_design(cfg.n_test, cfg.shape, derive_rng(cfg.seed, rep, "test_x"))
    y_tr, sigma = gen_responses(coeff, x_tr, cfg.noise_frac,
                                derive_rng(cfg.seed, rep, "train_noise"))
    y_te, _ = gen_responses(coeff, x_te, cfg.noise_frac,
                            derive_rng(cfg.seed, rep, "test_noise"), sigma=sigma)
    data = Dataset(covariates=x_tr, responses=y_tr)
    model = _fit_tensor(data, fitter, rank, lam, seed=_sub_seed(cfg.seed, rep))
    test_mse = _mse(y_te - predict_many(model, x_te))
    out = {
        "optimism": test_mse - model.train_mse,
        "train_mse": model.train_mse,
        "test_mse": test_mse,
    }
    if "cv_folds" in payload:
        def fitter_fn(train: Dataset):
            sub = _fit_tensor(train, fitter, rank, lam, seed=_sub_seed(cfg.seed, rep))
            return lambda covs: predict_many(sub, covs)

        out["cv_risk"] = cv_risk(data, fitter_fn, payload["cv_folds"],
                                 seed=_sub_seed(cfg.seed, rep))
    return out


def _fit_tensor(data: Dataset, fitter: FitterSpec, rank, lam, seed: int):
    if fitter.kind == "cp":
        return fit_cp_regression(data, int(rank), lam, max_iter=fitter.max_iter,
                                 tol=fitter.tol, seed=seed, init=fitter.init,
                                 restarts=fitter.restarts)
    return fit_tucker_regression(data, tuple(rank), lam, max_iter=fitter.max_iter,
                                 tol=fitter.tol, seed=seed, init=fitter.init)


def _ensemble_replicate(payload: dict, rep: int) -> dict:
    cfg: SimConfig = payload["cfg"]
    fitter: FitterSpec = payload["fitter"]
    rank = payload["rank"]
    coeff = payload["coeff"]
    n_members = payload["n_members"]
    subset_size = payload["subset_size"]
    lam = payload["lam"]
    n = cfg.n_train

    x_tr = gen_design(n, cfg.shape, derive_rng(cfg.seed, rep, "train_x"))
    x_te = gen_design(cfg.n_test, cfg.shape, derive_rng(cfg.seed, rep, "test_x"))
    y_tr, sigma = gen_responses(coeff, x_tr, cfg.noise_frac,
                                derive_rng(cfg.seed, rep, "train_noise"))
    y_te, _ = gen_responses(coeff, x_te, cfg.noise_frac,
                            derive_rng(cfg.seed, rep, "test_noise"), sigma=sigma)

    rng_sub = derive_rng(cfg.seed, rep, "subset")
    if n_members * subset_size <= n:
        perm = rng_sub.permutation(n)
        subsets = [perm[k * subset_size:(k + 1) * subset_size] for k in range(n_members)]
    else:
        subsets = [rng_sub.choice(n, size=subset_size, replace=False)
                   for _ in range(n_members)]

    members = []
    member_opts = []
    for k, idx in enumerate(subsets):
        sub = Dataset(covariates=x_tr[idx], responses=y_tr[idx])
        model = _fit_tensor(sub, fitter, rank, lam, seed=_sub_seed(cfg.seed, rep, k + 1))
        members.append(model)
        test_mse = _mse(y_te - predict_many(model, x_te))
        member_opts.append(test_mse - model.train_mse)

    ens = ensemble_average(members, [subset_size] * n_members)
    b_bar = cp_reconstruct(ens.averaged)
    preds_tr = flatten_samples(x_tr) @ vec(b_bar)
    preds_te = flatten_samples(x_te) @ vec(b_bar)
    ens_opt = _mse(y_te - preds_te) - _mse(y_tr - preds_tr)
    bound = ensemble_optimism_bound(member_opts, [subset_size] * n_members, n)
    return {"ens": ens_opt, "bound": bound, "ens_rank": float(ens.ens_rank)}


def _sub_seed(seed: int, rep: int, extra: int = 0) -> int:
    return int(np.random.SeedSequence(
        entropy=seed, spawn_key=(rep, 1000 + extra)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# replicate runner
# ---------------------------------------------------------------------------

_WORKERS_ENV = "TENSOPT_THREADS"

def resolve_workers(workers: Optional[int]) -> int:
    env = os.environ.get(_WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{_WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, workers or 1)


def _safe_call(args):
    fn, payload, rep = args
    try:
        return rep, fn(payload, rep)
    except NumericalError as exc:
        return rep, {"failed": True, "error": str(exc)}


def _run_replicates(fn, payload: dict, n_reps: int, workers: int) -> list:
    tasks = [(fn, payload, rep) for rep in range(n_reps)]
    if workers <= 1 or n_reps < 4:
        results = [_safe_call(t) for t in tasks]
    else:
        chunk = max(1, n_reps // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_call, tasks, chunksize=chunk))
    results.sort(key=lambda t: t[0])
    records = [r for _, r in results]
    failed = sum(1 for r in records if r.get("failed"))
    if failed > _FAIL_FRACTION * n_reps:
        raise NumericalError(
            f"{failed}/{n_reps} replicates failed (> {_FAIL_FRACTION:.0%} cap)"
        )
    return [r for r in records if not r.get("failed")]


def _estimate(values: np.ndarray, keep: bool = True) -> OptimismEstimate:
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 1:
        raise ValueError("no successful replicates")
    stderr = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return OptimismEstimate(
        mean=float(values.mean()),
        stderr=stderr,
        replicates=n,
        per_replicate=values if keep else None,
    )


def _build_payload(cfg: SimConfig, fitter: FitterSpec, rank_label, cv_folds=None) -> Tuple:
    if fitter.kind == "tucker" and np.isscalar(rank_label):
        raise ValueError("tucker fits need a rank tuple with one entry per mode")
    if fitter.kind in ("cp", "oracle_cp") and not np.isscalar(rank_label):
        raise ValueError("CP fits take a single integer rank")
    if fitter.kind == "oracle_cp":
        spec = oracle_feature_spec(cfg, int(rank_label))
        lam = cfg.lam if fitter.lam is None else fitter.lam
        payload = {
            "cfg": cfg,
            "chol": spec["chol"],
            "weights": spec["weights"],
            "delta_norm_sq": spec["delta_norm_sq"],
            "lam": lam,
        }
        fn = _oracle_replicate
    else:
        coeff = true_coefficient(cfg)
        lam = (1e-6 * cfg.n_train) if fitter.lam is None else fitter.lam
        payload = {
            "cfg": cfg,
            "fitter": fitter,
            "rank": rank_label,
            "coeff": coeff,
            "lam": lam,
        }
        fn = _tensor_replicate
    if cv_folds is not None:
        payload["cv_folds"] = int(cv_folds)
    return fn, payload


def mc_optimism(cfg: SimConfig, fitter: FitterSpec, rank_label,
                workers: int = 1) -> OptimismEstimate:
    """Hold-out MC optimism: mean and stderr over ``cfg.replicates`` of
    (test MSE - train MSE) with fresh train/test draws per replicate."""
    if cfg.replicates < 2:
        raise ValueError("need at least 2 replicates")
    fn, payload = _build_payload(cfg, fitter, rank_label)
    records = _run_replicates(fn, payload, cfg.replicates, resolve_workers(workers))
    return _estimate(np.array([r["optimism"] for r in records]))


# ---------------------------------------------------------------------------
# sweeps and selection
# ---------------------------------------------------------------------------

_KNOWN_CRITERIA = ("optimism", "closed", "aic", "bic", "cv", "train_mse", "test_mse")


def sweep_ranks(cfg: SimConfig, fitter: FitterSpec, ranks: Sequence,
                criteria: Sequence[str] = ("optimism",),
                cv_folds: int = 5, workers: int = 1) -> SweepReport:
    """One CriterionReport per rank label, deterministic given cfg.seed."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("ranks must be nonempty")
    criteria = tuple(criteria)
    unknown = set(criteria) - set(_KNOWN_CRITERIA)
    if unknown:
        raise ValueError(f"unknown criteria: {sorted(unknown)}")
    t0 = time.perf_counter()
    rows = []
    workers = resolve_workers(workers)
    for rank_label in ranks:
        need_cv = "cv" in criteria
        fn, payload = _build_payload(cfg, fitter, rank_label,
                                     cv_folds=cv_folds if need_cv else None)
        records = _run_replicates(fn, payload, cfg.replicates, workers)
        opt = _estimate(np.array([r["optimism"] for r in records]))
        train_mse = float(np.mean([r["train_mse"] for r in records]))
        test_mse = float(np.mean([r["test_mse"] for r in records]))
        aic = bic = None
        if "aic" in criteria or "bic" in criteria:
            if fitter.kind == "tucker":
                p_eff = tucker_param_count(cfg.shape, rank_label)
            else:
                p_eff = cp_param_count(cfg.shape, int(rank_label))
            pairs = [aic_bic(r["train_mse"] * cfg.n_train, cfg.n_train, p_eff)
                     for r in records]
            aic = float(np.mean([p[0] for p in pairs]))
            bic = float(np.mean([p[1] for p in pairs]))
        cv_val = float(np.mean([r["cv_risk"] for r in records])) if need_cv else None
        closed = closed_form_report(cfg, rank_label) if "closed" in criteria else None
        rows.append(CriterionReport(
            rank_label=rank_label if not isinstance(rank_label, list) else tuple(rank_label),
            optimism_closed=closed,
            optimism_mc_mean=opt.mean if "optimism" in criteria else None,
            optimism_mc_stderr=opt.stderr if "optimism" in criteria else None,
            aic=aic,
            bic=bic,
            cv_risk=cv_val,
            train_mse=train_mse,
            test_mse=test_mse,
            extra={"per_replicate_optimism": opt.per_replicate},
        ))
    return SweepReport(rows=tuple(rows), config=cfg, elapsed=time.perf_counter() - t0)


_CRITERION_FIELDS = {
    "optimism": "optimism_mc_mean",
    "closed": "optimism_closed",
    "aic": "aic",
    "bic": "bic",
    "cv": "cv_risk",
}


def select_rank(report: SweepReport, criterion: str,
                stability_multiple: Optional[float] = None):
    """Argmin of a criterion over the sweep rows, ties toward the smaller rank.

    With ``stability_multiple`` set, ranks whose train MSE exceeds that
    multiple of the sweep median train MSE are excluded first (poor-fit
    guard); if the filter would exclude everything it is ignored.
    """
    fieldname = _CRITERION_FIELDS.get(criterion)
    if fieldname is None:
        raise ValueError(f"unknown criterion {criterion!r}")
    rows = list(report.rows)
    for row in rows:
        if getattr(row, fieldname) is None:
            raise ValueError(f"criterion {criterion!r} missing for rank {row.rank_label}")

    def _key(row):
        label = row.rank_label
        return tuple(label) if isinstance(label, (tuple, list)) else (label,)

    rows.sort(key=_key)
    if stability_multiple is not None:
        mses = [row.train_mse for row in rows if row.train_mse is not None]
        if len(mses) == len(rows) and mses:
            cap = stability_multiple * float(np.median(mses))
            kept = [row for row in rows if row.train_mse <= cap]
            if kept:
                rows = kept
    best = rows[0]
    for row in rows[1:]:
        if getattr(row, fieldname) < getattr(best, fieldname):
            best = row
    return best.rank_label


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def ensemble_experiment(cfg: SimConfig, n_members: int, subset_size: int, rank: int,
                        fitter: Optional[FitterSpec] = None,
                        workers: int = 1) -> Tuple[OptimismEstimate, OptimismEstimate]:
    """MC optimism of the ensemble-averaged CP model next to its
    weighted-average upper bound, on shared per-replicate data."""
    if n_members < 1 or subset_size < 1:
        raise ValueError("n_members and subset_size must be positive")
    if subset_size > cfg.n_train:
        raise ValueError("subset_size cannot exceed n_train")
    fitter = fitter or FitterSpec(kind="cp")
    if fitter.kind != "cp":
        raise ValueError("ensemble members must be CP regressions")
    coeff = true_coefficient(cfg)
    lam = (1e-6 * subset_size) if fitter.lam is None else fitter.lam
    payload = {
        "cfg": cfg,
        "fitter": fitter,
        "rank": int(rank),
        "coeff": coeff,
        "n_members": int(n_members),
        "subset_size": int(subset_size),
        "lam": lam,
    }
    records = _run_replicates(_ensemble_replicate, payload, cfg.replicates,
                              resolve_workers(workers))
    ens = _estimate(np.array([r["ens"] for r in records]))
    bound = _estimate(np.array([r["bound"] for r in records]))
    return ens, bound
