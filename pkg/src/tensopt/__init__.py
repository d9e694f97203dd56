"""Low-rank scalar-on-tensor regression with closed-form Random-X optimism
estimators and a Monte-Carlo hold-out harness for rank selection."""

__version__ = "0.1.0"

from .decomp import (
    ApproxResult,
    CpFactors,
    TuckerFactors,
    cp_als,
    cp_component_matrix,
    cp_reconstruct,
    residual_orthogonality_check,
    tucker_hooi,
    tucker_reconstruct,
)
from .mc import (
    FitterSpec,
    OptimismEstimate,
    SweepReport,
    ensemble_experiment,
    mc_optimism,
    select_rank,
    sweep_ranks,
)
from .multiway import (
    EigenPair,
    NumericalError,
    inner,
    khatri_rao,
    kronecker,
    mode_unfold,
    outer,
    ridge_solve,
    sym_eig,
    unvec,
    vec,
)
from .optimism import (
    CriterionReport,
    OptimismInputs,
    SpectrumSummary,
    additive_disjoint_optimism,
    aic_bic,
    cp_population_covariance,
    cv_risk,
    ensemble_optimism_bound,
    optimism_closed_form,
    proposition_gap,
    rff_stationary_optimism,
    tucker_kron_spectrum,
)
from .regress import (
    Dataset,
    EnsembleModel,
    FittedModel,
    cp_feature_map,
    ensemble_average,
    fit_cp_regression,
    fit_tucker_regression,
    krr_fit,
    predict,
    predict_many,
    tucker_feature_map,
)
from .simgen import SimConfig, derive_rng, gen_design, gen_responses, gen_true_coefficient

__all__ = [name for name in dir() if not name.startswith("_")]
