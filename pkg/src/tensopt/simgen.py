"""Synthetic data generation: Gaussian tensor designs, planted low-rank
coefficients, and noise scaled to a fraction of the signal standard
deviation.

Every generated object is a pure function of (seed, replicate, role tag);
train covariates, test covariates, the true coefficient, and the noise all
use disjoint derived streams, so e.g. changing n_test never perturbs the
training data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .decomp import CpFactors, TuckerFactors, cp_component_matrix
from .multiway import NumericalError, flatten_samples, vec

__all__ = ["SimConfig", "derive_rng", "gen_design", "gen_true_coefficient", "gen_responses"]


# stable role tags -> stream subkeys
_ROLE_CODES = {
    "coef": 0,
    "train_x": 1,
    "train_noise": 2,
    "test_x": 3,
    "test_noise": 4,
    "oracle_extra": 5,
    "subset": 6,
    "cv": 7,
    "fit_init": 8,
    "holdout": 9,
}


def derive_rng(seed: int, replicate: int, role: str, extra: int = 0) -> np.random.Generator:
    """Independent stream keyed by (seed, replicate, role[, extra])."""
    try:
        code = _ROLE_CODES[role]
    except KeyError:
        raise ValueError(f"unknown role tag {role!r}") from None
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replicate, code, extra))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class SimConfig:
    """Experiment configuration; doubles as the CLI JSON schema."""

    shape: Tuple[int, ...]
    true_kind: str = "cp"                      # "cp" | "tucker"
    true_rank: Union[int, Tuple[int, ...]] = 3
    n_train: int = 200
    n_test: int = 100
    noise_frac: float = 0.05
    lam: float = 1.0                           # JSON key: "lambda"
    seed: int = 0
    replicates: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 1 for s in self.shape):
            raise ValueError("mode sizes must be positive")
        if self.true_kind not in ("cp", "tucker"):
            raise ValueError(f"true_kind must be 'cp' or 'tucker', got {self.true_kind!r}")
        rank = self.true_rank
        if self.true_kind == "tucker":
            rank = tuple(int(r) for r in np.atleast_1d(rank))
            object.__setattr__(self, "true_rank", rank)
        else:
            flat = np.atleast_1d(rank)
            if flat.size != 1:
                raise ValueError("CP true_rank must be a single integer")
            object.__setattr__(self, "true_rank", int(flat[0]))
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample sizes must be positive")
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "true_kind": self.true_kind,
            "true_rank": list(self.true_rank)
            if isinstance(self.true_rank, tuple)
            else self.true_rank,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise_frac": self.noise_frac,
            "lambda": self.lam,
            "seed": self.seed,
            "replicates": self.replicates,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {"shape", "true_kind", "true_rank", "n_train", "n_test",
                 "noise_frac", "lambda", "seed", "replicates"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "shape" not in d:
            raise ValueError("config is missing required field 'shape'")
        kwargs = {
            "shape": tuple(d["shape"]),
            "true_kind": d.get("true_kind", "cp"),
            "true_rank": d.get("true_rank", 3),
            "n_train": d.get("n_train", 200),
            "n_test": d.get("n_test", 100),
            "noise_frac": d.get("noise_frac", 0.05),
            "lam": d.get("lambda", 1.0),
            "seed": d.get("seed", 0),
            "replicates": d.get("replicates", 2000),
        }
        if isinstance(kwargs["true_rank"], list):
            kwargs["true_rank"] = tuple(kwargs["true_rank"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_design(n: int, shape, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. standard-normal tensors, stacked as an (n, I_1..I_M) array."""
    if n < 0:
        raise ValueError("n must be >= 0")
    shape = tuple(int(s) for s in shape)
    return rng.standard_normal((n,) + shape)


def gen_true_coefficient(kind: str, shape, rank, rng: np.random.Generator,
                         max_attempts: int = 10):
    """Planted coefficient: CP with i.i.d. normal factor entries, or Tucker
    with orthonormal factors and an i.i.d. normal core.

    CP components are re-sampled (up to ``max_attempts``) until their
    vectorized rank-1 components are numerically independent.
    """
    shape = tuple(int(s) for s in shape)
    if kind == "cp":
        r = int(rank)
        if r < 1:
            raise ValueError("rank must be >= 1")
        others = [int(np.prod(shape)) // s for s in shape]
        if r > min(others):
            raise ValueError(
                f"CP rank {r} exceeds the product of the other modes (max {min(others)})"
            )
        for _ in range(max_attempts):
            factors = CpFactors([rng.standard_normal((s, r)) for s in shape])
            g = cp_component_matrix(factors)
            sv = np.linalg.svd(g, compute_uv=False)
            if sv[-1] > 1e-8 * sv[0]:
                return factors
        raise NumericalError(
            f"could not draw well-separated CP components in {max_attempts} attempts"
        )
    if kind == "tucker":
        ranks = tuple(int(x) for x in np.atleast_1d(rank))
        if len(ranks) != len(shape):
            raise ValueError("need one Tucker rank per mode")
        for m, (r, s) in enumerate(zip(ranks, shape)):
            if not 1 <= r <= s:
                raise ValueError(f"rank {r} infeasible for mode {m} of size {s}")
        factors = []
        for s, r in zip(shape, ranks):
            q, _ = np.linalg.qr(rng.standard_normal((s, r)))
            factors.append(q)
        core = rng.standard_normal(ranks)
        return TuckerFactors(core=core, factors=factors)
    raise ValueError(f"unknown coefficient kind {kind!r}")


def signal_values(coefficient, covs) -> np.ndarray:
    """Noiseless responses <<X_i, B>> for a stacked covariate batch."""
    from .decomp import cp_reconstruct, tucker_reconstruct  # local to avoid cycle

    b = cp_reconstruct(coefficient) if isinstance(coefficient, CpFactors) \
        else tucker_reconstruct(coefficient)
    return flatten_samples(covs) @ vec(b)


def gen_responses(coefficient, covs, noise_frac: float, rng: np.random.Generator,
                  sigma: Optional[float] = None):
    """Responses y_i = <<X_i, B>> + eps_i with eps ~ N(0, (s*sigma_s)^2).

    sigma_s is the sample standard deviation of the signal over ``covs``;
    pass ``sigma`` to reuse a noise scale computed elsewhere (e.g. the
    training set's, when generating test responses).
    Returns (y, sigma).
    """
    covs = np.asarray(covs, dtype=float)
    n = covs.shape[0]
    f = signal_values(coefficient, covs)
    if sigma is None:
        if noise_frac > 0 and n < 2:
            raise ValueError("need n >= 2 to estimate the signal scale when noise_frac > 0")
        sigma = float(noise_frac) * float(np.std(f, ddof=1)) if noise_frac > 0 else 0.0
    if sigma > 0:
        y = f + sigma * rng.standard_normal(n)
    else:
        y = f.copy()
    return y, float(sigma)
