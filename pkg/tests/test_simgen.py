import numpy as np
import pytest

from tensopt.decomp import CpFactors, TuckerFactors, cp_component_matrix
from tensopt.simgen import (
    SimConfig,
    derive_rng,
    gen_design,
    gen_responses,
    gen_true_coefficient,
)


class TestGenDesign:
    def test_empty(self):
        out = gen_design(0, (2, 3), derive_rng(0, 0, "train_x"))
        assert out.shape == (0, 2, 3)

    def test_deterministic(self):
        a = gen_design(5, (2, 3, 2), derive_rng(42, 1, "train_x"))
        b = gen_design(5, (2, 3, 2), derive_rng(42, 1, "train_x"))
        assert np.array_equal(a, b)

    def test_moments(self):
        n = 100_000
        shape = (2, 2, 2)
        x = gen_design(n, shape, derive_rng(7, 0, "train_x"))
        total = n * np.prod(shape)
        assert abs(x.mean()) < 3.0 / np.sqrt(total)
        assert abs(x.var() - 1.0) < 0.02

    def test_prefix_stability_across_n(self):
        # drawing more samples from the same stream extends, not reshuffles
        small = gen_design(3, (2, 2), derive_rng(0, 5, "train_x"))
        large = gen_design(10, (2, 2), derive_rng(0, 5, "train_x"))
        assert np.array_equal(large[:3], small)


class TestGenTrueCoefficient:
    def test_cp_components_independent(self):
        f = gen_true_coefficient("cp", (10, 8, 12), 3, derive_rng(0, 0, "coef"))
        assert isinstance(f, CpFactors)
        g = cp_component_matrix(f)
        assert g.shape == (960, 3)
        sv = np.linalg.svd(g, compute_uv=False)
        assert sv[-1] > 1e-8 * sv[0]

    def test_tucker_orthonormal_factors(self):
        f = gen_true_coefficient("tucker", (10, 8, 12), (3, 3, 3),
                                 derive_rng(0, 0, "coef"))
        assert isinstance(f, TuckerFactors)
        for u in f.factors:
            assert np.max(np.abs(u.T @ u - np.eye(3))) < 1e-10

    def test_infeasible_cp_rank(self):
        # rank above the product of the other modes
        with pytest.raises(ValueError):
            gen_true_coefficient("cp", (2, 2, 2), 5, derive_rng(0, 0, "coef"))

    def test_infeasible_tucker_rank(self):
        with pytest.raises(ValueError):
            gen_true_coefficient("tucker", (3, 3, 3), (4, 1, 1),
                                 derive_rng(0, 0, "coef"))


class TestGenResponses:
    def test_no_noise_exact_signal(self):
        f = gen_true_coefficient("cp", (3, 4, 2), 2, derive_rng(1, 0, "coef"))
        x = gen_design(10, (3, 4, 2), derive_rng(1, 0, "train_x"))
        y, sigma = gen_responses(f, x, 0.0, derive_rng(1, 0, "train_noise"))
        assert sigma == 0.0
        y2, _ = gen_responses(f, x, 0.0, derive_rng(1, 0, "train_noise"))
        assert np.array_equal(y, y2)

    def test_reproducible(self):
        f = gen_true_coefficient("cp", (3, 4, 2), 2, derive_rng(2, 0, "coef"))
        x = gen_design(20, (3, 4, 2), derive_rng(2, 0, "train_x"))
        y1, s1 = gen_responses(f, x, 0.1, derive_rng(2, 0, "train_noise"))
        y2, s2 = gen_responses(f, x, 0.1, derive_rng(2, 0, "train_noise"))
        assert np.array_equal(y1, y2) and s1 == s2

    def test_noise_scale(self):
        from tensopt.simgen import signal_values

        f = gen_true_coefficient("cp", (3, 4, 2), 2, derive_rng(3, 0, "coef"))
        x = gen_design(1000, (3, 4, 2), derive_rng(3, 0, "train_x"))
        y, sigma = gen_responses(f, x, 0.05, derive_rng(3, 0, "train_noise"))
        signal = signal_values(f, x)
        realized = np.std(y - signal)
        assert abs(realized - sigma) < 0.1 * sigma
        assert abs(sigma - 0.05 * np.std(signal, ddof=1)) < 1e-12

    def test_sigma_override(self):
        f = gen_true_coefficient("cp", (3, 4, 2), 2, derive_rng(4, 0, "coef"))
        x = gen_design(5, (3, 4, 2), derive_rng(4, 0, "test_x"))
        _, sigma = gen_responses(f, x, 0.05, derive_rng(4, 0, "test_noise"),
                                 sigma=0.25)
        assert sigma == 0.25

    def test_needs_two_samples_for_scale(self):
        f = gen_true_coefficient("cp", (3, 4, 2), 2, derive_rng(5, 0, "coef"))
        x = gen_design(1, (3, 4, 2), derive_rng(5, 0, "train_x"))
        with pytest.raises(ValueError):
            gen_responses(f, x, 0.05, derive_rng(5, 0, "train_noise"))


class TestStreamIndependence:
    def test_changing_test_size_keeps_training_data(self):
        x1 = gen_design(8, (2, 3), derive_rng(9, 0, "train_x"))
        _ = gen_design(50, (2, 3), derive_rng(9, 0, "test_x"))
        x2 = gen_design(8, (2, 3), derive_rng(9, 0, "train_x"))
        assert np.array_equal(x1, x2)

    def test_roles_differ(self):
        a = gen_design(4, (2, 2), derive_rng(9, 0, "train_x"))
        b = gen_design(4, (2, 2), derive_rng(9, 0, "test_x"))
        assert not np.array_equal(a, b)


class TestSimConfig:
    def test_json_round_trip(self):
        cfg = SimConfig(shape=(10, 8, 12), true_kind="tucker", true_rank=(3, 3, 3),
                        n_train=400, n_test=100, noise_frac=0.01, lam=1.0,
                        seed=11, replicates=200)
        assert SimConfig.from_json_dict(cfg.to_json_dict()) == cfg

    def test_lambda_key_spelling(self):
        d = SimConfig(shape=(2, 2), lam=0.5, n_train=10, replicates=2).to_json_dict()
        assert d["lambda"] == 0.5 and "lam" not in d

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            SimConfig.from_json_dict({"shape": [2, 2], "bogus": 1})

    def test_validation(self):
        with pytest.raises(ValueError):
            SimConfig(shape=(2, 0))
        with pytest.raises(ValueError):
            SimConfig(shape=(2, 2), noise_frac=-0.1)
