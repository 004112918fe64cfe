"""Planted-rank teachers, calibration generation, mode agreement, oracles."""

import numpy as np
import pytest

from lrcompress import (
    InfeasibleBudget,
    SearchSpaceTooLarge,
    brute_force_rank_search,
    build_teacher,
    default_spec,
    evaluate_allocation,
    gen_calibration,
    kl_divergence,
    svd_descending,
    truncation_error,
    uniform_ranks,
)
from lrcompress import fermigrad as fg
from lrcompress import toymodels as tm
from lrcompress.errors import DimensionMismatch
from lrcompress.fermigrad import BudgetConstraint, FermiConfig
from lrcompress.toymodels import ToyModelSpec, attach_data_aware_factors, forward


@pytest.fixture(scope="module")
def default_model():
    spec = default_spec(seed=2)
    model = build_teacher(spec)
    X = tm.gen_calibration(spec, 512, seed=1)
    attach_data_aware_factors(model, X)
    return spec, model, X


class TestSpecValidation:
    def test_shapes_must_compose(self):
        with pytest.raises(DimensionMismatch):
            ToyModelSpec(layer_shapes=[(8, 8), (8, 10)], planted_ranks=[2, 2])

    def test_planted_rank_bounds(self):
        with pytest.raises(DimensionMismatch):
            ToyModelSpec(layer_shapes=[(8, 8)], planted_ranks=[9])

    def test_output_dim_inferred_and_checked(self):
        spec = ToyModelSpec(layer_shapes=[(6, 4)], planted_ranks=[2])
        assert spec.output_dim == 6
        with pytest.raises(DimensionMismatch):
            ToyModelSpec(layer_shapes=[(6, 4)], planted_ranks=[2], output_dim=5)

    def test_unknown_nonlinearity(self):
        with pytest.raises(ValueError):
            ToyModelSpec(layer_shapes=[(4, 4)], planted_ranks=[2],
                         nonlinearity="sigmoidal-frobulator")

    def test_round_trips_through_dict(self):
        spec = default_spec(seed=9)
        again = ToyModelSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()


class TestBuildTeacher:
    def test_full_rank_when_planted_is_min(self):
        spec = ToyModelSpec(layer_shapes=[(8, 8)], planted_ranks=[8],
                            noise_floor=0.0, seed=3)
        W = build_teacher(spec).dense_weights[0]
        assert np.linalg.matrix_rank(W) == 8

    def test_exact_planted_rank_with_zero_floor(self):
        spec = ToyModelSpec(layer_shapes=[(12, 12)], planted_ranks=[4],
                            noise_floor=0.0, seed=4)
        W = build_teacher(spec).dense_weights[0]
        assert truncation_error(W, 4) <= 1e-10 * np.linalg.norm(W)

    def test_noise_floor_ratio(self):
        spec = ToyModelSpec(layer_shapes=[(32, 32)], planted_ranks=[8],
                            noise_floor=1e-3, seed=5)
        sigma = svd_descending(build_teacher(spec).dense_weights[0]).sigma
        assert sigma[8] / sigma[0] == pytest.approx(1e-3, rel=0.1)

    def test_deterministic(self):
        spec = default_spec(seed=6)
        a = build_teacher(spec).dense_weights
        b = build_teacher(spec).dense_weights
        for Wa, Wb in zip(a, b):
            assert np.array_equal(Wa, Wb)


class TestGenCalibration:
    def test_single_sample(self):
        spec = default_spec()
        X = gen_calibration(spec, 1, seed=0)
        assert X.shape == (64, 1)

    def test_same_seed_identical(self):
        spec = default_spec()
        assert np.array_equal(gen_calibration(spec, 32, seed=7),
                              gen_calibration(spec, 32, seed=7))

    def test_covariance_condition_number(self):
        spec = default_spec()
        X = gen_calibration(spec, 4096, seed=8)
        cond = np.linalg.cond(X @ X.T / 4096)
        assert 50 <= cond <= 200

    def test_distribution_fixed_by_spec_seed(self):
        spec = default_spec(seed=11)
        C1 = np.cov(gen_calibration(spec, 8192, seed=1))
        C2 = np.cov(gen_calibration(spec, 8192, seed=2))
        # different draws, same underlying covariance
        assert np.linalg.norm(C1 - C2) <= 0.2 * np.linalg.norm(C1)


class TestAttachFactors:
    def test_full_rank_factors_reconstruct_dense(self, default_model):
        _, model, _ = default_model
        for W, f in zip(model.dense_weights, model.factors):
            assert np.linalg.norm(W - f.reconstruct()) <= 1e-10 * np.linalg.norm(W)

    def test_from_calibration_matrices_matches(self, default_model):
        spec, model, X = default_model
        mats = tm.layer_calibration_matrices(model, X)
        other = tm.ToyModel(spec=spec, dense_weights=model.dense_weights)
        tm.attach_factors_from_calibration(other, mats)
        for f1, f2 in zip(model.factors, other.factors):
            assert np.array_equal(f1.A, f2.A)
            assert np.array_equal(f1.B, f2.B)


class TestForwardModes:
    def test_dense_equals_hard_at_full_rank(self, default_model):
        spec, model, X = default_model
        Xb = X[:, :32]
        dense = forward(model, Xb, mode="dense")
        hard = forward(model, Xb, mode="hard", ranks=spec.caps())
        assert np.linalg.norm(dense - hard) <= 1e-8 * np.linalg.norm(dense)

    def test_hard_equals_soft_at_midpoint_saturation(self, default_model):
        spec, model, X = default_model
        Xb = X[:, :32]
        ranks = np.array([5, 9, 17, 40])
        hard = forward(model, Xb, mode="hard", ranks=ranks)
        soft = forward(model, Xb, mode="soft", mu=ranks - 0.5,
                       fermi_cfg=FermiConfig(T=1e-5, r_min=1))
        assert np.linalg.norm(hard - soft) <= 1e-5 * np.linalg.norm(hard)

    def test_hard_equals_pivga(self, default_model):
        spec, model, X = default_model
        Xb = X[:, :32]
        ranks = np.array([5, 9, 17, 40])
        hard = forward(model, Xb, mode="hard", ranks=ranks)
        piv = forward(model, Xb, mode="pivga", ranks=ranks)
        assert np.linalg.norm(hard - piv) <= 1e-8 * np.linalg.norm(hard)

    def test_soft_saturated_equals_dense(self, default_model):
        spec, model, X = default_model
        Xb = X[:, :32]
        dense = forward(model, Xb, mode="dense")
        soft = forward(model, Xb, mode="soft", mu=spec.caps().astype(float),
                       fermi_cfg=FermiConfig(T=1e-4, r_min=1))
        assert np.linalg.norm(dense - soft) <= 1e-8 * np.linalg.norm(dense)

    def test_width_check(self, default_model):
        _, model, _ = default_model
        with pytest.raises(DimensionMismatch):
            forward(model, np.zeros((63, 4)), mode="dense")


class TestEvaluateAllocation:
    def test_caps_allocation_lossless(self, default_model):
        spec, model, X = default_model
        rep = evaluate_allocation(model, X[:, :64], spec.caps())
        assert rep.kl <= 1e-10
        assert np.all(rep.per_layer_residual <= 1e-10)

    def test_planted_allocation_lossless_with_zero_floor(self):
        spec = ToyModelSpec(layer_shapes=[(24, 24)] * 3, planted_ranks=[3, 6, 12],
                            noise_floor=0.0, seed=13)
        model = build_teacher(spec)
        X = gen_calibration(spec, 256, seed=14)
        attach_data_aware_factors(model, X)
        rep = evaluate_allocation(model, X[:, :64], spec.planted_ranks)
        assert rep.kl <= 1e-8

    def test_kl_matches_definition(self, default_model):
        spec, model, X = default_model
        Xe = X[:, :48]
        ranks = np.array([6, 10, 14, 30])
        rep = evaluate_allocation(model, Xe, ranks)
        t = forward(model, Xe, mode="dense")
        s = forward(model, Xe, mode="hard", ranks=ranks)
        assert rep.kl == kl_divergence(t.T, s.T)

    def test_param_counts_match_formulas(self, default_model):
        spec, model, _ = default_model
        ranks = np.array([6, 10, 14, 30])
        rep = evaluate_allocation(model, gen_calibration(spec, 16, seed=0), ranks)
        assert rep.params_linear == int(np.sum(ranks * 128))
        assert rep.params_parabolic == int(np.sum(ranks * 128 - ranks**2))

    def test_kl_trend_along_rank_chains(self, default_model):
        # adding rank helps overall; tiny local upticks are possible through
        # the nonlinearity, so per-step checks carry a 5% allowance
        spec, model, X = default_model
        Xe = gen_calibration(spec, 256, seed=15)
        rng = np.random.default_rng(16)
        for _ in range(4):
            ranks = rng.integers(3, 16, size=4)
            kl_start = kl_prev = evaluate_allocation(model, Xe, ranks).kl
            for _ in range(10):
                l = int(rng.integers(0, 4))
                if ranks[l] >= 64:
                    continue
                ranks[l] += 1
                kl = evaluate_allocation(model, Xe, ranks).kl
                assert kl <= kl_prev * 1.05 + 1e-9
                kl_prev = kl
            assert kl_prev < kl_start


class TestBruteForce:
    def small_fixture(self):
        spec = ToyModelSpec(layer_shapes=[(16, 16), (16, 16)], planted_ranks=[3, 12],
                            seed=5)
        model = build_teacher(spec)
        X = gen_calibration(spec, 256, seed=21)
        attach_data_aware_factors(model, X)
        return spec, model, X

    def test_single_layer_takes_largest_feasible_rank(self):
        spec = ToyModelSpec(layer_shapes=[(16, 16)], planted_ranks=[6], seed=1)
        model = build_teacher(spec)
        X = gen_calibration(spec, 128, seed=2)
        attach_data_aware_factors(model, X)
        budget = BudgetConstraint.from_shapes(spec.layer_shapes, n_target=330,
                                              mode="linear")
        alloc = brute_force_rank_search(model, X, budget, grid_step=1, r_min=1)
        assert alloc.ranks.tolist() == [10]          # 10*32 = 320 <= 330 < 352

    def test_optimum_beats_uniform_and_random(self):
        spec, model, X = self.small_fixture()
        Xe = gen_calibration(spec, 256, seed=22)
        budget = BudgetConstraint.from_shapes(spec.layer_shapes, n_target=307,
                                              mode="linear")
        best = brute_force_rank_search(model, Xe, budget, grid_step=1, r_min=2)
        best_kl = evaluate_allocation(model, Xe, best.ranks).kl
        uni = uniform_ranks(spec.layer_shapes, budget, r_min=2)
        assert best_kl <= evaluate_allocation(model, Xe, uni.ranks).kl + 1e-12
        rng = np.random.default_rng(23)
        tried = 0
        while tried < 20:
            ranks = rng.integers(2, 17, size=2)
            if fg.count_params(ranks, budget) > budget.n_target:
                continue
            tried += 1
            assert best_kl <= evaluate_allocation(model, Xe, ranks).kl + 1e-12

    def test_lexicographic_tie_break_and_determinism(self):
        spec, model, X = self.small_fixture()
        Xe = gen_calibration(spec, 128, seed=24)
        budget = BudgetConstraint.from_shapes(spec.layer_shapes, n_target=307,
                                              mode="linear")
        a = brute_force_rank_search(model, Xe, budget, grid_step=1, r_min=2)
        b = brute_force_rank_search(model, Xe, budget, grid_step=1, r_min=2)
        assert np.array_equal(a.ranks, b.ranks)
        # independently enumerate the near-tie set; the result must be its
        # lexicographic minimum
        best_kl = evaluate_allocation(model, Xe, a.ranks).kl
        ties = []
        for r0 in range(2, 17):
            for r1 in range(2, 17):
                ranks = np.array([r0, r1])
                if fg.count_params(ranks, budget) > budget.n_target:
                    continue
                kl = evaluate_allocation(model, Xe, ranks).kl
                if kl <= best_kl * (1 + 1e-12):
                    ties.append((r0, r1))
        assert tuple(a.ranks.tolist()) == min(ties)

    def test_search_space_guard(self):
        spec = default_spec(seed=2)
        model = build_teacher(spec)
        X = gen_calibration(spec, 64, seed=3)
        attach_data_aware_factors(model, X)
        budget = BudgetConstraint.from_shapes(spec.layer_shapes, n_target=9830,
                                              mode="linear")
        with pytest.raises(SearchSpaceTooLarge):
            brute_force_rank_search(model, X, budget, grid_step=1, r_min=1)

    def test_infeasible_budget(self):
        spec, model, X = self.small_fixture()
        budget = BudgetConstraint.from_shapes(spec.layer_shapes, n_target=100,
                                              mode="linear")
        with pytest.raises(InfeasibleBudget):
            brute_force_rank_search(model, X, budget, grid_step=1, r_min=2)
