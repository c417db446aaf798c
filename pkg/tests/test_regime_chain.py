"""Tests for exact chain sampling and its martingale decomposition."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mfgsim.regime_chain import (
    ChainPath,
    GeneratorMatrix,
    counting_decomposition,
    phi_tilde_grid_increments,
    regime_panel,
    sample_chain,
    sample_chain_ensemble,
    transition_matrix,
)
from mfgsim.streams import RngKey


@pytest.fixture
def gen2():
    return GeneratorMatrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))


@pytest.fixture
def gen3():
    return GeneratorMatrix(
        np.array([[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
    )


class TestGeneratorValidation:
    def test_negative_offdiagonal_names_row(self):
        lam = np.array([[-1.0, 1.0], [-0.5, 0.5]])
        with pytest.raises(ValueError, match="row 2"):
            GeneratorMatrix(lam)

    def test_nonzero_row_sum_rejected(self):
        lam = np.array([[-1.0, 1.1], [1.0, -1.0]])
        with pytest.raises(ValueError, match="row 1"):
            GeneratorMatrix(lam)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            GeneratorMatrix(np.zeros((2, 3)))


class TestSampleChain:
    def test_single_absorbing_state_never_jumps(self):
        gen = GeneratorMatrix(np.zeros((1, 1)))
        path = sample_chain(gen, 1, horizon=7.5, rng=0)
        assert path.n_jumps == 0
        assert path.state(7.5) == 1

    def test_zero_exit_rate_state_is_absorbing(self):
        lam = np.array([[-1.0, 0.5, 0.5], [0.0, 0.0, 0.0], [1.0, 1.0, -2.0]])
        gen = GeneratorMatrix(lam)
        for seed in range(20):
            path = sample_chain(gen, 2, horizon=5.0, rng=seed)
            assert path.n_jumps == 0

    def test_two_state_law_matches_matrix_exponential(self, gen2):
        """Empirical P(alpha_T = 1 | alpha_0 = 1) vs (1 + exp(-2T)) / 2.

        Closed form from diagonalizing the symmetric two-state generator.
        """
        T, n = 10.0, 20_000
        paths = sample_chain_ensemble(gen2, 1, T, n, key=RngKey(42))
        hits = np.fromiter((p.state(T) == 1 for p in paths), dtype=float, count=n)
        p_hat = hits.mean()
        p_true = (1.0 + np.exp(-2.0 * T)) / 2.0
        se = np.sqrt(p_true * (1.0 - p_true) / n)
        assert abs(p_hat - p_true) <= 3.0 * se

    def test_determinism_bit_identical(self, gen3):
        a = sample_chain(gen3, 2, 4.0, rng=RngKey(7).child("chain"))
        b = sample_chain(gen3, 2, 4.0, rng=RngKey(7).child("chain"))
        assert a.initial_state == b.initial_state
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.array_equal(a.jump_targets, b.jump_targets)

    def test_invalid_initial_state(self, gen2):
        with pytest.raises(ValueError, match="outside"):
            sample_chain(gen2, 3, 1.0, rng=0)

    def test_left_limit_semantics(self):
        path = ChainPath(1, np.array([0.5]), np.array([2]), horizon=1.0)
        assert path.state(0.5) == 2
        assert path.state_before(0.5) == 1
        assert path.state_before(0.0) == 1


class TestTransitionMatrix:
    def test_identity_at_zero(self, gen3):
        assert_allclose(transition_matrix(gen3, 0.0), np.eye(3), atol=1e-14)

    def test_symmetric_two_state_limit(self, gen2):
        P = transition_matrix(gen2, 50.0)
        assert_allclose(P, 0.25 * np.ones((2, 2)) * 2.0, atol=1e-12)

    def test_one_transient_state(self):
        """Row 1 of exp(t*Lambda) solves the scalar ODE p' = -2p, p(0) = 1."""
        gen = GeneratorMatrix(np.array([[-2.0, 2.0], [0.0, 0.0]]))
        P = transition_matrix(gen, 1.0)
        assert_allclose(P[0], [np.exp(-2.0), 1.0 - np.exp(-2.0)], rtol=1e-12)

    def test_rows_sum_to_one(self, gen3):
        for t in (0.1, 1.0, 5.0):
            assert_allclose(transition_matrix(gen3, t).sum(axis=1), 1.0, atol=1e-12)

    def test_negative_time_rejected(self, gen2):
        with pytest.raises(ValueError):
            transition_matrix(gen2, -0.1)

    def test_empirical_law_chi_square(self, gen3):
        """State frequencies at a fixed time against the exp(t*Lambda) row."""
        from scipy.stats import chisquare

        t, n = 0.7, 10_000
        paths = sample_chain_ensemble(gen3, 1, 1.0, n, key=RngKey(3))
        states = np.array([p.state(t) for p in paths])
        observed = np.bincount(states, minlength=4)[1:]
        expected = transition_matrix(gen3, t)[0] * n
        _, pvalue = chisquare(observed, expected)
        assert pvalue > 1e-3


class TestCountingDecomposition:
    def test_zero_jump_path_pure_compensator(self, gen3):
        path = ChainPath(1, np.array([]), np.array([], dtype=np.int64), horizon=2.0)
        rec = counting_decomposition(path, gen3)
        for j in (2, 3):
            for t in (0.0, 0.8, 2.0):
                assert rec.count(1, j, t) == 0
                assert_allclose(rec.phi_tilde(j, t), -gen3.rates[0, j - 1] * t)
        assert_allclose(rec.phi_tilde(1, 2.0), 0.0)

    def test_single_jump_hand_integration(self, gen2):
        """N_t(1,2) = 1{t >= s}; phi_tilde_t(2) = 1{t >= s} - min(t, s)."""
        s = 0.3
        path = ChainPath(1, np.array([s]), np.array([2]), horizon=1.0)
        rec = counting_decomposition(path, gen2)
        for t in (0.1, 0.3, 0.9, 1.0):
            assert rec.count(1, 2, t) == (1 if t >= s else 0)
            assert_allclose(rec.phi_tilde(2, t), (t >= s) - min(t, s), atol=1e-15)
            assert_allclose(rec.phi_tilde(1, t), -max(0.0, t - s), atol=1e-15)

    def test_counts_match_recorded_jumps_exactly(self, gen3):
        paths = sample_chain_ensemble(gen3, 1, 3.0, 50, key=RngKey(11))
        for path in paths:
            rec = counting_decomposition(path, gen3)
            seq = path.state_sequence
            for i in range(1, 4):
                for j in range(1, 4):
                    if i == j:
                        continue
                    expected = int(np.sum((seq[:-1] == i) & (seq[1:] == j)))
                    assert rec.count(i, j, path.horizon) == expected

    def test_martingale_mean_near_zero(self, gen3):
        """E phi_tilde_T(j) = 0: empirical mean within 4 standard errors."""
        n, T = 20_000, 1.0
        paths = sample_chain_ensemble(gen3, 2, T, n, key=RngKey(5))
        vals = np.empty((n, 3))
        for k, path in enumerate(paths):
            rec = counting_decomposition(path, gen3)
            vals[k] = rec.phi_tilde_at(np.array([T]))[0]
        mean = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean) <= 4.0 * se)

    def test_path_state_outside_range_rejected(self, gen2):
        path = ChainPath(1, np.array([0.2]), np.array([3]), horizon=1.0)
        with pytest.raises(ValueError, match="outside"):
            counting_decomposition(path, gen2)

    def test_intensity_vectors(self, gen3):
        path = ChainPath(1, np.array([0.4]), np.array([3]), horizon=1.0)
        rec = counting_decomposition(path, gen3)
        # instantaneous: left limit at the jump time is still state 1
        assert_allclose(rec.intensity_vector(0.4), [0.0, 1.5, 0.5])
        assert_allclose(rec.intensity_vector(0.8), [1.0, 1.0, 0.0])
        # cumulative: occupation-weighted rates
        expected = 0.4 * gen3.offdiagonal_row(1) + 0.3 * gen3.offdiagonal_row(3)
        assert_allclose(rec.cumulative_intensity_vector(0.7), expected)


class TestGridIncrements:
    def test_increments_telescope_to_phi_tilde(self, gen3):
        grid = np.linspace(0.0, 2.0, 9)
        paths = sample_chain_ensemble(gen3, 1, 2.0, 40, key=RngKey(13))
        for path in paths:
            rec = counting_decomposition(path, gen3)
            inc = phi_tilde_grid_increments(path, gen3, grid)
            assert_allclose(inc.sum(axis=0), rec.phi_tilde_at(grid[-1:])[0], atol=1e-12)
            assert_allclose(np.cumsum(inc, axis=0), rec.phi_tilde_at(grid[1:]), atol=1e-12)

    def test_single_jump_increment_cells(self, gen2):
        grid = np.linspace(0.0, 1.0, 5)
        path = ChainPath(1, np.array([0.3]), np.array([2]), horizon=1.0)
        inc = phi_tilde_grid_increments(path, gen2, grid)
        # jump at 0.3 lands in cell (0.25, 0.5]; compensator into 2 accrues
        # at rate 1 while in state 1, into 1 at rate 1 while in state 2
        assert_allclose(inc[:, 1], [-0.25, 1.0 - 0.05, 0.0, 0.0], atol=1e-14)
        assert_allclose(inc[:, 0], [0.0, -0.2, -0.25, -0.25], atol=1e-14)


class TestRegimePanel:
    def test_panel_matches_pointwise_lookup(self, gen3):
        grid = np.linspace(0.0, 3.0, 13)
        paths = sample_chain_ensemble(gen3, 1, 3.0, 10, key=RngKey(21))
        panel = regime_panel(paths, grid, left_limit=True)
        for k, path in enumerate(paths):
            for m, t in enumerate(grid):
                assert panel[k, m] == path.state_before(t)
