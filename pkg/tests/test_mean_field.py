"""Tests for the Picard fixed point on mean-field curves."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mfgsim.families import InitialLaw, LqParams, lq_model
from mfgsim.mean_field import (
    MeanFieldCurves,
    initial_curves,
    limiting_cost,
    phi_map,
    solve_mean_field,
)
from mfgsim.model import ModelSpec
from mfgsim.particle_sim import TimeGrid, simulate_particles, sorted_mean
from mfgsim.regime_chain import GeneratorMatrix
from mfgsim.streams import RngKey

GEN1 = GeneratorMatrix(np.zeros((1, 1)))
ZERO_FEEDBACK = lambda t, x, reg: np.zeros(np.shape(x))


def _spec(b=None, sigma=None, psi=None, phi=None, r=(1.0,)):
    zero = lambda *args: np.zeros(np.broadcast(*args).shape)
    ident = lambda x: np.asarray(x, dtype=np.float64)
    return ModelSpec(
        b=b or zero, sigma=sigma or zero, h=zero,
        g=lambda x, y: np.zeros(np.broadcast(x, y).shape),
        psi=psi or ident, phi=phi or ident, varphi=ident, chi=ident,
        r=r, action_set=(-5.0, 5.0), validate=False,
    )


class TestPhiMap:
    def test_frozen_dynamics_keep_initial_moments(self):
        spec = _spec()
        grid = TimeGrid(1.0, 6)
        law = InitialLaw("gaussian", {"mean": 2.0, "std": 0.5})
        start = initial_curves(spec, grid, law, 400, RngKey(1))
        out = phi_map(spec, ZERO_FEEDBACK, start, 400, grid, RngKey(1),
                      gen=GEN1, i0=1, init_law=law)
        assert_allclose(out.m_psi, out.m_psi[0] * np.ones(grid.n_points))
        assert_allclose(out.m_psi[0], start.m_psi[0])

    def test_linear_decay_matches_ode(self):
        """b = -x, sigma = 0, point mass at 1: the mean curve follows the
        scalar ODE solution e^{-t} up to explicit-scheme bias <= 2 dt."""
        spec = _spec(b=lambda t, x, y, v: -x)
        grid = TimeGrid(1.0, 50)
        law = InitialLaw("point", {"value": 1.0})
        start = initial_curves(spec, grid, law, 200, RngKey(2))
        out = phi_map(spec, ZERO_FEEDBACK, start, 200, grid, RngKey(2),
                      gen=GEN1, i0=1, init_law=law)
        assert np.max(np.abs(out.m_psi - np.exp(-grid.points))) <= 2.0 * grid.dt

    def test_fixed_point_reproduces_itself(self):
        spec = _spec(b=lambda t, x, y, v: -x + 0.5 * y,
                     sigma=lambda t, x, y, v: 0.3 + 0.0 * x)
        grid = TimeGrid(1.0, 20)
        law = InitialLaw("gaussian", {"mean": 1.0, "std": 0.3})
        curves, report = solve_mean_field(
            spec, ZERO_FEEDBACK, grid, 2000, tol=1e-6, max_iters=30, key=RngKey(3),
            gen=GEN1, i0=1, init_law=law)
        assert report.converged
        again = phi_map(spec, ZERO_FEEDBACK, curves, 2000, grid, RngKey(3),
                        gen=GEN1, i0=1, init_law=law)
        assert again.residual(curves) <= 1e-6


class TestSolveMeanField:
    def test_measure_independent_converges_immediately(self):
        """Coefficients that ignore the law make the map constant: the second
        application reproduces the first bit-exactly."""
        spec = _spec(b=lambda t, x, y, v: -x + 0.0 * y,
                     sigma=lambda t, x, y, v: 0.2 + 0.0 * x,
                     psi=lambda x: 0.0 * x, phi=lambda x: 0.0 * x)
        curves, report = solve_mean_field(
            spec, ZERO_FEEDBACK, TimeGrid(1.0, 10), 500, tol=1e-12, max_iters=10,
            key=RngKey(4), gen=GEN1, i0=1,
            init_law=InitialLaw("gaussian", {"mean": 0.0, "std": 1.0}))
        assert report.converged
        assert report.iterates <= 2
        assert report.residuals[-1] == 0.0

    def test_linear_in_mean_contraction(self):
        """Residuals of the linear-in-mean benchmark decay geometrically."""
        spec = _spec(b=lambda t, x, y, v: -0.5 * x + 0.8 * y,
                     sigma=lambda t, x, y, v: 0.3 + 0.0 * x)
        curves, report = solve_mean_field(
            spec, ZERO_FEEDBACK, TimeGrid(1.0, 25), 3000, tol=1e-10, max_iters=25,
            key=RngKey(5), gen=GEN1, i0=1,
            init_law=InitialLaw("gaussian", {"mean": 1.0, "std": 0.4}))
        res = np.array(report.residuals)
        ratios = res[2:] / res[1:-1]
        assert np.all(ratios[res[1:-1] > 1e-12] < 0.9)
        assert report.converged

    def test_residuals_reproducible(self):
        spec = _spec(b=lambda t, x, y, v: -x + 0.3 * y,
                     sigma=lambda t, x, y, v: 0.2 + 0.0 * x)
        law = InitialLaw("point", {"value": 1.0})
        args = (spec, ZERO_FEEDBACK, TimeGrid(1.0, 10), 800, 1e-8, 20)
        _, rep1 = solve_mean_field(*args, key=RngKey(6), gen=GEN1, i0=1, init_law=law)
        _, rep2 = solve_mean_field(*args, key=RngKey(6), gen=GEN1, i0=1, init_law=law)
        assert rep1.residuals == rep2.residuals

    def test_fixed_point_matches_large_particle_system(self):
        """Law curves of the limit dynamics against a large simulation of the
        interacting system (combined-standard-error comparison)."""
        spec = lq_model(LqParams(a=-1.0, c=1.0, bbar=0.6, sigma0=0.4, s_c=0.0),
                        r=[1.0])
        grid = TimeGrid(1.0, 40)
        law = InitialLaw("gaussian", {"mean": 1.0, "std": 0.3})
        n = 20_000
        curves, report = solve_mean_field(
            spec, ZERO_FEEDBACK, grid, 20_000, tol=1e-4, max_iters=30, key=RngKey(7),
            gen=GEN1, i0=1, init_law=law)
        assert report.converged
        ens = simulate_particles(spec, ZERO_FEEDBACK, n, grid, law, RngKey(8),
                                 gen=GEN1, i0=1)
        for k in (grid.n_steps // 2, grid.n_steps):
            particle_mean = sorted_mean(ens.states[:, k])
            sd = ens.states[:, k].std(ddof=1)
            combined_se = sd * np.sqrt(1.0 / n + 1.0 / 20_000)
            assert abs(particle_mean - curves.m_psi[k]) <= 3.0 * combined_se

    def test_invalid_arguments(self):
        spec = _spec()
        law = InitialLaw("point", {"value": 0.0})
        with pytest.raises(ValueError, match="tol"):
            solve_mean_field(spec, ZERO_FEEDBACK, TimeGrid(1.0, 2), 100, tol=0.0,
                             max_iters=5, key=1, gen=GEN1, i0=1, init_law=law)
        with pytest.raises(ValueError, match="damping"):
            solve_mean_field(spec, ZERO_FEEDBACK, TimeGrid(1.0, 2), 100, tol=1e-3,
                             max_iters=5, key=1, gen=GEN1, i0=1, init_law=law,
                             damping=1.5)


class TestLimitingCost:
    def _curves(self, grid):
        z = np.zeros(grid.n_points)
        return MeanFieldCurves(grid, z, z, z, 0.0)

    def test_pure_terminal(self):
        spec = _spec()
        spec.g = lambda x, y: np.ones(np.broadcast(x, y).shape)
        grid = TimeGrid(1.0, 5)
        mean, se = limiting_cost(spec, ZERO_FEEDBACK, self._curves(grid), 200, grid,
                                 RngKey(9), gen=GEN1, i0=1,
                                 init_law=InitialLaw("point", {"value": 0.0}))
        assert_allclose(mean, 1.0)
        assert se == 0.0

    def test_pure_running_equals_horizon(self):
        spec = _spec()
        spec.h = lambda t, x, y, v: np.ones(np.broadcast(t, x, y, v).shape)
        grid = TimeGrid(1.75, 7)
        mean, _ = limiting_cost(spec, ZERO_FEEDBACK, self._curves(grid), 200, grid,
                                RngKey(10), gen=GEN1, i0=1,
                                init_law=InitialLaw("point", {"value": 0.0}))
        assert_allclose(mean, 1.75, rtol=1e-14)


class TestMonteCarloRefinement:
    def test_doubling_m_shrinks_curve_se(self):
        """Standard deviation of the map output scales like 1/sqrt(M)."""
        spec = _spec(b=lambda t, x, y, v: -x,
                     sigma=lambda t, x, y, v: 0.5 + 0.0 * x)
        grid = TimeGrid(1.0, 8)
        law = InitialLaw("point", {"value": 1.0})
        start = initial_curves(spec, grid, law, 250, RngKey(11))

        def terminal_sd(M, tag):
            vals = [
                phi_map(spec, ZERO_FEEDBACK, start, M, grid,
                        RngKey(11).child(tag, rep), gen=GEN1, i0=1,
                        init_law=law).m_psi[-1]
                for rep in range(40)
            ]
            return np.std(vals, ddof=1)

        ratio = terminal_sd(500, "hi") / terminal_sd(250, "lo")
        assert 0.6 <= ratio <= 0.85
