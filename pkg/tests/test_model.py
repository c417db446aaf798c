"""Tests for model specification, Hamiltonian evaluation, and assumption checks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mfgsim.families import (
    BoundedSmoothParams,
    InitialLaw,
    LqParams,
    bounded_smooth_model,
    lq_model,
)
from mfgsim.model import ModelSpec, check_assumptions, hamiltonian, minimize_hamiltonian
from mfgsim.streams import RngKey


@pytest.fixture
def lq():
    return lq_model(LqParams(a=-0.5, c=1.0, sigma0=0.4, q_c=1.0, r_c=1.0, s_c=0.5), r=[1.0])


@pytest.fixture
def lq2():
    return lq_model(LqParams(a=-0.5, c=1.0, sigma0=0.4, s_c=0.5), r=[1.0, 2.0])


def _zero_spec(r=(1.0,), action=(-1.0, 1.0)):
    z4 = lambda t, x, y, v: np.zeros(np.broadcast(t, x, y, v).shape)
    return ModelSpec(
        b=z4, sigma=z4, h=z4,
        g=lambda x, y: np.zeros(np.broadcast(x, y).shape),
        psi=lambda x: np.zeros(np.shape(x)), phi=lambda x: np.zeros(np.shape(x)),
        varphi=lambda x: np.zeros(np.shape(x)), chi=lambda x: np.zeros(np.shape(x)),
        r=r, action_set=action, validate=False,
    )


class TestModelSpecValidation:
    def test_nonpositive_modulation_rejected(self):
        with pytest.raises(ValueError, match=r"r\(2\)"):
            lq_model(LqParams(), r=[1.0, 0.0])

    def test_wrong_derivative_caught(self):
        with pytest.raises(ValueError, match="b_x"):
            ModelSpec(
                b=lambda t, x, y, v: x**2,
                sigma=lambda t, x, y, v: 0.0 * x,
                h=lambda t, x, y, v: 0.0 * x,
                g=lambda x, y: 0.0 * x,
                psi=lambda x: 0.0 * x, phi=lambda x: 0.0 * x,
                varphi=lambda x: 0.0 * x, chi=lambda x: 0.0 * x,
                r=[1.0], action_set=(-1.0, 1.0),
                derivatives={"b_x": lambda t, x, y, v: 7.0 + 0.0 * x},
            )

    def test_fd_fallback_matches_analytic(self, lq):
        fd = lq_model(LqParams(a=-0.5, c=1.0, sigma0=0.4, s_c=0.5), r=[1.0])
        spec_no_derivs = ModelSpec(
            b=fd.b, sigma=fd.sigma, h=fd.h, g=fd.g,
            psi=fd.psi, phi=fd.phi, varphi=fd.varphi, chi=fd.chi,
            r=[1.0], action_set=fd.action_set, validate=False,
        )
        pts = np.linspace(-2.0, 2.0, 7)
        assert_allclose(
            spec_no_derivs.h_x(0.3, pts, 0.0, 0.1), lq.h_x(0.3, pts, 0.0, 0.1), rtol=1e-6
        )


class TestHamiltonian:
    def test_zero_costate_leaves_running_cost(self, lq2):
        out = hamiltonian(lq2, 0.2, 1.5, 0.0, 0.0, 0.0, u=0.5, regime=2, p=0.0, q=0.0)
        assert_allclose(out.value, lq2.h(0.2, 1.5, 0.0, 0.5) * 2.0)

    def test_zero_coefficients_give_zero(self):
        spec = _zero_spec()
        out = hamiltonian(spec, 0.1, 2.0, 1.0, 1.0, 1.0, u=0.3, regime=1, p=4.0, q=-2.0)
        assert_allclose(out.value, 0.0)

    def test_lq_direct_evaluation(self, lq):
        """Value at (t,x,u,p,q) = (0,1,0,1,0) against independently coded closed forms."""
        out = hamiltonian(lq, 0.0, 1.0, 0.0, 0.0, 0.0, u=0.0, regime=1, p=1.0, q=0.0)
        h_val = 0.5 * 1.0  # q_c x^2 / 2
        b_val = -0.5       # a x
        assert_allclose(out.value, h_val + b_val)

    def test_control_outside_action_set_rejected(self, lq):
        with pytest.raises(ValueError, match="action set"):
            hamiltonian(lq, 0.0, 0.0, 0.0, 0.0, 0.0, u=100.0, regime=1, p=0.0, q=0.0)

    def test_affine_in_costate(self, lq2):
        """H is affine in (p, q) at fixed remaining arguments."""
        rng = np.random.default_rng(1)
        for _ in range(20):
            t, x = rng.uniform(0, 1), rng.uniform(-2, 2)
            p1, p2, q = rng.uniform(-3, 3, 3)
            a = rng.uniform()
            args = (lq2, t, x, 0.3, -0.2, 0.1)
            h1 = hamiltonian(*args, u=0.2, regime=1, p=p1, q=q).value
            h2 = hamiltonian(*args, u=0.2, regime=1, p=p2, q=q).value
            hm = hamiltonian(*args, u=0.2, regime=1, p=a * p1 + (1 - a) * p2, q=q).value
            assert_allclose(hm, a * h1 + (1 - a) * h2, atol=1e-12)

    def test_scaling_r_scales_value_not_argmin(self):
        p1 = lq_model(LqParams(a=-0.5, s_c=0.5), r=[1.0])
        p3 = lq_model(LqParams(a=-0.5, s_c=0.5), r=[3.0])
        args = (0.1, 0.7, 0.0, 0.0, 0.0)
        h1 = hamiltonian(p1, *args, u=0.4, regime=1, p=1.2, q=0.3).value
        h3 = hamiltonian(p3, *args, u=0.4, regime=1, p=1.2, q=0.3).value
        assert_allclose(h3, 3.0 * h1)
        u1 = minimize_hamiltonian(p1, *args, regime=1, p=1.2, q=0.3)
        u3 = minimize_hamiltonian(p3, *args, regime=1, p=1.2, q=0.3)
        assert_allclose(u1, u3, atol=1e-9)


class TestMinimizeHamiltonian:
    def test_interior_quadratic_vertex(self, lq):
        # H_v = r_c v + c p = 0  =>  v* = -p
        u = minimize_hamiltonian(lq, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=0.7, q=0.0)
        assert_allclose(u, -0.7, atol=1e-8)

    def test_monotone_slice_hits_boundary(self, lq):
        # large positive p makes H increasing in v on the interval
        u = minimize_hamiltonian(lq, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=50.0, q=0.0)
        assert_allclose(u, lq.action_set[0], atol=1e-8)

    def test_flat_hamiltonian_returns_midpoint(self):
        spec = _zero_spec(action=(-2.0, 4.0))
        u = minimize_hamiltonian(spec, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=1.0, q=1.0)
        assert_allclose(u, 1.0)

    def test_random_convex_quartics_match_grid_scan(self):
        """Quartic-in-v Hamiltonians against a 10^6-point grid oracle."""
        rng = RngKey(99).child("quartic").generator()
        for _ in range(5):
            a4 = rng.uniform(0.1, 1.0)
            a2 = rng.uniform(0.0, 2.0)
            a1 = rng.uniform(-2.0, 2.0)
            spec = ModelSpec(
                b=lambda t, x, y, v: 0.0 * v,
                sigma=lambda t, x, y, v: 0.0 * v,
                h=lambda t, x, y, v, a4=a4, a2=a2, a1=a1: a4 * v**4 + a2 * v**2 + a1 * v,
                g=lambda x, y: 0.0 * x,
                psi=lambda x: 0.0 * x, phi=lambda x: 0.0 * x,
                varphi=lambda x: 0.0 * x, chi=lambda x: 0.0 * x,
                r=[1.0], action_set=(-1.5, 1.5), validate=False,
            )
            u = minimize_hamiltonian(spec, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=0.0, q=0.0)
            grid = np.linspace(-1.5, 1.5, 1_000_001)
            oracle = grid[np.argmin(a4 * grid**4 + a2 * grid**2 + a1 * grid)]
            assert abs(u - oracle) <= 1e-6

    def test_never_beaten_by_random_feasible_point(self, lq):
        rng = RngKey(7).child("feasible").generator()
        args = (lq, 0.3, 1.1, 0.2, 0.0, 0.1)
        u = minimize_hamiltonian(*args, regime=1, p=-0.9, q=0.4)
        assert lq.action_set[0] <= u <= lq.action_set[1]
        h_star = hamiltonian(*args, u=u, regime=1, p=-0.9, q=0.4).value
        vs = rng.uniform(*lq.action_set, 1000)
        hv = hamiltonian(*args, u=vs, regime=1, p=-0.9, q=0.4).value
        assert np.all(h_star <= hv)

    def test_non_finite_rejected(self):
        spec = ModelSpec(
            b=lambda t, x, y, v: 0.0 * v,
            sigma=lambda t, x, y, v: 0.0 * v,
            h=lambda t, x, y, v: 1.0 / (v - 0.5),
            g=lambda x, y: 0.0 * x,
            psi=lambda x: 0.0 * x, phi=lambda x: 0.0 * x,
            varphi=lambda x: 0.0 * x, chi=lambda x: 0.0 * x,
            r=[1.0], action_set=(0.0, 1.0), validate=False,
        )
        with pytest.raises(ValueError, match="non-finite"):
            minimize_hamiltonian(spec, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=0.0, q=0.0)

    def test_vectorized_matches_scalar(self, lq):
        ps = np.linspace(-2.0, 2.0, 9)
        u_vec = minimize_hamiltonian(lq, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=ps, q=0.0)
        for k, p in enumerate(ps):
            u_s = minimize_hamiltonian(lq, 0.0, 0.0, 0.0, 0.0, 0.0, regime=1, p=p, q=0.0)
            assert_allclose(u_vec[k], u_s, atol=1e-10)


class TestCheckAssumptions:
    def test_lq_benchmark_passes(self, lq2):
        report = check_assumptions(lq2, sample_budget=500, seed=1)
        assert report.passed, report.summary()

    def test_bounded_smooth_a7_and_integrability_pass(self):
        spec = bounded_smooth_model(BoundedSmoothParams(), r=[1.0, 1.5])
        report = check_assumptions(spec, sample_budget=500, seed=2)
        assert report["A3 integrability"].passed
        for key in ("b_y", "sigma_y", "h_y", "g_y"):
            assert report[f"A7 {key} nonnegative"].passed

    def test_concave_terminal_cost_fails_a4(self):
        spec = _zero_spec()
        spec.g = lambda x, y: -(x**2) + 0.0 * np.asarray(y)
        report = check_assumptions(spec, sample_budget=200, seed=3)
        item = report["A4 g convex"]
        assert not item.passed
        assert item.witness is not None

    def test_negative_h_y_fails_a7(self):
        spec = _zero_spec()
        spec.h_y = lambda t, x, y, v: -np.ones(np.broadcast(t, x, y, v).shape)
        report = check_assumptions(spec, sample_budget=200, seed=4)
        assert not report["A7 h_y nonnegative"].passed

    def test_small_budget_rejected(self, lq):
        with pytest.raises(ValueError, match="sample_budget"):
            check_assumptions(lq, sample_budget=10)


class TestInitialLaw:
    def test_kinds_and_means(self):
        assert InitialLaw("point", {"value": 2.0}).mean == 2.0
        assert InitialLaw("uniform", {"low": 0.0, "high": 1.0}).mean == 0.5
        assert InitialLaw("gaussian", {"mean": -1.0, "std": 0.2}).mean == -1.0

    def test_sampling_deterministic(self):
        law = InitialLaw("gaussian", {"mean": 0.0, "std": 1.0})
        a = law.sample(RngKey(5).child("x0").generator(), 10)
        b = law.sample(RngKey(5).child("x0").generator(), 10)
        assert np.array_equal(a, b)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            InitialLaw("cauchy", {})
