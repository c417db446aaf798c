"""Euler-Maruyama simulation of the weakly coupled particle system.

The explicit scheme freezes coefficients at the left endpoint of each step
and reads the chain as its left limit there, matching the left-continuity
of the dynamics.  Chains are simulated exactly in continuous time and only
evaluated on the grid, so jump counts carry no discretization bias.

The same stepper drives three couplings:

* empirical coupling (each coefficient sees the all-particle functional
  means) for the n-player system,
* curve coupling (coefficients see externally supplied deterministic
  curves) for mean-field limit clouds,
* mixed per-agent controls for unilateral-deviation experiments.

Driver streams are keyed per (agent, driver) so that initial states,
Brownian increments, and chains are mutually independent and any agent
subset reproduces bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import ModelSpec
from .regime_chain import ChainPath, GeneratorMatrix, regime_panel, sample_chain_ensemble
from .streams import RngKey, as_key

__all__ = [
    "TimeGrid",
    "sorted_mean",
    "panel_costs",
    "ParticleEnsemble",
    "EmpiricalLaw",
    "NumericalAbort",
    "DriverSet",
    "draw_drivers",
    "euler_panel",
    "simulate_particles",
    "empirical_functionals",
    "agent_cost",
    "all_agent_costs",
    "monte_carlo_agent_cost",
]


def sorted_mean(values: NDArray, axis: int = 0) -> NDArray:
    """Mean with a canonical summation order.

    Sorting before summing makes the result invariant under permutations of
    the input (equal elements are interchangeable), which is what lets
    agent relabelling permute trajectories bit-identically.
    """
    v = np.sort(values, axis=axis)
    return v.sum(axis=axis) / v.shape[axis]


class NumericalAbort(RuntimeError):
    """State became non-finite; carries the step index and particle id."""

    def __init__(self, step: int, particle: int):
        self.step = step
        self.particle = particle
        super().__init__(
            f"non-finite state at step {step}, particle {particle}; "
            "check coefficients/step size"
        )


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * horizon / n_steps, k = 0..n_steps."""

    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def points(self) -> NDArray[np.float64]:
        return self.horizon * np.arange(self.n_steps + 1) / self.n_steps

    @property
    def n_points(self) -> int:
        return self.n_steps + 1


@dataclass(frozen=True)
class EmpiricalLaw:
    """Equal-weight atoms of an empirical measure on the real line."""

    atoms: NDArray[np.float64]

    def __post_init__(self) -> None:
        a = np.asarray(self.atoms, dtype=np.float64)
        object.__setattr__(self, "atoms", a)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("empirical law needs at least one atom")
        if not np.all(np.isfinite(a)):
            raise ValueError("empirical law atoms must be finite")

    @property
    def n(self) -> int:
        return self.atoms.size


@dataclass(frozen=True)
class DriverSet:
    """Independent noise drivers for one simulated cloud/ensemble."""

    x0: NDArray[np.float64]           # (n,)
    dW: NDArray[np.float64]           # (n, n_steps)
    chains: list[ChainPath]
    regimes_left: NDArray[np.int64]   # (n, n_steps+1), left limits on the grid
    regimes: NDArray[np.int64]        # (n, n_steps+1), cadlag values
    seed_manifest: dict


@dataclass(frozen=True)
class ParticleEnsemble:
    """Simulated panel of one replication of the interacting system."""

    grid: TimeGrid
    states: NDArray[np.float64]       # (n, n_steps+1)
    controls: NDArray[np.float64]     # (n, n_steps+1)
    regimes_left: NDArray[np.int64]
    regimes: NDArray[np.int64]
    chains: list[ChainPath]
    seed_manifest: dict

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def empirical_law(self, k: int) -> EmpiricalLaw:
        return EmpiricalLaw(self.states[:, k].copy())


def draw_drivers(
    gen: GeneratorMatrix,
    i0: int,
    init_sampler,
    n: int,
    grid: TimeGrid,
    key: "int | RngKey",
) -> DriverSet:
    """Draw (x0, W, chain) for n agents from per-agent substreams."""
    base = as_key(key)
    x0 = np.empty(n)
    dW = np.empty((n, grid.n_steps))
    sqdt = np.sqrt(grid.dt)
    sample = init_sampler.sample if hasattr(init_sampler, "sample") else init_sampler
    for i in range(n):
        x0[i] = sample(base.child("x0", i).generator(), 1)[0]
        dW[i] = base.child("w", i).generator().standard_normal(grid.n_steps) * sqdt
    if gen.d == 1:
        # a single state never jumps; skip the per-path chain streams
        trivial = ChainPath(1, np.empty(0), np.empty(0, dtype=np.int64), grid.horizon)
        chains = [trivial] * n
    else:
        chains = sample_chain_ensemble(gen, i0, grid.horizon, n, base)
    pts = grid.points
    return DriverSet(
        x0=x0,
        dW=dW,
        chains=chains,
        regimes_left=regime_panel(chains, pts, left_limit=True),
        regimes=regime_panel(chains, pts, left_limit=False),
        seed_manifest={
            "root": base.describe(),
            "streams": "x0/w/chain tags per agent index",
        },
    )


def euler_panel(
    spec: ModelSpec,
    grid: TimeGrid,
    drivers: DriverSet,
    control_eval,
    mean_psi: NDArray | None = None,
    mean_phi: NDArray | None = None,
):
    """Run the explicit scheme; returns (states, controls) panels.

    ``control_eval(k, t_k, x, regimes_left_k)`` returns the control vector
    applied on [t_k, t_{k+1}).  When ``mean_psi``/``mean_phi`` are None the
    law arguments are the empirical functional means of the current panel;
    otherwise the supplied per-step curves are used (decoupled dynamics).
    """
    n = drivers.x0.size
    K = grid.n_steps
    dt = grid.dt
    pts = grid.points
    states = np.empty((n, K + 1))
    controls = np.empty((n, K + 1))
    states[:, 0] = drivers.x0
    r_left = spec.r[drivers.regimes_left - 1]  # (n, K+1) modulation at left limits
    for k in range(K):
        x = states[:, k]
        t = pts[k]
        y_psi = sorted_mean(spec.psi(x)) if mean_psi is None else mean_psi[k]
        y_phi = sorted_mean(spec.phi(x)) if mean_phi is None else mean_phi[k]
        u = control_eval(k, t, x, drivers.regimes_left[:, k])
        controls[:, k] = u
        rk = r_left[:, k]
        drift = spec.b(t, x, y_psi, u) * rk
        vol = spec.sigma(t, x, y_phi, u) * rk
        nxt = x + drift * dt + vol * drivers.dW[:, k]
        if not np.all(np.isfinite(nxt)):
            bad = int(np.argmin(np.isfinite(nxt)))
            raise NumericalAbort(k + 1, bad)
        states[:, k + 1] = nxt
    controls[:, K] = control_eval(K, pts[K], states[:, K], drivers.regimes_left[:, K])
    return states, controls


def simulate_particles(
    spec: ModelSpec,
    feedback,
    n: int,
    grid: TimeGrid,
    init_sampler,
    seed: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
) -> ParticleEnsemble:
    """Simulate the weakly coupled n-particle system under one feedback.

    The feedback is evaluated at (t_k, x_k, left-limit regime); the law
    arguments are the empirical means of the state functionals across the
    panel at the left endpoint of each step.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if spec.n_regimes != gen.d:
        raise ValueError("model and generator disagree on the number of regimes")
    drivers = draw_drivers(gen, i0, init_sampler, n, grid, seed)

    def control_eval(k, t, x, reg):
        return feedback(t, x, reg)

    states, controls = euler_panel(spec, grid, drivers, control_eval)
    return ParticleEnsemble(
        grid=grid,
        states=states,
        controls=controls,
        regimes_left=drivers.regimes_left,
        regimes=drivers.regimes,
        chains=drivers.chains,
        seed_manifest=drivers.seed_manifest,
    )


def empirical_functionals(ens: ParticleEnsemble, f, k: int) -> float:
    """Cross-particle mean of f at grid step k."""
    if not (0 <= k <= ens.grid.n_steps):
        raise ValueError(f"step {k} outside grid 0..{ens.grid.n_steps}")
    return float(sorted_mean(f(ens.states[:, k])))


def panel_costs(
    spec: ModelSpec,
    grid: TimeGrid,
    states: NDArray,
    controls: NDArray,
    regimes: NDArray,
    y_varphi: NDArray,
    y_chi_T: float,
) -> NDArray[np.float64]:
    """Per-path realized costs given the law-argument curves.

    Trapezoidal quadrature of h(t, x, y_varphi, u) * r(regime) along the
    grid plus the terminal g(x_T, y_chi_T) * r(regime_T); the cost weights
    use the cadlag regime value at each node.
    """
    pts = grid.points
    r_cad = spec.r[regimes - 1]
    running = spec.h(pts[None, :], states, np.asarray(y_varphi)[None, :], controls) * r_cad
    weights = np.full(pts.size, grid.dt)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    return running @ weights + spec.g(states[:, -1], y_chi_T) * r_cad[:, -1]


def all_agent_costs(ens: ParticleEnsemble, spec: ModelSpec) -> NDArray[np.float64]:
    """Realized cost of every agent in one replication (empirical coupling)."""
    y_varphi = sorted_mean(spec.varphi(ens.states), axis=0)  # (K+1,)
    y_chi_T = float(sorted_mean(spec.chi(ens.states[:, -1])))
    return panel_costs(spec, ens.grid, ens.states, ens.controls, ens.regimes,
                       y_varphi, y_chi_T)


def agent_cost(ens: ParticleEnsemble, spec: ModelSpec, agent: int) -> float:
    """Realized cost of one agent (1-based index) in this replication."""
    if not (1 <= agent <= ens.n):
        raise ValueError(f"agent {agent} outside 1..{ens.n}")
    return float(all_agent_costs(ens, spec)[agent - 1])


def monte_carlo_agent_cost(
    spec: ModelSpec,
    feedback,
    n: int,
    grid: TimeGrid,
    init_sampler,
    replications: int,
    seed: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    agent: int = 1,
):
    """Monte Carlo estimate of one agent's expected cost across replications.

    Returns (mean, standard error); replication r draws its drivers from
    the ``child(r)`` stream of the given key, independent of ordering.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    base = as_key(seed)
    vals = np.empty(replications)
    for rep in range(replications):
        ens = simulate_particles(
            spec, feedback, n, grid, init_sampler, base.child("rep", rep), gen=gen, i0=i0
        )
        vals[rep] = agent_cost(ens, spec, agent)
    se = vals.std(ddof=1) / np.sqrt(replications) if replications > 1 else float("nan")
    return float(vals.mean()), float(se)
