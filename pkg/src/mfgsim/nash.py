"""Unilateral-deviation experiments around the mean-field feedback.

Deploy a candidate equilibrium feedback across all n agents, let one agent
deviate within a declared family of Lipschitz feedbacks, and measure how
much the deviation improves that agent's cost.  Profiles are compared
under common random numbers: every driver stream is keyed by
(replication, agent, driver) only, never by profile, so the gap between
two profiles is a paired difference.  The decay of the best advantage as
the population grows is fitted on log-log scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .metrics import RateFit, fit_chaos_rate
from .model import ModelSpec
from .particle_sim import (
    TimeGrid,
    draw_drivers,
    euler_panel,
    panel_costs,
    sorted_mean,
)
from .regime_chain import GeneratorMatrix
from .streams import RngKey, as_key

__all__ = [
    "DeviationFamily",
    "NashGapResult",
    "GapScalingResult",
    "affine_deviation_family",
    "nash_gap",
    "gap_scaling",
]


@dataclass(frozen=True)
class DeviationFamily:
    """Parametric set of Lipschitz feedbacks searched by the deviator.

    ``make(params)`` builds a feedback from a parameter vector; ``bounds``
    (at most four dimensions) delimit the search box, scanned on a coarse
    grid and polished with Nelder-Mead.
    """

    name: str
    make: "callable"
    bounds: tuple[tuple[float, float], ...]
    grid_points: int = 5
    polish: bool = True

    def __post_init__(self) -> None:
        if not (1 <= len(self.bounds) <= 4):
            raise ValueError("deviation families are searched over 1..4 parameters")


def affine_deviation_family(base, shift: float = 0.5, name: str = "affine") -> DeviationFamily:
    """Additive perturbations of a tabulated affine feedback's gains."""
    from .control import FeedbackControl

    if not hasattr(base, "k0_table"):
        raise ValueError("affine deviations require an affine tabulated base feedback")

    def make(params):
        d0, d1 = params
        return FeedbackControl.affine(
            base.grid,
            base.k0_table + d0,
            base.k1_table + d1,
            action_set=base.action_set,
            name=f"{name}({d0:+.3f},{d1:+.3f})",
        )

    return DeviationFamily(name=name, make=make,
                           bounds=((-shift, shift), (-shift, shift)))


@dataclass(frozen=True)
class NashGapResult:
    """Outcome of one deviation search at fixed population size.

    ``gap`` is equilibrium cost minus best deviation cost, so a positive
    gap is the improvement the deviator found; the equilibrium bound says
    it stays below sqrt(eps_n) up to Monte Carlo noise.
    """

    n: int
    equilibrium_cost: float
    equilibrium_se: float
    best_deviation_cost: float
    best_deviation_se: float
    gap: float
    gap_se: float
    deviation_family: str
    best_deviation_params: tuple | None
    replications: int
    deviating_agent: int
    clamp_events: int

    @property
    def advantage(self) -> float:
        return max(0.0, self.gap)


@dataclass(frozen=True)
class GapScalingResult:
    points: tuple[NashGapResult, ...]
    fit: RateFit | None
    message: str


def nash_gap(
    spec: ModelSpec,
    equilibrium,
    deviations,
    n: int,
    grid: TimeGrid,
    replications: int,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
    deviating_agent: int = 1,
) -> NashGapResult:
    """Estimate the best unilateral deviation advantage for one agent.

    ``deviations`` is either a finite list of feedbacks or a
    :class:`DeviationFamily`.  All candidates and the symmetric profile are
    evaluated on the same per-replication drivers, and the reported SEs
    come from the replication-level samples (paired, for the gap).
    """
    if not (1 <= deviating_agent <= n):
        raise ValueError(f"deviating agent {deviating_agent} outside 1..{n}")
    if replications < 2:
        raise ValueError("need at least two replications for standard errors")
    base = as_key(key)
    dev_idx = deviating_agent - 1
    driver_sets = [
        draw_drivers(gen, i0, init_law, n, grid, base.child("rep", rep))
        for rep in range(replications)
    ]

    def profile_costs(dev_feedback):
        """Per-replication cost of the (possibly deviating) agent."""
        vals = np.empty(replications)
        for rep, drivers in enumerate(driver_sets):
            if dev_feedback is None:
                ctrl = lambda k, t, x, reg: equilibrium(t, x, reg)
            else:
                def ctrl(k, t, x, reg):
                    u = np.asarray(equilibrium(t, x, reg), dtype=np.float64)
                    u[dev_idx] = np.asarray(
                        dev_feedback(t, x[dev_idx : dev_idx + 1],
                                     reg[dev_idx : dev_idx + 1]))[0]
                    return u
            states, controls = euler_panel(spec, grid, drivers, ctrl)
            y_varphi = sorted_mean(spec.varphi(states), axis=0)
            y_chi = float(sorted_mean(spec.chi(states[:, -1])))
            costs = panel_costs(spec, grid, states, controls, drivers.regimes,
                                y_varphi, y_chi)
            vals[rep] = costs[dev_idx]
        return vals

    eq_vals = profile_costs(None)
    eq_mean = float(eq_vals.mean())
    eq_se = float(eq_vals.std(ddof=1) / np.sqrt(replications))

    if isinstance(deviations, DeviationFamily):
        best_params, best_vals, best_fb = _search_family(deviations, profile_costs)
        family_name = deviations.name
    else:
        candidates = list(deviations)
        if not candidates:
            raise ValueError("deviation list must be nonempty")
        results = [(profile_costs(fb), fb) for fb in candidates]
        idx = int(np.argmin([v.mean() for v, _ in results]))
        best_vals, best_fb = results[idx]
        best_params = None
        family_name = f"list[{len(candidates)}]"
    clamp_events = int(getattr(best_fb, "clamp_events", 0))

    diff = eq_vals - best_vals  # positive when the deviation is cheaper
    return NashGapResult(
        n=n,
        equilibrium_cost=eq_mean,
        equilibrium_se=eq_se,
        best_deviation_cost=float(best_vals.mean()),
        best_deviation_se=float(best_vals.std(ddof=1) / np.sqrt(replications)),
        gap=float(diff.mean()),
        gap_se=float(diff.std(ddof=1) / np.sqrt(replications)),
        deviation_family=family_name,
        best_deviation_params=best_params,
        replications=replications,
        deviating_agent=deviating_agent,
        clamp_events=clamp_events,
    )


def _search_family(family: DeviationFamily, profile_costs):
    """Coarse grid scan plus Nelder-Mead polish of the deviation objective."""
    axes = [np.linspace(lo, hi, family.grid_points) for lo, hi in family.bounds]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)

    cache: dict[tuple, np.ndarray] = {}

    def objective(params):
        pt = tuple(np.clip(params, [b[0] for b in family.bounds],
                           [b[1] for b in family.bounds]))
        if pt not in cache:
            cache[pt] = profile_costs(family.make(pt))
        return cache[pt].mean()

    scan = np.array([objective(row) for row in mesh])
    best = mesh[int(np.argmin(scan))]
    if family.polish:
        res = minimize(objective, best, method="Nelder-Mead",
                       options={"maxiter": 40 * len(family.bounds),
                                "xatol": 1e-3, "fatol": 1e-10})
        cand = tuple(np.clip(res.x, [b[0] for b in family.bounds],
                             [b[1] for b in family.bounds]))
        if objective(cand) <= objective(tuple(best)):
            best = np.asarray(cand)
    best_pt = tuple(np.clip(best, [b[0] for b in family.bounds],
                            [b[1] for b in family.bounds]))
    return best_pt, cache[best_pt], family.make(best_pt)


def gap_scaling(
    spec: ModelSpec,
    equilibrium,
    deviations,
    ladder,
    replications: int,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
    grid: TimeGrid,
) -> GapScalingResult:
    """Best-deviation advantage across a ladder of population sizes.

    Fits log(advantage) against log(n) when at least three ladder points
    show an advantage above zero; otherwise reports the gap as
    indistinguishable from zero (the equilibrium bound is one-sided, so a
    silent noise floor is an accepted outcome).
    """
    ladder = [int(v) for v in ladder]
    if len(ladder) < 3:
        raise ValueError("need at least three ladder points")
    base = as_key(key)
    points = []
    for n in ladder:
        points.append(nash_gap(
            spec, equilibrium, deviations, n, grid, replications,
            base.child("n", n), gen=gen, i0=i0, init_law=init_law,
        ))
    positive = [(p.n, p.advantage, max(p.gap_se, 1e-15)) for p in points
                if p.advantage > 0.0]
    if len(positive) < 3:
        return GapScalingResult(
            points=tuple(points), fit=None,
            message="gap indistinguishable from 0 on the ladder",
        )
    ns, adv, ses = map(np.asarray, zip(*positive))
    try:
        fit = fit_chaos_rate(ns, adv, ses)
    except ValueError as err:
        return GapScalingResult(points=tuple(points), fit=None,
                                message=f"fit unavailable: {err}")
    return GapScalingResult(points=tuple(points), fit=fit,
                            message=f"fitted slope {fit.slope:.3f}")
