"""Transport distances and propagation-of-chaos rate experiments.

On the real line the quadratic transport distance between equal-size
empirical measures is the root-mean-square of the sorted pairing; unequal
sizes use the exact quantile-function integral.  The chaos experiment
couples the interacting system with its mean-field limit through shared
drivers per agent and measures the worst-agent mean square sup-distance,
whose decay in the population size is then fitted on log-log scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .mean_field import MeanFieldCurves
from .model import ModelSpec
from .particle_sim import TimeGrid, draw_drivers, euler_panel
from .regime_chain import GeneratorMatrix
from .streams import RngKey, as_key

__all__ = [
    "RateFit",
    "Eq5Check",
    "ChaosError",
    "wasserstein2_1d",
    "check_eq5_bound",
    "chaos_error",
    "fit_chaos_rate",
]


@dataclass(frozen=True)
class RateFit:
    """Log-log least-squares fit of errors against population sizes."""

    n_values: tuple[int, ...]
    errors: tuple[float, ...]
    error_ses: tuple[float, ...]
    slope: float
    intercept: float
    r_squared: float
    slope_se: float

    def __post_init__(self) -> None:
        n = np.asarray(self.n_values)
        if n.size < 2 or np.any(np.diff(n) <= 0):
            raise ValueError("n_values must be strictly increasing with >= 2 points")
        if np.any(np.asarray(self.errors) <= 0.0):
            raise ValueError("errors must be positive")


@dataclass(frozen=True)
class Eq5Check:
    """Empirical transport distance against the coupled-vector bound."""

    lhs: float
    rhs: float
    holds: bool


@dataclass(frozen=True)
class ChaosError:
    """Worst-agent coupled error sup_i E sup_t |x^{i,n} - x^i|^2."""

    n: int
    value: float
    se: float
    replications: int
    per_agent: NDArray[np.float64]


def _atoms(law) -> NDArray[np.float64]:
    atoms = np.asarray(getattr(law, "atoms", law), dtype=np.float64)
    if atoms.ndim != 1 or atoms.size == 0:
        raise ValueError("empirical law must be a nonempty 1-d collection of atoms")
    return atoms


def wasserstein2_1d(mu, nu) -> float:
    """Exact quadratic transport distance between empirical measures on R.

    Equal atom counts pair sorted samples; unequal counts integrate the
    squared quantile difference exactly over the merged cdf breakpoints.
    Accepts :class:`~mfgsim.particle_sim.EmpiricalLaw` or plain arrays.
    """
    x = np.sort(_atoms(mu))
    y = np.sort(_atoms(nu))
    if x.size == y.size:
        return float(np.sqrt(np.mean((x - y) ** 2)))
    n, m = x.size, y.size
    levels = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate(([0.0], levels)))
    mids = levels - 0.5 * widths
    qx = x[np.minimum((mids * n).astype(int), n - 1)]
    qy = y[np.minimum((mids * m).astype(int), m - 1)]
    return float(np.sqrt(np.sum(widths * (qx - qy) ** 2)))


def check_eq5_bound(xi, zeta) -> Eq5Check:
    """Transport distance of two empiricals vs the mean-square coordinate gap.

    The right-hand side |xi - zeta| / sqrt(n) dominates the distance because
    the identity pairing is one admissible coupling.
    """
    xi = np.asarray(xi, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    if xi.shape != zeta.shape or xi.ndim != 1:
        raise ValueError("xi and zeta must be 1-d vectors of equal length")
    lhs = wasserstein2_1d(xi, zeta)
    rhs = float(np.linalg.norm(xi - zeta) / np.sqrt(xi.size))
    return Eq5Check(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + 1e-12))


def chaos_error(
    spec: ModelSpec,
    feedback,
    curves: MeanFieldCurves,
    n: int,
    grid: TimeGrid,
    replications: int,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
    bootstrap: int = 1000,
) -> ChaosError:
    """Coupled estimate of the worst-agent mean square sup-distance.

    Each replication simulates the n-player closed-loop system and n
    decoupled copies of the limit dynamics with *identical* drivers per
    agent; the limit copies consume the converged ``curves``.  The statistic
    is the max over agents of the per-agent Monte Carlo mean of
    sup over grid points of the squared gap; its SE is bootstrapped over
    replications (the max of means has no closed form).
    """
    if n < 2:
        raise ValueError("chaos experiments need at least two agents")
    if curves.grid != grid:
        raise ValueError("curves were solved on a different grid")
    base = as_key(key)
    sup2 = np.empty((replications, n))
    for rep in range(replications):
        drivers = draw_drivers(gen, i0, init_law, n, grid, base.child("rep", rep))
        ctrl = lambda k, t, x, reg: feedback(t, x, reg)
        coupled, _ = euler_panel(spec, grid, drivers, ctrl)
        limit, _ = euler_panel(spec, grid, drivers, ctrl,
                               mean_psi=curves.m_psi, mean_phi=curves.m_phi)
        sup2[rep] = np.max((coupled - limit) ** 2, axis=1)
    per_agent = sup2.mean(axis=0)
    value = float(per_agent.max())
    rng = base.child("bootstrap").generator()
    stats = np.empty(bootstrap)
    for b in range(bootstrap):
        idx = rng.integers(0, replications, replications)
        stats[b] = sup2[idx].mean(axis=0).max()
    return ChaosError(
        n=n,
        value=value,
        se=float(stats.std(ddof=1)),
        replications=replications,
        per_agent=per_agent,
    )


def fit_chaos_rate(n_values, errors, error_ses) -> RateFit:
    """Ordinary least squares of log(error) on log(n).

    Requires at least three ladder points spanning a decade.  The slope's
    standard error propagates the per-point SEs through the linear OLS
    weights by the delta method var(log e) ~ (se / e)^2.
    """
    n = np.asarray(n_values, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    se = np.asarray(error_ses, dtype=np.float64)
    if n.size < 3:
        raise ValueError("need at least three ladder points")
    if n.max() / n.min() < 10.0:
        raise ValueError("ladder must span at least one decade in n")
    if np.any(e <= 0.0):
        raise ValueError("error estimates must be positive; increase replications")
    lx = np.log(n)
    ly = np.log(e)
    lx_c = lx - lx.mean()
    slope = float(lx_c @ ly / (lx_c @ lx_c))
    intercept = float(ly.mean() - slope * lx.mean())
    fitted = intercept + slope * lx
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    weights = lx_c / (lx_c @ lx_c)
    var_logs = (se / e) ** 2
    slope_se = float(np.sqrt(np.sum(weights**2 * var_logs)))
    return RateFit(
        n_values=tuple(int(v) for v in n),
        errors=tuple(float(v) for v in e),
        error_ses=tuple(float(v) for v in se),
        slope=slope,
        intercept=intercept,
        r_squared=1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        slope_se=slope_se,
    )
