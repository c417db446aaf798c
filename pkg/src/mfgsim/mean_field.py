"""Mean-field limit of the particle system by Picard iteration.

The law of the limit dynamics enters the coefficients only through the
scalar curves t -> E psi(x_t), E phi(x_t) (and the cost-side curves
E varphi(x_t), E chi(x_T)), so the measure fixed point collapses to a fixed
point on curves: simulate a decoupled cloud against candidate curves, read
off the cloud's functional means, repeat.  Common random numbers across
iterations make the map deterministic, so residuals measure the iteration,
not sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import ModelSpec
from .particle_sim import TimeGrid, draw_drivers, euler_panel, panel_costs, sorted_mean
from .regime_chain import GeneratorMatrix
from .streams import RngKey, as_key

__all__ = [
    "MeanFieldCurves",
    "PicardReport",
    "initial_curves",
    "phi_map",
    "solve_mean_field",
    "limiting_cost",
]


@dataclass(frozen=True)
class MeanFieldCurves:
    """Candidate law curves on a grid: E psi, E phi, E varphi, and E chi(x_T)."""

    grid: TimeGrid
    m_psi: NDArray[np.float64]
    m_phi: NDArray[np.float64]
    m_varphi: NDArray[np.float64]
    m_chi_T: float

    def __post_init__(self) -> None:
        for name in ("m_psi", "m_phi", "m_varphi"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if arr.shape != (self.grid.n_points,):
                raise ValueError(f"{name} must have one value per grid point")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if not np.isfinite(self.m_chi_T):
            raise ValueError("m_chi_T must be finite")

    def residual(self, other: "MeanFieldCurves") -> float:
        """Sup over the grid of the largest curve discrepancy."""
        return float(max(
            np.abs(self.m_psi - other.m_psi).max(),
            np.abs(self.m_phi - other.m_phi).max(),
            np.abs(self.m_varphi - other.m_varphi).max(),
        ))


@dataclass(frozen=True)
class PicardReport:
    """Iteration trace of the fixed-point solve."""

    iterates: int
    residuals: tuple[float, ...]
    converged: bool
    tolerance: float


def initial_curves(
    spec: ModelSpec,
    grid: TimeGrid,
    init_law,
    M: int,
    key: "int | RngKey",
) -> MeanFieldCurves:
    """Constant curves at the initial-law functional means.

    Uses the same x0 stream the cloud simulation consumes, so the starting
    point is consistent with the common-random-numbers iteration.
    """
    base = as_key(key)
    x0 = np.empty(M)
    for i in range(M):
        x0[i] = init_law.sample(base.child("x0", i).generator(), 1)[0]
    ones = np.ones(grid.n_points)
    return MeanFieldCurves(
        grid=grid,
        m_psi=ones * sorted_mean(spec.psi(x0)),
        m_phi=ones * sorted_mean(spec.phi(x0)),
        m_varphi=ones * sorted_mean(spec.varphi(x0)),
        m_chi_T=float(sorted_mean(spec.chi(x0))),
    )


def phi_map(
    spec: ModelSpec,
    control,
    curves_in: MeanFieldCurves,
    M: int,
    grid: TimeGrid,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
) -> MeanFieldCurves:
    """One application of the law map: simulate a decoupled M-copy cloud
    against ``curves_in`` and return the cloud's functional curves."""
    if M < 1:
        raise ValueError("ensemble size M must be positive")
    drivers = draw_drivers(gen, i0, init_law, M, grid, key)
    states, _ = euler_panel(
        spec, grid, drivers,
        lambda k, t, x, reg: control(t, x, reg),
        mean_psi=curves_in.m_psi, mean_phi=curves_in.m_phi,
    )
    return MeanFieldCurves(
        grid=grid,
        m_psi=sorted_mean(spec.psi(states), axis=0),
        m_phi=sorted_mean(spec.phi(states), axis=0),
        m_varphi=sorted_mean(spec.varphi(states), axis=0),
        m_chi_T=float(sorted_mean(spec.chi(states[:, -1]))),
    )


def solve_mean_field(
    spec: ModelSpec,
    control,
    grid: TimeGrid,
    M: int,
    tol: float,
    max_iters: int,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
    damping: float = 1.0,
) -> tuple[MeanFieldCurves, PicardReport]:
    """Iterate the law map from the initial-law curves until the sup-norm
    residual drops below ``tol``.

    The same stream key is reused for every iterate (common random
    numbers), so the map is deterministic and non-convergence within
    ``max_iters`` is reported in the trace rather than raised.  ``damping``
    in (0, 1] blends each new iterate with the previous one.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must lie in (0, 1]")
    base = as_key(key)
    curves = initial_curves(spec, grid, init_law, M, base)
    residuals: list[float] = []
    converged = False
    for _ in range(max_iters):
        nxt = phi_map(spec, control, curves, M, grid, base,
                      gen=gen, i0=i0, init_law=init_law)
        if damping < 1.0:
            nxt = MeanFieldCurves(
                grid=grid,
                m_psi=damping * nxt.m_psi + (1.0 - damping) * curves.m_psi,
                m_phi=damping * nxt.m_phi + (1.0 - damping) * curves.m_phi,
                m_varphi=damping * nxt.m_varphi + (1.0 - damping) * curves.m_varphi,
                m_chi_T=damping * nxt.m_chi_T + (1.0 - damping) * curves.m_chi_T,
            )
        res = nxt.residual(curves)
        residuals.append(res)
        curves = nxt
        if res <= tol:
            converged = True
            break
    report = PicardReport(
        iterates=len(residuals),
        residuals=tuple(residuals),
        converged=converged,
        tolerance=tol,
    )
    return curves, report


def limiting_cost(
    spec: ModelSpec,
    control,
    curves: MeanFieldCurves,
    M: int,
    grid: TimeGrid,
    key: "int | RngKey",
    *,
    gen: GeneratorMatrix,
    i0: int,
    init_law,
):
    """Monte Carlo estimate (mean, SE) of the limit-problem cost under
    ``control``, with the law arguments read from ``curves``."""
    drivers = draw_drivers(gen, i0, init_law, M, grid, as_key(key))
    states, controls = euler_panel(
        spec, grid, drivers,
        lambda k, t, x, reg: control(t, x, reg),
        mean_psi=curves.m_psi, mean_phi=curves.m_phi,
    )
    vals = panel_costs(spec, grid, states, controls, drivers.regimes,
                       curves.m_varphi, curves.m_chi_T)
    se = vals.std(ddof=1) / np.sqrt(M) if M > 1 else float("nan")
    return float(vals.mean()), float(se)
