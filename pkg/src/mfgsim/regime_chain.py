"""Exact simulation of a finite-state continuous-time Markov chain.

The chain is sampled in continuous time (exponential holding times, jump
kernel read off the generator rows), so downstream grid evaluation can use
exact left limits at jump times.  The module also provides the counting
process / compensator / martingale decomposition of a sampled path and the
matrix-exponential transition law used as an oracle in tests.

State labels are 1..d throughout the public interface; row/column ``i`` of
the generator refers to state label ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

from .streams import RngKey, as_key

__all__ = [
    "GeneratorMatrix",
    "ChainPath",
    "CountingRecord",
    "sample_chain",
    "sample_chain_ensemble",
    "transition_matrix",
    "counting_decomposition",
    "regime_panel",
    "phi_tilde_grid_increments",
]

_ROWSUM_TOL = 1e-10


@dataclass(frozen=True)
class GeneratorMatrix:
    """Generator (rate matrix) of a time-homogeneous chain on states 1..d.

    Off-diagonal entries are jump rates (per unit time) and must be
    nonnegative; each row sums to zero, so the diagonal holds the negative
    total exit rate of its state.
    """

    rates: NDArray[np.float64]

    def __post_init__(self) -> None:
        lam = np.asarray(self.rates, dtype=np.float64)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ValueError(f"generator must be a square matrix, got shape {lam.shape}")
        if lam.shape[0] < 1:
            raise ValueError("generator needs at least one state")
        object.__setattr__(self, "rates", lam)
        scale = max(1.0, float(np.abs(lam).max()))
        for i in range(lam.shape[0]):
            off = np.delete(lam[i], i)
            if off.size and off.min() < 0.0:
                j = int(np.argmin(np.delete(lam[i], i)))
                raise ValueError(
                    f"generator row {i + 1} has a negative off-diagonal rate "
                    f"({off.min():g}); all jump rates must be >= 0"
                )
            if abs(lam[i].sum()) > _ROWSUM_TOL * scale:
                raise ValueError(
                    f"generator row {i + 1} sums to {lam[i].sum():g}, expected 0"
                )

    @property
    def d(self) -> int:
        return self.rates.shape[0]

    def exit_rate(self, state: int) -> float:
        """Total rate of leaving ``state`` (i.e. -lambda_ii)."""
        return -float(self.rates[state - 1, state - 1])

    def offdiagonal_row(self, state: int) -> NDArray[np.float64]:
        """Jump rates out of ``state`` into each target, zero on the diagonal."""
        row = self.rates[state - 1].copy()
        row[state - 1] = 0.0
        return row


@dataclass(frozen=True)
class ChainPath:
    """One sampled trajectory: right-continuous with left limits.

    ``jump_times`` are strictly increasing in (0, T]; ``jump_targets[k]``
    is the state entered at ``jump_times[k]`` and always differs from the
    state held just before.
    """

    initial_state: int
    jump_times: NDArray[np.float64]
    jump_targets: NDArray[np.int64]
    horizon: float

    def __post_init__(self) -> None:
        jt = np.asarray(self.jump_times, dtype=np.float64)
        tg = np.asarray(self.jump_targets, dtype=np.int64)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_targets", tg)
        if jt.shape != tg.shape:
            raise ValueError("jump_times and jump_targets must have equal length")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if jt.size:
            if jt[0] <= 0.0 or jt[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            if np.any(np.diff(jt) <= 0.0):
                raise ValueError("jump times must be strictly increasing")
            seq = self.state_sequence
            if np.any(seq[1:] == seq[:-1]):
                raise ValueError("consecutive states must differ at a jump")

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    @property
    def state_sequence(self) -> NDArray[np.int64]:
        """States held on the successive inter-jump segments."""
        return np.concatenate(([self.initial_state], self.jump_targets))

    def state(self, t: float) -> int:
        """Right-continuous value at t."""
        return int(self.states_at(np.asarray([t]))[0])

    def state_before(self, t: float) -> int:
        """Left limit at t (equals state(0) at t = 0)."""
        return int(self.states_at(np.asarray([t]), left_limit=True)[0])

    def states_at(self, times: NDArray, left_limit: bool = False) -> NDArray[np.int64]:
        """Vectorized state lookup; ``left_limit`` selects the pre-jump value."""
        t = np.asarray(times, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError("evaluation times must lie in [0, horizon]")
        side = "left" if left_limit else "right"
        idx = np.searchsorted(self.jump_times, t, side=side)
        return self.state_sequence[idx]


@dataclass(frozen=True)
class CountingRecord:
    """Counting/compensator/martingale decomposition of one chain path.

    For each ordered pair (i, j), i != j, the jump count N_t(i, j) is a step
    function and its compensator is the integrated intensity
    lambda_ij * (occupation time of i before t).  The per-state martingale
    component aggregates pairs into each target state.  All quantities are
    stored through event-time breakpoints and are exact at any t in [0, T].
    """

    path: ChainPath
    gen: GeneratorMatrix
    # segment k occupies [segment_starts[k], segment_ends[k]) in state segment_states[k]
    segment_starts: NDArray[np.float64] = field(repr=False)
    segment_ends: NDArray[np.float64] = field(repr=False)
    segment_states: NDArray[np.int64] = field(repr=False)

    @property
    def d(self) -> int:
        return self.gen.d

    def count(self, i: int, j: int, t: float) -> int:
        """N_t(i, j): jumps i -> j in (0, t]."""
        if i == j:
            raise ValueError("counting processes are defined for ordered pairs i != j")
        jt, tg = self.path.jump_times, self.path.jump_targets
        src = self.path.state_sequence[:-1] if jt.size else np.empty(0, dtype=np.int64)
        mask = (jt <= t) & (src == i) & (tg == j)
        return int(mask.sum())

    def occupation(self, i: int, t: float) -> float:
        """Lebesgue time spent in state i over [0, t]."""
        lo = self.segment_starts
        hi = np.minimum(self.segment_ends, t)
        overlap = np.clip(hi - lo, 0.0, None)
        return float(overlap[self.segment_states == i].sum())

    def compensator(self, i: int, j: int, t: float) -> float:
        """Integrated intensity of the (i, j) counting process up to t."""
        if i == j:
            raise ValueError("compensators are defined for ordered pairs i != j")
        return float(self.gen.rates[i - 1, j - 1]) * self.occupation(i, t)

    def phi_tilde(self, j: int, t: float) -> float:
        """Martingale component into state j at time t."""
        return float(self.phi_tilde_at(np.asarray([t]))[0, j - 1])

    def phi_tilde_at(self, times: NDArray) -> NDArray[np.float64]:
        """(len(times), d) array of all martingale components, exact at each t."""
        t = np.asarray(times, dtype=np.float64)
        out = np.zeros((t.size, self.d))
        # jump part: each recorded jump adds 1 to its target's component
        jt, tg = self.path.jump_times, self.path.jump_targets
        if jt.size:
            hit = jt[None, :] <= t[:, None]  # (T, n_jumps)
            for j in range(1, self.d + 1):
                out[:, j - 1] += hit[:, tg == j].sum(axis=1)
        # compensator part: occupation of each segment weighted by its exit rates
        lo, hi = self.segment_starts, self.segment_ends
        overlap = np.clip(np.minimum(hi[None, :], t[:, None]) - lo[None, :], 0.0, None)
        for k in range(lo.size):
            a = int(self.segment_states[k])
            out -= overlap[:, k : k + 1] * self.gen.offdiagonal_row(a)[None, :]
        return out

    def intensity_vector(self, t: float) -> NDArray[np.float64]:
        """Instantaneous intensity into each state given the left limit at t."""
        a = self.path.state_before(t)
        return self.gen.offdiagonal_row(a)

    def cumulative_intensity_vector(self, t: float) -> NDArray[np.float64]:
        """Integrated intensity into each state over [0, t] (the cumulative form)."""
        out = np.zeros(self.d)
        lo, hi = self.segment_starts, self.segment_ends
        overlap = np.clip(np.minimum(hi, t) - lo, 0.0, None)
        for k in range(lo.size):
            a = int(self.segment_states[k])
            out += overlap[k] * self.gen.offdiagonal_row(a)
        return out


def sample_chain(
    gen: GeneratorMatrix,
    i0: int,
    horizon: float,
    rng: "int | RngKey | np.random.Generator",
) -> ChainPath:
    """Sample one path exactly: exponential holds, generator-row jump kernel.

    ``rng`` may be a master seed, a stream key, or a ready generator; a bare
    seed is routed through the ``("chain",)`` stream so results match the
    documented derivation chain.
    """
    _check_state(gen, i0)
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = as_key(rng).child("chain").generator()
    cum = _cumulative_kernels(gen)
    times, targets = _sample_events(gen, cum, i0, horizon, rng)
    return ChainPath(i0, np.asarray(times), np.asarray(targets, dtype=np.int64), horizon)


def sample_chain_ensemble(
    gen: GeneratorMatrix,
    i0: int,
    horizon: float,
    n_paths: int,
    key: "int | RngKey",
) -> list[ChainPath]:
    """Sample ``n_paths`` i.i.d. paths, one stream per path index.

    Path ``k`` draws from ``key.child("chain", k)``, so any subset of paths
    is reproducible independently of the others.
    """
    base = as_key(key)
    cum = _cumulative_kernels(gen)
    out = []
    for k in range(n_paths):
        rng = base.child("chain", k).generator()
        times, targets = _sample_events(gen, cum, i0, horizon, rng)
        out.append(
            ChainPath(i0, np.asarray(times), np.asarray(targets, dtype=np.int64), horizon)
        )
    return out


def _cumulative_kernels(gen: GeneratorMatrix) -> NDArray[np.float64]:
    """Per-state cumulative jump distributions; rows with zero exit rate are 0."""
    lam = gen.rates
    d = gen.d
    cum = np.zeros((d, d))
    for i in range(d):
        rate = -lam[i, i]
        if rate > 0.0:
            row = lam[i].copy()
            row[i] = 0.0
            cum[i] = np.cumsum(row / rate)
    return cum


def _sample_events(gen, cum, i0, horizon, rng):
    lam = gen.rates
    times: list[float] = []
    targets: list[int] = []
    t = 0.0
    state = i0
    while True:
        rate = -lam[state - 1, state - 1]
        if rate <= 0.0:
            break  # absorbing state
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        u = rng.random()
        j = int(np.searchsorted(cum[state - 1], u, side="right"))
        j = min(j, gen.d - 1)
        times.append(t)
        targets.append(j + 1)
        state = j + 1
    return times, targets


def transition_matrix(gen: GeneratorMatrix, t: float) -> NDArray[np.float64]:
    """exp(t * Lambda) via scaling-and-squaring; law oracle for sampled chains."""
    if t < 0.0:
        raise ValueError("time must be nonnegative")
    return expm(t * gen.rates)


def counting_decomposition(path: ChainPath, gen: GeneratorMatrix) -> CountingRecord:
    """Exact (N, compensator, martingale) decomposition of a sampled path."""
    seq = path.state_sequence
    if seq.min() < 1 or seq.max() > gen.d:
        raise ValueError(
            f"path visits state {int(seq.min() if seq.min() < 1 else seq.max())}, "
            f"outside 1..{gen.d}"
        )
    starts = np.concatenate(([0.0], path.jump_times))
    ends = np.concatenate((path.jump_times, [path.horizon]))
    return CountingRecord(path, gen, starts, ends, seq)


def regime_panel(
    paths: list[ChainPath],
    times: NDArray,
    left_limit: bool = False,
) -> NDArray[np.int64]:
    """(n_paths, len(times)) panel of state labels on a common time grid."""
    t = np.asarray(times, dtype=np.float64)
    out = np.empty((len(paths), t.size), dtype=np.int64)
    for k, p in enumerate(paths):
        out[k] = p.states_at(t, left_limit=left_limit)
    return out


def phi_tilde_grid_increments(
    path: ChainPath,
    gen: GeneratorMatrix,
    times: NDArray,
) -> NDArray[np.float64]:
    """Per-interval martingale increments on a grid.

    Returns a (len(times) - 1, d) array whose row k is
    ``phi_tilde(t_{k+1}) - phi_tilde(t_k)`` componentwise: jumps landing in
    (t_k, t_{k+1}] minus the exact integrated intensity over the interval.
    """
    t = np.asarray(times, dtype=np.float64)
    n_int = t.size - 1
    out = np.zeros((n_int, gen.d))
    jt, tg = path.jump_times, path.jump_targets
    if jt.size:
        cell = np.searchsorted(t, jt, side="left") - 1
        np.add.at(out, (cell, tg - 1), 1.0)
    # compensator: walk the constant-state segments and split them over cells
    starts = np.concatenate(([0.0], jt))
    ends = np.concatenate((jt, [path.horizon]))
    seq = path.state_sequence
    for k in range(starts.size):
        lo, hi, a = starts[k], ends[k], int(seq[k])
        row = gen.offdiagonal_row(a)
        if not row.any():
            continue
        c0 = min(max(int(np.searchsorted(t, lo, side="right") - 1), 0), n_int - 1)
        c1 = min(max(int(np.searchsorted(t, hi, side="left") - 1), 0), n_int - 1)
        for c in range(c0, c1 + 1):
            overlap = min(hi, t[c + 1]) - max(lo, t[c])
            if overlap > 0.0:
                out[c] -= overlap * row
    return out


def _check_state(gen: GeneratorMatrix, state: int) -> None:
    if not (1 <= state <= gen.d):
        raise ValueError(f"state {state} outside 1..{gen.d}")
