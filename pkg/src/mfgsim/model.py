"""Problem specification: coefficients, costs, modulation, and the Hamiltonian.

A :class:`ModelSpec` bundles the drift, diffusion, running and terminal
costs, the scalar functionals through which the coefficients see the state
law, the per-regime modulation weights, and a compact action interval.
Partial derivatives may be supplied analytically or are filled in with
central finite differences.  The module also evaluates and minimizes the
Hamiltonian and spot-checks the standing regularity/convexity assumptions
on randomized samples.

All coefficient callables must accept numpy arrays (broadcasting
arithmetic is enough); evaluation routines rely on that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .streams import RngKey

__all__ = [
    "ModelSpec",
    "LinearMeasureCoefficient",
    "HamiltonianEval",
    "AssumptionCheck",
    "AssumptionReport",
    "hamiltonian",
    "minimize_hamiltonian",
    "check_assumptions",
]

_DERIVATIVE_NAMES = (
    "b_x", "b_y", "b_v",
    "sigma_x", "sigma_y", "sigma_v",
    "h_x", "h_y", "h_v",
    "g_x", "g_y",
    "psi_x", "phi_x", "varphi_x", "chi_x",
)

_FD_BASE_STEP = 1e-6


def _fd_step(x):
    return _FD_BASE_STEP * np.maximum(1.0, np.abs(x))


def _central_diff(f, args, slot):
    """Central finite difference of f in its ``slot``-th argument."""
    args = [np.asarray(a, dtype=np.float64) for a in args]
    h = _fd_step(args[slot])
    up = list(args)
    dn = list(args)
    up[slot] = args[slot] + h
    dn[slot] = args[slot] - h
    return (f(*up) - f(*dn)) / (2.0 * h)


class ModelSpec:
    """Coefficients and costs of the controlled regime-modulated dynamics.

    Parameters
    ----------
    b, sigma : callable(t, x, y, v)
        Drift and diffusion before regime modulation.
    h : callable(t, x, y, v)
        Running cost density.
    g : callable(x, y)
        Terminal cost.
    psi, phi, varphi, chi : callable(x)
        Scalar functionals through which coefficients and costs see the law:
        ``psi`` feeds the drift, ``phi`` the diffusion, ``varphi`` the
        running cost, ``chi`` the terminal cost.
    r : array_like
        Positive modulation weight per regime; its length fixes the number
        of chain states the model is compatible with.
    action_set : (float, float)
        Closed control interval [u_lo, u_hi].
    derivatives : dict, optional
        Analytic partials keyed by ``b_x``, ``b_y``, ``b_v``, ``sigma_x``,
        ..., ``chi_x``.  Missing entries fall back to central finite
        differences with step 1e-6 * max(1, |x|).
    validate : bool
        Spot-check supplied derivatives against central differences on a
        few random points at construction time.
    sample_box : dict, optional
        Ranges used by validation and assumption checks, keys ``t``, ``x``,
        ``y`` mapping to (lo, hi) pairs.
    """

    def __init__(
        self,
        *,
        b,
        sigma,
        h,
        g,
        psi,
        phi,
        varphi,
        chi,
        r,
        action_set,
        derivatives: dict | None = None,
        validate: bool = True,
        sample_box: dict | None = None,
        name: str = "",
        notes: tuple[str, ...] = (),
    ):
        self.b = b
        self.sigma = sigma
        self.h = h
        self.g = g
        self.psi = psi
        self.phi = phi
        self.varphi = varphi
        self.chi = chi
        self.name = name
        self.notes = tuple(notes)

        self.r = np.asarray(r, dtype=np.float64)
        if self.r.ndim != 1 or self.r.size < 1:
            raise ValueError("r must be a nonempty vector of per-regime weights")
        if np.any(self.r <= 0.0):
            bad = int(np.argmin(self.r)) + 1
            raise ValueError(f"modulation must be positive; r({bad}) = {self.r[bad - 1]:g}")

        lo, hi = float(action_set[0]), float(action_set[1])
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"action_set must be a finite interval, got [{lo}, {hi}]")
        self.action_set = (lo, hi)

        self.sample_box = {"t": (0.0, 1.0), "x": (-3.0, 3.0), "y": (-3.0, 3.0)}
        if sample_box:
            self.sample_box.update(sample_box)

        derivatives = dict(derivatives or {})
        unknown = set(derivatives) - set(_DERIVATIVE_NAMES)
        if unknown:
            raise ValueError(f"unknown derivative names: {sorted(unknown)}")
        self._analytic = frozenset(derivatives)
        self._install_derivatives(derivatives)
        if validate:
            self._validate_derivatives()

    @property
    def n_regimes(self) -> int:
        return self.r.size

    def r_of(self, regime):
        """Modulation weight(s) for 1-based regime label(s)."""
        return self.r[np.asarray(regime) - 1]

    def clamp(self, u):
        return np.clip(u, self.action_set[0], self.action_set[1])

    def in_action_set(self, u) -> bool:
        lo, hi = self.action_set
        u = np.asarray(u)
        return bool(np.all(u >= lo) and np.all(u <= hi))

    # -- derivative plumbing -------------------------------------------------

    def _install_derivatives(self, supplied: dict) -> None:
        four = {"b": self.b, "sigma": self.sigma, "h": self.h}
        for fname, fn in four.items():
            for suffix, slot in (("x", 1), ("y", 2), ("v", 3)):
                key = f"{fname}_{suffix}"
                deriv = supplied.get(key) or self._fd4(fn, slot)
                setattr(self, key, deriv)
        self.g_x = supplied.get("g_x") or self._fd2(self.g, 0)
        self.g_y = supplied.get("g_y") or self._fd2(self.g, 1)
        for fname in ("psi", "phi", "varphi", "chi"):
            key = f"{fname}_x"
            setattr(self, key, supplied.get(key) or self._fd1(getattr(self, fname)))

    @staticmethod
    def _fd4(fn, slot):
        return lambda t, x, y, v: _central_diff(fn, (t, x, y, v), slot)

    @staticmethod
    def _fd2(fn, slot):
        return lambda x, y: _central_diff(fn, (x, y), slot)

    @staticmethod
    def _fd1(fn):
        return lambda x: _central_diff(fn, (x,), 0)

    def _validate_derivatives(self, n_points: int = 8, rtol: float = 1e-5) -> None:
        """Compare analytic partials with central differences on random points."""
        if not self._analytic:
            return
        rng = RngKey(20_140_519).child("deriv-check").generator()
        t = rng.uniform(*self.sample_box["t"], n_points)
        x = rng.uniform(*self.sample_box["x"], n_points)
        y = rng.uniform(*self.sample_box["y"], n_points)
        v = rng.uniform(*self.action_set, n_points) if self.action_set[1] > self.action_set[0] \
            else np.full(n_points, self.action_set[0])

        checks = {
            "b_x": (self.b, (t, x, y, v), 1), "b_y": (self.b, (t, x, y, v), 2),
            "b_v": (self.b, (t, x, y, v), 3),
            "sigma_x": (self.sigma, (t, x, y, v), 1), "sigma_y": (self.sigma, (t, x, y, v), 2),
            "sigma_v": (self.sigma, (t, x, y, v), 3),
            "h_x": (self.h, (t, x, y, v), 1), "h_y": (self.h, (t, x, y, v), 2),
            "h_v": (self.h, (t, x, y, v), 3),
            "g_x": (self.g, (x, y), 0), "g_y": (self.g, (x, y), 1),
            "psi_x": (self.psi, (x,), 0), "phi_x": (self.phi, (x,), 0),
            "varphi_x": (self.varphi, (x,), 0), "chi_x": (self.chi, (x,), 0),
        }
        for key in self._analytic:
            fn, args, slot = checks[key]
            got = np.broadcast_to(getattr(self, key)(*args), (n_points,))
            ref = _central_diff(fn, args, slot)
            err = np.abs(got - ref) / np.maximum(1.0, np.abs(ref))
            if np.any(err > rtol):
                k = int(np.argmax(err))
                raise ValueError(
                    f"derivative oracle {key} disagrees with central differences "
                    f"(rel err {err[k]:.2e} at sample {k})"
                )


@dataclass(frozen=True)
class LinearMeasureCoefficient:
    """Interaction kernel for diffusions linear in the measure argument.

    Represents sigma_tilde(t, x, law) = mean of eta(t, x, Y) over Y ~ law.
    ``lipschitz`` records the Lipschitz constant of eta in (x, y).
    """

    eta: "callable"
    lipschitz: float

    def apply_empirical(self, t, x, atoms):
        atoms = np.asarray(atoms, dtype=np.float64)
        return np.mean(self.eta(t, np.asarray(x)[..., None], atoms[None, :]), axis=-1)


@dataclass(frozen=True)
class HamiltonianEval:
    """Hamiltonian value and the partials used by the optimality conditions."""

    value: np.ndarray
    dx: np.ndarray
    du: np.ndarray


def hamiltonian(spec: ModelSpec, t, x, y_psi, y_phi, y_varphi, u, regime, p, q) -> HamiltonianEval:
    """Evaluate h*r + b*r*p + sigma*r*q and its partials in x and u.

    ``regime`` is a 1-based state label (or array of labels); all other
    arguments broadcast.  Controls outside the action interval are rejected.
    """
    if not spec.in_action_set(u):
        raise ValueError(f"control {u!r} outside action set {spec.action_set}")
    reg = np.asarray(regime)
    if np.any(reg < 1) or np.any(reg > spec.n_regimes):
        raise ValueError(f"regime label outside 1..{spec.n_regimes}")
    r = spec.r_of(reg)
    value = (spec.h(t, x, y_varphi, u) + spec.b(t, x, y_psi, u) * p
             + spec.sigma(t, x, y_phi, u) * q) * r
    dx = (spec.h_x(t, x, y_varphi, u) + spec.b_x(t, x, y_psi, u) * p
          + spec.sigma_x(t, x, y_phi, u) * q) * r
    du = (spec.h_v(t, x, y_varphi, u) + spec.b_v(t, x, y_psi, u) * p
          + spec.sigma_v(t, x, y_phi, u) * q) * r
    return HamiltonianEval(np.asarray(value), np.asarray(dx), np.asarray(du))


def minimize_hamiltonian(
    spec: ModelSpec,
    t,
    x,
    y_psi,
    y_phi,
    y_varphi,
    regime,
    p,
    q,
    tol: float = 1e-8,
):
    """Argmin of the Hamiltonian over the action interval, elementwise.

    Convexity in the control is assumed, not re-checked.  Uses a closed-form
    vertex when the second derivative in v is constant (the quadratic case)
    and golden-section search otherwise; the argument is located within
    ``tol``.  Ties (a flat Hamiltonian) resolve to the interval midpoint.
    Broadcasts over array-valued state arguments and returns a matching
    array (or a scalar for scalar input).
    """
    shape = np.broadcast(
        np.asarray(t), np.asarray(x), np.asarray(y_psi), np.asarray(y_phi),
        np.asarray(y_varphi), np.asarray(regime), np.asarray(p), np.asarray(q),
    ).shape
    reg = np.asarray(regime)
    if np.any(reg < 1) or np.any(reg > spec.n_regimes):
        raise ValueError(f"regime label outside 1..{spec.n_regimes}")
    r = spec.r_of(reg)

    def f(v):
        return (spec.h(t, x, y_varphi, v) + spec.b(t, x, y_psi, v) * p
                + spec.sigma(t, x, y_phi, v) * q) * r

    u = _argmin_interval(f, spec.action_set, shape, tol)
    return u if shape else float(u)


def _argmin_interval(f, interval, shape, tol):
    """Elementwise argmin of a convex slice f(v) over a closed interval."""
    lo, hi = interval
    width = hi - lo
    if width == 0.0:
        return np.full(shape, lo) if shape else lo

    flat = shape if shape else (1,)

    def fv(v):
        v_in = v.reshape(shape) if shape else v[0]
        out = np.asarray(f(v_in), dtype=np.float64)
        return np.broadcast_to(out, shape).reshape(flat) if shape else np.atleast_1d(out)

    probes = lo + width * np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    samples = np.stack([fv(np.full(flat, v)) for v in probes])  # (5, N)
    if not np.all(np.isfinite(samples)):
        k = int(np.argwhere(~np.isfinite(samples))[0][0])
        raise ValueError(f"non-finite Hamiltonian value at control v = {probes[k]:g}")

    scale = np.maximum(1.0, np.abs(samples).max(axis=0))
    is_flat = samples.max(axis=0) - samples.min(axis=0) <= 1e-14 * scale
    # constant second differences across all consecutive probe triples
    # => quadratic in v (three distinct centers rule out even quartics)
    d2 = samples[:-2] - 2.0 * samples[1:-1] + samples[2:]
    curvature = samples[0] - 2.0 * samples[2] + samples[4]
    quadratic = (
        (np.abs(d2[0] - d2[1]) <= 1e-10 * scale)
        & (np.abs(d2[1] - d2[2]) <= 1e-10 * scale)
        & (curvature > 0.0)
    )

    vertex = probes[2] - 0.5 * width * (samples[4] - samples[0]) / (
        2.0 * np.where(quadratic, curvature, 1.0)
    )
    vertex = np.clip(vertex, lo, hi)

    mid = np.full(flat, lo + 0.5 * width)
    if np.all(quadratic | is_flat):
        best = np.where(is_flat, mid, vertex)
    else:
        searched = _golden_section(fv, lo, hi, flat, tol)
        best = np.where(is_flat, mid, np.where(quadratic, vertex, searched))
    # prefer the midpoint whenever it does at least as well (tie rule)
    best = np.where(fv(mid) <= fv(best), mid, best)
    return best.reshape(shape) if shape else float(best[0])


def _golden_section(fv, lo, hi, flat, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.full(flat, float(lo))
    b = np.full(flat, float(hi))
    n_iter = max(1, int(np.ceil(np.log(tol / (hi - lo)) / np.log(invphi))))
    for _ in range(n_iter):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        keep_left = fv(c) < fv(d)
        a = np.where(keep_left, a, c)
        b = np.where(keep_left, d, b)
    m = 0.5 * (a + b)
    # parabola polish on the final bracket tightens the argmin to O(h^2)
    h = np.maximum(0.5 * (b - a), 1e-12)
    f0, f1, f2 = fv(np.clip(m - h, lo, hi)), fv(m), fv(np.clip(m + h, lo, hi))
    curv = f0 - 2.0 * f1 + f2
    polished = np.where(
        curv > 0.0, m - h * (f2 - f0) / (2.0 * np.where(curv > 0.0, curv, 1.0)), m
    )
    return np.clip(polished, lo, hi)


# -- assumption checks -------------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    """Outcome of one spot check: pass/fail plus a witness or summary."""

    name: str
    passed: bool
    detail: str
    witness: tuple | None = None


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[AssumptionCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        return "\n".join(
            f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks
        )


def check_assumptions(
    spec: ModelSpec,
    sample_budget: int = 1000,
    seed: "int | RngKey" = 0,
    horizon: float = 1.0,
) -> AssumptionReport:
    """Randomized spot checks of the standing assumptions; report-only.

    Derivative boundedness is reported as the maximum observed magnitude on
    the sample box (unboundedness outside the box is not detectable and is
    expected to be documented with the model).  Convexity uses midpoint
    tests with random endpoint pairs; sign conditions sample the four
    law-slot derivatives; square-integrability of the time profile is
    checked on a grid over [0, horizon].
    """
    if sample_budget < 100:
        raise ValueError("sample_budget must be at least 100")
    from .streams import as_key

    rng = as_key(seed).child("assumptions").generator()
    n = sample_budget
    box = spec.sample_box
    t = rng.uniform(0.0, horizon, n)
    x = rng.uniform(*box["x"], n)
    y = rng.uniform(*box["y"], n)
    lo, hi = spec.action_set
    v = rng.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    checks: list[AssumptionCheck] = []

    # (A.1)/(A.2): derivatives exist and stay bounded on the box
    max_abs = 0.0
    worst = ""
    for key in _DERIVATIVE_NAMES:
        fn = getattr(spec, key)
        if key.startswith(("psi", "phi", "varphi", "chi")):
            vals = fn(x)
        elif key.startswith("g"):
            vals = fn(x, y)
        else:
            vals = fn(t, x, y, v)
        m = float(np.abs(vals).max())
        if not np.all(np.isfinite(vals)):
            checks.append(AssumptionCheck(
                "A1-A2 derivatives", False, f"{key} non-finite on sample box"))
            break
        if m > max_abs:
            max_abs, worst = m, key
    else:
        checks.append(AssumptionCheck(
            "A1-A2 derivatives", True,
            f"all partials finite on box; max |d| = {max_abs:.3g} ({worst})"))

    # (A.3): square-integrable time profile at the origin
    ts = np.linspace(0.0, horizon, 257)
    prof = (np.abs(spec.b(ts, 0.0, spec.psi(np.float64(0.0)), 0.0)) ** 2
            + np.abs(spec.sigma(ts, 0.0, spec.phi(np.float64(0.0)), 0.0)) ** 2)
    integral = float(np.trapezoid(np.broadcast_to(prof, ts.shape), ts))
    checks.append(AssumptionCheck(
        "A3 integrability", bool(np.isfinite(integral)),
        f"integral of coefficient profile over [0, {horizon:g}] = {integral:.6g}"))

    # (A.4): g convex in (x, y)
    checks.append(_midpoint_convexity(
        "A4 g convex", lambda z: spec.g(z[0], z[1]),
        rng, dims=2, ranges=(box["x"], box["y"])))

    # (A.5): Hamiltonian convex in (x, y-triple, v) for sampled (t, i, p, q)
    def ham_slice(z):
        tt, ii, pp, qq = ham_ctx
        return (spec.h(tt, z[0], z[3], z[4]) + spec.b(tt, z[0], z[1], z[4]) * pp
                + spec.sigma(tt, z[0], z[2], z[4]) * qq) * spec.r_of(ii)

    ham_fails = None
    for _ in range(16):
        ham_ctx = (
            rng.uniform(0.0, horizon),
            int(rng.integers(1, spec.n_regimes + 1)),
            rng.uniform(-2.0, 2.0),
            rng.uniform(-2.0, 2.0),
        )
        res = _midpoint_convexity(
            "A5 Hamiltonian convex", ham_slice, rng, dims=5,
            ranges=(box["x"], box["y"], box["y"], box["y"], spec.action_set),
            n_pairs=max(8, n // 16))
        if not res.passed:
            ham_fails = AssumptionCheck(res.name, False,
                                        res.detail + f" with (t,i,p,q)={ham_ctx}", res.witness)
            break
    checks.append(ham_fails or AssumptionCheck(
        "A5 Hamiltonian convex", True, "midpoint tests passed on 16 random (t,i,p,q) slices"))

    # (A.6): law functionals convex
    for fname in ("psi", "phi", "varphi", "chi"):
        checks.append(_midpoint_convexity(
            f"A6 {fname} convex", lambda z, f=getattr(spec, fname): f(z[0]),
            rng, dims=1, ranges=(box["x"],)))

    # (A.7): law-slot derivatives nonnegative
    for key, vals in (
        ("b_y", spec.b_y(t, x, y, v)), ("sigma_y", spec.sigma_y(t, x, y, v)),
        ("h_y", spec.h_y(t, x, y, v)), ("g_y", spec.g_y(x, y)),
    ):
        vals = np.broadcast_to(np.asarray(vals, dtype=np.float64), (n,))
        bad = vals < -1e-12
        if np.any(bad):
            k = int(np.argmax(bad))
            checks.append(AssumptionCheck(
                f"A7 {key} nonnegative", False,
                f"{key} = {vals[k]:.4g} < 0 at sample {k}",
                witness=(float(t[k]), float(x[k]), float(y[k]), float(v[k]))))
        else:
            checks.append(AssumptionCheck(
                f"A7 {key} nonnegative", True, f"min observed {float(vals.min()):.4g}"))

    return AssumptionReport(tuple(checks))


def _midpoint_convexity(name, f, rng, dims, ranges, n_pairs=64, tol=1e-9):
    """f((z1+z2)/2) <= (f(z1) + f(z2)) / 2 on random pairs."""
    z1 = np.stack([rng.uniform(lo, hi, n_pairs) for lo, hi in ranges])
    z2 = np.stack([rng.uniform(lo, hi, n_pairs) for lo, hi in ranges])
    fm = np.asarray(f(0.5 * (z1 + z2)), dtype=np.float64)
    fe = 0.5 * (np.asarray(f(z1), dtype=np.float64) + np.asarray(f(z2), dtype=np.float64))
    slack = fm - fe
    scale = np.maximum(1.0, np.maximum(np.abs(fm), np.abs(fe)))
    bad = slack > tol * scale
    if np.any(bad):
        k = int(np.argmax(slack / scale))
        return AssumptionCheck(
            name, False,
            f"midpoint convexity violated by {float(slack[k]):.4g}",
            witness=(tuple(np.round(z1[:, k], 6)), tuple(np.round(z2[:, k], 6))))
    return AssumptionCheck(name, True, f"{n_pairs} midpoint tests passed")
