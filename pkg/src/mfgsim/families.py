"""Built-in coefficient families and problem-instance files.

Two parametric families ship with the package:

``lq``
    Linear dynamics / quadratic costs:
    b = a*x + bbar*y + c*v (the drift sees the law through the identity
    functional), sigma = sigma0 constant, h = (q_c*x^2 + r_c*v^2)/2,
    g = s_c*x^2/2.  This is the benchmark family with a closed-form
    feedback oracle (see :mod:`mfgsim.control`).  Its state-cost slopes
    grow linearly, so global derivative boundedness fails at infinity;
    instances carry that note in ``known_deviations``.

``bounded_smooth``
    tanh-saturated nonlinear drift/diffusion with all derivatives globally
    bounded and Lipschitz; the diffusion is *not* linear in the measure, so
    only the qualitative convergence statements apply to it.

A problem file is a JSON document bundling a family, its constants, the
chain generator, the initial regime, and the initial law; see
``schemas/problem.schema.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelSpec
from .regime_chain import GeneratorMatrix

__all__ = [
    "LqParams",
    "lq_model",
    "BoundedSmoothParams",
    "bounded_smooth_model",
    "InitialLaw",
    "ProblemInstance",
    "build_problem",
    "load_problem",
]


@dataclass(frozen=True)
class LqParams:
    """Constants of the linear-quadratic family."""

    a: float = -1.0          # state feedback in the drift
    c: float = 1.0           # control gain in the drift
    bbar: float = 0.0        # mean-field coupling (drift sees bbar * E x)
    sigma0: float = 0.5      # diffusion before regime modulation
    q_c: float = 1.0         # running state cost weight
    r_c: float = 1.0         # running control cost weight (must be > 0)
    s_c: float = 0.0         # terminal state cost weight

    def __post_init__(self) -> None:
        if self.r_c <= 0.0:
            raise ValueError("control cost weight r_c must be positive")


def lq_model(
    params: LqParams,
    r,
    action_set=(-6.0, 6.0),
    name: str = "lq",
) -> ModelSpec:
    """ModelSpec for the LQ family with analytic derivatives."""
    a, c, bbar, s0 = params.a, params.c, params.bbar, params.sigma0
    q_c, r_c, s_c = params.q_c, params.r_c, params.s_c
    zero4 = lambda t, x, y, v: np.zeros(np.broadcast(t, x, y, v).shape)
    const4 = lambda value: lambda t, x, y, v: np.full(np.broadcast(t, x, y, v).shape, value)
    return ModelSpec(
        b=lambda t, x, y, v: a * x + bbar * y + c * v,
        sigma=lambda t, x, y, v: s0 + 0.0 * np.asarray(x),
        h=lambda t, x, y, v: 0.5 * (q_c * x**2 + r_c * v**2) + 0.0 * np.asarray(y),
        g=lambda x, y: 0.5 * s_c * x**2 + 0.0 * np.asarray(y),
        psi=lambda x: np.asarray(x, dtype=np.float64),
        phi=lambda x: np.zeros(np.shape(x)),
        varphi=lambda x: np.zeros(np.shape(x)),
        chi=lambda x: np.zeros(np.shape(x)),
        r=r,
        action_set=action_set,
        derivatives={
            "b_x": const4(a), "b_y": const4(bbar), "b_v": const4(c),
            "sigma_x": zero4, "sigma_y": zero4, "sigma_v": zero4,
            "h_x": lambda t, x, y, v: q_c * x + 0.0 * np.asarray(v),
            "h_y": zero4,
            "h_v": lambda t, x, y, v: r_c * v + 0.0 * np.asarray(x),
            "g_x": lambda x, y: s_c * x + 0.0 * np.asarray(y),
            "g_y": lambda x, y: np.zeros(np.broadcast(x, y).shape),
            "psi_x": lambda x: np.ones(np.shape(x)),
            "phi_x": lambda x: np.zeros(np.shape(x)),
            "varphi_x": lambda x: np.zeros(np.shape(x)),
            "chi_x": lambda x: np.zeros(np.shape(x)),
        },
        name=name,
        notes=(
            "h_x and g_x grow linearly in x: global derivative boundedness "
            "(A.2) holds only on compacts, as usual for LQ benchmarks.",
        ),
    )


@dataclass(frozen=True)
class BoundedSmoothParams:
    """Constants of the saturated nonlinear family."""

    b0: float = -0.8         # drift response to tanh(x)
    b1: float = 0.6          # drift response to the law functional
    c: float = 0.5           # control gain
    s0: float = 0.4          # diffusion base level
    s1: float = 0.2          # diffusion response to tanh(x)
    s2: float = 0.3          # diffusion response to the law functional
    q_c: float = 1.0
    r_c: float = 1.0
    s_c: float = 1.0


def bounded_smooth_model(
    params: BoundedSmoothParams,
    r,
    action_set=(-2.0, 2.0),
    name: str = "bounded_smooth",
) -> ModelSpec:
    """Nonlinear family with globally bounded, Lipschitz derivatives."""
    p = params
    sech2 = lambda x: 1.0 - np.tanh(x) ** 2
    return ModelSpec(
        b=lambda t, x, y, v: p.b0 * np.tanh(x) + p.b1 * np.tanh(y) + p.c * v,
        sigma=lambda t, x, y, v: p.s0 + p.s1 * np.tanh(x) + p.s2 * np.tanh(y) + 0.0 * np.asarray(v),
        h=lambda t, x, y, v: 0.5 * (p.q_c * x**2 + p.r_c * v**2) + 0.0 * np.asarray(y),
        g=lambda x, y: 0.5 * p.s_c * x**2 + 0.0 * np.asarray(y),
        psi=np.tanh,
        phi=np.tanh,
        varphi=np.tanh,
        chi=np.tanh,
        r=r,
        action_set=action_set,
        derivatives={
            "b_x": lambda t, x, y, v: p.b0 * sech2(x) + 0.0 * np.asarray(v),
            "b_y": lambda t, x, y, v: p.b1 * sech2(y) + 0.0 * np.asarray(x),
            "b_v": lambda t, x, y, v: np.full(np.broadcast(t, x, y, v).shape, p.c),
            "sigma_x": lambda t, x, y, v: p.s1 * sech2(x) + 0.0 * np.asarray(v),
            "sigma_y": lambda t, x, y, v: p.s2 * sech2(y) + 0.0 * np.asarray(x),
            "sigma_v": lambda t, x, y, v: np.zeros(np.broadcast(t, x, y, v).shape),
            "h_x": lambda t, x, y, v: p.q_c * x + 0.0 * np.asarray(v),
            "h_y": lambda t, x, y, v: np.zeros(np.broadcast(t, x, y, v).shape),
            "h_v": lambda t, x, y, v: p.r_c * v + 0.0 * np.asarray(x),
            "g_x": lambda x, y: p.s_c * x + 0.0 * np.asarray(y),
            "g_y": lambda x, y: np.zeros(np.broadcast(x, y).shape),
            "psi_x": sech2,
            "phi_x": sech2,
            "varphi_x": sech2,
            "chi_x": sech2,
        },
        name=name,
    )


@dataclass(frozen=True)
class InitialLaw:
    """Square-integrable initial distribution for the state.

    Kinds: ``point`` (params: value), ``uniform`` (params: low, high),
    ``gaussian`` (params: mean, std).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        required = {"point": {"value"}, "uniform": {"low", "high"}, "gaussian": {"mean", "std"}}
        if self.kind not in required:
            raise ValueError(f"unknown initial law kind {self.kind!r}")
        missing = required[self.kind] - set(self.params)
        if missing:
            raise ValueError(f"initial law {self.kind!r} missing params {sorted(missing)}")
        if self.kind == "uniform" and self.params["high"] < self.params["low"]:
            raise ValueError("uniform initial law needs low <= high")
        if self.kind == "gaussian" and self.params["std"] < 0.0:
            raise ValueError("gaussian initial law needs std >= 0")

    @property
    def mean(self) -> float:
        if self.kind == "point":
            return float(self.params["value"])
        if self.kind == "uniform":
            return 0.5 * (self.params["low"] + self.params["high"])
        return float(self.params["mean"])

    @property
    def variance(self) -> float:
        if self.kind == "point":
            return 0.0
        if self.kind == "uniform":
            return (self.params["high"] - self.params["low"]) ** 2 / 12.0
        return float(self.params["std"]) ** 2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, float(self.params["value"]))
        if self.kind == "uniform":
            return rng.uniform(self.params["low"], self.params["high"], size)
        return rng.normal(self.params["mean"], self.params["std"], size)


@dataclass(frozen=True)
class ProblemInstance:
    """A fully specified instance: model, chain generator, initial data."""

    spec: ModelSpec
    gen: GeneratorMatrix
    initial_state: int
    initial_law: InitialLaw
    family: str
    params: dict
    known_deviations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.spec.n_regimes != self.gen.d:
            raise ValueError(
                f"model has {self.spec.n_regimes} regimes but generator has {self.gen.d} states"
            )
        if not (1 <= self.initial_state <= self.gen.d):
            raise ValueError(f"initial_state {self.initial_state} outside 1..{self.gen.d}")


_FAMILIES = {
    "lq": (LqParams, lq_model),
    "bounded_smooth": (BoundedSmoothParams, bounded_smooth_model),
}


def build_problem(doc: dict) -> ProblemInstance:
    """Construct a ProblemInstance from a parsed problem document."""
    known = {"family", "params", "r", "action_set", "generator",
             "initial_state", "initial_law", "known_deviations", "name"}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown problem file keys: {sorted(extra)}")
    family = doc.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(_FAMILIES)}")
    params_cls, builder = _FAMILIES[family]
    params = params_cls(**doc.get("params", {}))
    action = tuple(doc.get("action_set", (-6.0, 6.0)))
    spec = builder(params, r=doc["r"], action_set=action,
                   name=doc.get("name", family))
    gen = GeneratorMatrix(np.asarray(doc["generator"], dtype=np.float64))
    law_doc = dict(doc.get("initial_law", {"kind": "point", "value": 0.0}))
    law = InitialLaw(law_doc.pop("kind"), law_doc)
    return ProblemInstance(
        spec=spec,
        gen=gen,
        initial_state=int(doc.get("initial_state", 1)),
        initial_law=law,
        family=family,
        params=dict(doc.get("params", {})),
        known_deviations=tuple(doc.get("known_deviations", ())),
    )


def load_problem(path: "str | Path") -> ProblemInstance:
    """Read and validate a problem JSON file."""
    with open(path) as f:
        doc = json.load(f)
    return build_problem(doc)
