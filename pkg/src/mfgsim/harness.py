"""Experiment orchestration: configs, dispatch, outputs, reproducibility.

A configuration is a strict JSON document (schema shipped in
``schemas/experiment.schema.json``); unknown keys are rejected with every
offender named.  ``run`` dispatches to the experiment runners, writes CSV
and JSON outputs with 17-significant-digit floats (round-trip exact for
64-bit values), and records a manifest tying the outputs to the config
hash, code version, and seed derivations.  Rerunning a config with the
same master seed reproduces the output bytes regardless of the thread
budget, because every stochastic stage is keyed by value, never by
schedule.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .control import (
    FeedbackControl,
    RegressionBasis,
    perturbed_feedbacks,
    solve_adjoint,
    solve_lq_oracle,
    verify_sufficient_conditions,
)
from .families import LqParams, ProblemInstance, load_problem
from .mean_field import solve_mean_field
from .metrics import RateFit, chaos_error, fit_chaos_rate
from .model import check_assumptions
from .nash import affine_deviation_family, gap_scaling, nash_gap
from .particle_sim import NumericalAbort, TimeGrid, simulate_particles
from .regime_chain import GeneratorMatrix, regime_panel, sample_chain_ensemble
from .streams import RngKey

__all__ = [
    "ConfigError",
    "ExperimentAbort",
    "ExperimentConfig",
    "RunManifest",
    "run",
    "emit_rate_plot",
    "load_feedback",
    "build_feedback",
    "feedback_to_doc",
    "parallel_map",
    "write_csv",
]

_KINDS = ("chain", "model-check", "particles", "meanfield", "chaos",
          "adjoint", "verify-mp", "lq-oracle", "nash")


class ConfigError(ValueError):
    """Configuration failed schema or semantic validation."""


class ExperimentAbort(RuntimeError):
    """An experiment stage could not produce valid numbers."""


def _load_schema(name: str) -> dict:
    with resources.files("mfgsim.schemas").joinpath(name).open() as f:
        return json.load(f)


def _branch_for_kind(schema: dict, kind: str) -> dict:
    for branch in schema["oneOf"]:
        if branch["properties"]["kind"].get("const") == kind:
            return branch
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {_KINDS}")


def _validate(doc: dict, branch: dict, what: str) -> None:
    import jsonschema

    validator = jsonschema.Draft7Validator(branch)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        msgs = "; ".join(e.message for e in errors)
        raise ConfigError(f"invalid {what}: {msgs}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description."""

    kind: str
    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        kind = doc.get("kind")
        if kind is None:
            raise ConfigError("configuration must carry a 'kind' key")
        branch = _branch_for_kind(_load_schema("experiment.schema.json"), kind)
        _validate(doc, branch, f"{kind} configuration")
        for key in ("model", "control"):
            path = doc.get(key)
            if isinstance(path, str) and not Path(path).exists():
                raise ConfigError(f"{key} file does not exist: {path}")
        if kind == "chain" and isinstance(doc.get("generator"), str):
            if not Path(doc["generator"]).exists():
                raise ConfigError(f"generator file does not exist: {doc['generator']}")
        return cls(kind=kind, doc=dict(doc))

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        with open(path) as f:
            doc = json.load(f)
        if overrides:
            doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def __getitem__(self, key):
        return self.doc[key]

    def get(self, key, default=None):
        return self.doc.get(key, default)

    @property
    def output_dir(self) -> Path:
        return Path(self.doc.get("output_dir")
                    or os.environ.get("MFGSIM_OUTPUT_DIR", "out"))

    @property
    def threads(self) -> int:
        return int(self.doc.get("threads", 1))

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    def canonical_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record for one experiment run."""

    kind: str
    config_hash: str
    code_version: str
    wall_time_s: float
    seed_derivations: tuple[str, ...]
    outputs: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def parallel_map(fn, items, threads: int):
    """Order-preserving map, threaded when a budget above one is given.

    Results are identical for any thread count because the work items
    carry their own stream keys.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- feedback files -----------------------------------------------------------


def build_feedback(doc: dict) -> FeedbackControl:
    _validate(doc, _load_schema("control.schema.json"), "control file")
    if doc["kind"] == "constant":
        return FeedbackControl.constant(doc["value"], action_set=tuple(doc["action_set"]),
                                        name=doc.get("name", ""))
    grid = TimeGrid(doc["horizon"], doc["n_steps"])
    return FeedbackControl.affine(
        grid, np.asarray(doc["k0"]), np.asarray(doc["k1"]),
        action_set=tuple(doc["action_set"]), name=doc.get("name", "affine"),
    )


def load_feedback(path) -> FeedbackControl:
    with open(path) as f:
        return build_feedback(json.load(f))


def feedback_to_doc(fb: FeedbackControl) -> dict:
    if hasattr(fb, "k0_table"):
        return {
            "kind": "affine",
            "name": fb.name,
            "horizon": fb.grid.horizon,
            "n_steps": fb.grid.n_steps,
            "k0": fb.k0_table.tolist(),
            "k1": fb.k1_table.tolist(),
            "action_set": list(fb.action_set),
        }
    if fb.params and "value" in fb.params:
        return {"kind": "constant", "name": fb.name, "value": fb.params["value"],
                "action_set": list(fb.action_set)}
    raise ValueError("only constant and affine tabulated feedbacks are serializable")


def _as_affine(fb: FeedbackControl, grid: TimeGrid, d: int) -> FeedbackControl:
    """View a constant feedback as a degenerate affine table for perturbation."""
    if hasattr(fb, "k0_table"):
        return fb
    value = fb.params["value"] if fb.params and "value" in fb.params else 0.0
    shape = (d, grid.n_points)
    return FeedbackControl.affine(grid, np.full(shape, float(value)),
                                  np.zeros(shape), action_set=fb.action_set,
                                  name=fb.name or "constant-as-affine")


# -- experiment runners -------------------------------------------------------


def _load_generator(spec_field) -> GeneratorMatrix:
    if isinstance(spec_field, str):
        with open(spec_field) as f:
            matrix = json.load(f)
    else:
        matrix = spec_field
    return GeneratorMatrix(np.asarray(matrix, dtype=np.float64))


def _run_chain(config: ExperimentConfig, outdir: Path):
    gen = _load_generator(config["generator"])
    key = RngKey(config.seed).child("chain-experiment")
    paths = sample_chain_ensemble(gen, config["i0"], config["horizon"],
                                  config["samples"], key)
    notes = [f"chain paths: {key.describe()} + ('chain', index)"]
    if config.get("aggregate", False):
        ts = np.linspace(0.0, config["horizon"], config.get("grid_points", 21))
        panel = regime_panel(paths, ts)
        rows = []
        for j, t in enumerate(ts):
            counts = np.bincount(panel[:, j], minlength=gen.d + 1)[1:]
            for state in range(1, gen.d + 1):
                rows.append((t, state, counts[state - 1] / len(paths)))
        out = outdir / "chain_frequencies.csv"
        write_csv(out, ["t", "state", "frequency"], rows)
    else:
        rows = []
        for pid, p in enumerate(paths):
            rows.append((pid, 0.0, p.initial_state))
            for t, s in zip(p.jump_times, p.jump_targets):
                rows.append((pid, t, s))
        out = outdir / "chain_paths.csv"
        write_csv(out, ["path", "t", "state"], rows)
    return {out.name: out}, notes


def _run_model_check(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    report = check_assumptions(
        problem.spec, sample_budget=config.get("sample_budget", 1000),
        seed=RngKey(config.seed), horizon=config.get("horizon", 1.0))
    payload = {
        "passed": report.passed,
        "known_deviations": list(problem.known_deviations),
        "checks": [
            {"name": c.name, "passed": c.passed, "detail": c.detail,
             "witness": c.witness}
            for c in report.checks
        ],
    }
    out = outdir / "assumption_report.json"
    _write_json(out, payload)
    return {out.name: out}, [f"assumption sampling: {RngKey(config.seed).child('assumptions').describe()}"]


def _run_particles(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    fb = load_feedback(config["control"])
    grid = TimeGrid(config["horizon"], config["n_steps"])
    key = RngKey(config.seed).child("particles")
    reps = config["replications"]

    def one(rep):
        return simulate_particles(
            problem.spec, fb, config["n"], grid, problem.initial_law,
            key.child("rep", rep), gen=problem.gen, i0=problem.initial_state)

    ensembles = parallel_map(one, range(reps), config.threads)
    notes = [f"particle drivers: {key.describe()} + ('rep', r, tag, agent)"]
    if config.get("summary", False):
        pooled = np.stack([e.states for e in ensembles])  # (reps, n, K+1)
        psi = problem.spec.psi(pooled)
        phi = problem.spec.phi(pooled)
        varphi = problem.spec.varphi(pooled)
        rows = [
            (t, pooled[..., k].mean(), pooled[..., k].var(ddof=1),
             psi[..., k].mean(), phi[..., k].mean(), varphi[..., k].mean())
            for k, t in enumerate(grid.points)
        ]
        out = outdir / "particle_moments.csv"
        write_csv(out, ["t", "mean_x", "var_x", "mean_psi", "mean_phi", "mean_varphi"],
                  rows)
    else:
        rows = []
        for rep, ens in enumerate(ensembles):
            for agent in range(ens.n):
                for k, t in enumerate(grid.points):
                    rows.append((rep, agent + 1, t, ens.states[agent, k],
                                 ens.regimes[agent, k], ens.controls[agent, k]))
        out = outdir / "particles.csv"
        write_csv(out, ["replication", "agent", "t", "x", "regime", "u"], rows)
    return {out.name: out}, notes


def _run_meanfield(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    fb = load_feedback(config["control"])
    grid = TimeGrid(config["horizon"], config["n_steps"])
    key = RngKey(config.seed).child("meanfield")
    curves, report = solve_mean_field(
        problem.spec, fb, grid, config["M"], config["tol"], config["max_iters"],
        key, gen=problem.gen, i0=problem.initial_state,
        init_law=problem.initial_law, damping=config.get("damping", 1.0))
    curves_path = outdir / "meanfield_curves.csv"
    write_csv(curves_path, ["t", "m_psi", "m_phi", "m_varphi"],
              zip(grid.points, curves.m_psi, curves.m_phi, curves.m_varphi))
    report_path = outdir / "meanfield_report.json"
    _write_json(report_path, {
        "converged": report.converged,
        "iterates": report.iterates,
        "residuals": list(report.residuals),
        "tolerance": report.tolerance,
        "m_chi_T": curves.m_chi_T,
    })
    return ({curves_path.name: curves_path, report_path.name: report_path},
            [f"mean-field cloud: {key.describe()} + (tag, copy)"])


def _run_chaos(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    fb = load_feedback(config["control"])
    grid = TimeGrid(config["horizon"], config["n_steps"])
    key = RngKey(config.seed).child("chaos")
    curves, report = solve_mean_field(
        problem.spec, fb, grid, config["curves_M"],
        config.get("curves_tol", 1e-4), 30, key.child("curves"),
        gen=problem.gen, i0=problem.initial_state, init_law=problem.initial_law)
    if not report.converged:
        raise ExperimentAbort(
            "mean-field curves did not converge; increase curves_M or loosen curves_tol")
    ladder = sorted(config["ladder"])

    def one(n):
        return chaos_error(
            problem.spec, fb, curves, n, grid, config["replications"],
            key.child("n", n), gen=problem.gen, i0=problem.initial_state,
            init_law=problem.initial_law, bootstrap=config.get("bootstrap", 1000))

    points = parallel_map(one, ladder, config.threads)
    ladder_path = outdir / "chaos_ladder.csv"
    write_csv(ladder_path, ["n", "error", "se"],
              [(p.n, p.value, p.se) for p in points])
    outputs = {ladder_path.name: ladder_path}
    fit = None
    if len(points) >= 3:
        fit = fit_chaos_rate([p.n for p in points], [p.value for p in points],
                             [p.se for p in points])
        fit_path = outdir / "chaos_ratefit.json"
        _write_json(fit_path, asdict(fit))
        outputs[fit_path.name] = fit_path
        if config.get("plot", False):
            svg_path = outdir / "chaos_rate.svg"
            emit_rate_plot(fit, svg_path)
            outputs[svg_path.name] = svg_path
    notes = [f"chaos drivers: {key.describe()} + ('n', n, 'rep', r, tag, agent)"]
    return outputs, notes


def _adjoint_pipeline(config: ExperimentConfig):
    problem = load_problem(config["model"])
    fb = load_feedback(config["control"])
    grid = TimeGrid(config["horizon"], config["n_steps"])
    key = RngKey(config.seed).child("adjoint-experiment")
    curves, report = solve_mean_field(
        problem.spec, fb, grid, config["curves_M"],
        config.get("curves_tol", 1e-4), 30, key.child("curves"),
        gen=problem.gen, i0=problem.initial_state, init_law=problem.initial_law)
    basis = RegressionBasis(degree=config.get("basis_degree", 2))
    triple = solve_adjoint(
        problem.spec, fb, curves, config["M"], grid, key.child("solve"),
        gen=problem.gen, i0=problem.initial_state, init_law=problem.initial_law,
        basis=basis)
    return problem, fb, grid, key, curves, triple


def _diagnostics_rows(triple):
    grid = triple.grid
    rows = []
    for k in range(grid.n_steps):
        rows.append((
            grid.points[k], triple.conditions[k],
            triple.p[:, k].mean(), triple.p[:, k].std(ddof=1),
            triple.q[:, k].mean(), triple.q[:, k].std(ddof=1),
        ))
    return rows


def _run_adjoint(config: ExperimentConfig, outdir: Path):
    problem, fb, grid, key, curves, triple = _adjoint_pipeline(config)
    diag_path = outdir / "adjoint_diagnostics.csv"
    write_csv(diag_path, ["t", "condition", "mean_p", "std_p", "mean_q", "std_q"],
              _diagnostics_rows(triple))
    summary_path = outdir / "adjoint_summary.json"
    _write_json(summary_path, {
        "paths": triple.n_paths,
        "basis_degree": triple.basis.degree,
        "terminal_mean_p": float(triple.p[:, -1].mean()),
        "max_condition": float(np.max(triple.conditions)),
        "has_jump_component": triple.s is not None,
    })
    return ({diag_path.name: diag_path, summary_path.name: summary_path},
            [f"adjoint forward cloud: {key.describe()} + ('solve', 'adjoint', tag, path)"])


def _run_verify_mp(config: ExperimentConfig, outdir: Path):
    problem, fb, grid, key, curves, triple = _adjoint_pipeline(config)
    affine = _as_affine(fb, grid, problem.gen.d)
    comparisons = perturbed_feedbacks(
        affine, config["comparisons"], key.child("comparisons"),
        scale=config.get("comparison_scale", 0.3))
    report = verify_sufficient_conditions(
        problem.spec, fb, triple, comparisons, key.child("verify"),
        gen=problem.gen, i0=problem.initial_state, init_law=problem.initial_law,
        n_hamiltonian_samples=config.get("hamiltonian_samples", 4000),
        cost_paths=config.get("cost_paths", 20000),
        violation_tolerance=config.get("violation_tolerance", 0.01))
    diag_path = outdir / "adjoint_diagnostics.csv"
    write_csv(diag_path, ["t", "condition", "mean_p", "std_p", "mean_q", "std_q"],
              _diagnostics_rows(triple))
    report_path = outdir / "verify_report.json"
    _write_json(report_path, {
        "passed": report.passed,
        "conditions": {
            "minimality": {
                "passed": report.hamiltonian_passed,
                "violation_fraction": report.violation_fraction,
                "tolerance": report.violation_tolerance,
            },
            "integrability": {
                "passed": report.integrals_passed,
                "details": [asdict(d) for d in report.integrals],
            },
            "cost_dominance": {
                "passed": report.dominance_passed,
                "equilibrium_cost": report.equilibrium_cost,
                "equilibrium_se": report.equilibrium_cost_se,
                "comparisons": [asdict(c) for c in report.comparisons],
            },
        },
    })
    return ({diag_path.name: diag_path, report_path.name: report_path},
            [f"verification streams: {key.describe()} + ('verify'|'comparisons')"])


def _run_lq_oracle(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    if problem.family != "lq":
        raise ConfigError("lq-oracle requires a model file with family 'lq'")
    params = LqParams(**problem.params)
    grid = TimeGrid(config["horizon"], config["n_steps"])
    sol = solve_lq_oracle(params, problem.gen, grid, r=problem.spec.r,
                          initial_mean=problem.initial_law.mean,
                          initial_state=problem.initial_state)
    rows = []
    for i in range(problem.gen.d):
        for k, t in enumerate(grid.points):
            rows.append((t, i + 1, sol.p[i, k], sol.k[i, k], sol.c0[i, k],
                         sol.k0[i, k], sol.k1[i, k]))
    riccati_path = outdir / "riccati.csv"
    write_csv(riccati_path, ["t", "regime", "p", "k", "c", "gain_k0", "gain_k1"], rows)
    control_path = outdir / "oracle_control.json"
    _write_json(control_path, feedback_to_doc(sol.feedback(problem.spec.action_set)))
    x0 = problem.initial_law.mean
    i0 = problem.initial_state
    expected_value = (0.5 * sol.p[i0 - 1, 0]
                      * (x0**2 + problem.initial_law.variance)
                      + sol.k[i0 - 1, 0] * x0 + sol.c0[i0 - 1, 0])
    summary_path = outdir / "oracle_summary.json"
    _write_json(summary_path, {
        "p_at_0": sol.p[:, 0].tolist(),
        "value_at_mean": sol.value(x0, i0),
        "expected_value": float(expected_value),
        "initial_state": i0,
        "initial_mean": x0,
    })
    return ({riccati_path.name: riccati_path, control_path.name: control_path,
             summary_path.name: summary_path},
            ["lq oracle is deterministic (no streams)"])


def _run_nash(config: ExperimentConfig, outdir: Path):
    problem = load_problem(config["model"])
    fb = load_feedback(config["control"])
    grid = TimeGrid(config["horizon"], config["n_steps"])
    key = RngKey(config.seed).child("nash")
    family = affine_deviation_family(
        _as_affine(fb, grid, problem.gen.d),
        shift=config.get("deviation_shift", 0.5))
    if config.get("deviation_grid_points"):
        family = type(family)(family.name, family.make, family.bounds,
                              grid_points=config["deviation_grid_points"],
                              polish=config.get("polish", True))
    notes = [f"nash drivers: {key.describe()} + ('n', n)('rep', r, tag, agent)"]

    def result_payload(res):
        payload = asdict(res)
        payload["advantage"] = res.advantage
        return payload

    if "ladder" in config.doc:
        ladder = sorted(config["ladder"])

        def one(n):
            return nash_gap(problem.spec, fb, family, n, grid,
                            config["replications"], key.child("n", n),
                            gen=problem.gen, i0=problem.initial_state,
                            init_law=problem.initial_law)

        points = parallel_map(one, ladder, config.threads)
        ladder_path = outdir / "nash_ladder.csv"
        write_csv(ladder_path,
                  ["n", "equilibrium_cost", "equilibrium_se",
                   "best_deviation_cost", "best_deviation_se", "gap", "gap_se",
                   "advantage"],
                  [(p.n, p.equilibrium_cost, p.equilibrium_se,
                    p.best_deviation_cost, p.best_deviation_se, p.gap, p.gap_se,
                    p.advantage) for p in points])
        positive = [(p.n, p.advantage, max(p.gap_se, 1e-15)) for p in points
                    if p.advantage > 0]
        scaling = {"message": "gap indistinguishable from 0 on the ladder"}
        if len(positive) >= 3:
            ns, adv, ses = map(list, zip(*positive))
            try:
                fit = fit_chaos_rate(ns, adv, ses)
                scaling = {"message": f"fitted slope {fit.slope:.3f}",
                           "fit": asdict(fit)}
            except ValueError as err:
                scaling = {"message": f"fit unavailable: {err}"}
        scaling_path = outdir / "nash_scaling.json"
        _write_json(scaling_path, scaling)
        return ({ladder_path.name: ladder_path, scaling_path.name: scaling_path},
                notes)

    res = nash_gap(problem.spec, fb, family, config["n"], grid,
                   config["replications"], key.child("n", config["n"]),
                   gen=problem.gen, i0=problem.initial_state,
                   init_law=problem.initial_law)
    result_path = outdir / "nash_result.json"
    _write_json(result_path, result_payload(res))
    return {result_path.name: result_path}, notes


_RUNNERS = {
    "chain": _run_chain,
    "model-check": _run_model_check,
    "particles": _run_particles,
    "meanfield": _run_meanfield,
    "chaos": _run_chaos,
    "adjoint": _run_adjoint,
    "verify-mp": _run_verify_mp,
    "lq-oracle": _run_lq_oracle,
    "nash": _run_nash,
}


def run(config: ExperimentConfig) -> RunManifest:
    """Execute one experiment and write its outputs plus a manifest."""
    outdir = config.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    outputs, seed_notes = _RUNNERS[config.kind](config, outdir)
    wall = time.perf_counter() - started
    manifest = RunManifest(
        kind=config.kind,
        config_hash=config.hash(),
        code_version=__version__,
        wall_time_s=wall,
        seed_derivations=tuple(seed_notes),
        outputs={name: _sha256(path) for name, path in sorted(outputs.items())},
    )
    with open(outdir / "manifest.json", "w") as f:
        f.write(manifest.to_json())
        f.write("\n")
    return manifest


# -- rate plot ----------------------------------------------------------------


def emit_rate_plot(fit: RateFit, path) -> None:
    """Write a deterministic log-log SVG scatter with the fitted line.

    The file bytes depend only on the fit values, so reruns hash
    identically.
    """
    ns = np.asarray(fit.n_values, dtype=np.float64)
    errs = np.asarray(fit.errors, dtype=np.float64)
    if ns.size < 2:
        raise ValueError("rate plot needs at least two points")
    if np.any(errs <= 0.0) or np.any(ns <= 0.0):
        raise ValueError("rate plot needs positive values")
    lx, ly = np.log10(ns), np.log10(errs)
    width, height, margin = 480.0, 360.0, 48.0

    def sx(v):
        lo, hi = lx.min(), lx.max()
        span = hi - lo or 1.0
        return margin + (v - lo) / span * (width - 2 * margin)

    def sy(v):
        lo, hi = ly.min(), ly.max()
        span = hi - lo or 1.0
        return height - margin - (v - lo) / span * (height - 2 * margin)

    line_y = fit.intercept + fit.slope * np.log(ns)
    pieces = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="black"/>',
        '<text x="240" y="350" text-anchor="middle" font-size="12">log10 n</text>',
        '<text x="14" y="180" text-anchor="middle" font-size="12" '
        'transform="rotate(-90 14 180)">log10 error</text>',
    ]
    pts = " ".join(f"{sx(a):.3f},{sy(b / np.log(10.0)):.3f}"
                   for a, b in zip(lx, line_y))
    pieces.append(f'<polyline points="{pts}" fill="none" stroke="gray"/>')
    for a, b in zip(lx, ly):
        pieces.append(f'<circle cx="{sx(a):.3f}" cy="{sy(b):.3f}" r="4" fill="black"/>')
    pieces.append(
        f'<text x="{width - margin}" y="{margin - 10}" text-anchor="end" '
        f'font-size="12">slope = {fit.slope:.3f}</text>')
    pieces.append("</svg>")
    Path(path).write_text("\n".join(pieces) + "\n")
