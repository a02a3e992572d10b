"""Execute a scenario's experiment and write its artifacts.

``report.json`` holds only quantities determined by the configuration and
seed, so two runs that differ only in thread count write identical bytes.
Wall-clock time goes to ``timing.json``.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ensemble import run_blocks
from .errors import ConfigurationError
from .girsanov import check_consistency, gap_ensemble, ito_gap_ensemble, martingale_check
from .jump_sde import (
    acceptance_probability,
    conditioned_coupling_test,
    coupled_distance_curve,
    first_window_probability,
    fit_exponential_envelope,
    gronwall_envelope_constant,
    simulate_block,
    solve_strong,
)
from .random_measures import Region, poisson_chi_square, sample_prm
from .rng import Substream, stream_key
from .scenario import Scenario, build_scenario, validate_scenario
from .spectral_evolution import galerkin_convergence
from .support_probe import grid_centers, scan_support, write_scan_csv

ROUNDING_FLOOR = 1e-12


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str


def strictly_decreasing(values, floor: float = 0.0) -> bool:
    """Each value below its predecessor, and every predecessor above ``floor`` so that
    rounding noise cannot count as a decrease."""
    v = np.asarray(values, dtype=float)
    return bool(np.all(v[:-1] > floor) and np.all(v[1:] < v[:-1]))


def halving_ratios(values) -> list[float]:
    v = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return [float(x) for x in v[:-1] / v[1:]]


def _f(x) -> float:
    return float(x)


def _write_rows(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# experiments; each returns (outputs, verdicts)


def exp_constant_path(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    problem = scen.problem()

    def work(ids):
        _, paths = simulate_block(problem, ex.seed, ids)
        z0 = paths.states[:, :1]
        return float(np.max(np.abs(paths.states - z0))), float(np.max(np.abs(paths.left_limits - z0)))

    parts = run_blocks(ex.n_paths, work, block_size=ex.block_size, workers=workers)
    dev = max(max(p) for p in parts)
    path = solve_strong(problem.coeffs, problem.noise(ex.seed, 0), problem.initial.draw(ex.seed, [0])[0])
    path.to_csv(out / "path_0.csv")
    return {"max_deviation": dev}, [Verdict("constant_paths", dev == 0.0, f"max deviation {dev!r}")]


def exp_poisson_counts(scen: Scenario, out: Path, workers: int):
    ex = scen.execution

    def work(ids):
        return np.array([len(sample_prm(scen.intensity, None, ex.horizon,
                                        stream_key(ex.seed, int(i), Substream.JUMP_TIMES))) for i in ids])

    counts = np.concatenate(run_blocks(ex.n_paths, work, block_size=ex.block_size, workers=workers))
    mean = scen.intensity.total_mass() * ex.horizon
    stat, p, obs, expd = poisson_chi_square(counts, mean)
    level = float(scen.experiment.get("level", 0.001))
    _write_rows(out / "counts.csv", ["cell", "observed", "expected"],
                [(i, _f(o), _f(e)) for i, (o, e) in enumerate(zip(obs, expd))])
    outputs = {"poisson_mean": mean, "sample_mean": float(counts.mean()), "chi_square": stat, "p_value": p}
    return outputs, [Verdict("poisson_chi_square", p >= level, f"p = {p:.4g} vs level {level:g}")]


def exp_support_scan(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    centers = grid_centers(float(e.get("low", -3.0)), float(e.get("high", 3.0)), float(e.get("step", 0.5)),
                           scen.dimension)
    radius = float(e.get("radius", 0.25))
    t = float(e.get("t", ex.horizon))
    est = scan_support(scen.problem(t), t, centers, radius, ex.n_paths, ex.alpha, ex.seed,
                       block_size=ex.block_size, workers=workers)
    write_scan_csv(est, out / "scan.csv")
    verdicts = []
    if not all(x.valid for x in est):
        verdicts.append(Verdict("solver_failures", False, "more than 1% of paths failed"))
    if e.get("expect_all_hit", False):
        low = min(est, key=lambda x: x.cp_lower)
        verdicts.append(Verdict("all_cells_hit", low.cp_lower > 0,
                                f"smallest cp_lower {low.cp_lower:.3g} at center {low.query.center.tolist()}"))
    if "zero_hits_at_or_below" in e.data:
        cut = float(e.get("zero_hits_at_or_below"))
        sel = [x for x in est if np.all(x.query.center <= cut)]
        hits = sum(x.hits for x in sel)
        verdicts.append(Verdict("negative_cells_empty", hits == 0, f"{hits} hits over {len(sel)} cells"))
        if "max_cp_upper" in e.data:
            cap = float(e.get("max_cp_upper"))
            worst = max((x.cp_upper for x in sel), default=0.0)
            verdicts.append(Verdict("negative_cells_cp_upper", worst < cap, f"largest cp_upper {worst:.3g} vs {cap:g}"))
    outputs = {"n_cells": len(est), "cells_with_hits": sum(x.hits > 0 for x in est),
               "min_cp_lower": min(x.cp_lower for x in est)}
    return outputs, verdicts


def _region(e) -> Region | None:
    bounds = e.get("region")
    return None if bounds is None else Region.boxes([(lo, hi) for lo, hi in bounds])


def exp_coupling_curve(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    n_max = int(e.get("n_horizons", 6))
    horizons = 2.0 ** -np.arange(1, n_max + 1)
    curve = coupled_distance_curve(scen.problem(), _region(e), horizons, ex.n_paths, ex.seed,
                                   block_size=ex.block_size, workers=workers)
    fitted = fit_exponential_envelope(curve.horizons, curve.estimates)
    _write_rows(out / "coupling.csv", ["t", "estimate", "stderr"],
                zip(curve.horizons, curve.estimates, curve.stderrs))
    verdicts = [
        Verdict("monotone_decreasing", strictly_decreasing(curve.estimates),
                f"estimates {[f'{x:.4g}' for x in curve.estimates]}"),
        Verdict("final_below_tenth", curve.estimates[-1] < 0.1 * curve.estimates[0],
                f"final/first = {curve.estimates[-1] / curve.estimates[0]:.4g}"),
    ]
    outputs = {"horizons": curve.horizons.tolist(), "estimates": curve.estimates.tolist(),
               "stderrs": curve.stderrs.tolist(), "n_failed": curve.n_failed, "fitted_envelope_C": fitted}
    lip = scen.coeffs.declared_lipschitz
    if lip is not None:
        mass = scen.intensity.mass(_region(e))
        C = gronwall_envelope_constant(lip[0], lip[1], mass, ex.horizon, scen.initial.second_moment())
        with np.errstate(over="ignore"):
            env = C * np.expm1(C * curve.horizons)
        outputs["gronwall_C"] = C
        verdicts.append(Verdict("gronwall_envelope_dominates", bool(np.all(env >= curve.estimates)),
                                f"C = {C:.4g}"))
    return outputs, verdicts


def exp_conditioned_coupling(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    s1 = float(e.require("s1"))
    u1 = e.require("u1")
    horizon = float(e.get("t_n", ex.horizon))
    eps_list = [float(x) for x in e.get("eps", [0.1, 0.05, 0.025])]
    n_acc = int(e.get("n_accepted", ex.n_paths))
    region = _region(e)
    rows, results = [], []
    for eps in eps_list:
        r = conditioned_coupling_test(scen.coeffs, scen.intensity, region, (s1, u1), eps, horizon, n_acc, ex.seed,
                                      step=ex.dt, initial=scen.initial,
                                      min_acceptance=float(e.get("min_acceptance", 1e-4)))
        results.append(r)
        rows.append((eps, r.n_accepted, r.n_draws, r.acceptance_rate, r.first_window_rate,
                     r.first_window_stderr, r.sup_distance_max, r.outside_window_max))
    _write_rows(out / "conditioned.csv",
                ["eps", "accepted", "draws", "acceptance_rate", "first_window_rate", "first_window_stderr",
                 "sup_distance_max", "outside_window_max"], rows)
    mass = scen.intensity.mass(region)
    sup = [r.sup_distance_max for r in results]
    outside = [r.outside_window_max for r in results]
    preds = [first_window_probability(mass, s1, eps) for eps in eps_list]
    z = [abs(r.first_window_rate - p) / r.first_window_stderr for r, p in zip(results, preds)]
    verdicts = [
        Verdict("sup_distance_decreasing", strictly_decreasing(sup, ROUNDING_FLOOR),
                f"sup distances {[repr(x) for x in sup]}"),
        Verdict("acceptance_matches_first_jump_law", all(x <= 3 for x in z),
                f"z-scores {[round(x, 3) for x in z]}"),
    ]
    if e.get("check_outside_window", False):
        verdicts.append(Verdict("outside_window_decreasing", strictly_decreasing(outside, ROUNDING_FLOOR),
                                f"{[repr(x) for x in outside]}"))
    outputs = {"eps": eps_list, "sup_distance_max": sup, "outside_window_max": outside,
               "first_window_rate": [r.first_window_rate for r in results], "first_window_prediction": preds,
               "acceptance_rate": [r.acceptance_rate for r in results],
               "acceptance_prediction": [acceptance_probability(mass, s1, eps, horizon) for eps in eps_list]}
    return outputs, verdicts


def exp_martingale(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    times = [float(t) for t in e.get("times", [ex.horizon])]
    omit = bool(e.get("omit_compensator", False))
    res = martingale_check(scen.evolution, ex.n_paths, times, ex.seed, omit_compensator=omit,
                           block_size=ex.block_size, workers=workers)
    _write_rows(out / "martingale.csv", ["t", "mean", "stderr"], zip(res.times, res.means, res.stderrs))
    expect = e.get("expect", "pass")
    ok = res.passed if expect == "pass" else not res.passed
    return ({"times": times, "means": res.means.tolist(), "stderrs": res.stderrs.tolist()},
            [Verdict(f"martingale_{expect}", ok, f"means {[f'{m:.5g}' for m in res.means]}")])


def _with_rho_shift(scen: Scenario, delta: float) -> Scenario:
    data = copy.deepcopy(scen.raw)
    data["model"]["rho"]["shift"] = delta
    return build_scenario(data, {"n_paths": scen.execution.n_paths, "seed": scen.execution.seed,
                                 "dt": scen.execution.dt})


def exp_path_independence(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    dts = [float(x) for x in e.get("dts", [ex.dt])]
    ev = scen.evolution
    medians, rows = [], []
    for dt in dts:
        g = gap_ensemble(ev.with_step(dt), ex.n_paths, ex.seed, block_size=ex.block_size, workers=workers)
        medians.append(float(np.median(g)))
        rows.append((dt, medians[-1], float(g.max())))
    outputs = {"dts": dts, "median_gap": medians}
    verdicts = []
    if "tolerance" in e.data:
        tol = float(e.get("tolerance"))
        verdicts.append(Verdict("gap_within_tolerance", max(medians) <= tol,
                                f"largest median gap {max(medians):.3g} vs {tol:g}"))
    if "halving_factor" in e.data:
        factor = float(e.get("halving_factor"))
        ratios = halving_ratios(medians)
        ok = all(m > ROUNDING_FLOOR for m in medians[:-1]) and all(r >= factor for r in ratios)
        verdicts.append(Verdict("gap_halving_factor", ok, f"ratios {[round(r, 4) for r in ratios]}"))
        outputs["halving_ratios"] = ratios
    if "perturbation" in e.data:
        delta = float(e.get("perturbation"))
        pert = _with_rho_shift(scen, delta).evolution.with_step(dts[-1])
        gp = gap_ensemble(pert, ex.n_paths, ex.seed, block_size=ex.block_size, workers=workers)
        mp = float(np.median(gp))
        ratio = mp / medians[-1] if medians[-1] > 0 else float("inf")
        need = float(e.get("perturbed_ratio", 10.0))
        verdicts.append(Verdict("perturbed_gap_ratio", ratio >= need, f"perturbed/consistent = {ratio:.4g}"))
        outputs["perturbed_median_gap"] = mp
    _write_rows(out / "gaps.csv", ["dt", "median_gap", "max_gap"], rows)
    if ev.v is not None:
        pts = np.linspace(-2.0, 2.0, 9)[:, None] * np.ones(ev.dimension)
        rep = check_consistency(ev.v, ev.sigma, ev.rho, ev.f, ev.lambda_fn, pts, ev.intensity, ev.A)
        rep.to_json(out / "consistency.json")
        outputs["e1_max_residual"] = rep.e1_max_residual
        outputs["e2_max_residual"] = rep.e2_max_residual
        outputs["e3_max_residual"] = rep.e3_max_residual
    return outputs, verdicts


def exp_ito_decomposition(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    dts = [float(x) for x in scen.experiment.get("dts", [ex.dt, ex.dt / 2])]
    medians = [float(np.median(ito_gap_ensemble(scen.evolution.with_step(dt), ex.n_paths, ex.seed,
                                                block_size=ex.block_size, workers=workers))) for dt in dts]
    _write_rows(out / "ito_gaps.csv", ["dt", "median_gap"], zip(dts, medians))
    return ({"dts": dts, "median_gap": medians},
            [Verdict("ito_gap_decreasing", strictly_decreasing(medians, ROUNDING_FLOOR), f"{medians}")])


def exp_galerkin_convergence(scen: Scenario, out: Path, workers: int):
    ex = scen.execution
    e = scen.experiment
    levels = [int(n) for n in e.get("levels", [2, 4, 8, 16])]
    ref = int(e.get("reference", 64))
    t = float(e.get("t", ex.horizon))
    curve = galerkin_convergence(scen.galerkin, levels, ref, t, ex.n_paths, ex.seed,
                                 block_size=ex.block_size, workers=workers)
    curve.to_csv(out / "galerkin.csv")
    if e.get("expect_zero", False):
        v = Verdict("zero_error", bool(np.all(curve.mean_sq_error == 0.0)), f"{curve.mean_sq_error.tolist()}")
    else:
        v = Verdict("strictly_decreasing", strictly_decreasing(curve.mean_sq_error), f"{curve.mean_sq_error.tolist()}")
    return {"levels": levels, "mean_sq_error": curve.mean_sq_error.tolist(), "stderr": curve.stderr.tolist()}, [v]


EXPERIMENTS = {
    "constant_path": exp_constant_path,
    "poisson_counts": exp_poisson_counts,
    "support_scan": exp_support_scan,
    "coupling_curve": exp_coupling_curve,
    "conditioned_coupling": exp_conditioned_coupling,
    "martingale": exp_martingale,
    "path_independence": exp_path_independence,
    "ito_decomposition": exp_ito_decomposition,
    "galerkin_convergence": exp_galerkin_convergence,
}

_NEEDS = {"martingale": "evolution", "path_independence": "evolution", "ito_decomposition": "evolution",
          "galerkin_convergence": "galerkin"}


@dataclass
class RunReport:
    scenario: dict
    experiment: str
    outputs: dict
    verdicts: list
    notes: list

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "experiment": self.experiment, "outputs": self.outputs,
                "verdicts": [asdict(v) for v in self.verdicts], "passed": self.passed, "notes": self.notes}

    def summary(self) -> str:
        lines = [f"scenario {self.scenario['name']}: experiment {self.experiment}"]
        for v in self.verdicts:
            lines.append(f"  [{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}")
        lines.append("all verdicts passed" if self.passed else "one or more verdicts FAILED")
        return "\n".join(lines)


def run_scenario(scen: Scenario, output_dir: str | Path) -> RunReport:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = scen.experiment.kind()
    if kind not in EXPERIMENTS:
        raise scen.experiment.unknown(EXPERIMENTS)
    need = _NEEDS.get(kind)
    if need and getattr(scen, need) is None:
        raise ConfigurationError(f"experiment {kind!r} needs a model with a {need} block")
    if need is None and kind != "poisson_counts" and scen.coeffs is None:
        raise ConfigurationError(f"experiment {kind!r} needs an SDE model")
    notes = validate_scenario(scen)
    started = time.perf_counter()
    outputs, verdicts = EXPERIMENTS[kind](scen, out, scen.execution.threads)
    elapsed = time.perf_counter() - started
    echo = {"name": scen.name, "exercises": scen.exercises, "execution": scen.execution.echo(),
            "model": scen.raw.get("model"), "experiment": scen.raw.get("experiment")}
    report = RunReport(echo, kind, outputs, verdicts, notes)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
    (out / "summary.txt").write_text(report.summary() + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": elapsed,
                                                 "threads": scen.execution.threads}) + "\n")
    return report


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
