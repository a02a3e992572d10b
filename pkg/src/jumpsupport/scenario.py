"""Scenario files: a JSON tree with ``model``, ``experiment`` and ``execution`` blocks.

Every named component is resolved here, so a scenario that loads is fully
built; :func:`validate_scenario` then runs the numerical checks that must
pass before anything is simulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import coefficients as cf
from .errors import ConfigurationError, ModelError
from .girsanov import EvolutionScenario, ScalarField
from .jump_sde import CoefficientSet, InitialLaw, SDEProblem, probe_lipschitz
from .random_measures import DiscreteLevyMeasure, LevyMeasureModel, Region, UniformBoxLevyMeasure, check_tilt
from .rng import Substream, stream_key
from .spectral_evolution import GalerkinScenario, Spectrum

SCENARIO_PACKAGE = "jumpsupport.scenarios"


class Block:
    """Dict wrapper that names the missing or malformed field by its dotted path."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected an object")
        self.data = data
        self.path = path

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, default=None):
        return self.data.get(key, default)

    def require(self, key: str):
        if key not in self.data:
            raise ConfigurationError(f"{self.path}.{key}: required field is missing")
        return self.data[key]

    def block(self, key: str, required: bool = True) -> "Block | None":
        if key not in self.data:
            if required:
                raise ConfigurationError(f"{self.path}.{key}: required block is missing")
            return None
        return Block(self.data[key], f"{self.path}.{key}")

    def number(self, key: str, default=None, *, positive: bool = False) -> float:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{self.path}.{key}: expected a number, got {value!r}")
        if positive and not value > 0:
            raise ConfigurationError(f"{self.path}.{key}: must be > 0, got {value!r}")
        return float(value)

    def integer(self, key: str, default=None, *, minimum: int = 0) -> int:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigurationError(f"{self.path}.{key}: expected an integer >= {minimum}, got {value!r}")
        return int(value)

    def kind(self) -> str:
        k = self.require("kind")
        if not isinstance(k, str):
            raise ConfigurationError(f"{self.path}.kind: expected a string")
        return k

    def unknown(self, options) -> ConfigurationError:
        return ConfigurationError(f"{self.path}.kind: unknown kind {self.data.get('kind')!r}; "
                                  f"expected one of {sorted(options)}")


# ---------------------------------------------------------------------------
# component builders


def build_levy(b: Block) -> LevyMeasureModel:
    kind = b.kind()
    if kind == "empty":
        return DiscreteLevyMeasure.empty(b.integer("mark_dim", 1, minimum=1))
    if kind == "discrete":
        atoms = b.require("atoms")
        weights = b.require("weights")
        return DiscreteLevyMeasure(np.asarray(atoms, dtype=float), np.asarray(weights, dtype=float))
    if kind == "uniform_interval":
        bounds = b.require("intervals")
        region = Region.boxes([(lo, hi) for lo, hi in bounds])
        if b.has("density"):
            return UniformBoxLevyMeasure(region, density=b.number("density"),
                                         n_nodes=b.integer("n_nodes", 64, minimum=1))
        return UniformBoxLevyMeasure(region, b.number("total_mass"), n_nodes=b.integer("n_nodes", 64, minimum=1))
    raise b.unknown({"empty", "discrete", "uniform_interval"})


def build_drift(b: Block, d: int) -> Callable:
    kind = b.kind()
    if kind == "zero":
        return cf.zero_drift(d)
    if kind == "constant":
        return cf.constant_drift(b.require("value"))
    if kind == "linear":
        return cf.linear_drift(b.require("matrix"))
    if kind == "affine":
        return cf.affine_drift(b.require("matrix"), b.require("offset"))
    if kind == "ou":
        return cf.ou_drift(b.number("theta"), b.require("mean"))
    if kind == "tabulated":
        return cf.tabulated_drift(b.require("x"), b.require("y"))
    raise b.unknown({"zero", "constant", "linear", "affine", "ou", "tabulated"})


def build_diffusion(b: Block, d: int) -> tuple[Callable, int]:
    kind = b.kind()
    if kind == "zero":
        m = b.integer("brownian_dimension", d, minimum=1)
        return cf.zero_diffusion(d, m), m
    if kind == "constant":
        S = np.atleast_2d(np.asarray(b.require("matrix"), dtype=float))
        if S.shape[0] != d:
            raise ConfigurationError(f"{b.path}.matrix: needs {d} rows")
        return cf.constant_diffusion(S), S.shape[1]
    if kind == "tabulated":
        return cf.tabulated_diffusion(b.require("x"), b.require("y")), 1
    if kind == "sine":
        return cf.sine_diffusion(b.number("base"), b.number("amplitude")), 1
    raise b.unknown({"zero", "constant", "tabulated", "sine"})


def build_jump(b: Block, d: int) -> tuple[Callable, bool]:
    """Returns the map and whether it ignores the state."""
    kind = b.kind()
    if kind == "zero":
        return cf.zero_jump(d), True
    if kind == "additive":
        return cf.additive_jump(b.require("scale")), True
    if kind == "abs":
        return cf.abs_jump(b.require("scale")), True
    if kind == "multiplicative":
        return cf.multiplicative_jump(b.number("scale", 1.0)), False
    raise b.unknown({"zero", "additive", "abs", "multiplicative"})


def build_initial(b: Block) -> InitialLaw:
    kind = b.kind()
    if kind == "dirac":
        return InitialLaw.dirac(b.require("point"))
    if kind == "gaussian":
        return InitialLaw.gaussian(b.require("mean"), b.require("std"))
    if kind == "gaussian_power":
        # centred, coordinate j with standard deviation j^-p; optionally only j = 1
        n = b.integer("n", minimum=1)
        std = np.arange(1, n + 1, dtype=float) ** -b.number("power", 2.0)
        if b.get("first_only", False):
            std[1:] = 0.0
        return InitialLaw.gaussian(np.zeros(n), std)
    raise b.unknown({"dirac", "gaussian", "gaussian_power"})


def build_tilt(b: Block) -> Callable:
    kind = b.kind()
    if kind == "constant":
        return cf.constant_tilt(b.number("value"))
    if kind == "exp_linear":
        return cf.exp_linear_tilt(b.require("slope"))
    if kind == "identity":
        return cf.identity_tilt
    raise b.unknown({"constant", "exp_linear", "identity"})


def build_field(b: Block, d: int) -> ScalarField:
    kind = b.kind()
    if kind == "constant":
        return ScalarField.constant(b.number("value", 0.0), d)
    if kind == "linear":
        return ScalarField.linear(b.require("slope"), b.number("offset", 0.0))
    if kind == "quadratic":
        return ScalarField.quadratic(b.require("matrix"), b.get("slope"), b.number("offset", 0.0))
    raise b.unknown({"constant", "linear", "quadratic"})


def build_spectrum(b: Block) -> Spectrum:
    kind = b.kind()
    if kind == "power":
        return Spectrum.power(b.number("c", positive=True), b.number("p"), b.integer("n_max", minimum=1))
    if kind == "list":
        return Spectrum(np.asarray(b.require("values"), dtype=float))
    if kind == "zero":
        return Spectrum.zero(b.integer("n_max", minimum=1))
    raise b.unknown({"power", "list", "zero"})


def sigma_rho_drift(sigma: Callable, rho: Callable) -> Callable:
    """b = σρ."""
    def drift(x):
        return np.einsum("...ij,...j->...i", sigma(x), rho(x))
    return drift


def build_rho(b: Block, sigma: Callable, v: ScalarField | None, d: int) -> Callable:
    kind = b.kind()
    shift = np.atleast_1d(np.asarray(b.get("shift", 0.0), dtype=float))
    if kind == "constant":
        c = np.atleast_1d(np.asarray(b.require("value"), dtype=float)) + shift

        def rho(x):
            return np.broadcast_to(c, np.shape(x)[:-1] + c.shape).copy()
        return rho
    if kind == "sigma_grad_v":
        if v is None:
            raise ConfigurationError(f"{b.path}: sigma_grad_v needs model.v")

        def rho(x):
            return np.einsum("...ij,...i->...j", sigma(x), v.gradient(x)) + shift
        return rho
    if kind == "tanh_shift":
        # bounded state-dependent choice: tanh(x) + offset, for drift-only tilts
        off = b.number("offset", 0.0)

        def rho(x):
            return np.tanh(np.asarray(x, dtype=float)) + off
        return rho
    raise b.unknown({"constant", "sigma_grad_v", "tanh_shift"})


def sequence_coefficients(b: Block, n_max: int) -> tuple[Callable, Callable, Callable]:
    """Diagonal sequence-space coefficients with coordinate weights j^-p."""
    j = np.arange(1, n_max + 1, dtype=float)
    kind = b.kind()
    if kind == "diagonal":
        drift_c = np.asarray(b.get("drift_coefficients", [0.0] * n_max), dtype=float)
        noise_w = j ** -b.number("noise_power", 2.0)
        jump_w = j ** -b.number("jump_power", 2.0) * b.number("jump_scale", 0.0)
    elif kind == "first_coordinate":
        drift_c = np.zeros(n_max)
        noise_w = np.zeros(n_max)
        noise_w[0] = 1.0
        jump_w = np.zeros(n_max)
        jump_w[0] = b.number("jump_scale", 0.0)
    else:
        raise b.unknown({"diagonal", "first_coordinate"})
    if drift_c.size != n_max:
        raise ConfigurationError(f"{b.path}.drift_coefficients: need {n_max} values")

    def drift(x):
        return x * drift_c

    def sigma(x):
        return np.broadcast_to(np.diag(noise_w), np.shape(x)[:-1] + (n_max, n_max)).copy()

    def jump(x, u):
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(np.shape(x)[:-1], u.shape[:-1])
        return np.broadcast_to(u[..., :1] * jump_w, shape + (n_max,)).copy()

    return drift, sigma, jump


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Execution:
    n_paths: int
    dt: float
    horizon: float
    seed: int
    threads: int = 1
    alpha: float = 0.001
    block_size: int = 2048

    def echo(self) -> dict:
        # thread count is left out: it may not influence anything written to disk
        return {"n_paths": self.n_paths, "dt": self.dt, "horizon": self.horizon, "seed": self.seed,
                "alpha": self.alpha, "block_size": self.block_size}


@dataclass
class Scenario:
    name: str
    description: str
    exercises: str
    raw: dict
    execution: Execution
    experiment: Block
    dimension: int
    intensity: LevyMeasureModel
    initial: InitialLaw | None = None
    coeffs: CoefficientSet | None = None
    evolution: EvolutionScenario | None = None
    galerkin: GalerkinScenario | None = None
    notes: list = field(default_factory=list)

    def problem(self, horizon: float | None = None) -> SDEProblem:
        if self.coeffs is None:
            raise ConfigurationError(f"scenario {self.name!r} has no SDE model")
        return SDEProblem(self.coeffs, self.intensity, self.initial,
                          self.execution.horizon if horizon is None else horizon, self.execution.dt)


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be an object")
    return data


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def build_scenario(data: dict, overrides: dict | None = None) -> Scenario:
    root = Block(data, "scenario")
    name = root.require("name")
    ex = root.block("execution")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    execution = Execution(
        n_paths=int(overrides.get("n_paths", ex.integer("n_paths", minimum=1))),
        dt=float(overrides.get("dt", ex.number("dt", positive=True))),
        horizon=ex.number("horizon", positive=True),
        seed=int(overrides.get("seed", ex.integer("seed", minimum=0))),
        threads=int(overrides.get("threads", ex.integer("threads", 1, minimum=1))),
        alpha=ex.number("alpha", 0.001, positive=True),
        block_size=ex.integer("block_size", 2048, minimum=1),
    )
    if not execution.dt > 0 or execution.n_paths < 1 or execution.threads < 1:
        raise ConfigurationError("execution: dt, n_paths and threads must be positive")

    model = root.block("model")
    intensity = build_levy(model.block("levy"))
    scen = Scenario(name=str(name), description=str(root.get("description", "")),
                    exercises=str(root.get("exercises", "")), raw=data, execution=execution,
                    experiment=root.block("experiment"), dimension=0, intensity=intensity)

    if model.has("spectrum"):
        spectrum = build_spectrum(model.block("spectrum"))
        b, sigma, f = sequence_coefficients(model.block("sequence"), spectrum.n_max)
        tilt = build_tilt(model.block("lambda")) if model.has("lambda") else None
        initial = build_initial(model.block("initial"))
        scen.dimension = spectrum.n_max
        scen.initial = initial
        scen.galerkin = GalerkinScenario(spectrum, b, sigma, f, intensity, initial, execution.horizon,
                                         execution.dt, tilt)
        return scen

    d = model.integer("dimension", minimum=1)
    scen.dimension = d
    scen.initial = build_initial(model.block("initial"))
    if scen.initial.dimension != d:
        raise ConfigurationError("model.initial: dimension does not match model.dimension")
    sigma, m = build_diffusion(model.block("diffusion"), d)
    jump, state_free = build_jump(model.block("jump"), d)
    v = build_field(model.block("v"), d) if model.has("v") else None

    if model.has("rho"):
        rho = build_rho(model.block("rho"), sigma, v, d)
        drift_block = model.block("drift")
        b = sigma_rho_drift(sigma, rho) if drift_block.kind() == "sigma_rho" else build_drift(drift_block, d)
        if model.has("lambda"):
            tilt = build_tilt(model.block("lambda"))
        elif intensity.total_mass() > 0:
            raise ConfigurationError("model.lambda: required when the evolution model has jumps")
        else:
            tilt = cf.constant_tilt(0.5)  # never evaluated without marks
        A = np.asarray(model.get("operator"), dtype=float) if model.has("operator") else None
        bound = model.get("rho_bound")
        scen.evolution = EvolutionScenario(
            d, b, sigma, jump, intensity, tilt, rho, scen.initial, execution.horizon, execution.dt,
            v=v, A=A, brownian_dimension=m, lambda_margin=model.number("lambda_margin", 1e-6),
            rho_bound=None if bound is None else float(bound), jump_state_independent=state_free)
        scen.coeffs = scen.evolution.coefficients()
        return scen

    drift = build_drift(model.block("drift"), d)
    lip = model.get("lipschitz")
    scen.coeffs = CoefficientSet(d, drift, sigma, jump, tuple(lip) if lip else None, m, state_free)
    return scen


def validate_scenario(scen: Scenario) -> list[str]:
    """Numerical checks required before simulation; returns notes, raises on failure."""
    notes = []
    ex = scen.execution
    if ex.dt > ex.horizon:
        raise ConfigurationError("execution.dt exceeds execution.horizon")
    if scen.coeffs is not None:
        probe = np.linspace(-3, 3, 7)[:, None] * np.ones(scen.coeffs.dimension)
        nodes, _ = scen.intensity.nodes()
        marks = nodes if nodes.shape[0] else np.ones((1, scen.intensity.mark_dim))
        scen.coeffs.check_finite(probe, marks[:16])
        if scen.coeffs.declared_lipschitz is not None:
            rep = probe_lipschitz(scen.coeffs, scen.intensity, stream_key(ex.seed, 0, Substream.INITIAL_CONDITION)
                                  .generator())
            if not rep.ok:
                raise ModelError(f"Lipschitz probe: observed ({rep.l1_ratio:.4g}, {rep.l2_ratio:.4g}) exceeds "
                                 f"declared {rep.declared}")
            notes.append(f"lipschitz probe ok: L1 ratio {rep.l1_ratio:.4g}, growth ratio {rep.l2_ratio:.4g}")
    if scen.evolution is not None:
        scen.evolution.validate()
        notes.append("tilt range and derivative checks ok")
    if scen.galerkin is not None and scen.galerkin.lambda_fn is not None:
        nodes, w = scen.intensity.nodes()
        if w.size:
            check_tilt(scen.galerkin.lambda_fn, nodes, 1e-6)
    return notes


def load_scenario(path: str | Path, overrides: dict | None = None) -> Scenario:
    return build_scenario(load_config(path), overrides)


# ---------------------------------------------------------------------------
# bundled scenarios


def bundled_paths() -> list:
    root = resources.files(SCENARIO_PACKAGE)
    return sorted((p for p in root.iterdir() if p.name.endswith(".json")), key=lambda p: p.name)


def list_scenarios() -> list[dict]:
    rows = []
    for p in bundled_paths():
        data = parse_text(p.read_text(), p.name)
        rows.append({"name": data.get("name", p.name[:-5]), "file": p.name,
                     "exercises": data.get("exercises", ""), "description": data.get("description", "")})
    return rows


def bundled_path(name: str):
    for p in bundled_paths():
        if p.name == name or p.name[:-5] == name:
            return p
    raise ConfigurationError(f"no bundled scenario named {name!r}")
