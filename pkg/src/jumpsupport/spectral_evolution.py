"""Galerkin truncation of a diagonal evolution equation and its mild-solution scheme.

The operator is A = diag(-λ_1, -λ_2, ...) in the eigenbasis. Sequence-space
coefficient callbacks always receive zero-padded vectors of length ``n_max``;
level ``n`` keeps the first ``n`` coordinates of what they return. The
enlarged space carrying the cylindrical Brownian motion (weights 2^-i on the
coordinates) never appears at runtime: only the first ``n*`` Brownian
coordinates are simulated, and pairings are Euclidean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ensemble import DEFAULT_BLOCK_SIZE, run_blocks
from .errors import ConfigurationError
from .jump_sde import (
    CadlagPath,
    CoefficientSet,
    InitialLaw,
    NoiseBatch,
    NoiseRecord,
    PathBatch,
    draw_noise,
    integrate_batch,
)
from .random_measures import LevyMeasureModel


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    allow_zero: bool = False  # testing relaxation: A = 0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if lam.size == 0:
            raise ConfigurationError("spectrum is empty")
        if self.allow_zero:
            if np.any(lam < 0) or np.any(np.diff(lam) < 0):
                raise ConfigurationError("relaxed spectrum must be nonnegative and nondecreasing")
        elif lam[0] <= 0 or np.any(np.diff(lam) <= 0):
            raise ConfigurationError("eigenvalues must be positive and strictly increasing")
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def power(cls, c: float, p: float, n_max: int) -> "Spectrum":
        """λ_j = c j^p for j = 1..n_max."""
        return cls(c * np.arange(1, n_max + 1, dtype=float) ** p)

    @classmethod
    def zero(cls, n_max: int) -> "Spectrum":
        return cls(np.zeros(n_max), allow_zero=True)

    @property
    def n_max(self) -> int:
        return self.eigenvalues.size

    def damping(self, n: int, h) -> np.ndarray:
        """Per-mode factors exp(-λ_j h) for the first ``n`` modes; broadcast over ``h``."""
        return np.exp(-np.multiply.outer(np.asarray(h, dtype=float), self.eigenvalues[:n]))


def _pad(x: np.ndarray, n_max: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n == n_max:
        return x
    out = np.zeros(x.shape[:-1] + (n_max,))
    out[..., :n] = x
    return out


def _checked(out, n: int, what: str) -> np.ndarray:
    out = np.asarray(out, dtype=float)
    if out.shape[-1] < n:
        raise ConfigurationError(f"{what} callback returned {out.shape[-1]} coordinates, need at least {n}")
    return out


@dataclass(frozen=True)
class GalerkinSystem:
    n: int
    spectrum: Spectrum
    b: Callable
    sigma: Callable
    f: Callable

    @property
    def coeffs(self) -> CoefficientSet:
        """Level-n coefficients without the operator term (the semigroup handles it)."""
        n, n_max = self.n, self.spectrum.n_max
        b, sigma, f = self.b, self.sigma, self.f

        def drift(x):
            return _checked(b(_pad(x, n_max)), n, "drift")[..., :n]

        def diffusion(x):
            s = _checked(sigma(_pad(x, n_max)), n, "diffusion")
            if s.shape[-2] < n:
                raise ConfigurationError(f"diffusion callback returned {s.shape[-2]} rows, need at least {n}")
            return s[..., :n, :n]

        def jump(x, u):
            return _checked(f(_pad(x, n_max), u), n, "jump")[..., :n]

        return CoefficientSet(n, drift, diffusion, jump, brownian_dimension=n)

    @property
    def operator(self) -> np.ndarray:
        return -np.diag(self.spectrum.eigenvalues[: self.n])

    def project(self, m: int) -> "GalerkinSystem":
        if not 1 <= m <= self.n:
            raise ConfigurationError(f"cannot project level {self.n} to level {m}")
        return GalerkinSystem(m, self.spectrum, self.b, self.sigma, self.f)


def project_coefficients(b: Callable, sigma: Callable, f: Callable, spectrum: Spectrum, n: int) -> GalerkinSystem:
    if not 1 <= n <= spectrum.n_max:
        raise ConfigurationError(f"level {n} outside 1..{spectrum.n_max}")
    system = GalerkinSystem(n, spectrum, b, sigma, f)
    probe = np.zeros((1, n))
    c = system.coeffs
    c.drift(probe)
    c.diffusion(probe)
    return system


def _decay(system: GalerkinSystem, h: np.ndarray) -> np.ndarray:
    return system.spectrum.damping(system.n, h)


def solve_mild_batch(system: GalerkinSystem, compensator: LevyMeasureModel, z0: np.ndarray,
                     noise: NoiseBatch) -> PathBatch:
    """Exponential Euler over a batch; a jump at a node is damped over the following interval."""
    return integrate_batch(system.coeffs, compensator, z0, noise, decay=_decay(system, noise.h))


def solve_mild(system: GalerkinSystem, noise: NoiseRecord, initial) -> CadlagPath:
    if noise.brownian_increments.shape[1] > system.n:
        noise = noise.prefix(system.n)
    batch = NoiseBatch.from_records([noise])
    z0 = np.asarray(initial, dtype=float).reshape(1, -1)
    return solve_mild_batch(system, noise.compensator, z0, batch).path(0, noise.grid)


@dataclass(frozen=True)
class GalerkinScenario:
    spectrum: Spectrum
    b: Callable
    sigma: Callable
    f: Callable
    intensity: LevyMeasureModel
    initial: InitialLaw  # on the first n_max coordinates
    horizon: float
    step: float
    lambda_fn: Callable | None = None


@dataclass(frozen=True)
class ConvergenceCurve:
    levels: np.ndarray
    mean_sq_error: np.ndarray
    stderr: np.ndarray
    reference_level: int
    n_paths: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "mean_sq_error", "stderr"])
            for n, e, s in zip(self.levels, self.mean_sq_error, self.stderr):
                writer.writerow([int(n), repr(float(e)), repr(float(s))])


def galerkin_convergence(scenario: GalerkinScenario, levels: Sequence[int], reference_level: int, t: float,
                         n_paths: int, seed: int, *, block_size: int = DEFAULT_BLOCK_SIZE,
                         workers: int = 1) -> ConvergenceCurve:
    """E |X^n_t - X^{n*}_t|² per level, all levels driven by prefixes of one noise draw."""
    levels = np.asarray(levels, dtype=int)
    if np.any(levels >= reference_level):
        raise ConfigurationError("the reference level must exceed every probed level")
    if reference_level > scenario.spectrum.n_max or scenario.initial.dimension < reference_level:
        raise ConfigurationError("reference level exceeds the spectrum or initial-law capacity")
    if not 0 < t <= scenario.horizon:
        raise ConfigurationError("t must lie in (0, horizon]")
    ref = project_coefficients(scenario.b, scenario.sigma, scenario.f, scenario.spectrum, reference_level)
    systems = [ref.project(int(n)) for n in levels]

    def work(ids):
        records = [draw_noise(scenario.intensity, t, scenario.step, reference_level, seed, int(i),
                              tilt=scenario.lambda_fn) for i in ids]
        full = NoiseBatch.from_records(records)
        compensator = records[0].compensator
        z0 = scenario.initial.draw(seed, ids)[:, :reference_level]
        x_ref = solve_mild_batch(ref, compensator, z0, full).terminal
        errs = []
        for sys_n in systems:
            n = sys_n.n
            sub = NoiseBatch(full.records, full.times, full.h, full.dB[:, :, :n], full.jump_mask, full.marks,
                             full.n_nodes)
            x_n = solve_mild_batch(sys_n, compensator, z0[:, :n], sub).terminal
            errs.append(np.sum((_pad(x_n, reference_level) - x_ref) ** 2, axis=1))
        return np.stack(errs, axis=1)

    err = np.vstack(run_blocks(n_paths, work, block_size=block_size, workers=workers))
    return ConvergenceCurve(levels, err.mean(axis=0), err.std(axis=0, ddof=1) / np.sqrt(n_paths),
                            reference_level, n_paths)
