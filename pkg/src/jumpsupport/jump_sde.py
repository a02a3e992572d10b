"""Euler-Maruyama with jump splicing for SDEs driven by Brownian motion and a
compensated Poisson random measure, plus the two auxiliary equations used to
localise the support argument (jump-only and deterministic skeleton) and the
coupled experiments built on them.

Coefficient callables are vectorised over leading axes:

* ``drift(z)``      ``(..., d) -> (..., d)``
* ``diffusion(z)``  ``(..., d) -> (..., d, m)``
* ``jump(z, u)``    ``(..., d), (..., k) -> (..., d)`` (broadcasting)

All solvers share one batched integrator, so a single path and the same path
inside an ensemble go through identical arithmetic.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .ensemble import DEFAULT_BLOCK_SIZE, run_blocks
from .errors import AcceptanceRateError, ConfigurationError
from .random_measures import (
    LevyMeasureModel,
    MarkedPointPattern,
    Region,
    as_marks,
    sample_prm,
    thin_to_tilted,
)
from .rng import Substream, stream_key


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class CoefficientSet:
    dimension: int
    drift: Callable
    diffusion: Callable
    jump: Callable
    declared_lipschitz: tuple[float, float] | None = None
    brownian_dimension: int | None = None
    # lets the integrator evaluate the compensator drift once per run
    jump_state_independent: bool = False

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigurationError("state dimension must be positive")
        if self.brownian_dimension is None:
            object.__setattr__(self, "brownian_dimension", self.dimension)

    def without_diffusion(self) -> "CoefficientSet":
        d, m = self.dimension, self.brownian_dimension

        def no_diffusion(z):
            z = np.asarray(z)
            return np.zeros(z.shape[:-1] + (d, m))

        return replace(self, diffusion=no_diffusion)

    def check_finite(self, points: np.ndarray, marks: np.ndarray) -> None:
        """Raise if any coefficient is non-finite on the given probe points."""
        z = np.atleast_2d(np.asarray(points, dtype=float))
        u = as_marks(marks)
        checks = {
            "drift": self.drift(z),
            "diffusion": self.diffusion(z),
            "jump": self.jump(z[:, None, :], u[None, :, :]),
        }
        for name, value in checks.items():
            if not np.all(np.isfinite(value)):
                raise ConfigurationError(f"{name} returned non-finite values on a finite probe grid")
        if np.shape(checks["drift"]) != z.shape:
            raise ConfigurationError(f"drift output shape {np.shape(checks['drift'])} != {z.shape}")


@dataclass(frozen=True)
class LipschitzReport:
    l1_ratio: float
    l2_ratio: float
    declared: tuple[float, float] | None
    tolerance: float = 0.01

    @property
    def ok(self) -> bool:
        if self.declared is None:
            return True
        l1, l2 = self.declared
        return self.l1_ratio <= l1 * (1 + self.tolerance) and self.l2_ratio <= l2 * (1 + self.tolerance)


def probe_lipschitz(coeffs: CoefficientSet, measure: LevyMeasureModel, rng: np.random.Generator,
                    n_pairs: int = 256, scale: float = 3.0) -> LipschitzReport:
    """Largest difference quotients and growth ratio seen on random probe pairs.

    Only finitely many pairs are tried, so a passing report is evidence, not a
    certificate, that the declared constants hold.
    """
    d = coeffs.dimension
    z1 = rng.uniform(-scale, scale, (n_pairs, d))
    z2 = z1 + rng.normal(0.0, 0.5, (n_pairs, d))
    dz = np.linalg.norm(z1 - z2, axis=1)
    l1_ratios = []

    dxi = np.linalg.norm(coeffs.drift(z1) - coeffs.drift(z2), axis=1)
    deta = np.linalg.norm((coeffs.diffusion(z1) - coeffs.diffusion(z2)).reshape(n_pairs, -1), axis=1)
    l1_ratios.append(np.max((dxi + deta) / dz))

    growth = (np.sum(coeffs.drift(z1) ** 2, axis=1)
              + np.sum(coeffs.diffusion(z1).reshape(n_pairs, -1) ** 2, axis=1))
    if measure.total_mass() > 0:
        u1 = measure.sample(n_pairs, rng)
        u2 = measure.sample(n_pairs, rng)
        un = measure.norm(u1)
        jz = np.linalg.norm(coeffs.jump(z1, u1) - coeffs.jump(z2, u1), axis=1)
        l1_ratios.append(np.max(jz / (dz * un)))
        du = measure.norm(u1 - u2)
        ok = du > 0
        if np.any(ok):
            ju = np.linalg.norm(coeffs.jump(z1, u1) - coeffs.jump(z1, u2), axis=1)
            l1_ratios.append(np.max(ju[ok] / ((1 + np.linalg.norm(z1, axis=1)[ok]) * du[ok])))
        nodes, weights = measure.nodes()
        jsq = np.sum(coeffs.jump(z1[:, None, :], nodes[None]) ** 2, axis=2)
        growth = growth + jsq @ weights
    l2_ratio = float(np.max(growth / (1 + np.sum(z1 ** 2, axis=1))))
    return LipschitzReport(float(np.max(l1_ratios)), l2_ratio, coeffs.declared_lipschitz)


# ---------------------------------------------------------------------------
# grids, noise, paths


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    step: float
    nodes: np.ndarray

    @classmethod
    def build(cls, horizon: float, step: float, extra_times: Sequence[float] = ()) -> "TimeGrid":
        if not horizon > 0 or not step > 0:
            raise ConfigurationError(f"need horizon > 0 and step > 0, got {horizon}, {step}")
        n = max(int(np.ceil(horizon / step - 1e-9)), 1)
        base = np.append(np.arange(n) * step, horizon)
        extra = np.asarray(extra_times, dtype=float).reshape(-1)
        if extra.size:
            if np.any(extra <= 0) or np.any(extra > horizon):
                raise ConfigurationError("spliced times must lie in (0, horizon]")
            base = np.union1d(base, extra)
        return cls(float(horizon), float(step), base)

    @property
    def n_intervals(self) -> int:
        return self.nodes.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    def index_of(self, times) -> np.ndarray:
        idx = np.searchsorted(self.nodes, np.asarray(times, dtype=float))
        if np.any(idx >= self.nodes.size) or np.any(self.nodes[np.minimum(idx, self.nodes.size - 1)] != times):
            raise ConfigurationError("time is not a grid node")
        return idx


@dataclass(frozen=True)
class NoiseRecord:
    grid: TimeGrid
    brownian_increments: np.ndarray  # (n_intervals, m)
    pattern: MarkedPointPattern
    compensator: LevyMeasureModel
    key: tuple[int, int] | None = None

    def __post_init__(self):
        if self.brownian_increments.shape[0] != self.grid.n_intervals:
            raise ConfigurationError("one Brownian increment row per grid interval is required")
        if abs(self.pattern.horizon - self.grid.horizon) > 0:
            raise ConfigurationError("pattern and grid horizons differ")

    @property
    def jump_nodes(self) -> np.ndarray:
        return self.grid.index_of(self.pattern.times) if len(self.pattern) else np.zeros(0, dtype=int)

    def restricted(self, region: Region | None) -> "NoiseRecord":
        """Same grid and Brownian increments; jumps and compensator limited to ``region``."""
        if region is None:
            return self
        return replace(self, pattern=self.pattern.restrict(region),
                       compensator=self.compensator.restrict(region))

    def prefix(self, m: int) -> "NoiseRecord":
        return replace(self, brownian_increments=self.brownian_increments[:, :m])


def draw_noise(intensity: LevyMeasureModel, horizon: float, step: float, brownian_dim: int,
               seed: int, stream_id: int, *, tilt: Callable | None = None,
               region: Region | None = None, extra_times: Sequence[float] = ()) -> NoiseRecord:
    """Replayable noise for one path: pattern first, then increments on the spliced grid."""
    key = stream_key(seed, stream_id, Substream.JUMP_TIMES)
    pattern = sample_prm(intensity, region, horizon, key)
    compensator = intensity.restrict(region)
    if tilt is not None:
        pattern = thin_to_tilted(pattern, tilt, key)
        compensator = compensator.tilted(tilt)
    grid = TimeGrid.build(horizon, step, np.concatenate([pattern.times, np.asarray(extra_times, float)]))
    gen = key.with_substream(Substream.BROWNIAN).generator()
    dB = gen.standard_normal((grid.n_intervals, brownian_dim)) * np.sqrt(grid.widths)[:, None]
    return NoiseRecord(grid, dB, pattern, compensator, (int(seed), int(stream_id)))


@dataclass(frozen=True)
class JumpRecord:
    time: float
    pre_state: np.ndarray
    post_state: np.ndarray
    mark: np.ndarray


@dataclass(frozen=True)
class CadlagPath:
    """Right-continuous states at grid nodes with their left limits.

    Between consecutive nodes the scheme's path is affine from ``states[k]``
    to ``left_limits[k + 1]``.
    """

    grid: TimeGrid
    states: np.ndarray
    left_limits: np.ndarray
    jump_nodes: np.ndarray
    jump_marks: np.ndarray
    blowup_node: int | None = None
    warnings: tuple[str, ...] = ()

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[: self.states.shape[0]]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def jump_records(self) -> list[JumpRecord]:
        out = []
        for j, mark in zip(self.jump_nodes, self.jump_marks):
            if j < self.states.shape[0]:
                out.append(JumpRecord(float(self.grid.nodes[j]), self.left_limits[j], self.states[j], mark))
        return out

    def value_at(self, t: float) -> np.ndarray:
        times = self.times
        k = int(np.searchsorted(times, t, side="right") - 1)
        if k < 0:
            raise ValueError("time before the start of the path")
        if k >= times.size - 1:
            return self.states[-1]
        w = (t - times[k]) / (times[k + 1] - times[k])
        return self.states[k] + w * (self.left_limits[k + 1] - self.states[k])

    def to_csv(self, path: str | Path) -> None:
        is_jump = np.zeros(self.states.shape[0], dtype=int)
        is_jump[self.jump_nodes[self.jump_nodes < is_jump.size]] = 1
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"state_{i + 1}" for i in range(self.states.shape[1])] + ["is_jump"])
            for t, z, j in zip(self.times, self.states, is_jump):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in z] + [int(j)])


# ---------------------------------------------------------------------------
# batched integrator


@dataclass(frozen=True)
class NoiseBatch:
    """Noise records padded to a common number of intervals."""

    records: tuple[NoiseRecord, ...]
    times: np.ndarray  # (P, K + 1), padded with the horizon
    h: np.ndarray  # (P, K)
    dB: np.ndarray  # (P, K, m)
    jump_mask: np.ndarray  # (P, K): a jump happens at node k + 1
    marks: np.ndarray  # (P, K, k)
    n_nodes: np.ndarray  # (P,)

    @classmethod
    def from_records(cls, records: Sequence[NoiseRecord]) -> "NoiseBatch":
        P = len(records)
        K = max(r.grid.n_intervals for r in records)
        m = records[0].brownian_increments.shape[1]
        kdim = records[0].pattern.mark_dim
        times = np.empty((P, K + 1))
        h = np.zeros((P, K))
        dB = np.zeros((P, K, m))
        jump_mask = np.zeros((P, K), dtype=bool)
        marks = np.zeros((P, K, kdim))
        n_nodes = np.empty(P, dtype=int)
        for i, rec in enumerate(records):
            nodes = rec.grid.nodes
            n = nodes.size
            n_nodes[i] = n
            times[i, :n] = nodes
            times[i, n:] = nodes[-1]
            h[i, : n - 1] = np.diff(nodes)
            dB[i, : n - 1] = rec.brownian_increments
            if len(rec.pattern):
                j = rec.jump_nodes - 1
                jump_mask[i, j] = True
                marks[i, j] = rec.pattern.marks
        return cls(tuple(records), times, h, dB, jump_mask, marks, n_nodes)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray  # (P, K + 1)
    states: np.ndarray  # (P, K + 1, d), padded with the terminal state
    left_limits: np.ndarray
    n_nodes: np.ndarray
    blowup_node: np.ndarray  # (P,), -1 when the path stayed finite
    jump_mask: np.ndarray
    marks: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.blowup_node < 0

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]

    def path(self, i: int, grid: TimeGrid, warnings_: tuple[str, ...] = ()) -> CadlagPath:
        n = int(self.n_nodes[i])
        bad = int(self.blowup_node[i])
        keep = n if bad < 0 else bad
        jn = np.flatnonzero(self.jump_mask[i, : n - 1]) + 1
        return CadlagPath(grid, self.states[i, :keep].copy(), self.left_limits[i, :keep].copy(), jn,
                          self.marks[i, jn - 1].copy(), None if bad < 0 else bad, warnings_)


def _compensator_fn(jump: Callable, compensator: LevyMeasureModel, state_independent: bool, d: int):
    nodes, weights = compensator.nodes()
    if weights.size == 0:
        return lambda z: 0.0
    if state_independent:
        vals = np.asarray(jump(np.zeros((1, 1, d)), nodes[None]), dtype=float)
        const = np.einsum("q,pqd->pd", weights, vals)
        return lambda z: const

    def comp(z):
        vals = jump(z[:, None, :], nodes[None])
        return np.einsum("q,pqd->pd", weights, vals)

    return comp


def integrate_batch(coeffs: CoefficientSet, compensator: LevyMeasureModel, z0: np.ndarray,
                    noise: NoiseBatch, decay: np.ndarray | None = None) -> PathBatch:
    """One Euler (or exponential-Euler, when ``decay`` is given) sweep over a batch.

    Per interval: ``z <- decay * (z + drift(z) h + diffusion(z) dB - comp(z) h)``;
    at a spliced jump node additionally ``z <- z + jump(z, mark)``.
    """
    z = np.array(z0, dtype=float, copy=True)
    P, d = z.shape
    if d != coeffs.dimension:
        raise ConfigurationError(f"initial state has dimension {d}, coefficients expect {coeffs.dimension}")
    if noise.dB.shape[2] != coeffs.brownian_dimension:
        raise ConfigurationError(
            f"noise has {noise.dB.shape[2]} Brownian coordinates, coefficients expect {coeffs.brownian_dimension}")
    K = noise.h.shape[1]
    comp = _compensator_fn(coeffs.jump, compensator, coeffs.jump_state_independent, d)
    states = np.empty((P, K + 1, d))
    left = np.empty((P, K + 1, d))
    states[:, 0] = z
    left[:, 0] = z
    bad = np.full(P, -1)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            hk = noise.h[:, k, None]
            active = noise.h[:, k] > 0
            step = z + coeffs.drift(z) * hk + np.einsum("pij,pj->pi", coeffs.diffusion(z), noise.dB[:, k]) \
                - comp(z) * hk
            if decay is not None:
                step = decay[:, k] * step
            z_pre = np.where(active[:, None], step, z)
            z = z_pre.copy()
            idx = np.flatnonzero(noise.jump_mask[:, k])
            if idx.size:
                z[idx] = z_pre[idx] + coeffs.jump(z_pre[idx], noise.marks[idx, k])
            left[:, k + 1] = z_pre
            states[:, k + 1] = z
            newly = (~np.isfinite(z).all(axis=1)) & (bad < 0)
            bad[newly] = k + 1
    return PathBatch(noise.times, states, left, noise.n_nodes, bad, noise.jump_mask, noise.marks)


def _single(coeffs, noise: NoiseRecord, initial, warnings_=()) -> CadlagPath:
    z0 = np.asarray(initial, dtype=float).reshape(1, -1)
    batch = integrate_batch(coeffs, noise.compensator, z0, NoiseBatch.from_records([noise]))
    return batch.path(0, noise.grid, tuple(warnings_))


def solve_strong(coeffs: CoefficientSet, noise: NoiseRecord, initial) -> CadlagPath:
    """Euler-Maruyama path of the full equation on the noise record's spliced grid."""
    return _single(coeffs, noise, initial)


def small_mark_violations(coeffs: CoefficientSet, measure: LevyMeasureModel) -> list[str]:
    """Where ``L1 * |u| < 1`` fails on the measure's support (checked on nodes and box corners)."""
    if coeffs.declared_lipschitz is None or measure.total_mass() == 0:
        return []
    l1 = coeffs.declared_lipschitz[0]
    nodes, _ = measure.nodes()
    probes = [nodes]
    region = getattr(getattr(measure, "base", measure), "region", None)
    if region is not None and not region.is_empty:
        probes += [region.lows, region.highs]
    probes = np.vstack(probes)
    worst = float(np.max(l1 * measure.norm(probes)))
    if worst >= 1.0:
        return [f"L1*|u| reaches {worst:.4g} >= 1 on the jump-only region"]
    return []


def solve_jump_only(coeffs: CoefficientSet, noise: NoiseRecord, initial,
                    region: Region | None = None) -> CadlagPath:
    """Path of the equation without its Brownian part, driven by the jumps in ``region``.

    The grid is left untouched, so removed jump times remain as ordinary nodes
    and the result can be compared node by node with :func:`solve_strong`.
    """
    local = noise.restricted(region)
    notes = small_mark_violations(coeffs, local.compensator)
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return _single(coeffs.without_diffusion(), local, initial, notes)


def skeleton_noise(schedule: Sequence[tuple[float, Sequence[float]]], compensator: LevyMeasureModel,
                   grid: TimeGrid, brownian_dim: int) -> NoiseRecord:
    times = np.array([float(s) for s, _ in schedule])
    if times.size and np.any(np.diff(times) <= 0):
        raise ConfigurationError("skeleton schedule times must be strictly increasing")
    marks = as_marks([np.atleast_1d(np.asarray(u, float)) for _, u in schedule], compensator.mark_dim) \
        if times.size else np.empty((0, compensator.mark_dim))
    if times.size and not np.all(compensator.support_contains(marks)):
        raise ConfigurationError("a skeleton mark lies outside the support of the jump measure")
    spliced = TimeGrid.build(grid.horizon, grid.step, np.concatenate([grid.nodes[1:], times]))
    pattern = MarkedPointPattern(grid.horizon, times, marks, None, compensator.mark_dim)
    return NoiseRecord(spliced, np.zeros((spliced.n_intervals, brownian_dim)), pattern, compensator)


def solve_skeleton(coeffs: CoefficientSet, schedule: Sequence[tuple[float, Sequence[float]]],
                   compensator: LevyMeasureModel, grid: TimeGrid, initial) -> CadlagPath:
    """Deterministic path: compensated drift plus prescribed jumps ``(s_i, u_i)``.

    ``compensator`` is the jump measure restricted to the region in use.
    """
    noise = skeleton_noise(schedule, compensator, grid, coeffs.brownian_dimension)
    return _single(coeffs.without_diffusion(), noise, initial)


# ---------------------------------------------------------------------------
# problems and ensembles


@dataclass(frozen=True)
class InitialLaw:
    kind: str
    mean: np.ndarray
    std: np.ndarray | None = None

    @classmethod
    def dirac(cls, point) -> "InitialLaw":
        return cls("dirac", np.atleast_1d(np.asarray(point, dtype=float)))

    @classmethod
    def gaussian(cls, mean, std) -> "InitialLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape).copy()
        return cls("gaussian", mean, std)

    @property
    def dimension(self) -> int:
        return self.mean.size

    def second_moment(self) -> float:
        extra = 0.0 if self.std is None else float(np.sum(self.std ** 2))
        return float(np.sum(self.mean ** 2)) + extra

    def draw(self, seed: int, stream_ids: np.ndarray) -> np.ndarray:
        stream_ids = np.asarray(stream_ids)
        if self.kind == "dirac":
            return np.tile(self.mean, (stream_ids.size, 1))
        out = np.empty((stream_ids.size, self.mean.size))
        for i, sid in enumerate(stream_ids):
            gen = stream_key(seed, int(sid), Substream.INITIAL_CONDITION).generator()
            out[i] = self.mean + self.std * gen.standard_normal(self.mean.size)
        return out


@dataclass(frozen=True)
class SDEProblem:
    coeffs: CoefficientSet
    intensity: LevyMeasureModel
    initial: InitialLaw
    horizon: float
    step: float
    tilt: Callable | None = None

    def with_horizon(self, horizon: float) -> "SDEProblem":
        return replace(self, horizon=float(horizon))

    def noise(self, seed: int, stream_id: int, extra_times: Sequence[float] = (),
              brownian_dim: int | None = None) -> NoiseRecord:
        m = self.coeffs.brownian_dimension if brownian_dim is None else brownian_dim
        return draw_noise(self.intensity, self.horizon, self.step, m, seed, stream_id,
                          tilt=self.tilt, extra_times=extra_times)

    def noise_batch(self, seed: int, stream_ids: np.ndarray, extra_times: Sequence[float] = ()) -> NoiseBatch:
        return NoiseBatch.from_records([self.noise(seed, int(s), extra_times) for s in stream_ids])


def simulate_block(problem: SDEProblem, seed: int, stream_ids: np.ndarray,
                   extra_times: Sequence[float] = ()) -> tuple[NoiseBatch, PathBatch]:
    noise = problem.noise_batch(seed, stream_ids, extra_times)
    z0 = problem.initial.draw(seed, stream_ids)
    compensator = noise.records[0].compensator
    return noise, integrate_batch(problem.coeffs, compensator, z0, noise)


def terminal_states(problem: SDEProblem, seed: int, n_paths: int, *, block_size: int = DEFAULT_BLOCK_SIZE,
                    workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Terminal states and a finite-path mask for ``n_paths`` independent solutions."""

    def work(ids):
        _, paths = simulate_block(problem, seed, ids)
        return paths.terminal, paths.ok

    parts = run_blocks(n_paths, work, block_size=block_size, workers=workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------------------
# coupled experiments


@dataclass(frozen=True)
class CouplingCurve:
    horizons: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    n_paths: int
    n_failed: int


def _running_sup_at(times: np.ndarray, values: np.ndarray, horizons: np.ndarray) -> np.ndarray:
    """For each row, max of ``values`` over nodes with time <= each horizon. -> (P, H)."""
    out = np.empty((values.shape[0], horizons.size))
    for j, t in enumerate(horizons):
        masked = np.where(times <= t + 1e-15 * max(t, 1.0), values, -np.inf)
        out[:, j] = masked.max(axis=1)
    return out


def coupled_distance_curve(problem: SDEProblem, region: Region | None, horizons: Sequence[float],
                           n_paths: int, seed: int, *, block_size: int = DEFAULT_BLOCK_SIZE,
                           workers: int = 1) -> CouplingCurve:
    """Monte Carlo estimate of E sup_{s<=t} |Z_s - Z^U_s|^2 at each horizon.

    Both solutions share every path's pattern and Brownian increments; the
    jump-only one sees only the marks in ``region``.
    """
    horizons = np.asarray(horizons, dtype=float)
    if np.any(np.diff(horizons) >= 0):
        raise ConfigurationError("horizons must be strictly decreasing")
    prob = problem.with_horizon(float(horizons.max()))
    jump_only = prob.coeffs.without_diffusion()

    def work(ids):
        noise, full = simulate_block(prob, seed, ids)
        local = NoiseBatch.from_records([r.restricted(region) for r in noise.records])
        z0 = prob.initial.draw(seed, ids)
        part = integrate_batch(jump_only, local.records[0].compensator, z0, local)
        diff = np.sum((full.states - part.states) ** 2, axis=2)
        diff_left = np.sum((full.left_limits - part.left_limits) ** 2, axis=2)
        sq = np.maximum(diff, diff_left)
        ok = full.ok & part.ok
        return _running_sup_at(noise.times, sq, horizons)[ok], int((~ok).sum())

    parts = run_blocks(n_paths, work, block_size=block_size, workers=workers)
    sups = np.vstack([p[0] for p in parts])
    n_failed = sum(p[1] for p in parts)
    n_ok = sups.shape[0]
    return CouplingCurve(horizons, sups.mean(axis=0), sups.std(axis=0, ddof=1) / np.sqrt(n_ok),
                         n_ok, n_failed)


def fit_exponential_envelope(horizons, estimates) -> float:
    """Smallest C with C (exp(C t) - 1) >= estimate at every point."""
    best = 0.0
    for t, y in zip(np.asarray(horizons, float), np.asarray(estimates, float)):
        if y <= 0:
            continue
        g = lambda c: c * np.expm1(c * t) - y  # noqa: E731
        hi = 1.0
        while g(hi) < 0:
            hi *= 2.0
        best = max(best, brentq(g, 0.0, hi, xtol=1e-14, rtol=1e-14) * (1 + 1e-12))
    return best


def gronwall_envelope_constant(l1: float, l2: float, mass_u: float, horizon: float,
                               gamma_second_moment: float) -> float:
    """A constant C such that C (exp(C t) - 1) dominates the Gronwall bound on
    E sup |Z - Z^U|^2 implied by the declared Lipschitz and growth constants."""
    T = horizon
    moment = (4 * gamma_second_moment + 4 * (T + 4) * T * l2) * np.exp(4 * (T + 4) * l2 * T)
    a = 16 * l2 * (moment + 1)
    b = 4 * l1 ** 2 * (T + 4 * mass_u)
    return float(max(a / b, b))


@dataclass(frozen=True)
class ConditionedCouplingResult:
    eps: float
    n_accepted: int
    n_draws: int
    acceptance_rate: float
    acceptance_stderr: float
    first_window_rate: float
    first_window_stderr: float
    sup_distance_max: float
    sup_distance_mean: float
    outside_window_max: float
    outside_window_mean: float
    terminal_distance_max: float


def conditioned_coupling_test(coeffs: CoefficientSet, intensity: LevyMeasureModel, region: Region | None,
                              head: tuple[float, Sequence[float]], eps: float, horizon: float,
                              n_accepted: int, seed: int, *, step: float, initial: InitialLaw,
                              min_acceptance: float = 1e-4, draw_batch: int = 4096) -> ConditionedCouplingResult:
    """Condition the jump-only path on its first jump matching ``head`` within ``eps``
    (and on no second jump before ``horizon``) by rejection, then compare it with
    the skeleton path driven by ``head``.

    ``sup_distance_*`` is the sup over every node and left limit in [0, horizon].
    ``outside_window_*`` drops the interval between the two first-jump times,
    where the paths necessarily differ by a whole jump.
    """
    s1, u1 = float(head[0]), np.atleast_1d(np.asarray(head[1], dtype=float))
    if not 0 < s1 <= horizon:
        raise ConfigurationError("the head jump time must lie in (0, horizon]")
    local = intensity.restrict(region)
    if local.total_mass() <= 0 or not np.isfinite(local.total_mass()):
        raise ConfigurationError("the conditioning region needs finite positive mass")

    accepted: list[MarkedPointPattern] = []
    accepted_ids: list[int] = []
    draws = 0
    first_window = 0
    cap = int(np.ceil(2 * n_accepted / min_acceptance)) + 1000
    while len(accepted) < n_accepted:
        for sid in range(draws, draws + draw_batch):
            pat = sample_prm(local, None, horizon, stream_key(seed, sid, Substream.JUMP_TIMES))
            draws += 1
            if len(pat) == 0:
                continue
            tau1, mark1 = pat.times[0], pat.marks[0]
            if 0 < s1 - tau1 < eps and local.norm(u1 - mark1)[0] < eps:
                first_window += 1
                if len(pat) == 1:
                    accepted.append(pat)
                    accepted_ids.append(sid)
                    if len(accepted) == n_accepted:
                        break
        rate = len(accepted) / draws
        if (draws >= 10 / min_acceptance and rate < min_acceptance) or draws >= cap:
            raise AcceptanceRateError(
                f"acceptance rate {rate:.3g} below floor {min_acceptance:g} after {draws} draws; "
                "try a larger eps",
                {"draws": draws, "accepted": len(accepted), "rate": rate, "eps": eps})

    m = coeffs.brownian_dimension
    z_records, g_records = [], []
    for pat in accepted:
        grid = TimeGrid.build(horizon, step, [pat.times[0], s1])
        z_records.append(NoiseRecord(grid, np.zeros((grid.n_intervals, m)), pat, local))
        g_records.append(skeleton_noise([(s1, u1)], local, grid, m))
    ids = np.asarray(accepted_ids)
    z0 = initial.draw(seed, ids)
    plain = coeffs.without_diffusion()
    zb = integrate_batch(plain, local, z0, NoiseBatch.from_records(z_records))
    gb = integrate_batch(plain, local, z0, NoiseBatch.from_records(g_records))

    dist = np.linalg.norm(zb.states - gb.states, axis=2)
    dist_left = np.linalg.norm(zb.left_limits - gb.left_limits, axis=2)
    sup = np.maximum(dist.max(axis=1), dist_left.max(axis=1))
    tau = np.array([p.times[0] for p in accepted])[:, None]
    lo, hi = np.minimum(tau, s1), np.maximum(tau, s1)
    t = zb.times
    right_out = (t < lo) | (t >= hi)
    left_out = (t <= lo) | (t > hi)
    outside = np.maximum(np.where(right_out, dist, 0.0).max(axis=1), np.where(left_out, dist_left, 0.0).max(axis=1))

    n = len(accepted)
    p_acc = n / draws
    p_win = first_window / draws
    return ConditionedCouplingResult(
        eps=float(eps), n_accepted=n, n_draws=draws,
        acceptance_rate=p_acc, acceptance_stderr=float(np.sqrt(p_acc * (1 - p_acc) / draws)),
        first_window_rate=p_win, first_window_stderr=float(np.sqrt(p_win * (1 - p_win) / draws)),
        sup_distance_max=float(sup.max()), sup_distance_mean=float(sup.mean()),
        outside_window_max=float(outside.max()), outside_window_mean=float(outside.mean()),
        terminal_distance_max=float(dist[:, -1].max()),
    )


def first_window_probability(mass: float, s1: float, eps: float) -> float:
    """P(first jump of a rate-``mass`` Poisson process lies in (s1 - eps, s1))."""
    return float(np.exp(-mass * (s1 - eps)) - np.exp(-mass * s1))


def acceptance_probability(mass: float, s1: float, eps: float, horizon: float) -> float:
    """P(exactly one jump in [0, horizon] and it lies in (s1 - eps, s1)), point-mass marks."""
    return float(mass * eps * np.exp(-mass * horizon))
