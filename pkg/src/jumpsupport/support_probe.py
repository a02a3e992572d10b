"""Ball-hit estimates for the law of Z_t with exact binomial bounds.

Sampling can only ever give evidence: a positive lower bound says the ball
carries mass, zero hits only say the mass is below the reported upper bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import beta

from .ensemble import DEFAULT_BLOCK_SIZE
from .errors import ConfigurationError
from .jump_sde import SDEProblem, terminal_states
from .random_measures import LevyMeasureModel
from .rng import RngStreamKey

DEFAULT_ALPHA = 0.001
DEFAULT_RADIUS = 0.25
MAX_FAILURE_FRACTION = 0.01


@dataclass(frozen=True)
class BallQuery:
    center: np.ndarray
    radius: float
    time: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ConfigurationError(f"ball radius must be positive, got {self.radius}")
        if self.time < 0:
            raise ConfigurationError("query time must be nonnegative")

    def contains(self, states: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(states) - self.center, axis=1) < self.radius


def clopper_pearson(hits: int, trials: int, alpha: float) -> tuple[float, float]:
    """Exact two-sided binomial interval at confidence level 1 - alpha."""
    if trials <= 0 or not 0 <= hits <= trials:
        raise ConfigurationError(f"need 0 <= hits <= trials and trials > 0, got {hits}/{trials}")
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    lo = 0.0 if hits == 0 else float(beta.ppf(alpha / 2, hits, trials - hits + 1))
    hi = 1.0 if hits == trials else float(beta.ppf(1 - alpha / 2, hits + 1, trials - hits))
    return lo, hi


@dataclass(frozen=True)
class HitEstimate:
    query: BallQuery
    hits: int
    trials: int
    point_estimate: float
    cp_lower: float
    cp_upper: float
    alpha: float
    n_failed: int = 0

    @property
    def valid(self) -> bool:
        total = self.trials + self.n_failed
        return total > 0 and self.n_failed <= MAX_FAILURE_FRACTION * total

    @property
    def verdict(self) -> str:
        if not self.valid:
            return "invalid: too many solver failures"
        if self.cp_lower > 0:
            return "support evidence"
        return "no evidence at resolution"


def _estimate(query: BallQuery, terminal: np.ndarray, ok: np.ndarray, alpha: float) -> HitEstimate:
    good = terminal[ok]
    hits = int(query.contains(good).sum()) if good.size else 0
    trials = int(ok.sum())
    lo, hi = clopper_pearson(hits, trials, alpha) if trials else (0.0, 1.0)
    return HitEstimate(query, hits, trials, hits / trials if trials else float("nan"), lo, hi, alpha,
                       int((~ok).sum()))


def scan_support(problem: SDEProblem, t: float, centers, radius: float, n_paths: int, alpha: float,
                 seed: int, *, block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> list[HitEstimate]:
    """One shared ensemble of terminal states, tested against every ball."""
    if n_paths < 100:
        raise ConfigurationError("at least 100 paths are required for a hit estimate")
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers.reshape(-1, problem.coeffs.dimension)
    if t <= 0:
        terminal = problem.initial.draw(seed, np.arange(n_paths))
        ok = np.ones(n_paths, dtype=bool)
    else:
        terminal, ok = terminal_states(problem.with_horizon(t), seed, n_paths,
                                       block_size=block_size, workers=workers)
    return [_estimate(BallQuery(c, radius, t), terminal, ok, alpha) for c in centers]


def estimate_hit_probability(problem: SDEProblem, query: BallQuery, n_paths: int, alpha: float, seed: int,
                             **kwargs) -> HitEstimate:
    return scan_support(problem, query.time, query.center[None, :], query.radius, n_paths, alpha, seed,
                        **kwargs)[0]


def grid_centers(low: float, high: float, step: float, dimension: int = 1) -> np.ndarray:
    axis = low + step * np.arange(int(round((high - low) / step)) + 1)
    mesh = np.meshgrid(*([axis] * dimension), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def write_scan_csv(estimates: Sequence[HitEstimate], path: str | Path) -> None:
    d = estimates[0].query.center.size if estimates else 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"center_{i + 1}" for i in range(d)] + ["radius", "t", "hits", "trials",
                                                                 "cp_lower", "cp_upper"])
        for e in estimates:
            writer.writerow([repr(float(c)) for c in e.query.center]
                            + [repr(float(e.query.radius)), repr(float(e.query.time)), e.hits, e.trials,
                               repr(e.cp_lower), repr(e.cp_upper)])


@dataclass(frozen=True)
class ReachabilityResult:
    found: bool
    witness: np.ndarray | None
    draws: int
    min_distance: float

    @property
    def summary(self) -> str:
        if self.found:
            return f"witness mark {self.witness.tolist()} after {self.draws} draws"
        # a miss only bounds what the sampler saw, it does not rule the ball out
        return f"no witness in {self.draws} draws (closest distance {self.min_distance:.4g}); not a disproof"


def check_reachability(jump: Callable, intensity: LevyMeasureModel, z, center, radius: float,
                       n_samples: int, key: RngStreamKey) -> ReachabilityResult:
    """Search ν-distributed marks ``u`` for one with ``jump(z, u)`` inside the ball."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    center = np.atleast_1d(np.asarray(center, dtype=float))
    marks = intensity.sample(n_samples, key.generator())
    landed = np.asarray(jump(np.broadcast_to(z, (n_samples, z.size)), marks), dtype=float)
    dist = np.linalg.norm(landed - center, axis=1)
    inside = np.flatnonzero(dist < radius)
    if inside.size:
        i = int(inside[0])
        return ReachabilityResult(True, marks[i], i + 1, float(dist[i]))
    return ReachabilityResult(False, None, n_samples, float(max(dist.min() - radius, 0.0)))
