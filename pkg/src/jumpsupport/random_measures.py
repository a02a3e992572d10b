"""Poisson random measures on time x marks.

Lévy measures are only ever simulated on a finite-mass region; whatever mass
lies outside that region enters through compensator quadrature alone. Marks
are always handled as 2-D arrays of shape ``(n, mark_dim)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import chisquare, poisson

from .errors import ConfigurationError, ModelError, NumericError
from .rng import RngStreamKey, Substream

DEFAULT_GL_NODES = 64


def euclidean_norm(u: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(u), axis=-1)


def as_marks(u, mark_dim: int | None = None) -> np.ndarray:
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if mark_dim in (None, 1) else arr.reshape(1, -1)
    if mark_dim is not None and arr.shape[-1] != mark_dim:
        raise ConfigurationError(f"marks have dimension {arr.shape[-1]}, expected {mark_dim}")
    return arr


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Finite union of closed axis-aligned boxes in mark space."""

    lows: np.ndarray  # (n_boxes, k)
    highs: np.ndarray  # (n_boxes, k)

    def __post_init__(self):
        lows = np.atleast_2d(np.asarray(self.lows, dtype=float))
        highs = np.atleast_2d(np.asarray(self.highs, dtype=float))
        if lows.shape != highs.shape:
            raise ConfigurationError("region box bounds have mismatched shapes")
        if np.any(highs < lows):
            raise ConfigurationError("region box with high < low")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)

    @classmethod
    def boxes(cls, bounds: Sequence) -> "Region":
        """``bounds`` is a list of ``(low, high)`` pairs; scalars give 1-D intervals."""
        lows, highs = [], []
        for lo, hi in bounds:
            lows.append(np.atleast_1d(np.asarray(lo, dtype=float)))
            highs.append(np.atleast_1d(np.asarray(hi, dtype=float)))
        if not lows:
            raise ConfigurationError("use Region.empty(k) for an empty region")
        return cls(np.vstack(lows), np.vstack(highs))

    @classmethod
    def interval(cls, low: float, high: float) -> "Region":
        return cls.boxes([(low, high)])

    @classmethod
    def empty(cls, mark_dim: int = 1) -> "Region":
        return cls(np.empty((0, mark_dim)), np.empty((0, mark_dim)))

    @property
    def mark_dim(self) -> int:
        return self.lows.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.lows.shape[0] == 0

    def contains(self, u) -> np.ndarray:
        u = as_marks(u, self.mark_dim)
        if self.is_empty:
            return np.zeros(u.shape[0], dtype=bool)
        inside = (u[:, None, :] >= self.lows[None]) & (u[:, None, :] <= self.highs[None])
        return inside.all(axis=2).any(axis=1)

    def contains_origin(self) -> bool:
        return bool(self.contains(np.zeros((1, self.mark_dim)))[0])

    def volumes(self) -> np.ndarray:
        return np.prod(self.highs - self.lows, axis=1)

    def intersect(self, other: "Region") -> "Region":
        if other.mark_dim != self.mark_dim:
            raise ConfigurationError("cannot intersect regions of different mark dimension")
        lows, highs = [], []
        for a_lo, a_hi in zip(self.lows, self.highs):
            for b_lo, b_hi in zip(other.lows, other.highs):
                lo, hi = np.maximum(a_lo, b_lo), np.minimum(a_hi, b_hi)
                if np.all(hi > lo):
                    lows.append(lo)
                    highs.append(hi)
        if not lows:
            return Region.empty(self.mark_dim)
        return Region(np.vstack(lows), np.vstack(highs))


@dataclass(frozen=True)
class MarkSpace:
    dimension: int
    truncation_region: Region | None = None
    norm: Callable[[np.ndarray], np.ndarray] = euclidean_norm

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigurationError("mark space dimension must be positive")
        region = self.truncation_region
        if region is not None and not region.is_empty and region.contains_origin():
            raise ConfigurationError("truncation region must exclude the origin")


# ---------------------------------------------------------------------------
# Lévy measures


class LevyMeasureModel:
    """A finite measure on marks with sampling and quadrature.

    Subclasses supply ``_nodes``, ``mass`` and ``_sample``; a ``region``
    argument anywhere below means "restrict first".
    """

    mark_space: MarkSpace

    @property
    def mark_dim(self) -> int:
        return self.mark_space.dimension

    def norm(self, u) -> np.ndarray:
        return self.mark_space.norm(as_marks(u, self.mark_dim))

    # --- to be provided by subclasses
    def restrict(self, region: Region | None) -> "LevyMeasureModel":
        raise NotImplementedError

    def total_mass(self) -> float:
        raise NotImplementedError

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def support_contains(self, u) -> np.ndarray:
        raise NotImplementedError

    def refined(self) -> "LevyMeasureModel":
        """Same measure with twice as many quadrature nodes per axis."""
        return self

    # --- shared behaviour
    def _view(self, region):
        return self if region is None else self.restrict(region)

    def mass(self, region: Region | None = None) -> float:
        return self._view(region).total_mass()

    def sample(self, n: int, rng: np.random.Generator, region: Region | None = None) -> np.ndarray:
        view = self._view(region)
        if n == 0:
            return np.empty((0, self.mark_dim))
        if view.total_mass() <= 0:
            raise ConfigurationError("cannot sample marks from a zero-mass region")
        return view._sample(n, rng)

    def quadrature(self, integrand: Callable, region: Region | None = None):
        nodes, weights = self._view(region).nodes()
        if weights.size == 0:
            probe = np.asarray(integrand(np.zeros((1, self.mark_dim))))
            return np.zeros(probe.shape[1:])
        values = np.asarray(integrand(nodes), dtype=float)
        return np.tensordot(weights, values, axes=(0, 0))

    def second_moment(self, region: Region | None = None) -> float:
        return float(self.quadrature(lambda u: self.norm(u) ** 2, region))

    def tilted(self, lambda_fn: Callable) -> "TiltedLevyMeasure":
        return TiltedLevyMeasure(self, lambda_fn)


class DiscreteLevyMeasure(LevyMeasureModel):
    """Finite sum of weighted point masses; quadrature is exact summation."""

    def __init__(self, atoms, weights, norm: Callable = euclidean_norm):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if atoms.shape[0] != weights.shape[0]:
            raise ConfigurationError("atoms and weights differ in length")
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise ConfigurationError("atom weights must be finite and nonnegative")
        keep = weights > 0
        atoms, weights = atoms[keep], weights[keep]
        mark_dim = atoms.shape[1] if atoms.ndim == 2 and atoms.shape[1] else 1
        atoms = atoms.reshape(-1, mark_dim)
        if atoms.shape[0] and np.any(norm(atoms) <= 0):
            raise ConfigurationError("an atom sits at the origin; the mark region must exclude 0")
        self.atoms = atoms
        self.weights = weights
        self.mark_space = MarkSpace(mark_dim, None, norm)

    @classmethod
    def empty(cls, mark_dim: int = 1) -> "DiscreteLevyMeasure":
        return cls(np.empty((0, mark_dim)), np.empty(0))

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def nodes(self):
        return self.atoms, self.weights

    def restrict(self, region):
        if region is None:
            return self
        keep = region.contains(self.atoms) if self.atoms.shape[0] else np.zeros(0, dtype=bool)
        return DiscreteLevyMeasure(
            self.atoms[keep].reshape(-1, self.mark_dim), self.weights[keep], self.mark_space.norm
        )

    def _sample(self, n, rng):
        idx = rng.choice(self.atoms.shape[0], size=n, p=self.weights / self.weights.sum())
        return self.atoms[idx]

    def support_contains(self, u) -> np.ndarray:
        u = as_marks(u, self.mark_dim)
        if self.atoms.shape[0] == 0:
            return np.zeros(u.shape[0], dtype=bool)
        return np.any(np.all(u[:, None, :] == self.atoms[None], axis=2), axis=1)

    def __repr__(self):
        return f"DiscreteLevyMeasure(n_atoms={self.atoms.shape[0]}, mass={self.total_mass():g})"


class UniformBoxLevyMeasure(LevyMeasureModel):
    """Constant density on a union of disjoint boxes, Gauss-Legendre quadrature per box."""

    def __init__(self, region: Region, total_mass: float | None = None, *, density: float | None = None,
                 n_nodes: int = DEFAULT_GL_NODES, norm: Callable = euclidean_norm):
        if (total_mass is None) == (density is None):
            raise ConfigurationError("give exactly one of total_mass or density")
        volumes = region.volumes()
        if density is None:
            if not np.isfinite(total_mass) or total_mass < 0:
                raise ConfigurationError(f"total mass must be finite and nonnegative, got {total_mass}")
            vol = volumes.sum()
            density = total_mass / vol if vol > 0 else 0.0
        if not np.isfinite(density) or density < 0:
            raise ConfigurationError(f"density must be finite and nonnegative, got {density}")
        _check_disjoint(region)
        self.mark_space = MarkSpace(region.mark_dim, region, norm)
        self.region = region
        self.density = float(density)
        self.n_nodes = int(n_nodes)
        self._cache = None

    def total_mass(self) -> float:
        return float(self.density * self.region.volumes().sum())

    def nodes(self):
        if self._cache is None:
            x, w = np.polynomial.legendre.leggauss(self.n_nodes)
            k = self.mark_dim
            all_nodes, all_weights = [], []
            for lo, hi in zip(self.region.lows, self.region.highs):
                half = (hi - lo) / 2.0
                mid = (hi + lo) / 2.0
                grids = np.meshgrid(*([x] * k), indexing="ij")
                wgrids = np.meshgrid(*([w] * k), indexing="ij")
                pts = np.stack([g.reshape(-1) for g in grids], axis=1) * half + mid
                wts = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=1), axis=1) * np.prod(half)
                all_nodes.append(pts)
                all_weights.append(wts * self.density)
            if all_nodes:
                self._cache = (np.vstack(all_nodes), np.concatenate(all_weights))
            else:
                self._cache = (np.empty((0, k)), np.empty(0))
        return self._cache

    def restrict(self, region):
        if region is None:
            return self
        return UniformBoxLevyMeasure(self.region.intersect(region), density=self.density,
                                     n_nodes=self.n_nodes, norm=self.mark_space.norm)

    def refined(self):
        return UniformBoxLevyMeasure(self.region, density=self.density, n_nodes=2 * self.n_nodes,
                                     norm=self.mark_space.norm)

    def _sample(self, n, rng):
        vols = self.region.volumes()
        box = rng.choice(vols.size, size=n, p=vols / vols.sum())
        unit = rng.random((n, self.mark_dim))
        lo, hi = self.region.lows[box], self.region.highs[box]
        return lo + unit * (hi - lo)

    def support_contains(self, u) -> np.ndarray:
        return self.region.contains(u)

    def __repr__(self):
        return f"UniformBoxLevyMeasure(boxes={self.region.lows.shape[0]}, mass={self.total_mass():g})"


def _check_disjoint(region: Region):
    lows, highs = region.lows, region.highs
    for i in range(lows.shape[0]):
        for j in range(i + 1, lows.shape[0]):
            if np.all(np.minimum(highs[i], highs[j]) > np.maximum(lows[i], lows[j])):
                raise ConfigurationError("region boxes overlap; mass would be double counted")


class TiltedLevyMeasure(LevyMeasureModel):
    """The measure lambda(u) nu(du): compensator of a thinned pattern."""

    def __init__(self, base: LevyMeasureModel, lambda_fn: Callable):
        self.base = base
        self.lambda_fn = lambda_fn
        self.mark_space = base.mark_space

    def total_mass(self) -> float:
        _, w = self.nodes()
        return float(w.sum())

    def nodes(self):
        nodes, weights = self.base.nodes()
        if weights.size == 0:
            return nodes, weights
        return nodes, weights * check_tilt(self.lambda_fn, nodes)

    def restrict(self, region):
        if region is None:
            return self
        return TiltedLevyMeasure(self.base.restrict(region), self.lambda_fn)

    def refined(self):
        return TiltedLevyMeasure(self.base.refined(), self.lambda_fn)

    def _sample(self, n, rng):
        out = np.empty((0, self.mark_dim))
        while out.shape[0] < n:
            cand = self.base.sample(max(2 * (n - out.shape[0]), 16), rng)
            keep = rng.random(cand.shape[0]) < check_tilt(self.lambda_fn, cand)
            out = np.vstack([out, cand[keep]])
        return out[:n]

    def support_contains(self, u) -> np.ndarray:
        return self.base.support_contains(u)


def check_tilt(lambda_fn: Callable, marks: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Evaluate a tilt at marks, insisting on values in (margin, 1 - margin)."""
    values = np.asarray(lambda_fn(marks), dtype=float).reshape(-1)
    if margin > 0:
        bad = ~((values >= margin) & (values <= 1.0 - margin))
    else:
        bad = ~((values > 0.0) & (values < 1.0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ModelError(f"tilt value {values[i]!r} at mark {marks[i].tolist()} is outside "
                         f"({'[' if margin else '('}{margin}, {1 - margin}{']' if margin else ')'}")
    return values


# ---------------------------------------------------------------------------
# point patterns


@dataclass(frozen=True)
class MarkedPointPattern:
    horizon: float
    times: np.ndarray
    marks: np.ndarray
    region: Region | None = None
    mark_dim: int = field(default=1)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        marks = np.asarray(self.marks, dtype=float).reshape(times.size, -1) if times.size else \
            np.empty((0, self.mark_dim))
        if times.size and np.any(np.diff(times) <= 0):
            raise ConfigurationError("event times must be strictly increasing")
        if times.size and (times[0] <= 0 or times[-1] > self.horizon):
            raise ConfigurationError("event times must lie in (0, horizon]")
        if self.region is not None and times.size and not np.all(self.region.contains(marks)):
            raise ConfigurationError("a mark lies outside the pattern's region")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "mark_dim", marks.shape[1] if times.size else self.mark_dim)

    def __len__(self):
        return self.times.size

    def restrict(self, region: Region | None) -> "MarkedPointPattern":
        if region is None:
            return self
        keep = region.contains(self.marks) if len(self) else np.zeros(0, dtype=bool)
        return MarkedPointPattern(self.horizon, self.times[keep], self.marks[keep], region, self.mark_dim)

    def until(self, t: float) -> "MarkedPointPattern":
        keep = self.times <= t
        return MarkedPointPattern(t, self.times[keep], self.marks[keep], self.region, self.mark_dim)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"mark_{i + 1}" for i in range(self.mark_dim)])
            for t, u in zip(self.times, self.marks):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in u])


def _validated_mass(intensity: LevyMeasureModel, region: Region | None) -> float:
    m = intensity.mass(region)
    if not np.isfinite(m) or m < 0:
        raise ConfigurationError(f"region mass must be finite and nonnegative, got {m}")
    return m


def sample_prm(intensity: LevyMeasureModel, region: Region | None, horizon: float,
               key: RngStreamKey) -> MarkedPointPattern:
    """Sample a Poisson random measure with intensity dt x nu restricted to ``region``."""
    if not horizon > 0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    mass = _validated_mass(intensity, region)
    times_rng = key.with_substream(Substream.JUMP_TIMES).generator()
    n = int(times_rng.poisson(horizon * mass)) if mass > 0 else 0
    # 1 - U maps [0, 1) onto (0, 1]
    times = horizon * (1.0 - times_rng.random(n))
    times.sort()
    while n > 1 and np.any(np.diff(times) == 0):
        dup = np.flatnonzero(np.diff(times) == 0) + 1
        times[dup] = horizon * (1.0 - times_rng.random(dup.size))
        times.sort()
    marks = intensity.sample(n, key.with_substream(Substream.JUMP_MARKS).generator(), region)
    return MarkedPointPattern(horizon, times, marks, region, intensity.mark_dim)


def thin_to_tilted(pattern: MarkedPointPattern, lambda_fn: Callable,
                   key: RngStreamKey) -> MarkedPointPattern:
    """Keep each event independently with probability ``lambda_fn(mark)``."""
    if len(pattern) == 0:
        return pattern
    probs = check_tilt(lambda_fn, pattern.marks)
    u = key.with_substream(Substream.THINNING).generator().random(len(pattern))
    keep = u < probs
    return MarkedPointPattern(pattern.horizon, pattern.times[keep], pattern.marks[keep],
                              pattern.region, pattern.mark_dim)


def midpoint_nodes(nodes: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints and widths of the grid cells covering [0, t]."""
    nodes = np.asarray(nodes, dtype=float)
    cut = nodes[nodes < t]
    edges = np.append(cut, t) if cut.size else np.array([0.0, t])
    return 0.5 * (edges[:-1] + edges[1:]), np.diff(edges)


def compensated_integral(pattern: MarkedPointPattern, integrand: Callable,
                         compensator: LevyMeasureModel, horizon_t: float,
                         time_nodes: np.ndarray | None = None) -> np.ndarray:
    """Integral of ``integrand(t, u)`` against N - dt x compensator over (0, horizon_t].

    The time integral of the compensator part uses the composite midpoint rule
    on ``time_nodes`` (default: 64 uniform cells).
    """
    if horizon_t > pattern.horizon:
        raise ConfigurationError("integration horizon exceeds the pattern horizon")
    if time_nodes is None:
        time_nodes = np.linspace(0.0, horizon_t, 65)
    events = pattern.times <= horizon_t
    ev_t, ev_u = pattern.times[events], pattern.marks[events]

    if ev_t.size:
        ev_vals = np.asarray(integrand(ev_t, ev_u), dtype=float)
        bad = ~np.isfinite(ev_vals.reshape(ev_t.size, -1)).all(axis=1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite integrand at event time={ev_t[i]!r}, mark={ev_u[i].tolist()}")
        jump_sum = ev_vals.sum(axis=0)
    else:
        jump_sum = None

    mids, widths = midpoint_nodes(time_nodes, horizon_t)
    qnodes, qweights = compensator.nodes()
    if qweights.size:
        s = np.repeat(mids, qnodes.shape[0])
        u = np.tile(qnodes, (mids.size, 1))
        vals = np.asarray(integrand(s, u), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NumericError("non-finite integrand at a quadrature node")
        vals = vals.reshape((mids.size, qnodes.shape[0]) + vals.shape[1:])
        per_time = np.tensordot(qweights, vals, axes=(0, 1))
        drift = np.tensordot(widths, per_time, axes=(0, 0))
    else:
        probe = np.asarray(integrand(np.zeros(1), np.zeros((1, pattern.mark_dim))), dtype=float)
        drift = np.zeros(probe.shape[1:])

    if jump_sum is None:
        jump_sum = np.zeros_like(drift)
    return np.asarray(jump_sum - drift)


def poisson_chi_square(counts, mean: float, min_expected: float = 5.0):
    """Chi-square goodness of fit of integer counts against Poisson(mean).

    Cells are 0..k with the upper tail merged into the last cell, and sparse
    cells merged until every expected count reaches ``min_expected``.
    Returns ``(statistic, p_value, observed, expected)``.
    """
    counts = np.asarray(counts, dtype=int)
    n = counts.size
    kmax = int(max(counts.max(initial=0), poisson.ppf(1 - 1e-9, mean)))
    observed = np.bincount(counts, minlength=kmax + 1)[: kmax + 1].astype(float)
    observed[-1] += np.sum(counts > kmax)
    probs = poisson.pmf(np.arange(kmax + 1), mean)
    probs[-1] += poisson.sf(kmax, mean)
    expected = n * probs
    obs_m, exp_m = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_m.append(acc_o)
            exp_m.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if obs_m:
            obs_m[-1] += acc_o
            exp_m[-1] += acc_e
        else:
            obs_m.append(acc_o)
            exp_m.append(acc_e)
    obs_m, exp_m = np.array(obs_m), np.array(exp_m)
    if obs_m.size < 2:
        return 0.0, 1.0, obs_m, exp_m
    stat, p = chisquare(obs_m, exp_m * obs_m.sum() / exp_m.sum())
    return float(stat), float(p), obs_m, exp_m
