"""Girsanov log-densities along simulated paths and the path-independence checks.

The evolution equation here is

    dX = (A X + b(X)) dt + sigma(X) dW + int f(X-, u) Ñ_λ(dt, du)

with N_λ the λ-thinned jump measure (compensator λ(u) dt ν(du)). Its density

    log Λ_t = -int <ρ(X), dW> - 1/2 int |ρ(X)|² ds
              - sum log λ(u_i) - t int (1 - λ) dν

is accumulated term by term. When ``b = σρ``, ``ρ = σ*∇v``,
``λ(u) = exp(v(x + f(x, u)) - v(x))`` and the residual returned by
:func:`pide_residual` vanishes, ``log Λ_t = v(X_0) - v(X_t)``. In general the
difference is the time integral of that residual along the path, which is
what :func:`residual_corrected_gap` measures.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ensemble import DEFAULT_BLOCK_SIZE, run_blocks
from .errors import ConfigurationError, ModelError, NumericError, QuadratureWarning
from .jump_sde import CoefficientSet, InitialLaw, NoiseBatch, PathBatch, SDEProblem, simulate_block
from .random_measures import LevyMeasureModel, check_tilt

DEFAULT_LAMBDA_MARGIN = 1e-6
QUADRATURE_RTOL = 1e-6


# ---------------------------------------------------------------------------
# scalar fields


@dataclass(frozen=True)
class ScalarField:
    """A C² function on R^d with its gradient and Hessian, all vectorised over leading axes."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    dimension: int
    name: str = "v"

    def hessian_quadratic_form(self, x, sigma) -> np.ndarray:
        """Tr(σ σ* ∇²v(x)) for σ of shape (..., d, m)."""
        h = self.hessian(np.asarray(x, dtype=float))
        return np.einsum("...ij,...jk,...ik->...", h, sigma, sigma)

    @classmethod
    def constant(cls, c: float, dimension: int) -> "ScalarField":
        def value(x):
            return np.full(np.shape(x)[:-1], float(c))

        def gradient(x):
            return np.zeros(np.shape(x))

        def hessian(x):
            return np.zeros(np.shape(x) + (dimension,))

        return cls(value, gradient, hessian, dimension, "constant")

    @classmethod
    def linear(cls, slope, offset: float = 0.0) -> "ScalarField":
        slope = np.atleast_1d(np.asarray(slope, dtype=float))
        d = slope.size

        def value(x):
            return np.asarray(x, dtype=float) @ slope + offset

        def gradient(x):
            return np.broadcast_to(slope, np.shape(x)).copy()

        def hessian(x):
            return np.zeros(np.shape(x) + (d,))

        return cls(value, gradient, hessian, d, "linear")

    @classmethod
    def quadratic(cls, matrix, slope=None, offset: float = 0.0) -> "ScalarField":
        """v(x) = x·Qx / 2 + c·x + k with Q symmetrised."""
        q = np.atleast_2d(np.asarray(matrix, dtype=float))
        q = 0.5 * (q + q.T)
        d = q.shape[0]
        c = np.zeros(d) if slope is None else np.atleast_1d(np.asarray(slope, dtype=float))

        def value(x):
            x = np.asarray(x, dtype=float)
            return 0.5 * np.einsum("...i,ij,...j->...", x, q, x) + x @ c + offset

        def gradient(x):
            return np.asarray(x, dtype=float) @ q + c

        def hessian(x):
            return np.broadcast_to(q, np.shape(x) + (d,)).copy()

        return cls(value, gradient, hessian, d, "quadratic")

    def check_derivatives(self, points, step: float = 1e-5) -> None:
        """Compare gradient and Hessian with central differences; raise on mismatch."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.dimension
        eye = np.eye(d) * step
        grad = self.gradient(pts)
        fd_grad = np.stack([(self.value(pts + e) - self.value(pts - e)) / (2 * step) for e in eye], axis=-1)
        tol = np.maximum(1e-6, 1e-4 * np.linalg.norm(grad, axis=-1, keepdims=True))
        if np.any(np.abs(grad - fd_grad) > tol):
            raise ModelError(f"gradient of {self.name} disagrees with finite differences")
        hess = self.hessian(pts)
        fd_hess = np.stack([(self.gradient(pts + e) - self.gradient(pts - e)) / (2 * step) for e in eye], axis=-1)
        tol = np.maximum(1e-6, 1e-4 * np.linalg.norm(hess.reshape(len(pts), -1), axis=-1))[:, None, None]
        if np.any(np.abs(hess - fd_hess) > tol):
            raise ModelError(f"Hessian of {self.name} disagrees with finite differences")


# ---------------------------------------------------------------------------
# scenario


def _as_operator(A, dimension: int) -> np.ndarray:
    """A matrix, or a spectrum-like object with ``eigenvalues`` giving diag(-λ_j)."""
    if A is None:
        return np.zeros((dimension, dimension))
    eig = getattr(A, "eigenvalues", None)
    if eig is not None:
        return -np.diag(np.asarray(eig, dtype=float)[:dimension])
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (dimension, dimension):
        raise ConfigurationError(f"operator has shape {A.shape}, expected {(dimension, dimension)}")
    return A


@dataclass(frozen=True)
class EvolutionScenario:
    """Finite-dimensional evolution equation together with the density ingredients ρ, λ and v."""

    dimension: int
    b: Callable
    sigma: Callable
    f: Callable
    intensity: LevyMeasureModel
    lambda_fn: Callable
    rho: Callable
    initial: InitialLaw
    horizon: float
    step: float
    v: ScalarField | None = None
    A: np.ndarray | None = None
    brownian_dimension: int | None = None
    lambda_margin: float = DEFAULT_LAMBDA_MARGIN
    rho_bound: float | None = None
    jump_state_independent: bool = False

    @property
    def operator(self) -> np.ndarray:
        return _as_operator(self.A, self.dimension)

    def coefficients(self) -> CoefficientSet:
        A = self.operator
        b = self.b

        if np.any(A):
            def drift(x):
                return x @ A.T + b(x)
        else:
            drift = b
        return CoefficientSet(self.dimension, drift, self.sigma, self.f,
                              brownian_dimension=self.brownian_dimension,
                              jump_state_independent=self.jump_state_independent)

    def problem(self) -> SDEProblem:
        return SDEProblem(self.coefficients(), self.intensity, self.initial, self.horizon, self.step,
                          tilt=self.lambda_fn)

    def with_step(self, step: float) -> "EvolutionScenario":
        return replace(self, step=float(step))

    def validate(self, probe_points=None) -> None:
        nodes, weights = self.intensity.nodes()
        if weights.size:
            check_tilt(self.lambda_fn, nodes, self.lambda_margin)
        if self.v is not None:
            if probe_points is None:
                probe_points = np.linspace(-2.0, 2.0, 9)[:, None] * np.ones(self.dimension)
            self.v.check_derivatives(probe_points)


# ---------------------------------------------------------------------------
# log-density accumulation


@dataclass(frozen=True)
class DensityRecord:
    times: np.ndarray
    terms: np.ndarray  # (n_nodes, 4) running sums
    flagged_node: int | None = None

    @property
    def log_density(self) -> np.ndarray:
        t = self.terms
        return -t[:, 0] - 0.5 * t[:, 1] - t[:, 2] - t[:, 3]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "log_density", "term1", "term2", "term3", "term4"])
            for t, ld, row in zip(self.times, self.log_density, self.terms):
                writer.writerow([repr(float(t)), repr(float(ld))] + [repr(float(x)) for x in row])


def _jump_compensator_rate(lambda_fn: Callable, intensity: LevyMeasureModel, margin: float) -> float:
    """int (1 - λ) dν."""
    nodes, weights = intensity.nodes()
    if weights.size == 0:
        return 0.0
    lam = check_tilt(lambda_fn, nodes, margin)
    return float(np.dot(weights, 1.0 - lam))


def log_density_terms(paths: PathBatch, noise: NoiseBatch, rho: Callable, lambda_fn: Callable,
                      intensity: LevyMeasureModel, *, margin: float = 0.0,
                      omit_compensator: bool = False) -> np.ndarray:
    """Running term sums ``(P, K + 1, 4)`` for a batch; ρ is taken at left endpoints."""
    P, K1, _ = paths.states.shape
    K = K1 - 1
    terms = np.zeros((P, K1, 4))
    rate = 0.0 if omit_compensator else _jump_compensator_rate(lambda_fn, intensity, margin)
    x_left = paths.states[:, :K]
    r = np.asarray(rho(x_left), dtype=float)
    inc = np.zeros((P, K, 4))
    inc[:, :, 0] = np.einsum("pkm,pkm->pk", r, noise.dB)
    inc[:, :, 1] = np.einsum("pkm,pkm->pk", r, r) * noise.h
    pi, ki = np.nonzero(noise.jump_mask)
    if pi.size:
        inc[pi, ki, 2] = np.log(check_tilt(lambda_fn, noise.marks[pi, ki], margin))
    inc[:, :, 3] = rate * noise.h
    np.cumsum(inc, axis=1, out=terms[:, 1:])
    return terms


def accumulate_log_density(path, noise, rho: Callable, lambda_fn: Callable, intensity: LevyMeasureModel,
                           *, omit_compensator: bool = False) -> DensityRecord:
    """Density record for a single :class:`CadlagPath` and its :class:`NoiseRecord`.

    ``intensity`` is the untilted ν; the jumps in ``noise`` are those of N_λ.
    """
    if path.grid.nodes.size != noise.grid.nodes.size or np.any(path.grid.nodes != noise.grid.nodes):
        raise ConfigurationError("path and noise are on different grids")
    batch = NoiseBatch.from_records([noise])
    n = path.states.shape[0]
    pb = PathBatch(batch.times, path.states[None], path.left_limits[None], np.array([n]),
                   np.array([-1]), batch.jump_mask, batch.marks)
    if n < batch.times.shape[1]:
        raise NumericError(f"path was truncated at node {path.blowup_node}")
    terms = log_density_terms(pb, batch, rho, lambda_fn, intensity, omit_compensator=omit_compensator)[0]
    bad = np.flatnonzero(~np.isfinite(terms).all(axis=1))
    return DensityRecord(path.times.copy(), terms, int(bad[0]) if bad.size else None)


# ---------------------------------------------------------------------------
# martingale check


@dataclass(frozen=True)
class MartingaleResult:
    times: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    n_paths: int

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.means - 1.0) <= 3.0 * self.stderrs))


def _node_values(times: np.ndarray, values: np.ndarray, at: np.ndarray) -> np.ndarray:
    """values[:, j] at the node equal to each requested time (rows may have different grids)."""
    out = np.empty((values.shape[0], at.size))
    for j, t in enumerate(at):
        idx = np.argmax(times >= t - 1e-12 * max(t, 1.0), axis=1)
        out[:, j] = values[np.arange(values.shape[0]), idx]
    return out


def _check_rho_bound(scenario: EvolutionScenario, paths: PathBatch) -> None:
    r = np.asarray(scenario.rho(paths.states), dtype=float)
    norms = np.linalg.norm(r, axis=-1)
    if not np.all(np.isfinite(norms)):
        raise ModelError("ρ is non-finite along simulated paths")
    if scenario.rho_bound is not None and norms.max() > scenario.rho_bound:
        raise ModelError(f"|ρ| reached {norms.max():.4g} on a path, above the declared bound {scenario.rho_bound}")


def martingale_check(scenario: EvolutionScenario, n_paths: int, times: Sequence[float], seed: int, *,
                     omit_compensator: bool = False, block_size: int = DEFAULT_BLOCK_SIZE,
                     workers: int = 1) -> MartingaleResult:
    """Monte Carlo mean and standard error of Λ_t at each requested time."""
    at = np.asarray(times, dtype=float)
    if np.any(at <= 0) or np.any(at > scenario.horizon):
        raise ConfigurationError("martingale probe times must lie in (0, horizon]")
    scenario.validate()
    problem = scenario.problem()

    def work(ids):
        noise, paths = simulate_block(problem, seed, ids, extra_times=at)
        _check_rho_bound(scenario, paths)
        terms = log_density_terms(paths, noise, scenario.rho, scenario.lambda_fn, scenario.intensity,
                                  margin=scenario.lambda_margin, omit_compensator=omit_compensator)
        ld = -terms[..., 0] - 0.5 * terms[..., 1] - terms[..., 2] - terms[..., 3]
        return np.exp(_node_values(noise.times, ld, at))

    lam = np.vstack(run_blocks(n_paths, work, block_size=block_size, workers=workers))
    se = lam.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.zeros(at.size)
    return MartingaleResult(at, lam.mean(axis=0), se, n_paths)


# ---------------------------------------------------------------------------
# residual of the integro-differential condition


def pide_terms(v: ScalarField, A, sigma: Callable, f: Callable, intensity: LevyMeasureModel, x,
               *, check_quadrature: bool = True) -> dict:
    """The four summands of the residual at ``x`` with ρ = σ*∇v substituted.

    Keys: ``trace``, ``rho_sq``, ``drift`` (⟨x, A∇v⟩) and ``jump``; plus
    ``quadrature_converged``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    Aop = _as_operator(A, d)
    g = v.gradient(x)
    s = np.asarray(sigma(x), dtype=float)
    rho = s.T @ g
    trace = 0.5 * float(v.hessian_quadratic_form(x, s))
    rho_sq = 0.5 * float(rho @ rho)
    drift = float(x @ (Aop @ g))

    def jump_integrand(u):
        fx = np.asarray(f(np.broadcast_to(x, (u.shape[0], d)), u), dtype=float)
        dv = v.value(x + fx) - v.value(x)
        e = np.exp(dv)
        return e - 1.0 - (fx @ g) * e

    jump = float(intensity.quadrature(jump_integrand))
    converged = True
    if check_quadrature:
        finer = intensity.refined()
        if finer is not intensity:
            jump_fine = float(finer.quadrature(jump_integrand))
            scale = max(abs(jump_fine), 1e-300)
            if abs(jump_fine - jump) > QUADRATURE_RTOL * scale and abs(jump_fine - jump) > 1e-14:
                converged = False
                warnings.warn(f"mark quadrature moved by {abs(jump_fine - jump):.3g} on node doubling at x={x.tolist()}",
                              QuadratureWarning, stacklevel=2)
    return {"trace": trace, "rho_sq": rho_sq, "drift": drift, "jump": jump, "quadrature_converged": converged}


def pide_residual(v: ScalarField, A, sigma: Callable, f: Callable, intensity: LevyMeasureModel, x,
                  **kwargs) -> float:
    t = pide_terms(v, A, sigma, f, intensity, x, **kwargs)
    return t["trace"] + t["rho_sq"] + t["drift"] + t["jump"]


def _pide_residual_batch(v: ScalarField, Aop: np.ndarray, sigma: Callable, f: Callable,
                         intensity: LevyMeasureModel, x: np.ndarray) -> np.ndarray:
    """Vectorised residual over ``x`` of shape (n, d)."""
    g = v.gradient(x)
    s = np.asarray(sigma(x), dtype=float)
    rho = np.einsum("nij,ni->nj", s, g)
    out = 0.5 * v.hessian_quadratic_form(x, s) + 0.5 * np.sum(rho ** 2, axis=1) + np.einsum("ni,ij,nj->n", x, Aop, g)
    nodes, weights = intensity.nodes()
    if weights.size:
        fx = np.asarray(f(x[:, None, :], nodes[None]), dtype=float)
        dv = v.value(x[:, None, :] + fx) - v.value(x)[:, None]
        e = np.exp(dv)
        out = out + (e - 1.0 - np.einsum("nqi,ni->nq", fx, g) * e) @ weights
    return out


# ---------------------------------------------------------------------------
# consistency of the three conditions


@dataclass
class ConsistencyReport:
    e1_max_residual: float
    e1_argmax: list
    e2_max_residual: float
    e2_argmax: list
    e3_residuals: list
    sample_points: list
    e2_x_spread: float
    structural_violations: list = field(default_factory=list)

    @property
    def e3_max_residual(self) -> float:
        return max((abs(r) for _, r in self.e3_residuals), default=0.0)

    @property
    def e3_argmax(self) -> list | None:
        if not self.e3_residuals:
            return None
        return max(self.e3_residuals, key=lambda pr: abs(pr[1]))[0]

    def to_dict(self) -> dict:
        return {
            "e1_max_residual": self.e1_max_residual,
            "e1_argmax": self.e1_argmax,
            "e2_max_residual": self.e2_max_residual,
            "e2_argmax": self.e2_argmax,
            "e2_x_spread": self.e2_x_spread,
            "e3_max_residual": self.e3_max_residual,
            "e3_argmax": self.e3_argmax,
            "e3_residuals": [{"state": p, "residual": r} for p, r in self.e3_residuals],
            "sample_points": self.sample_points,
            "structural_violations": self.structural_violations,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def check_consistency(v: ScalarField, sigma: Callable, rho: Callable, f: Callable, lambda_fn: Callable,
                      sample_points, intensity: LevyMeasureModel, A=None) -> ConsistencyReport:
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    n, d = pts.shape
    g = v.gradient(pts)
    s = np.asarray(sigma(pts), dtype=float)
    e1 = np.linalg.norm(np.asarray(rho(pts), dtype=float) - np.einsum("nij,ni->nj", s, g), axis=1)
    i1 = int(np.argmax(e1))

    nodes, _ = intensity.nodes()
    violations = []
    if nodes.shape[0]:
        lam = np.asarray(lambda_fn(nodes), dtype=float).reshape(-1)
        outside = ~((lam > 0) & (lam < 1))
        for q in np.flatnonzero(outside):
            violations.append({"mark": nodes[q].tolist(), "lambda": float(lam[q])})
        fx = np.asarray(f(pts[:, None, :], nodes[None]), dtype=float)
        dv = v.value(pts[:, None, :] + fx) - v.value(pts)[:, None]
        e2 = np.abs(lam[None, :] - np.exp(dv))
        i2 = np.unravel_index(int(np.argmax(e2)), e2.shape)
        e2_max = float(e2[i2])
        e2_arg = {"state": pts[i2[0]].tolist(), "mark": nodes[i2[1]].tolist()}
        spread = float(np.max(dv.max(axis=0) - dv.min(axis=0)))
    else:
        e2_max, e2_arg, spread = 0.0, None, 0.0

    Aop = _as_operator(A, d)
    e3 = _pide_residual_batch(v, Aop, sigma, f, intensity, pts)
    return ConsistencyReport(
        e1_max_residual=float(e1[i1]), e1_argmax=pts[i1].tolist(),
        e2_max_residual=e2_max, e2_argmax=e2_arg,
        e3_residuals=[(p.tolist(), float(r)) for p, r in zip(pts, e3)],
        sample_points=pts.tolist(), e2_x_spread=spread, structural_violations=violations,
    )


# ---------------------------------------------------------------------------
# path-independence gaps


def path_independence_gap(path, record: DensityRecord, v: ScalarField) -> tuple[float, float]:
    """sup over nodes of |log Λ_t - (v(X_0) - v(X_t))| and the time where it is attained."""
    vals = v.value(path.states)
    gap = np.abs(record.log_density - (vals[0] - vals))
    k = int(np.argmax(gap))
    return float(gap[k]), float(record.times[k])


def _midpoints(paths: PathBatch) -> np.ndarray:
    """States at interval midpoints of the affine interpolation, (P, K, d)."""
    return 0.5 * (paths.states[:, :-1] + paths.left_limits[:, 1:])


def batch_gaps(scenario: EvolutionScenario, noise: NoiseBatch, paths: PathBatch, *,
               residual_corrected: bool = False) -> np.ndarray:
    """Per-path sup-gaps; with ``residual_corrected`` the midpoint-rule time integral of the
    residual along the path is subtracted before taking the sup."""
    terms = log_density_terms(paths, noise, scenario.rho, scenario.lambda_fn, scenario.intensity)
    ld = -terms[..., 0] - 0.5 * terms[..., 1] - terms[..., 2] - terms[..., 3]
    vals = scenario.v.value(paths.states)
    stat = ld - (vals[:, :1] - vals)
    if residual_corrected:
        mids = _midpoints(paths)
        P, K, d = mids.shape
        res = _pide_residual_batch(scenario.v, scenario.operator, scenario.sigma, scenario.f,
                                   scenario.intensity, mids.reshape(-1, d)).reshape(P, K)
        integral = np.zeros((P, K + 1))
        np.cumsum(res * noise.h, axis=1, out=integral[:, 1:])
        stat = stat - integral
    return np.abs(stat).max(axis=1)


def gap_ensemble(scenario: EvolutionScenario, n_paths: int, seed: int, *, residual_corrected: bool = False,
                 block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> np.ndarray:
    if scenario.v is None:
        raise ConfigurationError("the scenario declares no scalar field v")
    problem = scenario.problem()

    def work(ids):
        noise, paths = simulate_block(problem, seed, ids)
        return batch_gaps(scenario, noise, paths, residual_corrected=residual_corrected)

    return np.concatenate(run_blocks(n_paths, work, block_size=block_size, workers=workers))


# ---------------------------------------------------------------------------
# Itô decomposition


ITO_TERMS = ("operator_drift", "drift", "brownian", "jump_compensator", "jump_martingale", "trace")


def ito_terms(scenario: EvolutionScenario, noise: NoiseBatch, paths: PathBatch) -> np.ndarray:
    """Running sums ``(P, K + 1, 6)`` of the six terms of the Itô expansion of v(X_t) - v(X_0).

    ds-integrals use the midpoint rule on the affine interpolation, the
    Brownian integral uses left endpoints and jump sums use left limits at
    jump nodes.
    """
    v = scenario.v
    Aop = scenario.operator
    intensity = scenario.intensity.tilted(scenario.lambda_fn)
    nodes, weights = intensity.nodes()
    mids = _midpoints(paths)
    P, K, d = mids.shape
    flat = mids.reshape(-1, d)
    g = v.gradient(flat)
    s = np.asarray(scenario.sigma(flat), dtype=float)
    inc = np.zeros((P, K, 6))
    inc[..., 0] = np.einsum("ni,ij,nj->n", flat, Aop, g).reshape(P, K) * noise.h
    inc[..., 1] = np.einsum("ni,ni->n", np.asarray(scenario.b(flat), dtype=float), g).reshape(P, K) * noise.h
    inc[..., 5] = 0.5 * v.hessian_quadratic_form(flat, s).reshape(P, K) * noise.h
    if weights.size:
        fx = np.asarray(scenario.f(flat[:, None, :], nodes[None]), dtype=float)
        dv = v.value(flat[:, None, :] + fx) - v.value(flat)[:, None]
        taylor = dv - np.einsum("nqi,ni->nq", fx, g)
        inc[..., 3] = (taylor @ weights).reshape(P, K) * noise.h
        inc[..., 4] = -(dv @ weights).reshape(P, K) * noise.h

    left = paths.states[:, :K]
    g_left = v.gradient(left)
    s_left = np.asarray(scenario.sigma(left), dtype=float)
    inc[..., 2] = np.einsum("pkij,pki,pkj->pk", s_left, g_left, noise.dB)

    pi, ki = np.nonzero(noise.jump_mask)
    if pi.size:
        pre = paths.left_limits[pi, ki + 1]
        fx = np.asarray(scenario.f(pre, noise.marks[pi, ki]), dtype=float)
        inc[pi, ki, 4] += v.value(pre + fx) - v.value(pre)
    out = np.zeros((P, K + 1, 6))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def ito_decomposition_gap(scenario: EvolutionScenario, noise: NoiseBatch, paths: PathBatch) -> np.ndarray:
    """Per-path sup over nodes of |v(X_t) - v(X_0) - sum of the six expansion terms|."""
    terms = ito_terms(scenario, noise, paths)
    vals = scenario.v.value(paths.states)
    return np.abs(vals - vals[:, :1] - terms.sum(axis=2)).max(axis=1)


def ito_gap_ensemble(scenario: EvolutionScenario, n_paths: int, seed: int, *,
                     block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> np.ndarray:
    problem = scenario.problem()

    def work(ids):
        noise, paths = simulate_block(problem, seed, ids)
        return ito_decomposition_gap(scenario, noise, paths)

    return np.concatenate(run_blocks(n_paths, work, block_size=block_size, workers=workers))


def keystone_sigma() -> float:
    """Positive s with s²/2 + 2/e - 1 = 0: the diffusion level at which linear v = -x,
    unit additive jumps at rate one and λ = 1/e satisfy all three conditions."""
    return float(np.sqrt(2.0 * (1.0 - 2.0 * np.exp(-1.0))))
