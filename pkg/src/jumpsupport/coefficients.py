"""Named coefficient builders used by scenario files and tests.

Each builder returns a vectorised callable following the conventions of
:mod:`jumpsupport.jump_sde`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigurationError


def _matrix(value, rows: int | None = None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(value, dtype=float))
    if rows is not None and m.shape[0] != rows:
        raise ConfigurationError(f"expected {rows} rows, got {m.shape[0]}")
    return m


# --- drift


def zero_drift(dimension: int) -> Callable:
    def drift(z):
        return np.zeros(np.shape(z))
    return drift


def constant_drift(value) -> Callable:
    c = np.atleast_1d(np.asarray(value, dtype=float))

    def drift(z):
        return np.broadcast_to(c, np.shape(z)).copy()
    return drift


def affine_drift(matrix, offset=None) -> Callable:
    M = _matrix(matrix)
    c = np.zeros(M.shape[0]) if offset is None else np.atleast_1d(np.asarray(offset, dtype=float))

    def drift(z):
        return np.asarray(z, dtype=float) @ M.T + c
    return drift


def linear_drift(matrix) -> Callable:
    return affine_drift(matrix)


def ou_drift(theta: float, mean) -> Callable:
    """theta * (mean - z)."""
    mu = np.atleast_1d(np.asarray(mean, dtype=float))

    def drift(z):
        return theta * (mu - np.asarray(z, dtype=float))
    return drift


def tabulated_1d(x, y) -> Callable:
    """Piecewise-linear interpolation, constant beyond the table ends."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
        raise ConfigurationError("a table needs matching 1-D x and y with strictly increasing x")

    def fn(z):
        return np.interp(np.asarray(z, dtype=float), xs, ys)
    return fn


def tabulated_drift(x, y) -> Callable:
    return tabulated_1d(x, y)


# --- diffusion


def zero_diffusion(dimension: int, brownian_dimension: int | None = None) -> Callable:
    m = dimension if brownian_dimension is None else brownian_dimension

    def diffusion(z):
        return np.zeros(np.shape(z)[:-1] + (dimension, m))
    return diffusion


def constant_diffusion(matrix) -> Callable:
    S = _matrix(matrix)

    def diffusion(z):
        return np.broadcast_to(S, np.shape(z)[:-1] + S.shape).copy()
    return diffusion


def tabulated_diffusion(x, y) -> Callable:
    table = tabulated_1d(x, y)

    def diffusion(z):
        return table(z)[..., None]
    return diffusion


def sine_diffusion(base: float, amplitude: float) -> Callable:
    """1-D state-dependent level base + amplitude * sin(z)."""
    def diffusion(z):
        return (base + amplitude * np.sin(np.asarray(z, dtype=float)))[..., None]
    return diffusion


# --- jumps


def zero_jump(dimension: int) -> Callable:
    def jump(z, u):
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.zeros(np.broadcast_shapes(z.shape[:-1], u.shape[:-1]) + (dimension,))
    return jump


def additive_jump(scale) -> Callable:
    """scale @ u, independent of the state."""
    S = _matrix(scale)

    def jump(z, u):
        z = np.asarray(z, dtype=float)
        out = np.asarray(u, dtype=float) @ S.T
        return np.broadcast_to(out, np.broadcast_shapes(z.shape[:-1], out.shape[:-1]) + (S.shape[0],)).copy()
    return jump


def abs_jump(scale) -> Callable:
    """scale @ |u|: jumps never point into the negative orthant when scale >= 0."""
    inner = additive_jump(scale)

    def jump(z, u):
        return inner(z, np.abs(np.asarray(u, dtype=float)))
    return jump


def multiplicative_jump(scale: float = 1.0) -> Callable:
    """scale * z * u (1-D marks broadcast over state coordinates)."""
    def jump(z, u):
        return scale * np.asarray(z, dtype=float) * np.asarray(u, dtype=float)[..., :1]
    return jump


# --- tilt functions


def constant_tilt(value: float) -> Callable:
    def lam(u):
        return np.full(np.shape(np.atleast_2d(u))[0], float(value))
    return lam


def exp_linear_tilt(slope) -> Callable:
    """exp(slope · u)."""
    c = np.atleast_1d(np.asarray(slope, dtype=float))

    def lam(u):
        return np.exp(np.atleast_2d(np.asarray(u, dtype=float)) @ c)
    return lam


def identity_tilt(u) -> np.ndarray:
    """λ(u) = u for 1-D marks in (0, 1)."""
    return np.atleast_2d(np.asarray(u, dtype=float))[:, 0]
