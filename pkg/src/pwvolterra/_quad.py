"""Quadrature rules shared by the residual evaluators."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# panels in v for the substitution s = b * exp(-v); exp(-60) * 60^k is negligible for k <= 8
_LOG_PANELS = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.5, 7.0, 9.0, 11.5, 14.5, 18.0, 22.0, 27.0, 33.0, 40.0, 49.0, 60.0)


@lru_cache(maxsize=None)
def _legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=None)
def _log_rule(order: int):
    x, w = _legendre(order)
    vs, ws = [], []
    for a, b in zip(_LOG_PANELS[:-1], _LOG_PANELS[1:]):
        v = 0.5 * (b - a) * x + 0.5 * (a + b)
        vs.append(v)
        ws.append(0.5 * (b - a) * w * np.exp(-v))
    return np.concatenate(vs), np.concatenate(ws)


def log_endpoint_rule(b, order: int = 12):
    """Nodes and weights for int_0^b g(s) ds with g at most log-singular at s = 0.

    ``b`` may be an array; the result has shape ``b.shape + (Q,)``.
    """
    v, w = _log_rule(order)
    b = np.asarray(b, dtype=float)[..., None]
    return b * np.exp(-v), b * w


def gauss_rule(a, b, order: int = 24, panels: int = 2):
    """Composite Gauss-Legendre on [a, b] (arrays broadcast); shape ``a.shape + (Q,)``."""
    x, w = _legendre(order)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    edges = np.linspace(0.0, 1.0, panels + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        pa = a + lo * (b - a)
        pb = a + hi * (b - a)
        nodes.append(0.5 * (pb - pa) * x + 0.5 * (pa + pb))
        weights.append(0.5 * (pb - pa) * w)
    return np.concatenate(nodes, axis=-1), np.concatenate(weights, axis=-1)


def trapezoid_weights(points: np.ndarray) -> np.ndarray:
    w = np.zeros_like(points)
    if len(points) < 2:
        return w
    h = np.diff(points)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w
