"""Closed-form transition kernel of the constant-coefficient kinetic model
(F = (0, x1), unit noise): Gaussian with mean theta_t(x) = (x1, x2 + x1 t)
and covariance K_t = [[t, t^2/2], [t^2/2, t^3/3]] (per d-block).

Used as the exactness anchor for the proxy/parametrix machinery, as the
sampling oracle for Monte Carlo validation, and for the closed-form
sup-over-target gradient rates.
"""

from __future__ import annotations

import numpy as np

from . import geometry
from .errors import DomainError

__all__ = [
    "kolmogorov_mean",
    "kolmogorov_gram",
    "kolmogorov_density",
    "kolmogorov_gradient",
    "kolmogorov_sup_gradient",
    "kolmogorov_sample",
]


def kolmogorov_mean(s: float, x, t: float) -> np.ndarray:
    xv = geometry.as_vec(x)
    d = xv.size // 2
    out = xv.copy()
    out[d:] += (t - s) * xv[:d]
    return out


def kolmogorov_gram(s: float, t: float, d: int = 1) -> np.ndarray:
    h = t - s
    if h <= 0:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    K = np.zeros((2 * d, 2 * d))
    K[:d, :d] = h * np.eye(d)
    K[:d, d:] = 0.5 * h**2 * np.eye(d)
    K[d:, :d] = 0.5 * h**2 * np.eye(d)
    K[d:, d:] = h**3 / 3.0 * np.eye(d)
    return K


def _quad_form(h: float, w: np.ndarray) -> np.ndarray:
    """<K_h^{-1} w, w> for (..., 2d) offsets; K_h^{-1} blocks are
    (4/h, -6/h^2; -6/h^2, 12/h^3) per d-component."""
    d = w.shape[-1] // 2
    w1, w2 = w[..., :d], w[..., d:]
    return (
        4.0 / h * np.sum(w1 * w1, axis=-1)
        - 12.0 / h**2 * np.sum(w1 * w2, axis=-1)
        + 12.0 / h**3 * np.sum(w2 * w2, axis=-1)
    )


def kolmogorov_density(s: float, x, t: float, y) -> float:
    """p(s, x; t, y) = (sqrt(3) / (pi (t-s)^2))^d exp(-1/2 |K^{-1/2}(y - theta)|^2)."""
    h = t - s
    if h <= 0:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    xv, yv = geometry.as_vec(x), geometry.as_vec(y)
    d = xv.size // 2
    w = yv - kolmogorov_mean(s, xv, t)
    pref = (np.sqrt(3.0) / (np.pi * h**2)) ** d
    return float(pref * np.exp(-0.5 * _quad_form(h, w)))


def kolmogorov_density_batch(s: float, x, t: float, Y: np.ndarray) -> np.ndarray:
    h = t - s
    xv = geometry.as_vec(x)
    d = xv.size // 2
    w = np.asarray(Y, dtype=float) - kolmogorov_mean(s, xv, t)
    pref = (np.sqrt(3.0) / (np.pi * h**2)) ** d
    return pref * np.exp(-0.5 * _quad_form(h, w))


def kolmogorov_gradient(s: float, x, t: float, y, block: str = "x1") -> np.ndarray:
    """Exact gradient of the density in the from-point, per block.

    grad_x p = -(grad theta)^T K^{-1} (theta - y) p with grad theta =
    [[I, 0], [hI, I]].
    """
    h = t - s
    xv, yv = geometry.as_vec(x), geometry.as_vec(y)
    d = xv.size // 2
    e = kolmogorov_mean(s, xv, t) - yv
    e1, e2 = e[:d], e[d:]
    u1 = 4.0 / h * e1 - 6.0 / h**2 * e2
    u2 = -6.0 / h**2 * e1 + 12.0 / h**3 * e2
    p = kolmogorov_density(s, xv, t, yv)
    if block == "x1":
        return -(u1 + h * u2) * p
    if block == "x2":
        return -u2 * p
    raise DomainError(f"block must be 'x1' or 'x2', got {block!r}")


def kolmogorov_sup_gradient(t: float, d: int = 1, deriv: str = "x1") -> float:
    """sup over targets y of the derivative magnitude, in closed form.

    With a = |K_t^{-1/2} v| for the relevant mean-map column v, the suprema
    are a e^{-1/2} P0 for first derivatives and a^2 P0 for the second x1
    derivative, P0 = (sqrt(3)/(pi t^2))^d the on-diagonal peak; v = (1, t)
    gives a^2 = 4/t, v = (0, 1) gives a^2 = 12/t^3.
    """
    if t <= 0:
        raise DomainError(f"need t > 0, got {t}")
    p0 = (np.sqrt(3.0) / (np.pi * t**2)) ** d
    if deriv == "x1":
        return float(np.sqrt(4.0 / t) * np.exp(-0.5) * p0)
    if deriv == "x1x1":
        return float(4.0 / t * p0)
    if deriv == "x2":
        return float(np.sqrt(12.0 / t**3) * np.exp(-0.5) * p0)
    raise DomainError(f"deriv must be one of 'x1', 'x1x1', 'x2', got {deriv!r}")


def kolmogorov_sample(rng: np.random.Generator, s: float, x, t: float, n: int) -> np.ndarray:
    """n exact draws from the transition law (Cholesky of the closed-form Gram)."""
    xv = geometry.as_vec(x)
    d = xv.size // 2
    L = np.linalg.cholesky(kolmogorov_gram(s, t, d))
    z = rng.standard_normal((n, 2 * d))
    return kolmogorov_mean(s, xv, t) + z @ L.T
