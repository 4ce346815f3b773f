"""Quadrature helpers: Gauss-Legendre panels, power-substituted singular rules,
and product-Gaussian-adapted anisotropic spatial grids.

The time integrals downstream carry endpoint factors (r-a)^{alpha-1} or
(b-r)^{beta-1} with fractional alpha, beta; a polynomial substitution
r = a + (m-a) v^q with q*alpha (nearly) integer turns the integrand into a
smooth function of v, restoring spectral convergence of Gauss-Legendre.
"""

from __future__ import annotations

import numpy as np

__all__ = ["gauss_legendre", "composite_gl", "singular_rule", "gaussian_product",
           "box_nodes", "gaussian_box_grid", "product_gaussian_grid"]


def gauss_legendre(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(int(n))
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def composite_gl(a: float, b: float, order: int = 16, panels_per_unit: float = 1.0,
                 min_panels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule: `order` nodes on each of ceil(span*panels) panels."""
    span = abs(b - a)
    npan = max(min_panels, int(np.ceil(span * panels_per_unit)))
    edges = np.linspace(a, b, npan + 1)
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre(lo, hi, order)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def _power_for(alpha: float) -> int:
    """Smallest substitution power q making q*alpha a positive integer (capped)."""
    if alpha >= 1.0:
        return 1
    for q in range(1, 17):
        if abs(q * alpha - round(q * alpha)) < 1e-9 and round(q * alpha) >= 1:
            return q
    return int(np.ceil(3.0 / alpha))


def singular_rule(a: float, b: float, n: int, alpha_left: float = 1.0,
                  alpha_right: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature for ∫_a^b f with f ~ (r-a)^{alpha_left-1} (b-r)^{alpha_right-1} * smooth.

    Splits at the midpoint and applies the power substitution on each singular
    side; weights absorb the Jacobian, the integrand is evaluated raw.
    """
    if not b > a:
        raise ValueError(f"empty interval [{a}, {b}]")
    m = 0.5 * (a + b)
    n_left = max(2, n // 2)
    n_right = max(2, n - n_left)
    nodes, weights = [], []

    qL = _power_for(alpha_left)
    v, w = gauss_legendre(0.0, 1.0, n_left)
    if qL == 1:
        nodes.append(a + (m - a) * v)
        weights.append((m - a) * w)
    else:
        nodes.append(a + (m - a) * v**qL)
        weights.append((m - a) * qL * v ** (qL - 1) * w)

    qR = _power_for(alpha_right)
    v, w = gauss_legendre(0.0, 1.0, n_right)
    if qR == 1:
        nodes.append(b - (b - m) * v)
        weights.append((b - m) * w)
    else:
        nodes.append(b - (b - m) * v**qR)
        weights.append((b - m) * qR * v ** (qR - 1) * w)

    x = np.concatenate(nodes)
    w = np.concatenate(weights)
    keep = (x > a) & (x < b)
    return x[keep], w[keep]


def gaussian_product(mu1: np.ndarray, S1: np.ndarray, mu2: np.ndarray,
                     S2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center and covariance of the product of two Gaussian envelopes.

    Uses S = S1 (S1 + S2)^{-1} S2 and mu = S2 (S1+S2)^{-1} mu1 +
    S1 (S1+S2)^{-1} mu2, which stay stable when one factor nearly collapses.
    """
    S1 = np.asarray(S1, dtype=float)
    S2 = np.asarray(S2, dtype=float)
    k = S1.shape[0]
    W = np.linalg.solve(S1 + S2, np.eye(k))
    S = S1 @ W @ S2
    S = 0.5 * (S + S.T)
    mu = S2 @ W @ np.asarray(mu1, dtype=float) + S1 @ W @ np.asarray(mu2, dtype=float)
    return mu, S


def gaussian_product_batched(mu1: np.ndarray, S1: np.ndarray, mu2: np.ndarray,
                             S2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched gaussian_product: mu1/S1 carry leading batch axes, mu2/S2 are shared."""
    k = S2.shape[-1]
    S2b = np.broadcast_to(S2, S1.shape)
    W = np.linalg.solve(S1 + S2b, np.broadcast_to(np.eye(k), S1.shape).copy())
    S = S1 @ W @ S2b
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    mu = (
        np.einsum("...ij,...j->...i", S2b @ W, mu1)
        + np.einsum("...ij,j->...i", S1 @ W, np.asarray(mu2, dtype=float))
    )
    return mu, S


def box_nodes(k: int, nodes_per_dim: int, halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes/weights on [-halfwidth, halfwidth]^k."""
    x1, w1 = gauss_legendre(-halfwidth, halfwidth, nodes_per_dim)
    grids = np.meshgrid(*([x1] * k), indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=-1)
    wt = np.ones(xi.shape[0])
    for g in np.meshgrid(*([w1] * k), indexing="ij"):
        wt = wt * g.ravel()
    return xi, wt


def gaussian_box_grid(mu: np.ndarray, S: np.ndarray, nodes_per_dim: int,
                      halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Anisotropic Gauss-Legendre box covering mu +- halfwidth standard
    deviations along the eigenaxes of S; returns (points (M, k), weights)."""
    k = S.shape[0]
    eigval, eigvec = np.linalg.eigh(S)
    eigval = np.maximum(eigval, 1e-300)
    axes = eigvec * np.sqrt(eigval)
    xi, wt = box_nodes(k, nodes_per_dim, halfwidth)
    points = np.asarray(mu, dtype=float)[None, :] + xi @ axes.T
    weights = wt * np.prod(np.sqrt(eigval))
    return points, weights


def product_gaussian_grid(mu1, S1, mu2, S2, nodes_per_dim: int,
                          halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Box grid adapted to the product of two Gaussian envelopes."""
    mu, S = gaussian_product(mu1, S1, mu2, S2)
    return gaussian_box_grid(mu, S, nodes_per_dim, halfwidth)
