"""Anisotropic scale geometry of the kinetic phase space.

A phase point x = (x1, x2) pairs a non-degenerate block x1 (velocity-like,
directly diffused) with a degenerate block x2 (position-like, driven only
through the drift).  The two blocks fluctuate on the intrinsic scales
t^{1/2} and t^{3/2}; everything in this module is built on that pair of
exponents: the scale map, the homogeneous quasi-norm

    |x|_d = |x1| + |x2|^{1/3},

the Gaussian comparison kernel g_lambda, and the intrinsic rescaling of a
model's coefficients.  All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "PhasePoint",
    "as_vec",
    "split_blocks",
    "aniso_norm",
    "scale_vector",
    "scale_map",
    "gauss_g",
    "proxy_p_hat",
    "rescale_model",
    "scaling_residual",
]


@dataclass(frozen=True)
class PhasePoint:
    """A point (x1, x2) in R^d x R^d."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(self.x2, dtype=float))
        if x1.shape != x2.shape or x1.ndim != 1 or x1.size < 1:
            raise DomainError(f"phase blocks must be equal-length vectors, got {x1.shape} and {x2.shape}")
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise DomainError("phase point has non-finite entries")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def d(self) -> int:
        return self.x1.size

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.x1, self.x2])

    @classmethod
    def from_vec(cls, v) -> "PhasePoint":
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise DomainError(f"phase vector must have even length, got shape {v.shape}")
        d = v.size // 2
        return cls(v[:d], v[d:])


def as_vec(x) -> np.ndarray:
    """Coerce a PhasePoint or array-like into a flat (2d,) float vector."""
    if isinstance(x, PhasePoint):
        return x.vec
    v = np.asarray(x, dtype=float)
    if v.ndim != 1 or v.size % 2 or v.size < 2:
        raise DomainError(f"expected a phase vector of even length, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("phase vector has non-finite entries")
    return v


def split_blocks(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split (..., 2d) into the (x1, x2) blocks."""
    d = x.shape[-1] // 2
    return x[..., :d], x[..., d:]


def aniso_norm(x) -> float:
    """Homogeneous quasi-norm |x|_d = |x1| + |x2|^{1/3} (Euclidean per block)."""
    v = as_vec(x)
    x1, x2 = split_blocks(v)
    return float(np.linalg.norm(x1) + np.cbrt(np.linalg.norm(x2)))


def aniso_norm_pairwise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|x - y|_d for broadcastable (..., 2d) arrays."""
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d1, d2 = split_blocks(diff)
    return np.linalg.norm(d1, axis=-1) + np.cbrt(np.linalg.norm(d2, axis=-1))


def scale_vector(t: float, d: int) -> np.ndarray:
    """Diagonal of the scale matrix T_t = diag(t^{1/2} I_d, t^{3/2} I_d)."""
    if t <= 0:
        raise DomainError(f"time span must be positive, got t={t}")
    rt = np.sqrt(t)
    return np.concatenate([np.full(d, rt), np.full(d, rt * t)])


def scale_map(t: float, x, direction: str = "forward"):
    """Apply T_t (forward) or T_t^{-1} (inverse) to a phase point.

    inverse(forward(x)) is the identity to machine precision because the map
    is diagonal.
    """
    if direction not in ("forward", "inverse"):
        raise DomainError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    is_point = isinstance(x, PhasePoint)
    v = as_vec(x)
    diag = scale_vector(t, v.size // 2)
    out = v * diag if direction == "forward" else v / diag
    return PhasePoint.from_vec(out) if is_point else out


def scaled_sqnorm(t: float, x: np.ndarray) -> np.ndarray:
    """|T_t^{-1} x|^2 for (..., 2d) arrays; the anisotropic Gaussian exponent."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] // 2
    x1, x2 = split_blocks(x)
    return np.sum(x1 * x1, axis=-1) / t + np.sum(x2 * x2, axis=-1) / t**3


def gauss_g(lam: float, t: float, x) -> float:
    """Anisotropic Gaussian comparison kernel g_lambda(t, x) = t^{-2d} exp(-|T_t^{-1}x|^2 / (2 lambda)).

    Maximized at x = 0 with value t^{-2d}; integrates to (2 pi lambda)^d over
    R^{2d} since det T_t = t^{2d} cancels the prefactor.
    """
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if t <= 0:
        raise DomainError(f"time span must be positive, got t={t}")
    v = as_vec(x)
    d = v.size // 2
    return float(t ** (-2 * d) * np.exp(-scaled_sqnorm(t, v) / (2.0 * lam)))


def gauss_g_batch(lam: float, t: float, x: np.ndarray) -> np.ndarray:
    """gauss_g over a (..., 2d) batch."""
    d = x.shape[-1] // 2
    return t ** (-2 * d) * np.exp(-scaled_sqnorm(t, x) / (2.0 * lam))


def proxy_p_hat(lam: float, s: float, t: float, x, y, flow) -> float:
    """Flow-centered comparison density g_lambda(t-s, theta_{t,s}(x) - y).

    ``flow`` maps (s, t, x_vec) to the transported point theta_{t,s}(x).
    """
    if not t > s:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    xv, yv = as_vec(x), as_vec(y)
    theta = np.asarray(flow(s, t, xv), dtype=float)
    return gauss_g(lam, t - s, theta - yv)


def rescale_model(model, lam: float, s: float = 0.0):
    """Intrinsically rescaled model: drift lam * T_lam^{-1} F(s + lam t, T_lam x), diffusion sigma(s + lam t, T_lam x).

    lam = 1, s = 0 is the identity.  The x1-Jacobian of the rescaled F2 equals
    the original one evaluated at the mapped point, so the ellipticity floor
    is preserved.
    """
    from .coefficients import ModelSpec  # late import; coefficients uses this module

    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    d = model.d
    diag = scale_vector(lam, d)
    up1, up2 = diag[:d], diag[d:]

    def _map(x):
        return np.asarray(x, dtype=float) * diag

    def f1(t, x):
        return lam / up1 * model.F1(s + lam * t, _map(x))

    def f2(t, x):
        return lam / up2 * model.F2(s + lam * t, _map(x))

    def sigma(t, x):
        return model.sigma(s + lam * t, _map(x))

    def grad(t, x):
        return model.grad_x1_F2(s + lam * t, _map(x))

    return ModelSpec(
        name=f"{model.name}@scale({lam:g},{s:g})",
        d=d,
        F1=f1,
        F2=f2,
        sigma=sigma,
        grad_x1_F2=grad,
        budget=model.budget,
    )


def scaling_residual(density, density_rescaled, lam: float, s: float, x, t: float, y) -> float:
    """Residual of the change-of-variables identity relating a density to its rescaled model's density.

    For X^{lam,s}_u := T_lam^{-1} X_{s + lam u} the push-forward rule
    (det T_lam = lam^{2d}) forces

        p(s, x; t, y) = lam^{-2d} p^{lam,s}(T_lam^{-1} x; (t - s)/lam, T_lam^{-1} y),

    i.e. a *negative* 2d exponent.  ``density(s, x, t, y)`` evaluates the
    original kernel, ``density_rescaled(u, xi, v, eta)`` the rescaled one
    (anchored at time 0).  Returns |lhs - rhs|.
    """
    xv, yv = as_vec(x), as_vec(y)
    d = xv.size // 2
    lhs = density(s, xv, t, yv)
    xi = scale_map(lam, xv, "inverse")
    eta = scale_map(lam, yv, "inverse")
    rhs = lam ** (-2 * d) * density_rescaled(0.0, xi, (t - s) / lam, eta)
    return abs(lhs - rhs)
