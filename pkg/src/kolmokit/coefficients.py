"""Model definitions: drift F = (F1, F2), diffusion sigma, regularity metadata,
mollification, and an empirical audit of the standing assumptions.

Coefficient functions are vectorized by contract: F1(t, x) and F2(t, x) accept
x of shape (..., 2d) and return (..., d); sigma and grad_x1_F2 return
(..., d, d).  A ModelSpec is immutable after construction and all evaluation
is pure, so models are safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import geometry
from .errors import DomainError, ModelError
from ._quad import gauss_legendre

__all__ = [
    "RegularityBudget",
    "ModelSpec",
    "Mollifier",
    "SamplingPlan",
    "AuditReport",
    "evaluate_model",
    "mollify_drift",
    "tilde_drift",
    "audit_assumptions",
    "make_model",
    "kolmogorov",
    "holder",
    "damped_hamiltonian",
]

CoefFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RegularityBudget:
    """Declared regularity constants: Holder exponent gamma, bounds kappa0..2,
    ellipticity floor c0 for grad_x1 F2, and the time horizon."""

    gamma: float = 1.0
    kappa0: float = 2.0
    kappa1: float = 2.0
    kappa2: float = 2.0
    c0: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("kappa0", "kappa1", "kappa2", "c0", "horizon"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient triple (F1, F2, sigma) with regularity metadata.

    ``grad_x1_F2`` may be omitted; a central finite difference with step
    1e-5 * (1 + |x1|) is substituted.  ``kernel_id`` marks built-in models
    whose hot loops have compiled implementations.
    """

    name: str
    d: int
    F1: CoefFn
    F2: CoefFn
    sigma: CoefFn
    grad_x1_F2: Optional[CoefFn] = None
    budget: RegularityBudget = field(default_factory=RegularityBudget)
    kernel_id: Optional[int] = None
    kernel_params: tuple = ()
    closed_form: Optional[str] = None

    def __post_init__(self):
        if self.d < 1:
            raise DomainError(f"dimension must be >= 1, got {self.d}")
        if self.grad_x1_F2 is None:
            object.__setattr__(self, "grad_x1_F2", _fd_grad_x1(self.F2, self.d))

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """Full drift F(t, x) on (..., 2d) arrays."""
        return np.concatenate([self.F1(t, x), self.F2(t, x)], axis=-1)

    def diffusion_matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        """sigma sigma^* (..., d, d)."""
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def with_drift(self, F1: CoefFn, F2: CoefFn, name: str | None = None,
                   sigma: CoefFn | None = None) -> "ModelSpec":
        return replace(
            self,
            name=name or self.name,
            F1=F1,
            F2=F2,
            sigma=sigma or self.sigma,
            grad_x1_F2=None if F2 is not self.F2 else self.grad_x1_F2,
            kernel_id=None,
            kernel_params=(),
            closed_form=None,
        )

    def sigma_flat(self) -> CoefFn:
        """sigma with its matrix axes flattened, for convolution machinery."""
        d = self.d
        sig = self.sigma

        def flat(t, x):
            return sig(t, x).reshape(np.shape(x)[:-1] + (d * d,))

        return flat


def _fd_grad_x1(F2: CoefFn, d: int) -> CoefFn:
    def grad(t, x):
        x = np.asarray(x, dtype=float)
        x1 = x[..., :d]
        h = 1e-5 * (1.0 + np.linalg.norm(x1, axis=-1))
        cols = []
        for j in range(d):
            step = np.zeros(2 * d)
            step[j] = 1.0
            hp = h[..., None] * step
            cols.append((F2(t, x + hp) - F2(t, x - hp)) / (2.0 * h[..., None]))
        return np.stack(cols, axis=-1)

    return grad


def evaluate_model(model: ModelSpec, t: float, x) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (F1, F2, sigma, grad_x1_F2) at a single point; deterministic, validated."""
    xv = geometry.as_vec(x)
    if xv.size != 2 * model.d:
        raise DomainError(f"point has dimension {xv.size}, model expects {2 * model.d}")
    out = (model.F1(t, xv), model.F2(t, xv), model.sigma(t, xv), model.grad_x1_F2(t, xv))
    for name, val in zip(("F1", "F2", "sigma", "grad_x1_F2"), out):
        if not np.all(np.isfinite(val)):
            raise ModelError(f"{model.name}.{name} returned non-finite values at t={t}, x={xv.tolist()}")
    return out


# ---------------------------------------------------------------------------
# Mollification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mollifier:
    """Smooth compactly supported probability density on R^{2d}, discretized
    on a symmetric quadrature rule over the unit ball.

    ``nodes`` live on the unit scale; a convolution at scale eps shifts by
    eps * nodes.  Weights are normalized so the discrete mass is exactly 1,
    and the node set is symmetric under z -> -z, so constants are reproduced
    exactly and affine maps up to roundoff.
    """

    dim: int
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def bump(cls, d: int, nodes_per_dim: int = 9) -> "Mollifier":
        """Tensor rule for the standard bump c * exp(-1 / (1 - |z|^2)) on |z| < 1."""
        k = 2 * d
        x, w = gauss_legendre(-1.0, 1.0, nodes_per_dim)
        grids = np.meshgrid(*([x] * k), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        wg = np.ones(pts.shape[0])
        for g in np.meshgrid(*([w] * k), indexing="ij"):
            wg = wg * g.ravel()
        r2 = np.sum(pts * pts, axis=-1)
        inside = r2 < 1.0 - 1e-12
        pts, wg, r2 = pts[inside], wg[inside], r2[inside]
        rho = np.exp(-1.0 / (1.0 - r2))
        weights = wg * rho
        weights /= weights.sum()
        return cls(dim=k, nodes=pts, weights=weights)

    def mass(self) -> float:
        return float(self.weights.sum())

    def convolve(self, fn: CoefFn, eps: float) -> CoefFn:
        """f * rho_eps as a coefficient function (quadrature over the support)."""
        nodes = self.nodes
        weights = self.weights

        def mollified(t, x):
            x = np.asarray(x, dtype=float)
            shifted = x[..., None, :] - eps * nodes          # (..., k, 2d)
            vals = fn(t, shifted)                            # (..., k, d)
            return np.einsum("...kd,k->...d", vals, weights)

        return mollified


def mollify_drift(model: ModelSpec, epsilon: float, *, mollifier: Mollifier | None = None,
                  include_sigma: bool = False) -> ModelSpec:
    """Model with F replaced by F * rho_eps (numerical convolution over the support)."""
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    rho = mollifier or Mollifier.bump(model.d)
    F1 = rho.convolve(model.F1, epsilon)
    F2 = rho.convolve(model.F2, epsilon)
    sig = rho.convolve(model.sigma_flat(), epsilon) if include_sigma else None
    out = model.with_drift(F1, F2, name=f"{model.name}~rho({epsilon:g})")
    if include_sigma:
        d = model.d

        def sigma(t, x):
            return sig(t, x).reshape(x.shape[:-1] + (d, d))

        out = replace(out, sigma=sigma)
    return out


def tilde_drift(model: ModelSpec, s: float, *, macro_scale: float = 1.0,
                mollify_f2: bool = True, mollifier: Mollifier | None = None) -> CoefFn:
    """Two-scale regularized drift: F1 mollified at the fixed macro scale,
    F2 at the intrinsic scale |t - s|^{3/2} of the degenerate block.

    At t = s the F2 scale degenerates; the raw F2 is returned there (the
    continuous-drift limit of the mollification).  ``mollify_f2=False`` gives
    the variant flow with only the first component regularized.
    """
    rho = mollifier or Mollifier.bump(model.d)
    F1m = rho.convolve(model.F1, macro_scale)

    def drift(t, x):
        f1 = F1m(t, x)
        scale = abs(t - s) ** 1.5
        if mollify_f2 and scale > 0.0:
            f2 = rho.convolve(model.F2, scale)(t, x)
        else:
            f2 = model.F2(t, x)
        return np.concatenate([f1, f2], axis=-1)

    return drift


# ---------------------------------------------------------------------------
# Assumption audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    """Sampling plan for the assumption audit: pair count, spatial box half-width,
    time grid, and the pair-distance cap of the local Holder seminorm."""

    n_pairs: int = 10_000
    box: float = 3.0
    times: tuple = (0.0, 0.5, 1.0)
    seed: int = 0
    max_distance: float = 1.0


@dataclass
class AuditReport:
    sigma_holder: float
    f2_taylor_quotient: float
    f1_oscillation: float
    eig_min: float
    eig_max: float
    grad_f2_sv_min: float
    passed: bool
    worst: dict

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"AuditReport[{status}] sigma_holder={self.sigma_holder:.4g} "
            f"f2_taylor={self.f2_taylor_quotient:.4g} f1_osc={self.f1_oscillation:.4g} "
            f"eigs=[{self.eig_min:.4g},{self.eig_max:.4g}] sv_min={self.grad_f2_sv_min:.4g}"
        )


def audit_assumptions(model: ModelSpec, plan: SamplingPlan | None = None) -> AuditReport:
    """Empirical check of the standing assumptions over sampled pairs.

    Reports the sigma Holder quotient |sigma(t,x)-sigma(t,y)| / |x-y|_d^gamma,
    the (1+gamma)-anisotropic Taylor-remainder quotient for F2, the local
    oscillation of F1, the eigenvalue range of sigma sigma^*, and the smallest
    singular value of grad_x1 F2 (the implementable proxy for membership of
    the Jacobian in a fixed convex set of invertible matrices).  Pairs are
    restricted to |x - y|_d <= max_distance, matching the local seminorm.
    """
    plan = plan or SamplingPlan()
    b = model.budget
    rng = np.random.default_rng(plan.seed)
    d = model.d

    x = rng.uniform(-plan.box, plan.box, size=(plan.n_pairs, 2 * d))
    # second point within the anisotropic unit ball around the first
    delta = rng.normal(size=(plan.n_pairs, 2 * d))
    delta /= np.maximum(np.linalg.norm(delta, axis=-1, keepdims=True), 1e-12)
    radius = rng.uniform(1e-4, 1.0, size=(plan.n_pairs, 1)) * plan.max_distance
    y = x + delta * radius
    dist = geometry.aniso_norm_pairwise(x, y)
    keep = (dist > 1e-8) & (dist <= plan.max_distance)
    x, y, dist = x[keep], y[keep], dist[keep]

    sigma_q = 0.0
    taylor_q = 0.0
    f1_osc = 0.0
    eig_min, eig_max = np.inf, -np.inf
    sv_min = np.inf
    worst = {}

    for t in plan.times:
        sx, sy = model.sigma(t, x), model.sigma(t, y)
        q = np.linalg.norm(sx - sy, axis=(-2, -1)) / dist**b.gamma
        i = int(np.argmax(q))
        if q[i] > sigma_q:
            sigma_q = float(q[i])
            worst["sigma"] = (t, x[i].tolist(), y[i].tolist())

        g = model.grad_x1_F2(t, y)
        rem = model.F2(t, x) - model.F2(t, y) - np.einsum(
            "...ij,...j->...i", g, (x - y)[..., :d]
        )
        q = np.linalg.norm(rem, axis=-1) / dist ** (1.0 + b.gamma)
        i = int(np.argmax(q))
        if q[i] > taylor_q:
            taylor_q = float(q[i])
            worst["f2"] = (t, x[i].tolist(), y[i].tolist())

        osc = np.linalg.norm(model.F1(t, x) - model.F1(t, y), axis=-1)
        f1_osc = max(f1_osc, float(osc.max()))

        a = model.diffusion_matrix(t, x)
        ev = np.linalg.eigvalsh(a)
        eig_min = min(eig_min, float(ev.min()))
        eig_max = max(eig_max, float(ev.max()))

        sv = np.linalg.svd(model.grad_x1_F2(t, x), compute_uv=False)
        sv_min = min(sv_min, float(sv.min()))

    passed = (
        sigma_q <= b.kappa0
        and taylor_q <= b.kappa2
        and f1_osc <= 2.0 * b.kappa1
        and eig_min >= 1.0 / b.kappa0
        and eig_max <= b.kappa0
        and sv_min >= b.c0 - 1e-12
    )
    return AuditReport(sigma_q, taylor_q, f1_osc, eig_min, eig_max, sv_min, passed, worst)


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

def _identity_grad(d: int) -> CoefFn:
    eye = np.eye(d)

    def grad(t, x):
        return np.broadcast_to(eye, np.shape(x)[:-1] + (d, d)).copy()

    return grad


def kolmogorov(d: int = 1) -> ModelSpec:
    """Langevin dynamics in its simplest form: F = (0, x1), sigma = I.

    The transition kernel is Gaussian in closed form; the parametrix kernel
    vanishes identically for this model.
    """
    def F1(t, x):
        return np.zeros(np.shape(x)[:-1] + (d,))

    def F2(t, x):
        return np.asarray(x, dtype=float)[..., :d].copy()

    def sigma(t, x):
        return np.broadcast_to(np.eye(d), np.shape(x)[:-1] + (d, d)).copy()

    return ModelSpec(
        name="kolmogorov",
        d=d,
        F1=F1,
        F2=F2,
        sigma=sigma,
        grad_x1_F2=_identity_grad(d),
        budget=RegularityBudget(gamma=1.0, kappa0=1.5, kappa1=1.0, kappa2=1.5, c0=1.0),
        kernel_id=0,
        closed_form="kolmogorov",
    )


def holder(d: int = 1, gamma: float = 0.5, a: float = 0.3, b: float = 0.1,
           c: float = 0.8) -> ModelSpec:
    """Minimal-regularity stress model.

    F1_i = a sign(x1_i) min(|x1_i|^gamma, 1) + b x1_i   (Holder + Lipschitz),
    F2   = x1 + c min(|x2|^{(1+gamma)/3}, 1)            (sharp anisotropic index),
    sigma = (1 + 0.25 sin(|x|_d^gamma)) I.
    """
    expo2 = (1.0 + gamma) / 3.0

    def F1(t, x):
        x1 = np.asarray(x, dtype=float)[..., :d]
        return a * np.sign(x1) * np.minimum(np.abs(x1) ** gamma, 1.0) + b * x1

    def F2(t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., :d], x[..., d:]
        bump = c * np.minimum(np.linalg.norm(x2, axis=-1) ** expo2, 1.0)
        return x1 + bump[..., None]

    def sigma(t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., :d], x[..., d:]
        nd = np.linalg.norm(x1, axis=-1) + np.cbrt(np.linalg.norm(x2, axis=-1))
        factor = 1.0 + 0.25 * np.sin(nd**gamma)
        return factor[..., None, None] * np.eye(d)

    return ModelSpec(
        name="holder",
        d=d,
        F1=F1,
        F2=F2,
        sigma=sigma,
        grad_x1_F2=_identity_grad(d),
        budget=RegularityBudget(gamma=gamma, kappa0=2.0, kappa1=2.0, kappa2=2.0, c0=1.0),
        kernel_id=1,
        kernel_params=(a, b, c, gamma),
    )


def damped_hamiltonian(d: int = 1, omega2: float = 1.0, quartic: float = 0.0) -> ModelSpec:
    """Damped Hamiltonian dynamics: potential V(x2) = omega2 |x2|^2/2 + quartic |x2|^4/4,
    drift F = (-grad V(x2) - x1, x1), unit noise on the velocity block."""

    def F1(t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., :d], x[..., d:]
        gradV = omega2 * x2 + quartic * np.sum(x2 * x2, axis=-1, keepdims=True) * x2
        return -gradV - x1

    def F2(t, x):
        return np.asarray(x, dtype=float)[..., :d].copy()

    def sigma(t, x):
        return np.broadcast_to(np.eye(d), np.shape(x)[:-1] + (d, d)).copy()

    kappa = max(2.0, omega2 + 1.0)
    return ModelSpec(
        name="damped-hamiltonian",
        d=d,
        F1=F1,
        F2=F2,
        sigma=sigma,
        grad_x1_F2=_identity_grad(d),
        budget=RegularityBudget(gamma=1.0, kappa0=1.5, kappa1=kappa, kappa2=1.5, c0=1.0),
        kernel_id=2,
        kernel_params=(omega2, quartic),
    )


_REGISTRY = {
    "kolmogorov": kolmogorov,
    "holder": holder,
    "damped-hamiltonian": damped_hamiltonian,
}


def make_model(name: str, d: int = 1, **params) -> ModelSpec:
    """Instantiate a built-in model by id."""
    if name not in _REGISTRY:
        raise DomainError(f"unknown model {name!r}; available: {sorted(_REGISTRY)}")
    return _REGISTRY[name](d=d, **params)
