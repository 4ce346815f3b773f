"""Parametrix/Duhamel machinery: the discrepancy kernel H, space-time
convolution, and the truncated series for the transition density

    p(s,x;t,y) ~= p1(s,x;t,y) + sum_{j=1}^{N-1} (p1 (x) H^{(x) j})(s,x;t,y),

with p1 the forward frozen proxy (freezing at the target).  The kernel H
measures the generator discrepancy applied to the proxy: a diffusion-
coefficient difference against the second x1 derivative, an F1 difference
against the x1 gradient, and the first-order anisotropic Taylor remainder of
F2 against the x2 gradient; it vanishes identically when sigma is constant,
F1 constant and F2 affine in x1 along the frozen flow.

Numerics: time integrals carry endpoint factors (t-r)^{j gamma/2 - 1} and
(u-r)^{gamma/2 - 1}; they are integrated with power-substituted Gauss rules.
Spatial integrals use anisotropic Gauss-Legendre boxes adapted to the product
of the two bracketing Gaussian envelopes (the from-side proxy and the
target-side kernel factor), so mass concentration near either time endpoint
is resolved without raising node counts.  Frozen data is memoized per time
node in shared ``FrozenBatch`` bundles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .coefficients import ModelSpec
from .errors import DomainError, NumericError
from .flow import integrate_flow
from .frozen import FrozenBatch, gauss_fields, gram_equivalence, local_frozen_data
from ._quad import (box_nodes, gaussian_box_grid, gaussian_product,
                    gaussian_product_batched, singular_rule)

__all__ = [
    "QuadratureSpec",
    "SeriesResult",
    "kernel_H",
    "convolve",
    "density_series",
    "density_series_batch",
    "grad_density",
    "ck_residual",
]


@dataclass(frozen=True)
class QuadratureSpec:
    """Discretization of the space-time convolutions.

    time_nodes per convolution level (halved per extra nesting depth, floor
    min_time_nodes); space_nodes per dimension on the product-adapted box of
    the given halfwidth (in envelope standard deviations); flow_nodes_per_unit
    controls the dense grids inside frozen bundles.
    """

    time_nodes: int = 10
    space_nodes: int = 20
    halfwidth: float = 6.0
    min_time_nodes: int = 4
    depth_factor: float = 0.6
    flow_nodes_per_unit: int = 96
    near_time_nodes: int = 8
    near_space_nodes: int = 13
    near_halfwidth: float = 5.0
    resolve_mult: float = 2.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.time_nodes < 4 or self.space_nodes < 4:
            raise DomainError("need at least 4 nodes per axis")
        if self.halfwidth < 4.0:
            raise DomainError("halfwidth must cover at least 4 standard deviations")

    def nodes_at_depth(self, depth: int) -> int:
        return max(self.min_time_nodes, int(round(self.time_nodes * self.depth_factor**depth)))


@dataclass
class SeriesResult:
    """Truncated parametrix value with its per-order contributions.

    ``terms[0]`` is the frozen proxy, ``terms[j]`` the j-fold convolution
    correction; ``value = sum(terms)``.  ``remainder`` is the empirical
    Gamma-law extrapolation of the next term's size.
    """

    value: float
    terms: list
    remainder: float
    orders: int

    def __post_init__(self):
        if abs(self.value - sum(self.terms)) > 1e-9 * max(1.0, abs(self.value)):
            raise NumericError("series terms do not sum to value")


def _coef_fields(model: ModelSpec, r: float, pts: np.ndarray):
    a = 0.5 * model.diffusion_matrix(r, pts)
    return a, model.F1(r, pts), model.F2(r, pts)


def kernel_block(model: ModelSpec, r: float, A: np.ndarray, bundle: FrozenBatch) -> np.ndarray:
    """H(r, a; u, w) for all from-points a (rows) and freeze points w of the
    bundle (columns); u is the bundle's freeze time."""
    d = model.d
    flds = bundle.proxy_block(r, A, derivs=("d1p1", "d1p2", "d2p1"))
    th = bundle.theta(r)
    a_A, F1_A, F2_A = _coef_fields(model, r, A)
    a_th, F1_th, F2_th = _coef_fields(model, r, th)
    grad_th = model.grad_x1_F2(r, th)
    diff1 = A[:, None, :d] - th[None, :, :d]
    da = a_A[:, None] - a_th[None, :]
    dF1 = F1_A[:, None] - F1_th[None, :]
    taylor = F2_A[:, None] - F2_th[None, :] - np.einsum("mij,amj->ami", grad_th, diff1)
    return (
        np.einsum("amij,amij->am", da, flds["d2p1"])
        + np.einsum("ami,ami->am", dF1, flds["d1p1"])
        + np.einsum("ami,ami->am", taylor, flds["d1p2"])
    )


def kernel_H(model: ModelSpec, r: float, z, t: float, y) -> float:
    """Parametrix kernel at a single space-time pair (r, z) -> (t, y), r < t."""
    if not r < t:
        raise DomainError(f"need r < t, got r={r}, t={t}")
    zv, yv = geometry.as_vec(z), geometry.as_vec(y)
    bundle = FrozenBatch(model, t, yv[None, :], r, t)
    return float(kernel_block(model, r, zv[None, :], bundle)[0, 0])


class _GridFactory:
    """Product-envelope spatial grids for convolutions between (s, X) and (t, Y).

    The from-side envelope at time v is the Gram of the proxy frozen at
    (s, xbar); the target-side envelope is the pullback of the Gram frozen at
    (t, ybar) through the resolvent.  Batch spread widens both, so one grid
    serves a whole batch of endpoints.
    """

    def __init__(self, model: ModelSpec, s: float, X: np.ndarray, t: float, Y: np.ndarray,
                 quad: QuadratureSpec, ybundle: FrozenBatch | None = None):
        self.model = model
        self.s, self.t = s, t
        self.quad = quad
        self.X = np.atleast_2d(X)
        self.Y = np.atleast_2d(Y)
        d = model.d
        xbar = self.X.mean(axis=0)
        self.xbundle = FrozenBatch(model, s, xbar[None, :], s, t,
                                   nodes_per_unit=quad.flow_nodes_per_unit)
        self.ybundle = ybundle if ybundle is not None else FrozenBatch(
            model, t, self.Y, s, t, nodes_per_unit=quad.flow_nodes_per_unit)
        self.jc = int(np.argmin(np.linalg.norm(self.Y - self.Y.mean(axis=0), axis=1)))
        self.covX = np.cov(self.X.T) if self.X.shape[0] > 1 else np.zeros((2 * d, 2 * d))
        self._envelopes: dict = {}
        self._yenv: dict = {}
        self._nodes: dict = {}
        self._bundles: dict = {}
        self._cuts: dict = {}
        center = 0.5 * (xbar + self.Y.mean(axis=0))
        self._pbar = float(np.trace(model.diffusion_matrix(0.5 * (s + t), center)) / d)

    def _R_full(self, G: np.ndarray, sign: float = 1.0) -> np.ndarray:
        d = self.model.d
        R = np.eye(2 * d)
        R[d:, :d] = sign * G
        return R

    def yside_envelope(self, v: float):
        """Gaussian envelope (mu2, S2) in z of the target-side factor at time v
        (pullback of the Gram frozen at (t, ybar) through the resolvent)."""
        key = round(float(v), 13)
        hit = self._yenv.get(key)
        if hit is not None:
            return hit
        th_v = self.ybundle.theta(v)
        mu2 = th_v[self.jc]
        Rinv = self._R_full(self.ybundle.G(v, self.t)[self.jc], sign=-1.0)
        K2 = self.ybundle.K(v, self.t)[self.jc]
        S2 = Rinv @ K2 @ Rinv.T
        if th_v.shape[0] > 1:
            S2 = S2 + np.cov(th_v.T)
        self._yenv[key] = (mu2, S2)
        return mu2, S2

    def envelope(self, v: float):
        """Product-Gaussian envelope (mu, S) of the transition mass at time v."""
        key = round(float(v), 13)
        hit = self._envelopes.get(key)
        if hit is not None:
            return hit
        mu1 = self.xbundle.theta(v)[0]
        S1 = self.xbundle.K(self.s, v)[0]
        if self.X.shape[0] > 1:
            R1 = self._R_full(self.xbundle.G(self.s, v)[0])
            S1 = S1 + R1 @ self.covX @ R1.T
        mu2, S2 = self.yside_envelope(v)
        mu, S = gaussian_product(mu1, S1, mu2, S2)
        self._envelopes[key] = (mu, S)
        return mu, S

    def nodes(self, v: float):
        key = round(float(v), 13)
        hit = self._nodes.get(key)
        if hit is not None:
            return hit
        mu, S = self.envelope(v)
        Z, wz = gaussian_box_grid(mu, S, self.quad.space_nodes, self.quad.halfwidth)
        self._nodes[key] = (Z, wz)
        return Z, wz

    def bundle(self, v: float) -> FrozenBatch:
        key = round(float(v), 13)
        hit = self._bundles.get(key)
        if hit is None:
            Z, _ = self.nodes(v)
            hit = FrozenBatch(self.model, v, Z, self.s, v,
                              nodes_per_unit=self.quad.flow_nodes_per_unit)
            self._bundles[key] = hit
        return hit

    def _resolved(self, v: float, u: float) -> bool:
        """Whether the kernel collapsing at scale (u - v) is resolved by the
        shared grid at time u, per block, with a safety multiple."""
        d = self.model.d
        _, S = self.envelope(u)
        spacing = 2.0 * self.quad.halfwidth / self.quad.space_nodes
        mult = self.quad.resolve_mult
        h = u - v
        w1 = np.sqrt(h * self._pbar)
        w2 = np.sqrt(h**3 * self._pbar / 3.0)
        s1 = np.sqrt(np.max(np.diagonal(S)[:d]))
        s2 = np.sqrt(np.max(np.diagonal(S)[d:]))
        return w1 >= mult * spacing * s1 and w2 >= mult * spacing * s2

    def resolution_cut(self, v: float) -> float:
        """Smallest u > v from which the shared grids resolve the collapsing
        kernel; below the cut a dedicated near-diagonal rule takes over."""
        key = round(float(v), 13)
        hit = self._cuts.get(key)
        if hit is not None:
            return hit
        lo, hi = v + 1e-3 * (self.t - v), v + 0.9 * (self.t - v)
        if self._resolved(v, lo):
            cut = lo
        elif not self._resolved(v, hi):
            cut = hi
        else:
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if self._resolved(v, mid):
                    hi = mid
                else:
                    lo = mid
            cut = hi
        self._cuts[key] = cut
        return cut


class _SeriesEvaluator:
    def __init__(self, model: ModelSpec, s: float, X: np.ndarray, t: float, Y: np.ndarray,
                 N: int, quad: QuadratureSpec, want_grad: bool = False):
        if not t > s:
            raise DomainError(f"need s < t, got s={s}, t={t}")
        if N < 1:
            raise DomainError(f"series order must be >= 1, got N={N}")
        self.model = model
        self.s, self.t = float(s), float(t)
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(Y, dtype=float))
        self.N = N
        self.quad = quad
        self.gamma = model.budget.gamma
        self.want_grad = want_grad
        self.factory = _GridFactory(model, self.s, self.X, self.t, self.Y, quad)
        self.ybundle = self.factory.ybundle
        self._kernel_seen_nonzero = False

    def _psi(self, j: int, v: float, Z: np.ndarray, depth: int) -> np.ndarray:
        """H^{(x) j} ending at (t, Y), tabulated on the from-grid (v, Z); (mz, my)."""
        if j == 1:
            blk = kernel_block(self.model, v, Z, self.ybundle)
            if np.any(blk != 0.0):
                self._kernel_seen_nonzero = True
            return blk
        # Below the resolution cut the kernel's Gaussian is narrower than the
        # shared grids can resolve; a dedicated per-point rule covers that
        # near-diagonal part for j = 2 (for deeper levels it is truncated,
        # which biases those orders by a span-proportional fraction only).
        cut = self.factory.resolution_cut(v)
        acc = np.zeros((Z.shape[0], self.Y.shape[0]))
        if j == 2:
            acc += self._psi2_near(v, Z, cut)
        rs, ws = singular_rule(cut, self.t, self.quad.nodes_at_depth(depth),
                               alpha_left=0.5 * self.gamma,
                               alpha_right=0.5 * (j - 1) * self.gamma)
        for u, Wu in zip(rs, ws):
            Zu, wu = self.factory.nodes(u)
            Bu = self.factory.bundle(u)
            Hb = kernel_block(self.model, v, Z, Bu)
            acc += Wu * (Hb @ (wu[:, None] * self._psi(j - 1, u, Zu, depth + 1)))
        return acc

    def _psi2_near(self, v: float, Z: np.ndarray, cut: float) -> np.ndarray:
        """Near-diagonal part of (H (x) H)(v, z; t, Y): the inner time runs over
        [v, cut] where the bridging kernel collapses onto the forward image of
        each z.

        Per z, the w-integral uses a box aligned with the local frozen Gaussian
        (one-step transport, locally constant linearization); the frozen data
        of H comes from the same closed forms, valid on these short spans.
        """
        model = self.model
        d = model.d
        mz, my = Z.shape[0], self.Y.shape[0]
        acc = np.zeros((mz, my))
        rs, ws = singular_rule(v, cut, self.quad.near_time_nodes,
                               alpha_left=0.5 * self.gamma, alpha_right=1.0)
        xi, wxi = box_nodes(2 * d, self.quad.near_space_nodes, self.quad.near_halfwidth)
        a_z = 0.5 * model.diffusion_matrix(v, Z)
        F1_z = model.F1(v, Z)
        F2_z = model.F2(v, Z)
        for u, Wu in zip(rs, ws):
            h = u - v
            # per-z box on the product of the collapsing kernel's local Gaussian
            # (one-step image of z, locally frozen Gram) with the target-side
            # envelope at u
            place = local_frozen_data(model, v, u, Z)
            half = Z + 0.5 * h * model.drift(v, Z)
            mu_w = Z + h * model.drift(v + 0.5 * h, half)
            mu2, S2 = self.factory.yside_envelope(u)
            mu_p, S_p = gaussian_product_batched(mu_w, place["K"], mu2, S2)
            L = np.linalg.cholesky(S_p)
            W = mu_p[:, None, :] + np.einsum("zij,kj->zki", L, xi)
            wts = wxi[None, :] * np.abs(np.linalg.det(L))[:, None]
            # frozen data of the bridging kernel at freezing (u, w)
            lf = local_frozen_data(model, v, u, W)
            th = lf["theta"]
            diff = Z[:, None, :] - th
            e = np.empty_like(diff)
            e[..., :d] = diff[..., :d]
            e[..., d:] = np.einsum("zkij,zkj->zki", lf["G"], diff[..., :d]) + diff[..., d:]
            flds = gauss_fields(e, lf["G"], lf["Kinv"], lf["logdet"], d,
                                ("d1p1", "d1p2", "d2p1"))
            a_t = 0.5 * model.diffusion_matrix(v, th)
            F1_t = model.F1(v, th)
            F2_t = model.F2(v, th)
            g_t = model.grad_x1_F2(v, th)
            tay = F2_z[:, None, :] - F2_t - np.einsum("zkij,zkj->zki", g_t, diff[..., :d])
            Hn = (
                np.einsum("zkij,zkij->zk", a_z[:, None] - a_t, flds["d2p1"])
                + np.einsum("zki,zki->zk", F1_z[:, None] - F1_t, flds["d1p1"])
                + np.einsum("zki,zki->zk", tay, flds["d1p2"])
            )
            psi1 = kernel_block(model, u, W.reshape(-1, 2 * d), self.ybundle)
            psi1 = psi1.reshape(mz, -1, my)
            acc += Wu * np.einsum("zk,zk,zky->zy", wts, Hn, psi1)
        return acc

    def run(self) -> dict:
        mx, my = self.X.shape[0], self.Y.shape[0]
        d = self.model.d
        derivs = ("d1p1", "d1p2") if self.want_grad else ()
        top = self.ybundle.proxy_block(self.s, self.X, derivs=derivs)
        terms = [top["p"]]
        grads = None
        if self.want_grad:
            grads = [np.concatenate([top["d1p1"], top["d1p2"]], axis=-1)]

        for j in range(1, self.N):
            if j >= 2 and not self._kernel_seen_nonzero:
                terms.append(np.zeros((mx, my)))
                if self.want_grad:
                    grads.append(np.zeros((mx, my, 2 * d)))
                continue
            rs, ws = singular_rule(self.s, self.t, self.quad.nodes_at_depth(0),
                                   alpha_left=1.0, alpha_right=0.5 * j * self.gamma)
            acc = np.zeros((mx, my))
            acc_g = np.zeros((mx, my, 2 * d)) if self.want_grad else None
            for v, Wv in zip(rs, ws):
                Zv, wv = self.factory.nodes(v)
                psi = self._psi(j, v, Zv, depth=1)
                if not np.any(psi):
                    continue
                Bv = self.factory.bundle(v)
                blk = Bv.proxy_block(self.s, self.X, derivs=derivs)
                wpsi = wv[:, None] * psi
                acc += Wv * (blk["p"] @ wpsi)
                if self.want_grad:
                    g = np.concatenate([blk["d1p1"], blk["d1p2"]], axis=-1)
                    acc_g += Wv * np.einsum("azk,zy->ayk", g, wpsi)
            terms.append(acc)
            if self.want_grad:
                grads.append(acc_g)

        out = {"terms": terms, "value": sum(terms)}
        if self.want_grad:
            out["grad"] = sum(grads)
            out["grad_terms"] = grads
        return out


def _remainder_estimate(terms, gamma: float, span: float, N: int):
    """Gamma-law extrapolation |next term| <= C^N Gamma(g/2)^N / Gamma(N g/2) span^{N g/2} |p1|
    with C fitted to the measured per-order magnitudes."""
    base = np.abs(terms[0])
    floor = np.maximum(base, 1e-300)
    c_hat = np.zeros_like(base)
    for j in range(1, len(terms)):
        ratio = np.abs(terms[j]) / floor
        gj = math.gamma(0.5 * j * gamma) / math.gamma(0.5 * gamma) ** j
        c_hat = np.maximum(c_hat, (ratio * gj / span ** (0.5 * j * gamma)) ** (1.0 / j))
    gn = math.gamma(0.5 * gamma) ** N / math.gamma(0.5 * N * gamma)
    return c_hat**N * gn * span ** (0.5 * N * gamma) * base


def density_series_batch(model: ModelSpec, s: float, X, t: float, Y, N: int = 3,
                         quad: QuadratureSpec | None = None, want_grad: bool = False) -> dict:
    """Truncated parametrix series for batches of from-points X and targets Y.

    Returns {"value": (mx, my), "terms": list of (mx, my), "remainder": (mx, my)}
    plus "grad" (mx, my, 2d) when requested.
    """
    quad = quad or QuadratureSpec()
    ev = _SeriesEvaluator(model, s, np.atleast_2d(X), t, np.atleast_2d(Y), N, quad,
                          want_grad=want_grad)
    out = ev.run()
    out["remainder"] = _remainder_estimate(out["terms"], model.budget.gamma, t - s, N)
    return out


def density_series(model: ModelSpec, s: float, x, t: float, y, N: int = 3,
                   quad: QuadratureSpec | None = None) -> SeriesResult:
    """Truncated parametrix expansion at a single query; terms[0] is the proxy."""
    xv, yv = geometry.as_vec(x), geometry.as_vec(y)
    out = density_series_batch(model, s, xv[None, :], t, yv[None, :], N, quad)
    terms = [float(tm[0, 0]) for tm in out["terms"]]
    return SeriesResult(value=float(out["value"][0, 0]), terms=terms,
                        remainder=float(out["remainder"][0, 0]), orders=N)


def grad_density(model: ModelSpec, s: float, x, t: float, y, direction: str = "x1",
                 scheme: str = "analytic-leading", N: int = 3,
                 quad: QuadratureSpec | None = None, fd_factor: float = 0.02) -> np.ndarray:
    """Gradient of the truncated series in the from-point, one block at a time.

    'analytic-leading' differentiates every term exactly through the frozen
    Gaussians (the quadrature weights do not depend on the from-point,
    differentiation passes under the integral signs); 'finite-difference'
    applies central differences to density_series with the anisotropic steps
    h1 = c (t-s)^{1/2}, h2 = c (t-s)^{3/2}.
    """
    if direction not in ("x1", "x2"):
        raise DomainError(f"direction must be 'x1' or 'x2', got {direction!r}")
    xv, yv = geometry.as_vec(x), geometry.as_vec(y)
    d = model.d
    quad = quad or QuadratureSpec()
    if scheme == "analytic-leading":
        out = density_series_batch(model, s, xv[None, :], t, yv[None, :], N, quad,
                                   want_grad=True)
        g = out["grad"][0, 0]
        return g[:d] if direction == "x1" else g[d:]
    if scheme == "finite-difference":
        h = fd_factor * (t - s) ** (0.5 if direction == "x1" else 1.5)
        offset = 0 if direction == "x1" else d
        grad = np.empty(d)
        for i in range(d):
            step = np.zeros(2 * d)
            step[offset + i] = h
            fp = density_series(model, s, xv + step, t, yv, N, quad).value
            fm = density_series(model, s, xv - step, t, yv, N, quad).value
            grad[i] = (fp - fm) / (2.0 * h)
        return grad
    raise DomainError(f"scheme must be 'analytic-leading' or 'finite-difference', got {scheme!r}")


def convolve(model: ModelSpec, kernelA, kernelB, s: float, x, t: float, y,
             quad: QuadratureSpec | None = None,
             alphas: tuple[float, float] = (1.0, 1.0)) -> float:
    """Space-time convolution ∫_s^t ∫ kernelA(s,x;r,z) kernelB(r,z;t,y) dz dr.

    ``kernelA(s, x, r, Z)`` and ``kernelB(r, Z, t, y)`` must accept a batch of
    intermediate points Z (m, 2d) and return (m,).  ``alphas`` declares the
    endpoint exponents: the integrand may blow up like (r-s)^{alphas[0]-1}
    near s and (t-r)^{alphas[1]-1} near t; the time rule absorbs both.
    Spatial grids adapt to the product of the two transition envelopes.
    """
    quad = quad or QuadratureSpec()
    xv, yv = geometry.as_vec(x), geometry.as_vec(y)
    factory = _GridFactory(model, s, xv[None, :], t, yv[None, :], quad)
    rs, ws = singular_rule(s, t, quad.time_nodes, alpha_left=alphas[0], alpha_right=alphas[1])
    total = 0.0
    for r, W in zip(rs, ws):
        Z, wz = factory.nodes(r)
        va = np.asarray(kernelA(s, xv, r, Z), dtype=float)
        vb = np.asarray(kernelB(r, Z, t, yv), dtype=float)
        total += W * float(np.sum(wz * va * vb))
    return total


def _auto_lambda(model: ModelSpec, s: float, t: float) -> float:
    probes = list(np.eye(2 * model.d)) + [np.ones(2 * model.d)]
    c_low, _ = gram_equivalence(model, t, np.zeros(2 * model.d), s, t, probes)
    return 1.0 / c_low


def ck_residual(model: ModelSpec, s: float, r: float, t: float, grid, N: int = 2,
                quad: QuadratureSpec | None = None, lam: float | None = None,
                density: str = "auto") -> float:
    """Chapman-Kolmogorov consistency of the computed density.

    Max over the (x, y) grid of |∫ p(s,x;r,z) p(r,z;t,y) dz - p(s,x;t,y)|
    normalized by the flow-centered comparison Gaussian.  ``density`` selects
    the evaluator: "closed-form" (exactness anchor), "series", or "auto"
    (closed form when the model has one).
    """
    if not s < r < t:
        raise DomainError(f"need s < r < t, got {(s, r, t)}")
    quad = quad or QuadratureSpec()
    use_closed = density == "closed-form" or (density == "auto" and model.closed_form)
    if use_closed and not model.closed_form:
        raise DomainError(f"model {model.name} has no closed-form kernel")
    if lam is None:
        lam = _auto_lambda(model, s, t)
    from .closedform import kolmogorov_density, kolmogorov_density_batch

    worst = 0.0
    for x, y in grid:
        xv, yv = geometry.as_vec(x), geometry.as_vec(y)
        factory = _GridFactory(model, s, xv[None, :], t, yv[None, :], quad)
        Z, wz = factory.nodes(r)
        if use_closed:
            left = kolmogorov_density_batch(s, xv, r, Z)
            right = np.array([kolmogorov_density(r, z, t, yv) for z in Z])
            direct = kolmogorov_density(s, xv, t, yv)
        else:
            left = density_series_batch(model, s, xv[None, :], r, Z, N, quad)["value"][0]
            right = density_series_batch(model, r, Z, t, yv[None, :], N, quad)["value"][:, 0]
            direct = density_series_batch(model, s, xv[None, :], t, yv[None, :], N, quad)["value"][0, 0]
        conv = float(np.sum(wz * left * right))
        theta = integrate_flow(model, s, t, xv).end
        phat = geometry.gauss_g(lam, t - s, theta - yv)
        worst = max(worst, abs(conv - direct) / phat)
    return worst
