"""Hot numeric kernels: SDE path stepping and KDE accumulation.

Each kernel has a compiled (numba @njit) implementation for the built-in
d = 1 models and a pure-numpy fallback that works for any model.  The path
is selected once at import from the KK_NUMBA environment variable ("0",
"false" or "off" disables compilation); ``backend()`` reports the choice.
Noise is always generated outside the kernels (numpy Philox), so the sample
law does not depend on the backend.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("KK_NUMBA", "").strip().lower()
_want_numba = _flag not in ("0", "false", "off")

if _want_numba:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# Built-in model ids understood by the compiled kernels (d = 1 only):
# 0 kolmogorov, 1 holder(a, b, c, gamma), 2 damped-hamiltonian(omega2, quartic).


def _drift_scalar(model_id, params, x1, x2):
    if model_id == 0:
        return 0.0, x1
    if model_id == 1:
        a, b, c, gamma = params[0], params[1], params[2], params[3]
        f1 = a * math.copysign(min(abs(x1) ** gamma, 1.0), x1) + b * x1
        f2 = x1 + c * min(abs(x2) ** ((1.0 + gamma) / 3.0), 1.0)
        return f1, f2
    omega2, quartic = params[0], params[1]
    return -(omega2 * x2 + quartic * x2 * x2 * x2) - x1, x1


def _sigma_scalar(model_id, params, x1, x2):
    if model_id == 1:
        gamma = params[3]
        nd = abs(x1) + abs(x2) ** (1.0 / 3.0)
        return 1.0 + 0.25 * math.sin(nd**gamma)
    return 1.0


def _euler_chunk_py(x, z, t0, h, model_id, params):
    """Euler-Maruyama steps for d = 1: noise on the first block only."""
    m, nsteps = z.shape[0], z.shape[1]
    sqh = math.sqrt(h)
    for k in range(nsteps):
        t = t0 + k * h
        for i in range(m):
            x1, x2 = x[i, 0], x[i, 1]
            f1, f2 = _drift_scalar(model_id, params, x1, x2)
            sig = _sigma_scalar(model_id, params, x1, x2)
            x[i, 0] = x1 + h * f1 + sqh * sig * z[i, k, 0]
            x[i, 1] = x2 + h * f2


def _substep_chunk_py(x, z, t0, h, model_id, params):
    """Frozen-Gaussian steps for d = 1: RK4 transport plus the exact
    covariance of the locally linearized dynamics (A = grad_x1 F2, P = sigma^2
    frozen at the step start)."""
    m, nsteps = z.shape[0], z.shape[1]
    for k in range(nsteps):
        t = t0 + k * h
        for i in range(m):
            x1, x2 = x[i, 0], x[i, 1]
            a1, a2 = _drift_scalar(model_id, params, x1, x2)
            b1, b2 = _drift_scalar(model_id, params, x1 + 0.5 * h * a1, x2 + 0.5 * h * a2)
            c1, c2 = _drift_scalar(model_id, params, x1 + 0.5 * h * b1, x2 + 0.5 * h * b2)
            d1, d2 = _drift_scalar(model_id, params, x1 + h * c1, x2 + h * c2)
            m1 = x1 + h / 6.0 * (a1 + 2 * b1 + 2 * c1 + d1)
            m2 = x2 + h / 6.0 * (a2 + 2 * b2 + 2 * c2 + d2)
            sig = _sigma_scalar(model_id, params, x1, x2)
            P = sig * sig
            k11 = h * P
            k12 = 0.5 * h * h * P
            k22 = h * h * h / 3.0 * P
            l11 = math.sqrt(k11)
            l21 = k12 / l11
            l22 = math.sqrt(max(k22 - l21 * l21, 0.0))
            x[i, 0] = m1 + l11 * z[i, k, 0]
            x[i, 1] = m2 + l21 * z[i, k, 0] + l22 * z[i, k, 1]


def _kde_accumulate_py(samples, queries, bw):
    """Anisotropic Gaussian product KDE: per query, mean and mean-of-squares
    of the kernel values (for the asymptotic standard error)."""
    n, k = samples.shape
    q = queries.shape[0]
    out = np.zeros((q, 2))
    lognorm = 0.0
    for j in range(k):
        lognorm += math.log(2.0 * math.pi) / 2.0 + math.log(bw[j])
    for iq in range(q):
        acc = 0.0
        acc2 = 0.0
        for i in range(n):
            e = 0.0
            for j in range(k):
                u = (queries[iq, j] - samples[i, j]) / bw[j]
                e += u * u
            val = math.exp(-0.5 * e - lognorm)
            acc += val
            acc2 += val * val
        out[iq, 0] = acc / n
        out[iq, 1] = acc2 / n
    return out


if HAS_NUMBA:
    _drift_scalar = njit(cache=True)(_drift_scalar)
    _sigma_scalar = njit(cache=True)(_sigma_scalar)
    euler_chunk = njit(cache=True)(_euler_chunk_py)
    substep_chunk = njit(cache=True)(_substep_chunk_py)
    kde_accumulate = njit(cache=True)(_kde_accumulate_py)
else:
    euler_chunk = _euler_chunk_py
    substep_chunk = _substep_chunk_py
    kde_accumulate = _kde_accumulate_py


# ---------------------------------------------------------------------------
# Generic numpy fallbacks for arbitrary models / dimensions
# ---------------------------------------------------------------------------

def euler_chunk_generic(model, x, z, t0, h):
    """Vectorized Euler-Maruyama chunk for any ModelSpec; mutates x (m, 2d)."""
    d = model.d
    nsteps = z.shape[1]
    sqh = np.sqrt(h)
    for k in range(nsteps):
        t = t0 + k * h
        f1 = model.F1(t, x)
        f2 = model.F2(t, x)
        sig = model.sigma(t, x)
        x[:, :d] += h * f1 + sqh * np.einsum("mij,mj->mi", sig, z[:, k, :])
        x[:, d:] += h * f2
    return x


def substep_chunk_generic(model, x, z, t0, h):
    """Vectorized frozen-Gaussian chunk for any ModelSpec; mutates x (m, 2d).

    Mean by one RK4 step of the drift, covariance from the locally frozen
    (A, sigma sigma^*) in closed form, sampled through a batched Cholesky.
    """
    d = model.d
    drift = model.drift
    nsteps = z.shape[1]
    m = x.shape[0]
    for k in range(nsteps):
        t = t0 + k * h
        k1 = drift(t, x)
        k2 = drift(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = drift(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = drift(t + h, x + h * k3)
        mean = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        A = model.grad_x1_F2(t, x)
        P = model.diffusion_matrix(t, x)
        AP = np.einsum("mij,mjk->mik", A, P)
        K = np.empty((m, 2 * d, 2 * d))
        K[:, :d, :d] = h * P
        K[:, d:, :d] = 0.5 * h * h * AP
        K[:, :d, d:] = np.swapaxes(K[:, d:, :d], -1, -2)
        K[:, d:, d:] = h**3 / 3.0 * np.einsum("mij,mkj->mik", AP, A)
        L = np.linalg.cholesky(K)
        x[:] = mean + np.einsum("mij,mj->mi", L, z[:, k, :])
    return x


def kde_accumulate_generic(samples, queries, bw):
    """Chunked numpy version of the KDE accumulation."""
    n, k = samples.shape
    q = queries.shape[0]
    lognorm = 0.5 * k * np.log(2.0 * np.pi) + np.sum(np.log(bw))
    out = np.zeros((q, 2))
    chunk = max(1, int(2e6) // max(q, 1))
    for lo in range(0, n, chunk):
        block = samples[lo:lo + chunk]
        u = (queries[:, None, :] - block[None, :, :]) / bw[None, None, :]
        vals = np.exp(-0.5 * np.sum(u * u, axis=-1) - lognorm)
        out[:, 0] += vals.sum(axis=1)
        out[:, 1] += (vals * vals).sum(axis=1)
    return out / n
