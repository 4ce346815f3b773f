"""Path simulation of the kinetic SDE and empirical density estimation.

Reproducibility contract: noise comes from counter-based Philox streams keyed
by (seed, block index) over fixed-size path blocks, so a batch is bit-identical
for any worker count; workers only decide which blocks run concurrently.
Schemes: plain Euler-Maruyama (noise on the first block only) and the
frozen-Gaussian substep (exact transition law per step for the locally
linearized dynamics; unbiased on the constant-coefficient model).
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, geometry
from .coefficients import ModelSpec
from .errors import DomainError
from .flow import flow_end, integrate_flow, tilde_flow
from .coefficients import mollify_drift

__all__ = [
    "SimConfig",
    "SampleBatch",
    "DensityEstimate",
    "simulate",
    "save_samples",
    "load_samples",
    "kde",
    "rate_fit",
    "envelope_fit",
    "bound_audit",
    "BoundAuditReport",
    "gradient_estimate",
]

BLOCK_PATHS = 32768      # fixed block size; the determinism unit
STEP_CHUNK = 128         # noise generated this many steps at a time

_MAGIC = b"KKMC1\x00\x00\x00"


def worker_count(requested: int | None = None) -> int:
    """Worker cap: explicit argument, else KK_THREADS (0 = auto), else 1."""
    if requested is None:
        env = os.environ.get("KK_THREADS", "").strip()
        requested = int(env) if env else 1
    if requested == 0:
        return min(8, os.cpu_count() or 1)
    return max(1, requested)


@dataclass(frozen=True)
class SimConfig:
    nsteps: int
    npaths: int
    seed: int
    scheme: str = "euler"
    workers: int | None = None

    def __post_init__(self):
        if self.nsteps < 1 or self.npaths < 1:
            raise DomainError("nsteps and npaths must be >= 1")
        if self.scheme not in ("euler", "exact-linear-substep"):
            raise DomainError(f"unknown scheme {self.scheme!r}")


@dataclass
class SampleBatch:
    samples: np.ndarray      # (kept, 2d) terminal states, non-finite paths removed
    d: int
    seed: int
    nsteps: int
    s: float
    t: float
    scheme: str
    excluded: int = 0

    @property
    def span(self) -> float:
        return self.t - self.s


def _block_ranges(npaths: int):
    return [(lo, min(lo + BLOCK_PATHS, npaths)) for lo in range(0, npaths, BLOCK_PATHS)]


def simulate(model: ModelSpec, s: float, x, t: float, cfg: SimConfig) -> SampleBatch:
    """Simulate terminal states of the kinetic SDE from (s, x) to time t."""
    if not t > s:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    xv = geometry.as_vec(x)
    d = model.d
    if xv.size != 2 * d:
        raise DomainError(f"start point has dimension {xv.size}, model expects {2 * d}")
    h = (t - s) / cfg.nsteps
    euler = cfg.scheme == "euler"
    noise_dim = d if euler else 2 * d
    compiled = _kernels.HAS_NUMBA and model.kernel_id is not None and d == 1
    params = np.zeros(4)
    params[: len(model.kernel_params)] = model.kernel_params

    out = np.empty((cfg.npaths, 2 * d))
    seed64 = np.uint64(cfg.seed & (2**64 - 1))

    def run_block(args):
        b, (lo, hi) = args
        gen = np.random.Generator(np.random.Philox(key=np.array([seed64, np.uint64(b)], dtype=np.uint64)))
        xb = np.tile(xv, (hi - lo, 1))
        done = 0
        while done < cfg.nsteps:
            k = min(STEP_CHUNK, cfg.nsteps - done)
            z = gen.standard_normal((hi - lo, k, noise_dim))
            t0 = s + done * h
            if compiled:
                fn = _kernels.euler_chunk if euler else _kernels.substep_chunk
                fn(xb, z, t0, h, model.kernel_id, params)
            else:
                fn = _kernels.euler_chunk_generic if euler else _kernels.substep_chunk_generic
                fn(model, xb, z, t0, h)
            done += k
        out[lo:hi] = xb

    jobs = list(enumerate(_block_ranges(cfg.npaths)))
    nw = worker_count(cfg.workers)
    if nw > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            list(pool.map(run_block, jobs))
    else:
        for job in jobs:
            run_block(job)

    finite = np.all(np.isfinite(out), axis=1)
    excluded = int(np.sum(~finite))
    return SampleBatch(out[finite], d, cfg.seed, cfg.nsteps, s, t, cfg.scheme, excluded)


def save_samples(path, batch: SampleBatch):
    """Flat binary layout: 8-byte magic "KKMC1\\0\\0\\0", four little-endian
    uint64 (d, npaths, seed, nsteps), then float64 samples, path-major."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQQ", batch.d, batch.samples.shape[0],
                             batch.seed & (2**64 - 1), batch.nsteps))
        fh.write(np.ascontiguousarray(batch.samples, dtype="<f8").tobytes())


def load_samples(path) -> SampleBatch:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise DomainError(f"{path} is not a sample file (bad magic {magic!r})")
        d, npaths, seed, nsteps = struct.unpack("<QQQQ", fh.read(32))
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(npaths, 2 * d)
    return SampleBatch(data.copy(), int(d), int(seed), int(nsteps), 0.0, 0.0, "file")


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------

@dataclass
class DensityEstimate:
    value: float
    stderr: float
    bandwidth: tuple
    provenance: str = "kde"

    def __post_init__(self):
        if self.value < 0 or self.stderr < 0:
            raise DomainError("density estimates and standard errors are non-negative")


def default_bandwidth_factor(npaths: int) -> float:
    return 0.3 * npaths ** (-1.0 / 6.0)


def kde(batch: SampleBatch, queries, h: float | None = None, se: str = "bootstrap",
        n_boot: int = 100, boot_seed: int = 1) -> list[DensityEstimate]:
    """Anisotropic product-kernel density estimate at the query points.

    Per-component bandwidths h (t-s)^{1/2} on the first block and
    h (t-s)^{3/2} on the second, the intrinsic scales of the dynamics.
    ``se="bootstrap"`` uses a Poisson-weight bootstrap over kernel values;
    "asymptotic" uses the influence-function variance.
    """
    samples = batch.samples
    if samples.shape[0] == 0:
        raise DomainError("empty sample batch")
    d = batch.d
    span = batch.span
    if span <= 0:
        raise DomainError("sample batch carries no positive time span")
    if h is None:
        h = default_bandwidth_factor(samples.shape[0])
    h1, h2 = h * np.sqrt(span), h * span**1.5
    bw = np.concatenate([np.full(d, h1), np.full(d, h2)])
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    n = samples.shape[0]

    if se == "bootstrap":
        rng = np.random.Generator(np.random.Philox(key=np.array(
            [np.uint64(batch.seed & (2**64 - 1)), np.uint64(boot_seed)], dtype=np.uint64)))
        boots = np.zeros((n_boot, Q.shape[0]))
        mean = np.zeros(Q.shape[0])
        lognorm = 0.5 * 2 * d * np.log(2 * np.pi) + np.sum(np.log(bw))
        chunk = max(1, int(2e6) // max(Q.shape[0], 1))
        for lo in range(0, n, chunk):
            block = samples[lo:lo + chunk]
            u = (Q[:, None, :] - block[None, :, :]) / bw[None, None, :]
            vals = np.exp(-0.5 * np.sum(u * u, axis=-1) - lognorm)   # (q, nc)
            mean += vals.sum(axis=1)
            w = rng.poisson(1.0, size=(n_boot, block.shape[0]))
            boots += w @ vals.T
        mean /= n
        boots /= n
        stderr = boots.std(axis=0, ddof=1)
    else:
        acc = (_kernels.kde_accumulate if _kernels.HAS_NUMBA
               else _kernels.kde_accumulate_generic)(samples, Q, bw)
        mean = acc[:, 0]
        stderr = np.sqrt(np.maximum(acc[:, 1] - mean**2, 0.0) / n)

    return [DensityEstimate(float(v), float(e), (float(h1), float(h2)))
            for v, e in zip(mean, stderr)]


def effective_sample_size(batch: SampleBatch, query, bw: tuple) -> float:
    """(sum K)^2 / sum K^2 for the kernel values at one query; counts how many
    samples actually support the estimate."""
    d = batch.d
    bwv = np.concatenate([np.full(d, bw[0]), np.full(d, bw[1])])
    u = (np.asarray(query, dtype=float)[None, :] - batch.samples) / bwv[None, :]
    vals = np.exp(-0.5 * np.sum(u * u, axis=-1))
    s1, s2 = float(vals.sum()), float(np.sum(vals * vals))
    return s1 * s1 / s2 if s2 > 0 else 0.0


# ---------------------------------------------------------------------------
# Rate fits and two-sided bound audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def rate_fit(pairs) -> RateFit:
    """OLS on log-log data (t, magnitude); needs >= 4 points over >= 3 dyadic levels."""
    pairs = [(float(a), float(b)) for a, b in pairs]
    if len(pairs) < 4:
        raise DomainError("need at least 4 (span, value) pairs")
    ts = np.array([a for a, _ in pairs])
    vs = np.array([b for _, b in pairs])
    if np.max(ts) / np.min(ts) < 7.9:
        raise DomainError("spans must cover at least 3 dyadic levels")
    if np.any(vs <= 0):
        raise DomainError("values must be positive for a log-log fit")
    lx, ly = np.log(ts), np.log(vs)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    sstot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / sstot if sstot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2)


@dataclass
class AuditPoint:
    s: float
    x: list
    t: float
    y: list
    q: float                 # |T^{-1}(center - y)|^2
    value: float
    stderr: float
    ess: float
    needed_c: float = np.inf
    violation: bool = False
    low_ess: bool = False


@dataclass
class BoundAuditReport:
    c0: float
    lam0: float
    points: list
    violations: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    @property
    def n_violations(self) -> int:
        return len(self.violations)


def envelope_fit(points, lam_grid=None, c_max: float = 1e3, stderr_mult: float = 4.0):
    """Fit the smallest (C0, lam0) with C0^{-1} g_{1/lam0} <= p <= C0 g_{lam0}
    over the audit points, allowing each point its stderr_mult * stderr slack.

    Finite caps give "violation" meaning: a point whose required constant
    exceeds c_max even with slack cannot be covered by finite constants.
    """
    if lam_grid is None:
        lam_grid = np.geomspace(1.0, 64.0, 48)
    qs = np.array([p.q for p in points])
    spans = np.array([p.t - p.s for p in points])
    vals = np.array([p.value for p in points])
    ses = np.array([p.stderr for p in points])
    d = len(points[0].x) // 2
    pref = spans ** (-2.0 * d)
    hi = np.maximum(vals - stderr_mult * ses, 0.0)
    lo = vals + stderr_mult * ses

    best = (np.inf, lam_grid[0], None)
    for lam in lam_grid:
        g_up = pref * np.exp(-qs / (2.0 * lam))
        g_lo = pref * np.exp(-qs * lam / 2.0)
        needed = np.maximum(1.0, np.maximum(hi / g_up, g_lo / np.maximum(lo, 1e-300)))
        c = float(needed.max())
        if c < best[0]:
            best = (c, float(lam), needed.copy())
    c0, lam0, needed = best
    for p, nc in zip(points, needed):
        p.needed_c = float(nc)
        p.violation = bool(nc > c_max)
    return min(c0, c_max), lam0


def bound_audit(model: ModelSpec, grid, sim: SimConfig, flow_choice: str = "tilde",
                h: float | None = None, c_max: float = 1e3, lam_max: float = 64.0,
                stderr_mult: float = 4.0, min_ess: float = 25.0) -> BoundAuditReport:
    """Audit the two-sided flow-centered Gaussian bounds against KDE estimates.

    ``grid`` is a list of (s, x, t, y); queries sharing (s, x, t) reuse one
    simulation.  ``flow_choice`` picks the centering: "tilde" (two-scale
    mollified flow), "mollified-eps" (single-scale, eps = (t-s)^{3/2}), or
    "raw-x" (no transport; the negative control).  Low effective-sample-size
    queries are flagged, not counted as violations.
    """
    if flow_choice not in ("tilde", "mollified-eps", "raw-x"):
        raise DomainError(f"unknown flow choice {flow_choice!r}")
    groups: dict = {}
    for (s, x, t, y) in grid:
        key = (float(s), tuple(geometry.as_vec(x)), float(t))
        groups.setdefault(key, []).append(geometry.as_vec(y))

    points = []
    for gi, ((s, xt, t), ys) in enumerate(groups.items()):
        xv = np.array(xt)
        cfg = SimConfig(sim.nsteps, sim.npaths, sim.seed + gi, sim.scheme, sim.workers)
        batch = simulate(model, s, xv, t, cfg)
        if flow_choice == "tilde":
            center = tilde_flow(model, s, t, xv).end
        elif flow_choice == "mollified-eps":
            eps = min(0.999, (t - s) ** 1.5)
            center = flow_end(mollify_drift(model, eps), s, t, xv)
        else:
            center = xv
        ests = kde(batch, np.stack(ys), h=h)
        for y, est in zip(ys, ests):
            q = float(geometry.scaled_sqnorm(t - s, center - y))
            ess = effective_sample_size(batch, y, est.bandwidth)
            points.append(AuditPoint(s, xv.tolist(), t, y.tolist(), q,
                                     est.value, est.stderr, ess, low_ess=ess < min_ess))

    usable = [p for p in points if not p.low_ess]
    if not usable:
        raise DomainError("no audit query had enough effective samples")
    c0, lam0 = envelope_fit(usable, np.geomspace(1.0, lam_max, 48), c_max, stderr_mult)
    return BoundAuditReport(
        c0=c0,
        lam0=lam0,
        points=points,
        violations=[p for p in usable if p.violation],
        flagged=[p for p in points if p.low_ess],
    )


def gradient_estimate(model: ModelSpec, s: float, x, t: float, query, cfg: SimConfig,
                      direction: str = "x1", component: int = 0, h_factor: float = 0.1,
                      bw: float | None = None) -> tuple[float, float]:
    """Common-random-numbers finite-difference gradient of the density in the
    initial point: two simulations share their noise (same seed), so the
    difference quotient variance stays bounded as the step shrinks."""
    xv = geometry.as_vec(x)
    d = model.d
    offset = 0 if direction == "x1" else d
    step = h_factor * (t - s) ** (0.5 if direction == "x1" else 1.5)
    e = np.zeros(2 * d)
    e[offset + component] = step
    plus = kde(simulate(model, s, xv + e, t, cfg), [query], h=bw, se="asymptotic")[0]
    minus = kde(simulate(model, s, xv - e, t, cfg), [query], h=bw, se="asymptotic")[0]
    grad = (plus.value - minus.value) / (2.0 * step)
    err = np.hypot(plus.stderr, minus.stderr) / (2.0 * step)
    return grad, err
