"""Covariance kernels, exact Gaussian grid sampling and supremum tail fits.

Notation used throughout: ``mu = mu1*mu2``, ``delta = mu1 - mu2`` and
``pq = p*(1 - p)``.  Under the unit-mean normalisation ``mu`` is the decay
rate of the Ornstein-Uhlenbeck component that carries the service-type
imbalance, and ``theta`` is the abandonment rate.

The centred process ``Gbar`` driving the tail is

    Gbar(t) = delta * int_0^t exp(-theta*y) OU(y) dy + sqrt(2) * int_0^t exp(-theta*y) dB(y)

with ``OU`` stationary with covariance ``pq/mu * exp(-mu|t-s|)``.  Its
variance increases to ``(theta + mu1 + mu2 - 1) / (theta (theta + mu))``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg, optimize

from .model import HyperExp2, ModelError, sup_variance_raw

KERNEL_KINDS = ("OU_stationary", "OU_zero_a", "OU_zero_b", "IOU", "REN_limit", "GBAR", "PI", "SKOR_limit")
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


@dataclass(frozen=True)
class Kernel:
    """Closed-form covariance function of one of the limit processes.

    ``kind`` is one of :data:`KERNEL_KINDS`.  ``B`` only enters the mean of
    the non-centred processes, never the covariance, and is kept so that
    samplers can add the deterministic drift.
    """

    kind: str
    p: float
    mu1: float
    mu2: float
    theta: float = 1.0
    B: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ModelError("unknown-kernel", self.kind)
        if self.kind in ("GBAR", "PI") and not self.mu > self.theta:
            raise ModelError("parameter-domain", f"mu1*mu2={self.mu} must exceed theta={self.theta}")
        if self.kind in ("OU_zero_b", "GBAR", "PI") and not self.theta > 0:
            raise ModelError("nonpositive-theta", f"theta={self.theta}")

    @property
    def mu(self) -> float:
        return self.mu1 * self.mu2

    @property
    def pq(self) -> float:
        return self.p * (1.0 - self.p)

    @property
    def delta(self) -> float:
        return self.mu1 - self.mu2

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        lo = np.minimum(s, t)
        hi = np.maximum(s, t)
        return getattr(self, "_" + self.kind.lower())(lo, hi)

    def matrix(self, grid) -> np.ndarray:
        g = np.asarray(grid, dtype=float)
        return self(g[:, None], g[None, :])

    def describe(self) -> dict:
        return {"kind": self.kind, "p": self.p, "mu1": self.mu1, "mu2": self.mu2,
                "theta": self.theta, "B": self.B}

    # each helper receives s <= t elementwise

    def _ou_stationary(self, s, t):
        return self.pq / self.mu * np.exp(-self.mu * (t - s))

    def _ou_zero_a(self, s, t):
        return self.pq / self.mu * (np.exp(-self.mu * (t - s)) - np.exp(-self.mu * (t + s)))

    def _ou_zero_b(self, s, t):
        th = self.theta
        return (np.exp(-th * (t - s)) - np.exp(-th * (t + s))) / th

    def _iou(self, s, t):
        mu = self.mu
        return self.pq / mu**3 * (2 * mu * s + np.exp(-mu * s) + np.exp(-mu * t)
                                  - np.exp(-mu * (t - s)) - 1.0)

    def _ren_limit(self, s, t):
        mu = self.mu
        K = self.pq * self.delta**2 / mu**3
        return (2 * K * mu + 1.0) * s - K + K * (np.exp(-mu * s) + np.exp(-mu * t) - np.exp(-mu * (t - s)))

    def _skor_limit(self, s, t):
        return s + self._ren_limit(s, t)

    def increment_variance(self, s, t):
        """``E[(Gbar(t) - Gbar(s))^2]`` (GBAR only), symmetric in its arguments."""
        if self.kind != "GBAR":
            raise ModelError("unsupported", "increment variance is defined for GBAR")
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return self._gbar_incvar(np.minimum(s, t), np.maximum(s, t))

    def _gbar_incvar(self, s, t):
        mu, th = self.mu, self.theta
        c = self.pq * self.delta**2
        a_minus = c / (th * mu * (mu - th)) + 1.0 / th
        cross = 2.0 * c / (mu * (mu - th) * (mu + th))
        # a_plus - a_minus + cross = 0, so factoring exp(-2 theta s) leaves two
        # expm1 terms and no cancellation near the diagonal
        h = t - s
        return np.exp(-2 * th * s) * (cross * np.expm1(-(mu + th) * h) - a_minus * np.expm1(-2 * th * h))

    def _gbar(self, s, t):
        zero = np.zeros_like(s)
        v = self._gbar_incvar
        return 0.5 * (v(zero, s) + v(zero, t) - v(s, t))

    def _pi(self, s, t):
        mu, th = self.mu, self.theta
        c = self.delta**2 * self.pq
        mp, mm = mu + th, mu - th
        return ((c / (mp * mm * th) + 1.0 / th) * np.exp(-th * (t - s))
                + 2 * c / (mp * mm**2) * np.exp(-mu * s - th * t)
                - (c / (th * mm**2) + 1.0 / th) * np.exp(-th * (s + t))
                - c / (mu * mp * mm) * np.exp(-mu * (t - s))
                + 2 * c / (mp * mm**2) * np.exp(-th * s - mu * t)
                - c / (mu * mm**2) * np.exp(-mu * (s + t)))


def kernel_eval(k: Kernel, s, t):
    return k(s, t)


def make_kernel(kind: str, d: HyperExp2, theta: float = 1.0, B: float = 0.0) -> Kernel:
    return Kernel(kind, d.p, d.mu1, d.mu2, theta, B)


def gbar_drift(t, B: float, theta: float):
    """Mean of the non-centred process: ``(B/theta)(1 - exp(-theta t))``."""
    return -B / theta * np.expm1(-theta * np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# Renewal function


def renewal_M(t, d: HyperExp2):
    """Expected renewals by ``t`` of the ordinary renewal process (unit mean)."""
    if not d.is_normalized:
        raise ModelError("not-normalized", f"mean is {d.mean}")
    mu = d.mu1 * d.mu2
    c = d.p * (1 - d.p) * (d.mu1 - d.mu2) ** 2 / mu**2
    return np.asarray(t, dtype=float) - c * np.expm1(-mu * np.asarray(t, dtype=float))


def renewal_M_numeric(t: float, d: HyperExp2, steps: int = 4000) -> float:
    """Solve ``M = F + M * f`` on a uniform grid (trapezoid + Richardson step).

    Independent of :func:`renewal_M`; used as its oracle.
    """
    def solve(m):
        h = t / m
        x = np.arange(m + 1) * h
        F = d.p * -np.expm1(-d.mu1 * x) + (1 - d.p) * -np.expm1(-d.mu2 * x)
        f = d.p * d.mu1 * np.exp(-d.mu1 * x) + (1 - d.p) * d.mu2 * np.exp(-d.mu2 * x)
        M = np.zeros(m + 1)
        for i in range(1, m + 1):
            # trapezoid over u in [0, x_i] of M(x_i - u) f(u); the M(x_i) f(0) term is implicit
            conv = 0.5 * M[0] * f[i] + np.dot(M[1:i][::-1], f[1:i])
            M[i] = (F[i] + h * conv) / (1.0 - 0.5 * h * f[0])
        return M[-1]

    coarse = solve(steps)
    fine = solve(2 * steps)
    return float(fine + (fine - coarse) / 3.0)


# ---------------------------------------------------------------------------
# Metric and covering bounds


@dataclass(frozen=True)
class MetricBounds:
    d: Callable
    diameter: float
    metric_bound: Callable
    C0: float
    kernel: Kernel


def _envelope_const(theta, mu1, mu2, p):
    mu = mu1 * mu2
    return p * (1 - p) * (mu1 - mu2) ** 2 / (mu * (mu - theta) * theta) + 1.0 / theta


def metric_and_bounds(theta: float, mu1: float, mu2: float, p: float) -> MetricBounds:
    """Canonical metric of ``Gbar`` with its diameter and explicit envelopes.

    ``metric_bound(s, t) = 4 A^{1/2} (1 - exp(-(mu+theta)(t-s)))^{1/2} exp(-theta s)``
    with ``A = pq delta^2 / (mu (mu - theta) theta) + 1/theta``, and the
    Hoelder constant is ``C0 = 4 A^{1/2} (1 + mu + theta)^{1/2}``.
    """
    k = Kernel("GBAR", p, mu1, mu2, theta)
    A = _envelope_const(theta, mu1, mu2, p)
    mu = mu1 * mu2

    def d(s, t):
        return np.sqrt(np.maximum(k.increment_variance(s, t), 0.0))

    def metric_bound(s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        lo, hi = np.minimum(s, t), np.maximum(s, t)
        return 4.0 * math.sqrt(A) * np.sqrt(-np.expm1(-(mu + theta) * (hi - lo))) * np.exp(-theta * lo)

    diameter = math.sqrt(sup_variance_raw(theta, mu1, mu2, p))
    C0 = 4.0 * math.sqrt(A) * math.sqrt(1.0 + mu + theta)
    return MetricBounds(d, diameter, metric_bound, C0, k)


@dataclass(frozen=True)
class CoveringBounds:
    N_bound: Callable
    entropy_integral_upper: float
    quad_error: float


def covering_and_entropy(theta: float, mu1: float, mu2: float, p: float,
                         epsabs: float = 1e-10) -> CoveringBounds:
    """Covering-number bound and the resulting Dudley entropy integral."""
    mb = metric_and_bounds(theta, mu1, mu2, p)
    C0, diam = mb.C0, mb.diameter

    def N_bound(eps):
        eps = np.asarray(eps, dtype=float)
        with np.errstate(divide="ignore"):
            val = C0**3 / (theta * eps**3) + 2.0
        return np.where(eps >= diam, 1.0, val)

    def integrand(eps):
        return math.sqrt(math.log(float(N_bound(eps))))

    value, err = integrate.quad(integrand, 0.0, diam, epsabs=epsabs, epsrel=1e-12, limit=400)
    return CoveringBounds(N_bound, float(value), float(err))


# ---------------------------------------------------------------------------
# Matrix exponential of the linearised drift


def matexp_negzJ(z: float, theta: float, mu1: float, mu2: float, resonant_limit: bool = False) -> np.ndarray:
    """``exp(-z J)`` for ``J = [[mu, 0], [delta, theta]]`` in closed form."""
    mu = mu1 * mu2
    delta = mu1 - mu2
    e_mu = math.exp(-mu * z)
    e_th = math.exp(-theta * z)
    if mu == theta:
        if not resonant_limit:
            raise ModelError("resonant-parameters", "mu1*mu2 equals theta")
        off = -delta * z * e_th
    else:
        off = delta / (mu - theta) * (e_mu - e_th)
    return np.array([[e_mu, 0.0], [off, e_th]])


def drift_matrix(theta: float, mu1: float, mu2: float) -> np.ndarray:
    return np.array([[mu1 * mu2, 0.0], [mu1 - mu2, theta]])


def J_power(n: int, theta: float, mu1: float, mu2: float) -> np.ndarray:
    """``J^n`` in closed form: lower-left entry ``delta (mu^n - theta^n)/(mu - theta)``."""
    mu = mu1 * mu2
    delta = mu1 - mu2
    if mu == theta:
        off = delta * n * theta ** (n - 1) if n >= 1 else 0.0
    else:
        off = delta * (mu**n - theta**n) / (mu - theta)
    return np.array([[mu**n, 0.0], [off, theta**n]])


# ---------------------------------------------------------------------------
# Exact Gaussian sampling on a grid


@dataclass
class GaussGrid:
    """Time grid with a factored covariance matrix.

    Columns with zero variance (for example ``t = 0`` for kernels pinned at
    the origin) are sampled as exact zeros and left out of the factorisation.
    """

    times: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    active: np.ndarray
    jitter: float
    mean: np.ndarray

    @classmethod
    def build(cls, kernel: Kernel, times, mean=None) -> "GaussGrid":
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ModelError("bad-grid", "grid must be strictly increasing")
        cov = kernel.matrix(times)
        diag = np.diag(cov)
        scale = max(float(diag.max(initial=0.0)), 1e-300)
        active = diag > 1e-14 * scale
        sub = cov[np.ix_(active, active)]
        factor, jitter = _jittered_cholesky(sub)
        mean = np.zeros(len(times)) if mean is None else np.asarray(mean, dtype=float)
        return cls(times, cov, factor, active, jitter, mean)

    def factor_error(self) -> float:
        sub = self.cov[np.ix_(self.active, self.active)]
        if sub.size == 0:
            return 0.0
        rec = self.factor @ self.factor.T
        return float(np.linalg.norm(rec - sub) / max(np.linalg.norm(sub), 1e-300))

    def sample(self, n_paths: int, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros((n_paths, len(self.times)))
        m = int(self.active.sum())
        if m:
            z = rng.standard_normal((n_paths, m))
            out[:, self.active] = z @ self.factor.T
        return out + self.mean


def _jittered_cholesky(cov: np.ndarray):
    if cov.size == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.max(np.diag(cov)))
    for jitter in JITTER_LADDER:
        try:
            L = linalg.cholesky(cov + jitter * scale * np.eye(len(cov)), lower=True)
            return L, jitter
        except linalg.LinAlgError:
            continue
    raise ModelError("not-psd", "Cholesky failed after the full jitter ladder")


def metric_grid(kernel: Kernel, resolution: float, horizon: float | None = None,
                t0: float = 0.0, max_points: int = 200_000) -> tuple[np.ndarray, float]:
    """Grid whose consecutive points are ``resolution`` apart in canonical metric.

    For ``GBAR`` the horizon defaults to the first ``T*`` at which the
    envelope ``metric_bound(T*, infinity)`` drops below the resolution, so
    that the truncated tail cannot move the supremum by more than one grid
    cell.  Returns ``(grid, T*)``.
    """
    if not resolution > 0:
        raise ModelError("bad-resolution", f"resolution={resolution}")
    if kernel.kind == "GBAR":
        A = _envelope_const(kernel.theta, kernel.mu1, kernel.mu2, kernel.p)
        T_env = max(t0, math.log(4.0 * math.sqrt(A) / resolution) / kernel.theta)
        horizon = T_env if horizon is None else horizon

        def dist(a, b):
            return math.sqrt(max(float(kernel.increment_variance(a, b)), 0.0))
    else:
        if horizon is None:
            raise ModelError("bad-horizon", "horizon required for this kernel")

        def dist(a, b):
            v = kernel(a, a) + kernel(b, b) - 2 * kernel(a, b)
            return math.sqrt(max(float(v), 0.0))

    grid = [t0]
    t = t0
    while t < horizon:
        if dist(t, horizon) <= resolution:
            grid.append(horizon)
            break
        nxt = optimize.brentq(lambda u: dist(t, u) - resolution, t, horizon, xtol=1e-14, rtol=1e-12)
        if nxt <= t:
            raise ModelError("bad-grid", "metric grid failed to advance")
        grid.append(nxt)
        t = nxt
        if len(grid) > max_points:
            raise ModelError("bad-grid", "metric grid exceeds max_points")
    return np.array(grid), float(horizon)


@dataclass
class SupSamples:
    values: np.ndarray
    grid: np.ndarray
    kernel: Kernel
    resolution: float
    horizon: float
    drift: bool = False
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "sup"])
        for i, v in enumerate(self.values):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {"kernel": self.kernel.describe(), "resolution": self.resolution,
                "horizon": self.horizon, "grid_points": int(len(self.grid)),
                "n_paths": int(len(self.values)), "drift": self.drift, **self.meta}


def sample_sup(kernel: Kernel, resolution: float, n_paths: int, rng: np.random.Generator,
               horizon: float | None = None, grid=None, drift: bool = False,
               batch: int = 10_000) -> SupSamples:
    """Exact Gaussian draws on a metric grid and their per-path suprema.

    With ``drift`` the mean ``(B/theta)(1 - exp(-theta t))`` of the
    non-centred process is added before taking the supremum.
    """
    if grid is None:
        grid, horizon = metric_grid(kernel, resolution, horizon)
    else:
        grid = np.asarray(grid, dtype=float)
        horizon = float(grid[-1]) if horizon is None else horizon
    mean = gbar_drift(grid, kernel.B, kernel.theta) if drift else None
    gg = GaussGrid.build(kernel, grid, mean)
    out = np.empty(n_paths)
    done = 0
    while done < n_paths:
        m = min(batch, n_paths - done)
        out[done:done + m] = gg.sample(m, rng).max(axis=1)
        done += m
    return SupSamples(out, grid, kernel, resolution, float(horizon), drift,
                      {"jitter": gg.jitter})


@dataclass(frozen=True)
class TailFit:
    slope: float
    band: tuple
    x: np.ndarray
    log_survival: np.ndarray
    n_exceed_hi: int
    prefactor: str

    def relative_error(self, target: float) -> float:
        return abs(self.slope - target) / abs(target)


def _fit_slope(sorted_vals, n, xs, prefactor):
    counts = n - np.searchsorted(sorted_vals, xs, side="right")
    if np.any(counts == 0):
        return np.nan, None
    y = np.log(counts / n)
    if prefactor == "gaussian":
        y = y + np.log(xs)
    A = np.vstack([xs**2, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), y


def tail_fit(samples, x_lo: float, x_hi: float, n_points: int = 25, n_boot: int = 200,
             rng: np.random.Generator | None = None, min_exceed: int = 100,
             prefactor: str = "none", level: float = 0.95) -> TailFit:
    """Least-squares slope of ``log P(X > x)`` against ``x^2`` on ``[x_lo, x_hi]``.

    ``prefactor="gaussian"`` adds ``log x`` to the log-survival first, which
    removes the leading polynomial factor of a Gaussian tail; the default
    fits the raw curve.  The band is a percentile bootstrap over samples.
    """
    vals = np.asarray(getattr(samples, "values", samples), dtype=float)
    if prefactor not in ("none", "gaussian"):
        raise ModelError("bad-prefactor", prefactor)
    if not x_hi > x_lo:
        raise ModelError("bad-window", f"[{x_lo}, {x_hi}]")
    n = len(vals)
    n_hi = int(np.sum(vals > x_hi))
    if n_hi < min_exceed:
        raise ModelError("insufficient-exceedances", f"{n_hi} samples above {x_hi}")
    xs = np.linspace(x_lo, x_hi, n_points)
    srt = np.sort(vals)
    slope, y = _fit_slope(srt, n, xs, prefactor)
    rng = rng if rng is not None else np.random.default_rng(0)
    boots = []
    for _ in range(n_boot):
        res = np.sort(vals[rng.integers(0, n, n)])
        b, _ = _fit_slope(res, n, xs, prefactor)
        if np.isfinite(b):
            boots.append(b)
    alpha = (1 - level) / 2
    band = (float(np.quantile(boots, alpha)), float(np.quantile(boots, 1 - alpha))) if boots else (np.nan, np.nan)
    return TailFit(slope, band, xs, y, n_hi, prefactor)


# ---------------------------------------------------------------------------
# Quadrature oracles


def gbar_incvar_quadrature(s: float, t: float, theta: float, mu1: float, mu2: float, p: float) -> float:
    """Increment variance of ``Gbar`` by direct double integration.

    ``delta^2 int_s^t int_s^t e^{-theta(y1+y2)} C_OU(y1,y2) + 2 int_s^t e^{-2 theta y}``;
    the inner integral is split on the diagonal where ``C_OU`` has a kink.
    """
    if t < s:
        s, t = t, s
    mu = mu1 * mu2
    pq = p * (1 - p)
    delta = mu1 - mu2

    def inner(y2):
        def f(y1):
            return math.exp(-theta * (y1 + y2)) * pq / mu * math.exp(-mu * abs(y1 - y2))
        a = integrate.quad(f, s, y2, epsabs=1e-14, epsrel=1e-13)[0]
        b = integrate.quad(f, y2, t, epsabs=1e-14, epsrel=1e-13)[0]
        return a + b

    dbl = integrate.quad(inner, s, t, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    noise = integrate.quad(lambda y: 2 * math.exp(-2 * theta * y), s, t, epsabs=1e-14, epsrel=1e-13)[0]
    return delta**2 * dbl + noise


def pi_cov_quadrature(s: float, t: float, theta: float, mu1: float, mu2: float, p: float) -> float:
    """``E[Pi(s) Pi(t)]`` by double integration of the defining representation."""
    k_a = Kernel("OU_zero_a", p, mu1, mu2, theta)
    k_b = Kernel("OU_zero_b", p, mu1, mu2, theta)
    delta = mu1 - mu2

    def f(y1, y2):
        return math.exp(theta * (y1 + y2)) * float(k_a(y1, y2))

    if s == 0.0 or t == 0.0:
        dbl = 0.0
    else:
        lo, hi = min(s, t), max(s, t)
        # split the outer range at the inner upper limit to respect the kink
        part1 = integrate.dblquad(lambda y1, y2: f(y1, y2), 0.0, lo, 0.0, lambda y2: y2,
                                  epsabs=1e-13, epsrel=1e-12)[0]
        part2 = integrate.dblquad(lambda y1, y2: f(y1, y2), 0.0, lo, lambda y2: y2, lo,
                                  epsabs=1e-13, epsrel=1e-12)[0]
        part3 = integrate.dblquad(lambda y1, y2: f(y1, y2), lo, hi, 0.0, lo,
                                  epsabs=1e-13, epsrel=1e-12)[0]
        dbl = part1 + part2 + part3
    return float(delta**2 * math.exp(-theta * (s + t)) * dbl + k_b(s, t))
