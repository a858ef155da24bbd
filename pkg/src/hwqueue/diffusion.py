"""Diffusion limits of the scaled queue and the lower-bound apparatus.

Three two-dimensional systems are supported:

``Y``     the limit in type coordinates ``(Y1, Y2)`` with noise ``diag(2p, 2q)``
``YBAR``  the same process in coordinates ``ybar1 = q*Y1 - p*Y2``,
          ``ybar2 = Y1 + Y2``; noise ``diag(2pq, 2)``.  Its drift switches
          through the positive part of ``ybar2``.
``YHAT``  ``YBAR`` with the switching terms removed: a linear (two-dimensional
          OU) process with drift ``-J y + (0, B)``, ``J = [[mu, 0], [delta, theta]]``.

``ybar2^+`` is the scaled queue length in the limit.  Here ``q = 1 - p``,
``mu = mu1*mu2``, ``delta = mu1 - mu2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import integrate, stats

from .gaussproc import GaussGrid, Kernel, matexp_negzJ
from .model import ModelError, SystemParams, check_hazard_order, exponents

SYSTEMS = ("Y", "YBAR", "YHAT")
CROSS_VARIANTS = ("derived", "printed")


def _coef(params: SystemParams):
    p = params.p
    return p, 1.0 - p, params.mu1, params.mu2, params.theta, params.B


# ---------------------------------------------------------------------------
# Coordinates and drifts


@dataclass(frozen=True)
class LimitState:
    y1: float
    y2: float
    coords: str = "YBAR"

    def as_array(self) -> np.ndarray:
        return np.array([self.y1, self.y2])

    def to(self, coords: str, p: float) -> "LimitState":
        if coords == self.coords:
            return self
        if coords == "YBAR" and self.coords == "Y":
            a, b = to_bar(self.y1, self.y2, p)
        elif coords == "Y" and self.coords == "YBAR":
            a, b = from_bar(self.y1, self.y2, p)
        else:
            raise ModelError("bad-coords", f"{self.coords} -> {coords}")
        return LimitState(float(a), float(b), coords)


def to_bar(y1, y2, p: float):
    """``(Y1, Y2) -> (q*Y1 - p*Y2, Y1 + Y2)``."""
    return (1.0 - p) * y1 - p * y2, y1 + y2


def from_bar(b1, b2, p: float):
    """Inverse of :func:`to_bar`: ``Y1 = b1 + p*b2``, ``Y2 = q*b2 - b1``."""
    return b1 + p * b2, (1.0 - p) * b2 - b1


def drift_and_noise(system_id: str, state, params: SystemParams, variant: str = "derived"):
    """Drift vector and (constant) noise covariance of a limit system.

    ``state`` is an array whose last axis has length 2, in the coordinates of
    the system.  ``variant`` selects the coefficient of ``(ybar2^+ - ybar2)``
    in the first ``YBAR`` component: ``"derived"`` uses ``pq*delta``, which is
    what the change of coordinates from ``Y`` produces, ``"printed"`` uses
    ``pq*mu``.
    """
    if system_id not in SYSTEMS:
        raise ModelError("unknown-system", system_id)
    if variant not in CROSS_VARIANTS:
        raise ModelError("bad-variant", variant)
    p, q, mu1, mu2, theta, B = _coef(params)
    y = np.asarray(state, dtype=float)
    a, b = y[..., 0], y[..., 1]
    if system_id == "Y":
        plus = np.maximum(a + b, 0.0)
        d1 = B * p - mu1 * (a - p * plus) - p * theta * plus
        d2 = B * q - mu2 * (b - q * plus) - q * theta * plus
        cov = np.diag([2 * p, 2 * q])
        return np.stack([d1, d2], axis=-1), cov
    mu = mu1 * mu2
    delta = mu1 - mu2
    gap = np.maximum(b, 0.0) - b if system_id == "YBAR" else np.zeros_like(b)
    cross = p * q * (delta if variant == "derived" else mu)
    d1 = -mu * a + cross * gap
    d2 = B - delta * a - theta * b + (p * mu1 + q * mu2 - theta) * gap
    return np.stack([d1, d2], axis=-1), np.diag([2 * p * q, 2.0])


def noise_scale(system_id: str, params: SystemParams) -> np.ndarray:
    p, q = params.p, 1.0 - params.p
    return np.sqrt(np.array([2 * p, 2 * q]) if system_id == "Y" else np.array([2 * p * q, 2.0]))


# ---------------------------------------------------------------------------
# Euler-Maruyama


@dataclass
class LimitPath:
    times: np.ndarray
    states: np.ndarray  # (len(times), n_paths, 2)
    system: str
    dt: float

    @property
    def queue(self) -> np.ndarray:
        """``ybar2^+`` along the path (computed in bar coordinates)."""
        if self.system == "Y":
            b2 = self.states[..., 0] + self.states[..., 1]
        else:
            b2 = self.states[..., 1]
        return np.maximum(b2, 0.0)

    def to_csv(self, path_index: int = 0, every: int = 1) -> str:
        lines = ["t,y1,y2"]
        for k in range(0, len(self.times), every):
            y = self.states[k, path_index]
            lines.append(f"{self.times[k]!r},{y[0]!r},{y[1]!r}")
        return "\n".join(lines) + "\n"


def euler_simulate(system_id: str, init, dt: float, horizon: float, rng=None, params: SystemParams = None,
                   increments=None, record_every: int = 1, variant: str = "derived",
                   noise: bool = True) -> LimitPath:
    """Euler-Maruyama for a batch of paths.

    ``init`` has shape ``(2,)`` or ``(m, 2)``; a single point is repeated
    for every path of ``increments``.  ``increments`` optionally
    supplies the standard normal draws with shape ``(n_steps, m, 2)`` so
    that several systems can be driven by common noise.  ``noise=False``
    integrates the drift only.
    """
    if not dt > 0:
        raise ModelError("nonpositive-dt", f"dt={dt}")
    if params is None:
        raise ModelError("missing-params", "params required")
    y = np.atleast_2d(np.asarray(init.as_array() if isinstance(init, LimitState) else init, dtype=float)).copy()
    n_steps = int(round(horizon / dt))
    scale = noise_scale(system_id, params) * math.sqrt(dt)
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if y.shape[0] == 1 and increments.ndim == 3:
            y = np.repeat(y, increments.shape[1], axis=0)
    m = y.shape[0]
    if increments is not None:
        if increments.shape != (n_steps, m, 2):
            raise ModelError("bad-increments", f"expected shape {(n_steps, m, 2)}")
    n_rec = n_steps // record_every + 1
    out = np.empty((n_rec, m, 2))
    out[0] = y
    r = 1
    for k in range(n_steps):
        drift, _ = drift_and_noise(system_id, y, params, variant)
        y = y + drift * dt
        if noise:
            z = increments[k] if increments is not None else rng.standard_normal((m, 2))
            y = y + scale * z
        if (k + 1) % record_every == 0:
            out[r] = y
            r += 1
    times = np.arange(n_rec) * dt * record_every
    return LimitPath(times, out[:r], system_id, dt)


def first_nonpositive(values: np.ndarray) -> int:
    """Index of the first entry ``<= 0`` (``len(values)`` if none)."""
    hits = np.flatnonzero(np.asarray(values) <= 0.0)
    return int(hits[0]) if len(hits) else len(values)


# ---------------------------------------------------------------------------
# Exact transition of the linear system


def ou_step_covariance(delta_t: float, params: SystemParams) -> np.ndarray:
    """``int_0^dt exp(-uJ) diag(2pq, 2) exp(-uJ^T) du`` in closed form."""
    p, q, mu1, mu2, theta, _ = _coef(params)
    mu = mu1 * mu2
    if mu == theta:
        raise ModelError("resonant-parameters", "mu1*mu2 equals theta")
    k = (mu1 - mu2) / (mu - theta)

    def E(alpha):
        return -math.expm1(-alpha * delta_t) / alpha

    pq2 = 2 * p * q
    s11 = pq2 * E(2 * mu)
    s12 = pq2 * k * (E(2 * mu) - E(mu + theta))
    s22 = pq2 * k * k * (E(2 * mu) - 2 * E(mu + theta) + E(2 * theta)) + 2 * E(2 * theta)
    return np.array([[s11, s12], [s12, s22]])


def ou_step_covariance_quadrature(delta_t: float, params: SystemParams) -> np.ndarray:
    """Same integral by adaptive vector quadrature (oracle)."""
    p, q, mu1, mu2, theta, _ = _coef(params)
    D = np.diag([2 * p * q, 2.0])

    def f(u):
        E = matexp_negzJ(u, theta, mu1, mu2)
        return E @ D @ E.T

    val, _ = integrate.quad_vec(f, 0.0, delta_t, epsabs=1e-14, epsrel=1e-12)
    return val


def ou_step_mean(state, delta_t: float, params: SystemParams) -> np.ndarray:
    _, _, mu1, mu2, theta, B = _coef(params)
    E = matexp_negzJ(delta_t, theta, mu1, mu2)
    y = np.asarray(state, dtype=float)
    return y @ E.T + np.array([0.0, -B / theta * math.expm1(-theta * delta_t)])


def exact_ou_step(state, delta_t: float, params: SystemParams, rng, size: int | None = None) -> np.ndarray:
    """Draw the linear system ``delta_t`` ahead of ``state`` (bar coordinates).

    ``state`` may be a single point or an array of points; ``size`` draws
    that many independent copies from a single point.
    """
    if params.mu1 * params.mu2 == params.theta:
        raise ModelError("resonant-parameters", "mu1*mu2 equals theta")
    y = np.asarray(state.as_array() if isinstance(state, LimitState) else state, dtype=float)
    if size is not None:
        y = np.broadcast_to(y, (size, 2))
    mean = ou_step_mean(y, delta_t, params)
    cov = ou_step_covariance(delta_t, params)
    L = np.linalg.cholesky(cov + 1e-300 * np.eye(2)) if delta_t > 0 else np.zeros((2, 2))
    z = rng.standard_normal(mean.shape)
    return mean + z @ L.T


def ou_flow(init, dt: float, dB: np.ndarray, params: SystemParams) -> np.ndarray:
    """Compose one-step exponential maps driven by given noise increments.

    ``dB`` has shape ``(n_steps, 2)`` and already includes the noise scale.
    Each step applies ``y <- exp(-dt J) (y + dB_k) + drift term``, the
    left-point discretisation of the variation-of-constants formula.
    """
    _, _, mu1, mu2, theta, B = _coef(params)
    E = matexp_negzJ(dt, theta, mu1, mu2)
    shift = np.array([0.0, -B / theta * math.expm1(-theta * dt)])
    y = np.asarray(init, dtype=float).copy()
    out = np.empty((len(dB) + 1, 2))
    out[0] = y
    for k in range(len(dB)):
        y = E @ (y + dB[k]) + shift
        out[k + 1] = y
    return out


def yhat2_explicit(init, t: float, dt: float, dB: np.ndarray, params: SystemParams) -> float:
    """Second linear coordinate at ``t`` from its explicit integral formula.

    The stochastic integrals against the increments ``dB`` are evaluated as
    left-point sums over the grid ``k*dt``.
    """
    _, _, mu1, mu2, theta, B = _coef(params)
    mu = mu1 * mu2
    k = (mu1 - mu2) / (mu - theta)
    y1, y2 = float(init[0]), float(init[1])
    lag = t - dt * np.arange(len(dB))
    w3 = k * (np.exp(-mu * lag) - np.exp(-theta * lag))
    w2 = np.exp(-theta * lag)
    return float(k * (math.exp(-mu * t) - math.exp(-theta * t)) * y1 + math.exp(-theta * t) * y2
                 + np.dot(w3, dB[:, 0]) + np.dot(w2, dB[:, 1]) - B / theta * math.expm1(-theta * t))


# ---------------------------------------------------------------------------
# Lower-bound apparatus


@dataclass(frozen=True)
class LowerBoundConfig:
    C1: float
    C2: float
    C3: float
    C4: float
    delta: float = 0.5

    @classmethod
    def default(cls, params: SystemParams) -> "LowerBoundConfig":
        C1 = 4 * abs(params.B) / params.theta + 1.0
        return cls(C1, C1 + 1.0, -1.0, 1.0)

    def validate(self, params: SystemParams) -> None:
        floor = 4 * abs(params.B) / params.theta
        if not self.C1 > floor:
            raise ModelError("invalid-config", f"C1={self.C1} must exceed 4|B|/theta={floor}")
        if not self.C2 > self.C1:
            raise ModelError("invalid-config", "C2 must exceed C1")
        if not self.C4 > self.C3:
            raise ModelError("invalid-config", "C4 must exceed C3")
        if not 0.0 < self.delta < 1.0:
            raise ModelError("invalid-config", "delta must lie in (0,1)")

    def sample_box(self, n: int, rng) -> np.ndarray:
        """Uniform initial points in ``[C3, C4] x [C1, C2]`` (bar coordinates)."""
        return np.column_stack([rng.uniform(self.C3, self.C4, n), rng.uniform(self.C1, self.C2, n)])


def buf(t, config: LowerBoundConfig, params: SystemParams):
    """``exp(-theta t) C1 - (mu1+mu2)(|C3|+|C4|) t exp(-theta t) - |B|/theta``."""
    t = np.asarray(t, dtype=float)
    th = params.theta
    e = np.exp(-th * t)
    return e * config.C1 - (params.mu1 + params.mu2) * (abs(config.C3) + abs(config.C4)) * t * e - abs(params.B) / th


def buf_floor(config: LowerBoundConfig, params: SystemParams) -> float:
    """Lower bound on ``inf_t BUF(t)`` using ``t exp(-theta t) <= 1/theta``."""
    return -((params.mu1 + params.mu2) * (abs(config.C3) + abs(config.C4)) + abs(params.B)) / params.theta


def pi_kernel(params: SystemParams) -> Kernel:
    return Kernel("PI", params.p, params.mu1, params.mu2, params.theta, params.B)


@dataclass
class PiBuf:
    times: np.ndarray
    pi: np.ndarray
    buf: np.ndarray


def pi_and_buf(config: LowerBoundConfig, params: SystemParams, grid, n_paths: int, rng) -> PiBuf:
    """Exact samples of ``Pi`` on ``grid`` and the deterministic ``BUF``."""
    config.validate(params)
    params.check_assumption(strict=True)
    grid = np.asarray(grid, dtype=float)
    gg = GaussGrid.build(pi_kernel(params), grid)
    return PiBuf(grid, gg.sample(n_paths, rng), buf(grid, config, params))


@dataclass(frozen=True)
class GordonResult:
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    p_positive: float
    p_terminal: float

    @property
    def combined_se(self) -> float:
        return math.hypot(self.se_lhs, self.se_rhs)

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs - 3.0 * self.combined_se


def _uniform_grid(T: float, points: int) -> np.ndarray:
    return np.linspace(0.0, T, points) if T > 0 else np.array([0.0])


def gordon_check(config: LowerBoundConfig, params: SystemParams, T: float, x: float, n_mc: int,
                 rng, grid_points: int = 201, batch: int = 20_000) -> GordonResult:
    """Compare the joint event with the product of its two marginals.

    ``lhs = P(inf (Pi + BUF) > 0, Pi(T) + BUF(T) > x)`` and
    ``rhs = P(inf (Pi + BUF) > 0) * P(Pi(T) > x - BUF(T))``; both from the
    same Monte Carlo sample.  The standard error of the product comes from
    the delta method with the sample covariance of the two indicators.
    """
    if n_mc <= 0:
        raise ModelError("empty-sample", "n_mc must be positive")
    grid = _uniform_grid(T, grid_points)
    config.validate(params)
    gg = GaussGrid.build(pi_kernel(params), grid)
    b = buf(grid, config, params)
    pos = np.empty(n_mc, dtype=bool)
    term = np.empty(n_mc, dtype=bool)
    done = 0
    while done < n_mc:
        m = min(batch, n_mc - done)
        paths = gg.sample(m, rng) + b
        pos[done:done + m] = paths.min(axis=1) > 0.0
        term[done:done + m] = paths[:, -1] > x
        done += m
    joint = pos & term
    a, c = pos.mean(), term.mean()
    lhs = joint.mean()
    se_lhs = math.sqrt(lhs * (1 - lhs) / n_mc)
    cov = np.cov(np.vstack([pos, term]).astype(float))
    grad = np.array([c, a])
    se_rhs = math.sqrt(max(grad @ cov @ grad, 0.0) / n_mc)
    return GordonResult(float(lhs), float(a * c), se_lhs, se_rhs, float(a), float(c))


@dataclass(frozen=True)
class PositivityResult:
    estimate: float
    low: float
    high: float
    n: int
    level: float

    @property
    def positive(self) -> bool:
        return self.low > 0.0


def positivity_prob(config: LowerBoundConfig, params: SystemParams, T: float, n_mc: int, rng,
                    grid_points: int = 201, level: float = 0.99) -> PositivityResult:
    """``P(inf_{[0,T]} (Pi + BUF) > 0)`` with a Wilson interval."""
    if n_mc <= 0:
        raise ModelError("empty-sample", "n_mc must be positive")
    pb = pi_and_buf(config, params, _uniform_grid(T, grid_points), n_mc, rng)
    k = int(np.sum((pb.pi + pb.buf).min(axis=1) > 0.0))
    ci = stats.binomtest(k, n_mc).proportion_ci(confidence_level=level, method="wilson")
    return PositivityResult(k / n_mc, float(ci.low), float(ci.high), n_mc, level)


# ---------------------------------------------------------------------------
# Long-run tail campaign


@njit(cache=True)
def _euler_occupation(y, n_steps, dt, sub, z, scale1, scale2, mu, delta, theta, B,
                      cross, slack, switching, xs, counts):
    """Advance ``y`` (bar coordinates) for ``n_steps`` Euler steps.

    Each step consumes ``sub`` consecutive rows of ``z`` (summed), so that a
    coarse run can share the noise of a finer one.  ``counts[j]`` gains the
    number of post-step states with ``ybar2 > xs[j]``.
    """
    a = y[0]
    b = y[1]
    nx = xs.shape[0]
    norm = 1.0 / np.sqrt(sub)
    for k in range(n_steps):
        if switching and b < 0.0:
            gap = -b
        else:
            gap = 0.0
        d1 = -mu * a + cross * gap
        d2 = B - delta * a - theta * b + slack * gap
        z1 = 0.0
        z2 = 0.0
        for j in range(sub):
            z1 += z[k * sub + j, 0]
            z2 += z[k * sub + j, 1]
        a += d1 * dt + scale1 * z1 * norm
        b += d2 * dt + scale2 * z2 * norm
        for j in range(nx):
            if b > xs[j]:
                counts[j] += 1
            else:
                break
    y[0] = a
    y[1] = b


def occupation_survival(params: SystemParams, dt: float, horizon: float, xs, rng,
                        burn_in: float, system: str = "YBAR", variant: str = "derived",
                        sub: int = 1, chunk_steps: int = 1_000_000, init=(0.0, 0.0)) -> np.ndarray:
    """Time fraction (after burn-in) with ``ybar2 > x`` for each ``x`` in ``xs``.

    The fine noise is drawn in chunks of ``chunk_steps * sub`` rows; with
    ``sub = 2`` the run uses step ``dt`` but the noise of a run at ``dt/2``
    with the same generator state.
    """
    if system not in ("YBAR", "YHAT"):
        raise ModelError("unknown-system", system)
    if not horizon > burn_in:
        raise ModelError("insufficient-data", "horizon must exceed burn-in")
    p, q, mu1, mu2, theta, B = _coef(params)
    mu, delta = mu1 * mu2, mu1 - mu2
    cross = p * q * (delta if variant == "derived" else mu)
    slack = p * mu1 + q * mu2 - theta
    switching = system == "YBAR"
    xs = np.sort(np.asarray(xs, dtype=float))
    s1 = math.sqrt(2 * p * q * dt)
    s2 = math.sqrt(2 * dt)
    y = np.array(init, dtype=float)
    total = int(round(horizon / dt))
    skip = int(round(burn_in / dt))
    counts = np.zeros(len(xs), dtype=np.int64)
    scratch = np.zeros(len(xs), dtype=np.int64)
    done = 0
    while done < total:
        m = min(chunk_steps, total - done)
        z = rng.standard_normal((m * sub, 2))
        if done + m <= skip:
            _euler_occupation(y, m, dt, sub, z, s1, s2, mu, delta, theta, B, cross, slack,
                              switching, xs, scratch)
        elif done >= skip:
            _euler_occupation(y, m, dt, sub, z, s1, s2, mu, delta, theta, B, cross, slack,
                              switching, xs, counts)
        else:
            cut = skip - done
            _euler_occupation(y, cut, dt, sub, z[: cut * sub], s1, s2, mu, delta, theta, B, cross,
                              slack, switching, xs, scratch)
            _euler_occupation(y, m - cut, dt, sub, z[cut * sub:], s1, s2, mu, delta, theta, B, cross,
                              slack, switching, xs, counts)
        done += m
    return counts / float(total - skip)


def _slope(xs, surv):
    A = np.vstack([xs**2, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(surv), rcond=None)
    return float(coef[0])


@dataclass
class CampaignResult:
    slope: float
    band: tuple
    magnitude_low: float
    true_exponent: float
    dai_he_exponent: float
    xs: np.ndarray
    survival: np.ndarray
    per_rep: np.ndarray
    dt: float
    horizon: float
    burn_in: float
    meta: dict = field(default_factory=dict)

    @property
    def exceeds_dai_he(self) -> bool:
        """One-sided 95% bootstrap bound on ``|slope|`` exceeds the conjectured magnitude."""
        return self.magnitude_low > abs(self.dai_he_exponent)

    def relative_error(self) -> float:
        return abs(self.slope - self.true_exponent) / abs(self.true_exponent)


def default_window(params: SystemParams) -> tuple[float, float]:
    """Fit window ``[1.5, 3] * sqrt(sup variance)``."""
    sigma = math.sqrt(exponents(params.theta, params.mu1, params.mu2).sup_variance)
    return 1.5 * sigma, 3.0 * sigma


def limit_tail_campaign(params: SystemParams, dt: float, horizon: float, n_reps: int, seed=0,
                        burn_in: float | None = None, window: tuple | None = None,
                        n_points: int = 16, n_boot: int = 1000, variant: str = "derived",
                        system: str = "YBAR", min_exceed: float = 100.0) -> CampaignResult:
    """Stationary tail exponent of ``ybar2^+`` from long Euler runs.

    Each replication runs on its own stream and reports the time fraction
    above every ``x`` of the window.  The slope of the pooled log-survival
    against ``x^2`` is the estimate; the band and the one-sided bound come
    from resampling replications.
    """
    check_hazard_order(params.theta, params.mu1, params.mu2, strict=False)
    rep = exponents(params.theta, params.mu1, params.mu2)
    burn_in = 10.0 * max(1.0 / params.theta, 1.0) if burn_in is None else burn_in
    if not horizon > burn_in:
        raise ModelError("insufficient-data", "horizon must exceed burn-in")
    lo, hi = default_window(params) if window is None else window
    xs = np.linspace(lo, hi, n_points)
    root = np.random.SeedSequence(seed)
    rngs = [np.random.Generator(np.random.Philox(s)) for s in root.spawn(n_reps + 1)]
    per_rep = np.array([occupation_survival(params, dt, horizon, xs, rngs[r], burn_in, system, variant)
                        for r in range(n_reps)])
    surv = per_rep.mean(axis=0)
    steps = n_reps * (horizon - burn_in) / dt
    if surv[-1] * steps < min_exceed:
        raise ModelError("insufficient-exceedances", f"about {surv[-1] * steps:.0f} steps above {hi}")
    slope = _slope(xs, surv)
    boot_rng = rngs[-1]
    boots = []
    for _ in range(n_boot):
        idx = boot_rng.integers(0, n_reps, n_reps)
        s = per_rep[idx].mean(axis=0)
        if np.all(s > 0):
            boots.append(_slope(xs, s))
    boots = np.array(boots)
    band = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
    magnitude_low = float(np.quantile(np.abs(boots), 0.05))
    return CampaignResult(slope, band, magnitude_low, rep.true_exponent, rep.dai_he_exponent, xs, surv,
                          per_rep, dt, horizon, burn_in, {"n_reps": n_reps, "variant": variant,
                                                          "system": system})


def refine_dt(params: SystemParams, dt: float, horizon: float, n_reps: int, seed=0, tol: float = 0.02,
              max_halvings: int = 4, burn_in: float | None = None, window: tuple | None = None,
              n_points: int = 16) -> tuple[float, list]:
    """Halve ``dt`` until the fitted slope moves by less than ``tol`` (relative).

    Runs at ``dt`` and ``dt/2`` share noise: the coarse run sums pairs of
    the fine run's normal draws.  Returns the accepted ``dt`` and the
    history of ``(dt, slope_coarse, slope_fine)``.
    """
    burn_in = 10.0 * max(1.0 / params.theta, 1.0) if burn_in is None else burn_in
    lo, hi = default_window(params) if window is None else window
    xs = np.linspace(lo, hi, n_points)
    history = []
    for _ in range(max_halvings):
        fine_dt = dt / 2
        coarse, fine = [], []
        for child in np.random.SeedSequence(seed).spawn(n_reps):
            # identical streams: the coarse run sums consecutive pairs of the fine draws
            r_coarse = np.random.Generator(np.random.Philox(child))
            r_fine = np.random.Generator(np.random.Philox(child))
            coarse.append(occupation_survival(params, dt, horizon, xs, r_coarse, burn_in, sub=2,
                                              chunk_steps=500_000))
            fine.append(occupation_survival(params, fine_dt, horizon, xs, r_fine, burn_in, sub=1,
                                            chunk_steps=1_000_000))
        sc = _slope(xs, np.mean(coarse, axis=0))
        sf = _slope(xs, np.mean(fine, axis=0))
        history.append((dt, sc, sf))
        if abs(sc - sf) <= tol * abs(sf):
            return dt, history
        dt = fine_dt
    raise ModelError("no-convergence", f"slope still moving after {max_halvings} halvings")
