"""One-dimensional reflection with linear restoring drift.

Given an input path ``X`` with ``X(0) = 0`` the problem is to find ``phi >= 0``
and a non-decreasing ``psi`` with ``psi(0) = 0`` such that

    phi(t) = X(t) - theta * int_0^t phi(s) ds + psi(t)

and ``psi`` only increases while ``phi = 0``.  Inputs are piecewise linear with
jumps, so the solution can be written segment by segment in closed form: on a
segment of slope ``c`` the reflected path relaxes exponentially towards
``c / theta``.  The supremum representation

    phi(t) = sup_{0 <= s <= t} int_{(s, t]} exp(-theta (t - y)) dX(y)

is implemented independently and serves as a cross-check.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctmc import EventLog, conservation_audit
from .model import ModelError


def _check_theta(theta: float) -> None:
    if not theta > 0.0:
        raise ModelError("nonpositive-theta", f"theta={theta}")


@dataclass(frozen=True)
class PathPL:
    """Piecewise-linear path with jumps on ``[0, horizon]``.

    ``times[0] = 0`` and times are strictly increasing.  At ``times[k]`` the
    path has left limit ``left[k]``, jumps by ``jump[k]`` and then moves with
    slope ``slope[k]`` until the next breakpoint.  Evaluation is
    right-continuous.
    """

    times: np.ndarray
    left: np.ndarray
    jump: np.ndarray
    slope: np.ndarray
    horizon: float

    @classmethod
    def from_increments(cls, times, jumps, slopes, horizon: float, start: float = 0.0) -> "PathPL":
        times = np.asarray(times, dtype=float)
        jumps = np.asarray(jumps, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if times.ndim != 1 or len(times) == 0 or times[0] != 0.0:
            raise ModelError("bad-path", "breakpoints must start at 0")
        if len(jumps) != len(times) or len(slopes) != len(times):
            raise ModelError("bad-path", "times, jumps and slopes must have equal length")
        if np.any(np.diff(times) <= 0.0):
            raise ModelError("bad-path", "breakpoints must be strictly increasing")
        if times[-1] > horizon:
            raise ModelError("bad-path", "breakpoint beyond horizon")
        lengths = np.diff(times)
        left = np.empty_like(times)
        left[0] = start
        if len(times) > 1:
            left[1:] = start + np.cumsum(jumps[:-1] + slopes[:-1] * lengths)
        return cls(times, left, jumps, slopes, float(horizon))

    @classmethod
    def linear(cls, slope: float, horizon: float) -> "PathPL":
        return cls.from_increments([0.0], [0.0], [slope], horizon)

    @classmethod
    def zero(cls, horizon: float) -> "PathPL":
        return cls.linear(0.0, horizon)

    def __len__(self):
        return len(self.times)

    @property
    def right(self) -> np.ndarray:
        """Value just after each breakpoint."""
        return self.left + self.jump

    @property
    def end_value(self) -> float:
        return float(self.right[-1] + self.slope[-1] * (self.horizon - self.times[-1]))

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        return t, np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)

    def __call__(self, t):
        t, k = self._locate(t)
        return self.right[k] + self.slope[k] * (t - self.times[k])

    def left_limit(self, t):
        """Value approached from the left (equal to the value away from jumps)."""
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="left") - 1, 0, len(self.times) - 1)
        val = self.right[k] + self.slope[k] * (t - self.times[k])
        return np.where(t <= 0.0, self.left[0], val)

    def integral(self, a: float = 0.0, b: float | None = None) -> float:
        """Exact integral of the path over ``[a, b]``."""
        b = self.horizon if b is None else b
        if b < a:
            return -self.integral(b, a)
        edges = np.concatenate(([a], self.times[(self.times > a) & (self.times < b)], [b]))
        mids = 0.5 * (edges[:-1] + edges[1:])
        return float(np.sum(self(mids) * np.diff(edges)))

    def shift(self, s: float) -> "PathPL":
        """The increment path ``u -> X(s + u) - X(s)`` on ``[0, horizon - s]``."""
        if not 0.0 <= s <= self.horizon:
            raise ModelError("s-out-of-range", f"s={s} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.times, s, side="right") - 1)
        times = np.concatenate(([0.0], self.times[k + 1:] - s))
        jumps = np.concatenate(([0.0], self.jump[k + 1:]))
        slopes = np.concatenate(([self.slope[k]], self.slope[k + 1:]))
        return PathPL.from_increments(times, jumps, slopes, self.horizon - s, 0.0)

    def sup_abs(self) -> float:
        vals = np.concatenate((np.abs(self.left), np.abs(self.right), [abs(self.end_value)]))
        return float(vals.max())

    def __sub__(self, other: "PathPL") -> "PathPL":
        return _combine(self, other, -1.0)

    def __add__(self, other: "PathPL") -> "PathPL":
        return _combine(self, other, 1.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_break", "left_value", "jump", "slope"])
        for row in zip(self.times, self.left, self.jump, self.slope):
            w.writerow([repr(float(v)) for v in row])
        w.writerow(["horizon", repr(self.horizon), "", ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PathPL":
        rows = list(csv.reader(io.StringIO(text)))
        body = rows[1:]
        if not body or body[-1][0] != "horizon":
            raise ModelError("bad-path", "missing horizon row")
        horizon = float(body[-1][1])
        data = np.array([[float(v) for v in r] for r in body[:-1]])
        return cls.from_increments(data[:, 0], data[:, 2], data[:, 3], horizon, data[0, 1])


def _combine(a: PathPL, b: PathPL, sign: float) -> PathPL:
    if a.horizon != b.horizon:
        raise ModelError("bad-path", "paths have different horizons")
    times = np.union1d(a.times, b.times)
    ka = np.searchsorted(a.times, times, side="right") - 1
    kb = np.searchsorted(b.times, times, side="right") - 1
    ja = np.where(np.isin(times, a.times), a.jump[ka], 0.0)
    jb = np.where(np.isin(times, b.times), b.jump[kb], 0.0)
    return PathPL.from_increments(times, ja + sign * jb, a.slope[ka] + sign * b.slope[kb],
                                  a.horizon, a.left[0] + sign * b.left[0])


@dataclass(frozen=True)
class DecayPath:
    """Path that relaxes exponentially between breakpoints.

    On ``[times[k], times[k+1])`` the value is
    ``target[k] + (right[k] - target[k]) * exp(-theta * (t - times[k]))``;
    ``left[k]`` is the left limit at ``times[k]``.  Reflected paths and the
    decay transforms of piecewise-linear inputs all have this form.
    """

    times: np.ndarray
    left: np.ndarray
    right: np.ndarray
    target: np.ndarray
    theta: float
    horizon: float

    def __len__(self):
        return len(self.times)

    def _eval(self, t, k):
        return self.target[k] + (self.right[k] - self.target[k]) * np.exp(-self.theta * (t - self.times[k]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self._eval(t, k)

    def left_limit(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="left") - 1, 0, len(self.times) - 1)
        return np.where(t <= 0.0, self.left[0], self._eval(t, k))

    @property
    def end_value(self) -> float:
        return float(self._eval(self.horizon, len(self.times) - 1))

    def integral(self, a: float = 0.0, b: float | None = None) -> float:
        """Exact integral over ``[a, b]``."""
        b = self.horizon if b is None else b
        edges = np.concatenate(([a], self.times[(self.times > a) & (self.times < b)], [b]))
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            k = int(np.searchsorted(self.times, lo, side="right") - 1)
            start = float(self._eval(lo, k))
            tgt = self.target[k]
            total += tgt * (hi - lo) - (start - tgt) * math.expm1(-self.theta * (hi - lo)) / self.theta
        return total

    def integrals_at_breaks(self) -> np.ndarray:
        """``int_0^{times[k]}`` for every breakpoint, plus the total at the horizon."""
        ends = np.append(self.times[1:], self.horizon)
        lengths = ends - self.times
        pieces = self.target * lengths - (self.right - self.target) * np.expm1(-self.theta * lengths) / self.theta
        return np.concatenate(([0.0], np.cumsum(pieces)))

    def sup_abs_diff(self, other: "DecayPath", T: float | None = None) -> float:
        """``sup_{[0,T]} |self - other|`` for paths with the same decay rate.

        On each common piece the difference is a constant plus a multiple of
        one exponential, hence monotone, so only piece ends matter.
        """
        if self.theta != other.theta:
            raise ModelError("bad-path", "decay rates differ")
        T = min(self.horizon, other.horizon) if T is None else T
        grid = np.union1d(self.times, other.times)
        grid = np.append(grid[grid < T], T)
        d_right = np.abs(self(grid) - other(grid))
        d_left = np.abs(self.left_limit(grid) - other.left_limit(grid))
        return float(max(d_right.max(), d_left.max()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_break", "left_value", "right_value", "target"])
        for row in zip(self.times, self.left, self.right, self.target):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


@dataclass(frozen=True)
class SkorSolution:
    """Reflected path ``phi`` and pushing process ``psi`` on a shared grid."""

    phi: DecayPath
    psi: PathPL
    X: PathPL

    def residual(self) -> float:
        """Max over breakpoints and horizon of ``|phi - X + theta*int(phi) - psi|``."""
        theta = self.phi.theta
        grid = np.append(self.phi.times, self.phi.horizon)
        integ = self.phi.integrals_at_breaks()
        phi_vals = np.append(self.phi.right, self.phi.end_value)
        x_vals = np.append(self.X(self.phi.times), self.X.end_value)
        psi_vals = np.append(self.psi(self.phi.times), self.psi.end_value)
        res = phi_vals - x_vals + theta * integ - psi_vals
        return float(np.max(np.abs(res))) if len(grid) else 0.0

    def complementarity(self, tol: float = 1e-12) -> float:
        """``int 1(phi > tol) dpsi`` evaluated exactly on the shared grid."""
        phi = self.phi
        ends = np.append(phi.times[1:], phi.horizon)
        jump_part = np.sum(self.psi.jump * (phi.right > tol))
        seg_max = np.maximum(phi.right, phi.left_limit(ends))
        lin_part = np.sum(self.psi.slope * (ends - phi.times) * (seg_max > tol))
        return float(jump_part + lin_part)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_break", "phi_left", "phi_right", "phi_target", "psi_left", "psi_jump", "psi_slope"])
        for k in range(len(self.phi)):
            w.writerow([repr(float(v)) for v in (self.phi.times[k], self.phi.left[k], self.phi.right[k],
                                                   self.phi.target[k], self.psi.left[k],
                                                   self.psi.jump[k], self.psi.slope[k])])
        return buf.getvalue()


def _check_origin(X: PathPL) -> None:
    if abs(X.left[0] + X.jump[0]) > 0.0:
        raise ModelError("nonzero-origin", f"X(0)={X.left[0] + X.jump[0]}")


def _relax(X: PathPL, theta: float, reflect: bool):
    """Segment-by-segment solution of ``y = X - theta*int(y) (+ psi)``.

    With ``reflect`` the path is kept non-negative: a downward jump below zero
    is clipped and the shortfall goes to ``psi``; on a decreasing segment the
    zero-hitting time is found in closed form and ``psi`` then grows at the
    rate ``-c``.  Returns breakpoint arrays for ``phi`` and ``psi``.
    """
    times, lefts, rights, targets = [], [], [], []
    psi_times, psi_jumps, psi_slopes = [], [], []
    y = 0.0
    n = len(X.times)
    ends = np.append(X.times[1:], X.horizon)
    for k in range(n):
        t0 = float(X.times[k])
        left = y
        y = y + float(X.jump[k])
        push = 0.0
        if reflect and y < 0.0:
            push = -y
            y = 0.0
        c = float(X.slope[k])
        a = c / theta
        length = float(ends[k]) - t0
        if reflect and c < 0.0 and y <= 0.0:
            # pinned at zero: psi absorbs the downward drift
            times.append(t0); lefts.append(left); rights.append(0.0); targets.append(0.0)
            psi_times.append(t0); psi_jumps.append(push); psi_slopes.append(-c)
            y = 0.0
            continue
        if reflect and c < 0.0:
            hit = math.log1p(theta * y / -c) / theta
            if hit < length:
                times.append(t0); lefts.append(left); rights.append(y); targets.append(a)
                psi_times.append(t0); psi_jumps.append(push); psi_slopes.append(0.0)
                t_hit = t0 + hit
                if t_hit > t0:
                    times.append(t_hit); lefts.append(0.0); rights.append(0.0); targets.append(0.0)
                    psi_times.append(t_hit); psi_jumps.append(0.0); psi_slopes.append(-c)
                else:
                    targets[-1] = 0.0
                    psi_slopes[-1] = -c
                y = 0.0
                continue
        times.append(t0); lefts.append(left); rights.append(y); targets.append(a)
        psi_times.append(t0); psi_jumps.append(push); psi_slopes.append(0.0)
        y = a + (y - a) * math.exp(-theta * length)
        if reflect and y < 0.0:
            y = 0.0
    phi = DecayPath(np.array(times), np.array(lefts), np.array(rights), np.array(targets),
                    float(theta), X.horizon)
    return phi, (psi_times, psi_jumps, psi_slopes)


def solve_phi_psi(X: PathPL, theta: float) -> SkorSolution:
    """Exact solution of the reflection problem for a piecewise-linear input."""
    _check_theta(theta)
    _check_origin(X)
    phi, (pt, pj, ps) = _relax(X, theta, reflect=True)
    psi = PathPL.from_increments(pt, pj, ps, X.horizon, 0.0)
    return SkorSolution(phi, psi, X)


def zeta(X: PathPL, s: float, theta: float) -> DecayPath:
    """``u -> int_0^u exp(-theta (u - y)) dX_s(y)`` with ``X_s(u) = X(s+u) - X(s)``.

    The result is the unreflected solution of ``z = X_s - theta*int(z)`` and
    is returned as an exact :class:`DecayPath` on ``[0, horizon - s]``.
    """
    _check_theta(theta)
    if not 0.0 <= s <= X.horizon:
        raise ModelError("s-out-of-range", f"s={s} outside [0, {X.horizon}]")
    phi, _ = _relax(X.shift(s), theta, reflect=False)
    return phi


def _sup_transform(X: PathPL, theta: float, t: float) -> float:
    """``sup_{0<=s<=t} int_{(s,t]} exp(-theta(t-y)) dX(y)``.

    ``G(s)`` is monotone between breakpoints, so the supremum is attained at
    ``s = t``, at a breakpoint, or just before one (which adds the jump).
    """
    m = int(np.searchsorted(X.times, t, side="right"))
    tk = X.times[:m]
    seg_end = np.append(X.times[1:m], t)
    decay_end = np.exp(-theta * (t - seg_end))
    drift = X.slope[:m] * decay_end * (-np.expm1(-theta * (seg_end - tk))) / theta
    jumps = X.jump[:m] * np.exp(-theta * (t - tk))
    # G(t_k) = sum_{j >= k} drift_j + sum_{j > k} jumps_j
    g_at = np.cumsum(drift[::-1])[::-1]
    g_at[:-1] += np.cumsum(jumps[:0:-1])[::-1]
    g_before = g_at + jumps
    g_before[0] = g_at[0]  # s = 0 excludes the (zero) jump at the origin
    return float(max(0.0, g_at.max(initial=0.0), g_before.max(initial=0.0)))


def reed_sup(X: PathPL, theta: float, t):
    """Reflected path via its supremum representation, at one or many times."""
    _check_theta(theta)
    _check_origin(X)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([_sup_transform(X, theta, float(v)) for v in ts])
    return float(out[0]) if np.ndim(t) == 0 else out


def lipschitz_ratio(X1: PathPL, X2: PathPL, theta: float, T: float | None = None) -> float:
    """``sup|Phi(X1) - Phi(X2)| / sup|X1 - X2|`` over ``[0, T]``."""
    T = min(X1.horizon, X2.horizon) if T is None else T
    diff = X1 - X2
    grid = np.append(diff.times[diff.times < T], T)
    denom = float(max(np.abs(diff(grid)).max(), np.abs(diff.left_limit(grid)).max()))
    if denom == 0.0:
        raise ModelError("identical-paths", "inputs coincide on [0, T]")
    s1 = solve_phi_psi(X1, theta)
    s2 = solve_phi_psi(X2, theta)
    return s1.phi.sup_abs_diff(s2.phi, T) / denom


# ---------------------------------------------------------------------------
# Scaled queue path of the tracking chain


def _tracking_columns(log: EventLog):
    if log.generator != "QTILDE":
        raise ModelError("inconsistent-log", f"expected a QTILDE log, got {log.generator}")
    if not conservation_audit(log):
        raise ModelError("inconsistent-log", "counters violate the conservation identity")
    S = np.asarray(log.states)
    if np.any(S[0, 2:] != 0):
        raise ModelError("inconsistent-log", "queue and counters must start at zero")
    return S


def build_skor_path(log: EventLog, n: int | None = None) -> PathPL:
    """Scaled free input of the tracking chain's queue.

    ``X(t) = n^{-1/2} (ARR(t) - REN(t) - ABA(t) + theta * int_0^t W)``: a jump
    of ``+n^{-1/2}`` per arrival, ``-n^{-1/2}`` per renewal (dummy or not) and
    per abandonment, and slope ``theta * n^{-1/2} * W`` between events.
    """
    S = _tracking_columns(log)
    n = log.params.n if n is None else n
    theta = log.params.theta
    scale = 1.0 / math.sqrt(n)
    d = np.diff(S, axis=0)
    jumps = scale * (d[:, 3] - d[:, 4] - d[:, 5]).astype(float)
    W = S[:, 2].astype(float)
    times = np.concatenate(([0.0], log.times))
    jumps = np.concatenate(([0.0], jumps))
    slopes = theta * (scale * W)
    if len(times) > 1 and times[1] == 0.0:
        raise ModelError("inconsistent-log", "event at time zero")
    return PathPL.from_increments(times, jumps, slopes, log.horizon, 0.0)


def verify_skoro1(log: EventLog, n: int | None = None) -> float:
    """Max over event times of ``|n^{-1/2} W - Phi(X)|`` (left and right limits)."""
    S = _tracking_columns(log)
    n = log.params.n if n is None else n
    sol = solve_phi_psi(build_skor_path(log, n), log.params.theta)
    scaled = S[:, 2] / math.sqrt(n)
    times = np.concatenate(([0.0], log.times))
    right = np.abs(sol.phi(times) - scaled)
    left = np.abs(sol.phi.left_limit(times[1:]) - scaled[:-1])
    end = abs(sol.phi.end_value - scaled[-1])
    return float(max(right.max(), left.max(initial=0.0), end))


def err_process(log: EventLog, n: int | None = None) -> float:
    """Sup-norm over ``[0, horizon]`` of ``n^{-1/2}(ABA - theta * int W)``.

    Between events the process decreases linearly, so the supremum is found
    among the left and right limits at event times and the horizon.
    """
    S = _tracking_columns(log)
    n = log.params.n if n is None else n
    theta = log.params.theta
    times = np.concatenate(([0.0], log.times, [log.horizon]))
    W = S[:, 2].astype(float)
    aba = S[:, 5].astype(float)
    area = np.concatenate(([0.0], np.cumsum(W * np.diff(times))))
    scale = 1.0 / math.sqrt(n)
    right = scale * (aba - theta * area[:-1])
    left = scale * (aba - theta * area[1:])
    return float(max(np.abs(right).max(), np.abs(left).max()))


def random_path(rng: np.random.Generator, n_segments: int = 20, horizon: float = 10.0,
                jump_scale: float = 1.0, slope_scale: float = 1.0, jump_prob: float = 0.5) -> PathPL:
    """Random piecewise-linear input with mixed jumps and slopes (for fuzzing)."""
    inner = np.sort(rng.uniform(0.0, horizon, n_segments - 1))
    times = np.unique(np.concatenate(([0.0], inner)))
    jumps = np.where(rng.random(len(times)) < jump_prob,
                     rng.normal(0.0, jump_scale, len(times)), 0.0)
    jumps[0] = 0.0
    slopes = rng.normal(0.0, slope_scale, len(times))
    return PathPL.from_increments(times, jumps, slopes, horizon, 0.0)


def phi_on_grid(sol: SkorSolution, ts: Sequence[float]) -> np.ndarray:
    return np.asarray(sol.phi(np.asarray(ts, dtype=float)))
