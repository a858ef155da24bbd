"""Markov chain generators for the many-server queue and its couplings.

Seven generators are provided, addressed by id:

``Q``       aggregated queue (N1, N2, W)
``QBAR``    dominating queue with dummy arrivals (a server never idles)
``Q0``      per-job representation of ``Q``: (S, W, nu)
``Q0BAR``   per-job representation of ``QBAR``
``QPRIME``  coupling of ``Q0`` (lower) and ``Q0BAR`` (upper)
``REN``     pooled equilibrium renewal process (RES1, RES2, REN)
``QTILDE``  renewal-driven tracking chain (RES1, RES2, W, ARR, REN, ABA, DMY)

In the per-job chains a job is a pair ``(index, type)``.  The in-service
multiset ``S`` is stored as a sorted tuple (index 0 may repeat), the queue
``W`` as a tuple in FCFS order, and ``nu`` counts regular arrivals.

Each generator lists its moves as classes ``(tag, rate, items, extra)``: every
item in the class is a distinct transition with the same rate.  This keeps the
simulator at O(n) work per event, since only the chosen move is applied.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .model import ModelError, SystemParams, check_hazard_order, equilibrium_mix

GENERATOR_IDS = ("Q", "QBAR", "Q0", "Q0BAR", "QPRIME", "REN", "QTILDE")

_ALIASES = {
    "q": "Q", "qbar": "QBAR", "q0": "Q0", "q0bar": "Q0BAR", "qprime": "QPRIME",
    "q'": "QPRIME", "ren": "REN", "qtilde": "QTILDE",
}

BLOCK_ROWS = 4096


def canonical_id(generator_id: str) -> str:
    key = _ALIASES.get(str(generator_id).lower())
    if key is None:
        raise ModelError("unknown-generator", str(generator_id))
    return key


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based stream (Philox) from an int, SeedSequence, or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, count: int) -> list[np.random.Generator]:
    """Independent replication streams: child ``i`` of ``SeedSequence(seed)``."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in root.spawn(count)]


# ---------------------------------------------------------------------------
# State types


class AggState(NamedTuple):
    N1: int
    N2: int
    W: int


class RenState(NamedTuple):
    RES1: int
    RES2: int
    REN: int


class TrackState(NamedTuple):
    RES1: int
    RES2: int
    W: int
    ARR: int
    REN: int
    ABA: int
    DMY: int


Job = tuple  # (index, type)


@dataclass(frozen=True)
class ExpTriplet:
    """Per-job state: in-service multiset, FCFS queue, and arrival counter."""

    S: tuple
    W: tuple
    nu: int

    @classmethod
    def make(cls, S: Iterable, W: Iterable = (), nu: int = 0) -> "ExpTriplet":
        return cls(tuple(sorted((int(i), int(z)) for i, z in S)),
                   tuple((int(i), int(z)) for i, z in W), int(nu))

    def count(self, index: int, z: int) -> int:
        """Multiplicity of ``(index, z)`` across service and queue."""
        job = (index, z)
        return self.S.count(job) + self.W.count(job)

    def zeros(self, z: int) -> int:
        return self.S.count((0, z))

    def type_counts(self, include_zero: bool = True) -> tuple[int, int]:
        n1 = sum(1 for i, z in self.S if z == 1 and (include_zero or i >= 1))
        n2 = sum(1 for i, z in self.S if z == 2 and (include_zero or i >= 1))
        return n1, n2

    def encode(self) -> list[int]:
        out = [self.nu, len(self.S)]
        for i, z in self.S:
            out += [i, z]
        out.append(len(self.W))
        for i, z in self.W:
            out += [i, z]
        return out

    @classmethod
    def decode(cls, values: Sequence[int], start: int = 0) -> tuple["ExpTriplet", int]:
        k = start
        nu = values[k]
        ns = values[k + 1]
        k += 2
        S = tuple((values[k + 2 * j], values[k + 2 * j + 1]) for j in range(ns))
        k += 2 * ns
        nw = values[k]
        k += 1
        W = tuple((values[k + 2 * j], values[k + 2 * j + 1]) for j in range(nw))
        k += 2 * nw
        return cls(S, W, nu), k

    def __str__(self):
        s = " ".join(f"{i}:{z}" for i, z in self.S)
        w = " ".join(f"{i}:{z}" for i, z in self.W)
        return f"S[{s}] W[{w}] nu={self.nu}"


@dataclass(frozen=True)
class CoupledState:
    lower: ExpTriplet
    upper: ExpTriplet

    def encode(self) -> list[int]:
        return self.lower.encode() + self.upper.encode()

    @classmethod
    def decode(cls, values: Sequence[int]) -> "CoupledState":
        lower, k = ExpTriplet.decode(values, 0)
        upper, _ = ExpTriplet.decode(values, k)
        return cls(lower, upper)


# ---------------------------------------------------------------------------
# Good-state predicates


def good_violation(tr: ExpTriplet, n: int) -> str | None:
    """Reason the triplet is not good, or ``None`` if it is."""
    S, W, nu = tr.S, tr.W, tr.nu
    if len(S) > n:
        return "more than n jobs in service"
    if len(S) <= n - 1 and W:
        return "jobs queued while a server is free"
    seen = set()
    top = 0
    for i, z in S:
        if z not in (1, 2) or i < 0:
            return f"malformed job ({i},{z})"
        if i >= 1:
            if i in seen:
                return f"index {i} appears twice"
            seen.add(i)
            if i > nu:
                return f"index {i} exceeds counter {nu}"
            top = max(top, i)
    prev = 0
    for i, z in W:
        if z not in (1, 2):
            return f"malformed job ({i},{z})"
        if i <= 0:
            return "index 0 in queue"
        if i in seen:
            return f"index {i} appears twice"
        seen.add(i)
        if i <= prev:
            return "queue indices not increasing"
        prev = i
        if i > nu:
            return f"index {i} exceeds counter {nu}"
    if W and W[0][0] <= top:
        return "queue head does not exceed indices in service"
    return None


def is_good(tr: ExpTriplet, n: int) -> bool:
    return good_violation(tr, n) is None


def is_zero_good(tr: ExpTriplet, n: int) -> bool:
    return is_good(tr, n) and tr.zeros(1) + tr.zeros(2) == 0


def is_zero_bar_good(tr: ExpTriplet, n: int) -> bool:
    return is_good(tr, n) and len(tr.S) == n


def is_very_good(tr: ExpTriplet, n: int) -> bool:
    if not (is_zero_good(tr, n) and len(tr.S) == n):
        return False
    return tr.nu == n and not tr.W and sorted(i for i, _ in tr.S) == list(range(1, n + 1))


def dominance_violation(upper: ExpTriplet, lower: ExpTriplet) -> str | None:
    """Reason ``upper >= lower`` fails under the job-wise comparator."""
    if upper.nu != lower.nu:
        return f"counters differ ({upper.nu} vs {lower.nu})"
    up_queue = set(upper.W)
    for job in lower.W:
        if job not in up_queue:
            return f"queued job {job} of lower not queued in upper"
    up_all = set(upper.S) | up_queue
    for job in lower.S:
        if job[0] >= 1 and job not in up_all:
            return f"job {job} in service in lower missing from upper"
    return None


def dominates(upper: ExpTriplet, lower: ExpTriplet) -> bool:
    return dominance_violation(upper, lower) is None


# ---------------------------------------------------------------------------
# Small immutable multiset helpers


def _s_remove(S: tuple, job) -> tuple:
    lst = list(S)
    lst.remove(job)
    return tuple(lst)


def _s_add(S: tuple, job) -> tuple:
    lst = list(S)
    bisect.insort(lst, job)
    return tuple(lst)


def _s_swap(S: tuple, out_job, in_job) -> tuple:
    lst = list(S)
    lst.remove(out_job)
    bisect.insort(lst, in_job)
    return tuple(lst)


def _w_remove(W: tuple, job) -> tuple:
    k = W.index(job)
    return W[:k] + W[k + 1:]


_ONE = (None,)


# ---------------------------------------------------------------------------
# Generators


class Generator:
    """Base class: subclasses define ``tags``, ``moves`` and ``apply``."""

    id = ""
    tags: tuple = ()

    def __init__(self, params: SystemParams):
        self.params = params
        self.n = params.n
        self.lam = params.lambda_n
        self.p = params.p
        self.q = 1.0 - params.p
        self.mu1 = params.mu1
        self.mu2 = params.mu2
        self.theta = params.theta
        self.mu = (None, self.mu1, self.mu2)
        self.mix = (None, self.p, self.q)
        self.lam_mix = (None, self.lam * self.p, self.lam * self.q)

    def validate(self, state) -> None:
        raise NotImplementedError

    def moves(self, state) -> list:
        raise NotImplementedError

    def apply(self, state, tag: int, item, extra):
        raise NotImplementedError

    def coerce(self, state):
        return state

    def transitions(self, state) -> list:
        """All ``(next_state, rate)`` pairs with positive rate, merged by target."""
        state = self.coerce(state)
        self.validate(state)
        merged: dict = {}
        order = []
        for tag, rate, items, extra in self.moves(state):
            for item in items:
                nxt = self.apply(state, tag, item, extra)
                if nxt == state:
                    continue
                if nxt not in merged:
                    merged[nxt] = 0.0
                    order.append(nxt)
                merged[nxt] += rate
        return [(s, merged[s]) for s in order]

    def encode_state(self, state) -> list[int]:
        return [int(v) for v in state]

    def decode_state(self, values: Sequence[int]):
        return self.coerce(tuple(values))


class _AggGenerator(Generator):
    kind = -1
    state_type: type = tuple

    def coerce(self, state):
        return self.state_type(*[int(v) for v in state])

    def apply(self, state, tag, item, extra):
        delta = _kernels.DELTAS[self.kind, tag, : len(state)]
        return self.state_type(*[int(a + b) for a, b in zip(state, delta)])


class QGenerator(_AggGenerator):
    id = "Q"
    kind = _kernels.KIND_Q
    state_type = AggState
    tags = ("arrive_1", "arrive_2", "arrive_queue", "depart_1", "depart_2",
            "enter_1to2", "enter_2to1", "leave_queue")

    def validate(self, state):
        N1, N2, W = state
        if min(state) < 0 or N1 + N2 > self.n or (W >= 1 and N1 + N2 != self.n):
            raise ModelError("bad-state", f"{self.id} state {tuple(state)}")

    def moves(self, st):
        N1, N2, W = st
        lam, p, q, mu1, mu2 = self.lam, self.p, self.q, self.mu1, self.mu2
        out = []
        if N1 + N2 <= self.n - 1:
            out.append((0, lam * p, _ONE, None))
            out.append((1, lam * q, _ONE, None))
        else:
            out.append((2, lam, _ONE, None))
        if W == 0:
            out.append((3, mu1 * N1, _ONE, None))
            out.append((4, mu2 * N2, _ONE, None))
        else:
            out.append((5, mu1 * N1 * q, _ONE, None))
            out.append((6, mu2 * N2 * p, _ONE, None))
            out.append((7, mu1 * N1 * p + mu2 * N2 * q + self.theta * W, _ONE, None))
        return [m for m in out if m[1] > 0.0]


class QBarGenerator(_AggGenerator):
    id = "QBAR"
    kind = _kernels.KIND_QBAR
    state_type = AggState
    tags = ("arrive_queue", "dummy_1to2", "dummy_2to1", "enter_1to2", "enter_2to1", "leave_queue")

    def validate(self, state):
        N1, N2, W = state
        if min(state) < 0 or N1 + N2 != self.n:
            raise ModelError("bad-state", f"{self.id} state {tuple(state)}")

    def moves(self, st):
        N1, N2, W = st
        p, q, mu1, mu2 = self.p, self.q, self.mu1, self.mu2
        out = [(0, self.lam, _ONE, None)]
        if W == 0:
            out.append((1, mu1 * N1 * q, _ONE, None))
            out.append((2, mu2 * N2 * p, _ONE, None))
        else:
            out.append((3, mu1 * N1 * q, _ONE, None))
            out.append((4, mu2 * N2 * p, _ONE, None))
            out.append((5, mu1 * N1 * p + mu2 * N2 * q + self.theta * W, _ONE, None))
        return [m for m in out if m[1] > 0.0]


class RenGenerator(_AggGenerator):
    id = "REN"
    kind = _kernels.KIND_REN
    state_type = RenState
    tags = ("renew_1to2", "renew_2to1", "renew_same")

    def validate(self, state):
        if min(state) < 0 or state[0] + state[1] != self.n:
            raise ModelError("bad-state", f"{self.id} state {tuple(state)}")

    def moves(self, st):
        R1, R2, _ = st
        p, q, mu1, mu2 = self.p, self.q, self.mu1, self.mu2
        out = [
            (0, mu1 * R1 * q, _ONE, None),
            (1, mu2 * R2 * p, _ONE, None),
            (2, mu1 * R1 * p + mu2 * R2 * q, _ONE, None),
        ]
        return [m for m in out if m[1] > 0.0]


class QTildeGenerator(_AggGenerator):
    id = "QTILDE"
    kind = _kernels.KIND_QTILDE
    state_type = TrackState
    tags = ("dummy_1to2", "dummy_2to1", "dummy_same", "arrive",
            "renew_1to2", "renew_2to1", "renew_same", "abandon")

    def validate(self, state):
        if min(state) < 0 or state[0] + state[1] != self.n:
            raise ModelError("bad-state", f"{self.id} state {tuple(state)}")

    def moves(self, st):
        R1, R2, W = st[0], st[1], st[2]
        p, q, mu1, mu2 = self.p, self.q, self.mu1, self.mu2
        out = []
        if W == 0:
            out.append((0, mu1 * R1 * q, _ONE, None))
            out.append((1, mu2 * R2 * p, _ONE, None))
            out.append((2, mu1 * R1 * p + mu2 * R2 * q, _ONE, None))
        out.append((3, self.lam, _ONE, None))
        if W >= 1:
            out.append((4, mu1 * R1 * q, _ONE, None))
            out.append((5, mu2 * R2 * p, _ONE, None))
            out.append((6, mu1 * R1 * p + mu2 * R2 * q, _ONE, None))
            out.append((7, self.theta * W, _ONE, None))
        return [m for m in out if m[1] > 0.0]


class _TripletGenerator(Generator):
    def coerce(self, state):
        if isinstance(state, ExpTriplet):
            return state
        S, W, nu = state
        return ExpTriplet.make(S, W, nu)

    def validate(self, state):
        reason = good_violation(state, self.n)
        if reason is not None:
            raise ModelError("bad-state", reason)

    def encode_state(self, state):
        return state.encode()

    def decode_state(self, values):
        return ExpTriplet.decode(values)[0]

    def _by_type(self, jobs):
        ones = [j for j in jobs if j[1] == 1]
        twos = [j for j in jobs if j[1] == 2]
        return (None, ones, twos)


class Q0Generator(_TripletGenerator):
    id = "Q0"
    tags = ("g1", "g2", "g3", "g4", "g5")

    def moves(self, st):
        out = []
        key = 0 if len(st.S) <= self.n - 1 else 1
        out.append((key, self.lam_mix[1], _ONE, 1))
        out.append((key, self.lam_mix[2], _ONE, 2))
        served = self._by_type([j for j in st.S if j[0] >= 1])
        key = 2 if not st.W else 3
        for z in (1, 2):
            if served[z]:
                out.append((key, self.mu[z], served[z], None))
        if st.W:
            out.append((4, self.theta, st.W, None))
        return out

    def apply(self, st, tag, item, extra):
        if tag == 0:
            return ExpTriplet(_s_add(st.S, (st.nu + 1, extra)), st.W, st.nu + 1)
        if tag == 1:
            return ExpTriplet(st.S, st.W + ((st.nu + 1, extra),), st.nu + 1)
        if tag == 2:
            return ExpTriplet(_s_remove(st.S, item), st.W, st.nu)
        if tag == 3:
            return ExpTriplet(_s_swap(st.S, item, st.W[0]), st.W[1:], st.nu)
        return ExpTriplet(st.S, _w_remove(st.W, item), st.nu)


class Q0BarGenerator(_TripletGenerator):
    id = "Q0BAR"
    tags = ("h1", "h2", "h3", "h4", "h5", "h6")

    def moves(self, st):
        out = [(0, self.lam_mix[1], _ONE, 1), (0, self.lam_mix[2], _ONE, 2)]
        served = self._by_type([j for j in st.S if j[0] >= 1])
        z0 = (None, st.zeros(1), st.zeros(2))
        if not st.W:
            for z1 in (1, 2):
                if served[z1]:
                    for z2 in (1, 2):
                        out.append((1, self.mu[z1] * self.mix[z2], served[z1], z2))
            for z1, z2 in ((1, 2), (2, 1)):
                rate = z0[z1] * self.mu[z1] * self.mix[z2]
                if rate > 0.0:
                    out.append((2, rate, _ONE, (z1, z2)))
        else:
            for z in (1, 2):
                if served[z]:
                    out.append((3, self.mu[z], served[z], None))
            out.append((4, self.theta, st.W, None))
            for z in (1, 2):
                rate = z0[z] * self.mu[z]
                if rate > 0.0:
                    out.append((5, rate, _ONE, z))
        return out

    def apply(self, st, tag, item, extra):
        if tag == 0:
            return ExpTriplet(st.S, st.W + ((st.nu + 1, extra),), st.nu + 1)
        if tag == 1:
            return ExpTriplet(_s_swap(st.S, item, (0, extra)), st.W, st.nu)
        if tag == 2:
            z1, z2 = extra
            return ExpTriplet(_s_swap(st.S, (0, z1), (0, z2)), st.W, st.nu)
        if tag == 3:
            return ExpTriplet(_s_swap(st.S, item, st.W[0]), st.W[1:], st.nu)
        if tag == 4:
            return ExpTriplet(st.S, _w_remove(st.W, item), st.nu)
        return ExpTriplet(_s_swap(st.S, (0, extra), st.W[0]), st.W[1:], st.nu)


QPRIME_TAGS = ("z1", "z2", "z3", "z4", "z5", "z6", "z7", "z8", "z9", "z10",
               "z12", "z14", "z15", "z16", "z17", "z18", "z19", "z20")
(Z1, Z2, Z3, Z4, Z5, Z6, Z7, Z8, Z9, Z10,
 Z12, Z14, Z15, Z16, Z17, Z18, Z19, Z20) = range(len(QPRIME_TAGS))


class QPrimeGenerator(Generator):
    """Coupling of the per-job chain (lower) with its dominating chain (upper).

    A job in service below but still queued above departs below at rate
    ``mu_z``, split into a part ``theta`` that also removes it from the upper
    queue and a part ``mu_z - theta`` that does not.  The split needs
    ``theta <= min(mu1, mu2)``; at equality the second part vanishes.
    """

    id = "QPRIME"
    tags = QPRIME_TAGS

    def __init__(self, params: SystemParams):
        super().__init__(params)
        check_hazard_order(self.theta, self.mu1, self.mu2, strict=True)
        self.mu_minus = (None, self.mu1 - self.theta, self.mu2 - self.theta)
        self.mu_mix = (None, (None, self.mu1 * self.p, self.mu1 * self.q),
                       (None, self.mu2 * self.p, self.mu2 * self.q))

    def coerce(self, state):
        if isinstance(state, CoupledState):
            return state
        lower, upper = state
        tg = _TripletGenerator.coerce
        return CoupledState(tg(self, lower), tg(self, upper))

    def validate(self, state):
        reason = coupled_violation(state, self.n)
        if reason is not None:
            raise ModelError("bad-state", reason)

    def encode_state(self, state):
        return state.encode()

    def decode_state(self, values):
        return CoupledState.decode(values)

    def moves(self, st):
        L, U = st.lower, st.upper
        theta = self.theta
        mu, mu_mix, mu_minus = self.mu, self.mu_mix, self.mu_minus
        out = []
        key = Z1 if len(L.S) <= self.n - 1 else Z2
        out.append((key, self.lam_mix[1], _ONE, 1))
        out.append((key, self.lam_mix[2], _ONE, 2))

        low_s = set(L.S)
        low_w = set(L.W)
        s_only = (None, [], [])
        s_both = (None, [], [])
        for job in U.S:
            if job[0] == 0:
                continue
            if job in low_s:
                s_both[job[1]].append(job)
            elif job not in low_w:
                s_only[job[1]].append(job)
        w_only, w_in_s, w_both = [], (None, [], []), []
        for job in U.W:
            if job in low_s:
                w_in_s[job[1]].append(job)
            elif job in low_w:
                w_both.append(job)
            else:
                w_only.append(job)
        zeros = (None, U.zeros(1), U.zeros(2))

        if not L.W and not U.W:
            for z1 in (1, 2):
                for z2 in (1, 2):
                    if s_only[z1]:
                        out.append((Z3, mu_mix[z1][z2], s_only[z1], z2))
            for z1 in (1, 2):
                for z2 in (1, 2):
                    if s_both[z1]:
                        out.append((Z4, mu_mix[z1][z2], s_both[z1], z2))
            for z1, z2 in ((1, 2), (2, 1)):
                rate = zeros[z1] * mu_mix[z1][z2]
                if rate > 0.0:
                    out.append((Z5, rate, _ONE, (z1, z2)))
        elif not L.W:
            for z in (1, 2):
                if s_only[z]:
                    out.append((Z6, mu[z], s_only[z], None))
            if w_only:
                out.append((Z7, theta, w_only, None))
            for z in (1, 2):
                if s_both[z]:
                    out.append((Z8, mu[z], s_both[z], None))
            w_in_s_all = w_in_s[1] + w_in_s[2]
            if w_in_s_all:
                out.append((Z9, theta, w_in_s_all, None))
            for z in (1, 2):
                if w_in_s[z] and mu_minus[z] > 0.0:
                    out.append((Z10, mu_minus[z], w_in_s[z], None))
            for z in (1, 2):
                rate = zeros[z] * mu[z]
                if rate > 0.0:
                    out.append((Z12, rate, _ONE, z))
        elif U.W:
            for z in (1, 2):
                if s_only[z]:
                    out.append((Z14, mu[z], s_only[z], None))
            if w_only:
                out.append((Z15, theta, w_only, None))
            for z in (1, 2):
                if s_both[z]:
                    out.append((Z16, mu[z], s_both[z], None))
            w_in_s_all = w_in_s[1] + w_in_s[2]
            if w_in_s_all:
                out.append((Z17, theta, w_in_s_all, None))
            for z in (1, 2):
                if w_in_s[z] and mu_minus[z] > 0.0:
                    out.append((Z18, mu_minus[z], w_in_s[z], None))
            if w_both:
                out.append((Z19, theta, w_both, None))
            for z in (1, 2):
                rate = zeros[z] * mu[z]
                if rate > 0.0:
                    out.append((Z20, rate, _ONE, z))
        else:
            raise ModelError("bad-state", "lower queue non-empty while upper queue is empty")
        return out

    def apply(self, st, tag, item, extra):
        L, U = st.lower, st.upper
        if tag == Z1:
            job = (L.nu + 1, extra)
            return CoupledState(ExpTriplet(_s_add(L.S, job), L.W, L.nu + 1),
                                ExpTriplet(U.S, U.W + (job,), U.nu + 1))
        if tag == Z2:
            job = (L.nu + 1, extra)
            return CoupledState(ExpTriplet(L.S, L.W + (job,), L.nu + 1),
                                ExpTriplet(U.S, U.W + (job,), U.nu + 1))
        if tag == Z3:
            return CoupledState(L, ExpTriplet(_s_swap(U.S, item, (0, extra)), U.W, U.nu))
        if tag == Z4:
            return CoupledState(ExpTriplet(_s_remove(L.S, item), L.W, L.nu),
                                ExpTriplet(_s_swap(U.S, item, (0, extra)), U.W, U.nu))
        if tag == Z5:
            z1, z2 = extra
            return CoupledState(L, ExpTriplet(_s_swap(U.S, (0, z1), (0, z2)), U.W, U.nu))
        if tag in (Z6, Z14):
            return CoupledState(L, ExpTriplet(_s_swap(U.S, item, U.W[0]), U.W[1:], U.nu))
        if tag in (Z7, Z15):
            return CoupledState(L, ExpTriplet(U.S, _w_remove(U.W, item), U.nu))
        if tag == Z8:
            return CoupledState(ExpTriplet(_s_remove(L.S, item), L.W, L.nu),
                                ExpTriplet(_s_swap(U.S, item, U.W[0]), U.W[1:], U.nu))
        if tag == Z9:
            return CoupledState(ExpTriplet(_s_remove(L.S, item), L.W, L.nu),
                                ExpTriplet(U.S, _w_remove(U.W, item), U.nu))
        if tag == Z10:
            return CoupledState(ExpTriplet(_s_remove(L.S, item), L.W, L.nu), U)
        if tag in (Z12, Z20):
            return CoupledState(L, ExpTriplet(_s_swap(U.S, (0, extra), U.W[0]), U.W[1:], U.nu))
        if tag == Z16:
            return CoupledState(ExpTriplet(_s_swap(L.S, item, L.W[0]), L.W[1:], L.nu),
                                ExpTriplet(_s_swap(U.S, item, U.W[0]), U.W[1:], U.nu))
        if tag == Z17:
            return CoupledState(ExpTriplet(_s_swap(L.S, item, L.W[0]), L.W[1:], L.nu),
                                ExpTriplet(U.S, _w_remove(U.W, item), U.nu))
        if tag == Z18:
            return CoupledState(ExpTriplet(_s_swap(L.S, item, L.W[0]), L.W[1:], L.nu), U)
        if tag == Z19:
            return CoupledState(ExpTriplet(L.S, _w_remove(L.W, item), L.nu),
                                ExpTriplet(U.S, _w_remove(U.W, item), U.nu))
        raise ModelError("bad-tag", str(tag))


def coupled_violation(state: CoupledState, n: int) -> str | None:
    """First failed invariant of a coupled state, or ``None``."""
    reason = good_violation(state.lower, n)
    if reason is not None:
        return f"lower not good: {reason}"
    if state.lower.zeros(1) + state.lower.zeros(2):
        return "lower holds index-0 jobs"
    reason = good_violation(state.upper, n)
    if reason is not None:
        return f"upper not good: {reason}"
    if len(state.upper.S) != n:
        return "upper does not have n jobs in service"
    reason = dominance_violation(state.upper, state.lower)
    if reason is not None:
        return reason
    if len(state.upper.W) < len(state.lower.W):
        return "upper queue shorter than lower queue"
    return None


_GENERATOR_CLASSES = {
    "Q": QGenerator, "QBAR": QBarGenerator, "Q0": Q0Generator, "Q0BAR": Q0BarGenerator,
    "QPRIME": QPrimeGenerator, "REN": RenGenerator, "QTILDE": QTildeGenerator,
}


def make_generator(generator_id: str, params: SystemParams) -> Generator:
    return _GENERATOR_CLASSES[canonical_id(generator_id)](params)


def enumerate_transitions(generator_id: str, state, params: SystemParams) -> list:
    """Positive-rate transitions ``[(next_state, rate), ...]`` out of ``state``."""
    return make_generator(generator_id, params).transitions(state)


def total_rate(generator_id: str, state, params: SystemParams) -> float:
    return sum(r for _, r in enumerate_transitions(generator_id, state, params))


# ---------------------------------------------------------------------------
# Event logs


LOG_MAGIC = b"HWQLOG01"
_HEADER = struct.Struct("<8s8sddqq")  # magic, generator id, horizon, seed, n events, n fields


@dataclass
class EventLog:
    """Immutable record of one simulated path.

    ``states[0]`` is the initial state and ``states[k + 1]`` the state right
    after event ``k``; the pre-state of event ``k`` is ``states[k]``.
    """

    generator: str
    params: SystemParams
    times: np.ndarray
    tags: np.ndarray
    states: Any
    horizon: float
    seed: Any = None

    def __len__(self):
        return len(self.times)

    @property
    def tag_names(self) -> tuple:
        return _GENERATOR_CLASSES[self.generator].tags

    @property
    def initial(self):
        return self.state(0)

    @property
    def final(self):
        return self.state(len(self))

    def state(self, k: int):
        s = self.states[k]
        if isinstance(self.states, np.ndarray):
            return _GENERATOR_CLASSES[self.generator].state_type(*[int(v) for v in s])
        return s

    def events(self) -> Iterator[tuple]:
        """Yield ``(time, tag_name, pre_state, post_state)``."""
        names = self.tag_names
        for k in range(len(self)):
            yield float(self.times[k]), names[int(self.tags[k])], self.state(k), self.state(k + 1)

    def column(self, name: str) -> np.ndarray:
        """State component over the log (aggregated chains only), length len+1."""
        cls = _GENERATOR_CLASSES[self.generator]
        if not isinstance(self.states, np.ndarray):
            raise ModelError("not-aggregated", f"{self.generator} states are not numeric")
        return self.states[:, cls.state_type._fields.index(name)]

    def to_csv(self) -> str:
        """CSV text: time, tag, then the post-event state fields."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        numeric = isinstance(self.states, np.ndarray)
        if numeric:
            fields = list(_GENERATOR_CLASSES[self.generator].state_type._fields)
        elif self.generator == "QPRIME":
            fields = ["lower", "upper"]
        else:
            fields = ["state"]
        writer.writerow(["time", "tag"] + fields)

        def row_of(s):
            if numeric:
                return [int(v) for v in s]
            if isinstance(s, CoupledState):
                return [str(s.lower), str(s.upper)]
            return [str(s)]

        writer.writerow([repr(0.0), "initial"] + row_of(self.states[0]))
        names = self.tag_names
        for k in range(len(self)):
            writer.writerow([repr(float(self.times[k])), names[int(self.tags[k])]]
                            + row_of(self.states[k + 1]))
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        """Framed binary form; every field is a little-endian 64-bit value.

        Layout: header ``magic(8) generator(8) horizon(f8) seed(f8 or NaN)
        n_events(i8) reserved(i8)``, then the initial state frame, then one
        frame per event ``time(f8) tag(i8) k(i8) k*state(i8)``.  The initial
        frame uses time 0 and tag -1.
        """
        gen = _GENERATOR_CLASSES[self.generator]
        proto = gen.__new__(gen)
        seed = float(self.seed) if isinstance(self.seed, (int, np.integer)) else float("nan")
        parts = [_HEADER.pack(LOG_MAGIC, self.generator.encode().ljust(8, b"\0"),
                              float(self.horizon), seed, len(self), 0)]
        for k in range(len(self) + 1):
            vals = Generator.encode_state(proto, self.states[k]) if isinstance(self.states, np.ndarray) \
                else proto.encode_state(self.states[k])
            t = 0.0 if k == 0 else float(self.times[k - 1])
            tag = -1 if k == 0 else int(self.tags[k - 1])
            parts.append(struct.pack(f"<dqq{len(vals)}q", t, tag, len(vals), *vals))
        return b"".join(parts)

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, params: SystemParams) -> "EventLog":
        frames = list(iter_frames(io.BytesIO(data)))
        header = frames.pop(0)
        gen_id, horizon, seed = header
        gen = _GENERATOR_CLASSES[gen_id]
        proto = gen.__new__(gen)
        times = np.array([f[0] for f in frames[1:]], dtype=float)
        tags = np.array([f[1] for f in frames[1:]], dtype=np.int64)
        if issubclass(gen, _AggGenerator):
            states = np.array([f[2] for f in frames], dtype=np.int64)
        else:
            states = [proto.decode_state(f[2]) for f in frames]
        seed = None if math.isnan(seed) else int(seed)
        return cls(gen_id, params, times, tags, states, horizon, seed)


def iter_frames(stream) -> Iterator[tuple]:
    """Stream a binary log: first the header ``(generator, horizon, seed)``,
    then ``(time, tag, state_values)`` frames without loading the whole file."""
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ModelError("bad-log", "truncated header")
    magic, gen_id, horizon, seed, _, _ = _HEADER.unpack(head)
    if magic != LOG_MAGIC:
        raise ModelError("bad-log", "magic bytes do not match")
    yield gen_id.rstrip(b"\0").decode(), horizon, seed
    fixed = struct.Struct("<dqq")
    while True:
        chunk = stream.read(fixed.size)
        if not chunk:
            return
        if len(chunk) != fixed.size:
            raise ModelError("bad-log", "truncated frame")
        t, tag, k = fixed.unpack(chunk)
        body = stream.read(8 * k)
        if len(body) != 8 * k:
            raise ModelError("bad-log", "truncated frame")
        yield t, tag, list(struct.unpack(f"<{k}q", body))


def read_binary(path, params: SystemParams) -> EventLog:
    with open(path, "rb") as fh:
        return EventLog.from_bytes(fh.read(), params)


# ---------------------------------------------------------------------------
# Simulation


def _seed_of(rng_stream):
    if isinstance(rng_stream, (int, np.integer)):
        return int(rng_stream)
    return None


def _pick(moves, total, u):
    target = u * total
    cum = 0.0
    for tag, rate, items, extra in moves:
        weight = rate * len(items)
        if target < cum + weight:
            k = int((target - cum) / rate)
            return tag, items[min(k, len(items) - 1)], extra
        cum += weight
    tag, rate, items, extra = moves[-1]
    return tag, items[-1], extra


def _python_run(gen: Generator, state, horizon: float, rng: np.random.Generator, sink=None):
    """Pure-Python event loop; yields (time, tag, post_state) via ``sink``."""
    t = 0.0
    block = rng.random((BLOCK_ROWS, 2))
    pos = 0
    while True:
        moves = gen.moves(state)
        total = 0.0
        for _, rate, items, _ in moves:
            total += rate * len(items)
        if total <= 0.0:
            return state
        if not math.isfinite(total):
            raise ModelError("rate-overflow", f"total rate {total}")
        if pos >= BLOCK_ROWS:
            block = rng.random((BLOCK_ROWS, 2))
            pos = 0
        u1 = block[pos, 0]
        u2 = block[pos, 1]
        pos += 1
        t_next = t - math.log1p(-u1) / total
        if t_next > horizon:
            return state
        t = t_next
        tag, item, extra = _pick(moves, total, u2)
        state = gen.apply(state, tag, item, extra)
        sink(t, tag, state)


def _compiled_run(gen: _AggGenerator, state, horizon: float, rng: np.random.Generator):
    prm = gen.params
    st = np.array(state, dtype=np.int64)
    cap = 1024
    times = np.empty(cap)
    tags = np.empty(cap, dtype=np.int64)
    states = np.empty((cap, len(st)), dtype=np.int64)
    count = 0
    t = 0.0
    block = rng.random((BLOCK_ROWS, 2))
    pos = 0
    while True:
        status, t, pos, count = _kernels.run_logged(
            gen.kind, st, t, horizon, prm.n, prm.lambda_n, prm.p, prm.mu1, prm.mu2,
            prm.theta, block, pos, times, tags, states, count)
        if status == _kernels.STATUS_BLOCK:
            block = rng.random((BLOCK_ROWS, 2))
            pos = 0
        elif status == _kernels.STATUS_FULL:
            cap *= 2
            times = np.resize(times, cap)
            tags = np.resize(tags, cap)
            states = np.resize(states, (cap, len(st)))
        elif status == _kernels.STATUS_OVERFLOW:
            raise ModelError("rate-overflow", "total rate is not finite")
        else:
            break
    init = np.array(state, dtype=np.int64)[None, :]
    return times[:count].copy(), tags[:count].copy(), np.vstack([init, states[:count]])


def simulate(generator_id: str, init_state, horizon: float, rng_stream,
             params: SystemParams, engine: str = "auto", validate: bool = True) -> EventLog:
    """Exact jump simulation of a generator up to ``horizon``.

    Holding times are exponential at the total exit rate and the next move is
    drawn proportionally to its rate.  Given the same generator, initial
    state and seed the log is reproduced exactly.  ``engine`` selects the
    compiled loop (aggregated chains only) or the pure-Python loop; both read
    the random stream identically and give the same log.
    """
    gen = make_generator(generator_id, params)
    if not horizon > 0:
        raise ModelError("bad-horizon", f"horizon={horizon}")
    state = gen.coerce(init_state)
    if validate:
        gen.validate(state)
    seed = _seed_of(rng_stream)
    rng = make_rng(rng_stream)
    aggregated = isinstance(gen, _AggGenerator)
    if engine == "auto":
        engine = "compiled" if aggregated else "python"
    if engine == "compiled":
        if not aggregated:
            raise ModelError("bad-engine", f"{gen.id} has no compiled engine")
        times, tags, states = _compiled_run(gen, state, horizon, rng)
        return EventLog(gen.id, params, times, tags, states, float(horizon), seed)
    times_l, tags_l, states_l = [], [], [state]

    def sink(t, tag, s):
        times_l.append(t)
        tags_l.append(tag)
        states_l.append(s)

    _python_run(gen, state, horizon, rng, sink)
    states = np.array(states_l, dtype=np.int64) if aggregated else states_l
    return EventLog(gen.id, params, np.array(times_l, dtype=float),
                    np.array(tags_l, dtype=np.int64), states, float(horizon), seed)


def simulate_to_file(generator_id: str, init_state, horizon: float, rng_stream,
                     params: SystemParams, path) -> int:
    """Stream a simulated path straight to a binary log file.

    Frames are written as events occur, so long paths never sit in memory.
    Returns the number of events written.  The file can be read back with
    :func:`read_binary` or walked lazily with :func:`iter_frames`.
    """
    gen = make_generator(generator_id, params)
    state = gen.coerce(init_state)
    gen.validate(state)
    rng = make_rng(rng_stream)
    seed = _seed_of(rng_stream)
    seed_f = float(seed) if seed is not None else float("nan")
    count = [0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LOG_MAGIC, gen.id.encode().ljust(8, b"\0"), float(horizon), seed_f, 0, 0))
        vals = gen.encode_state(state)
        fh.write(struct.pack(f"<dqq{len(vals)}q", 0.0, -1, len(vals), *vals))

        def sink(t, tag, s):
            v = gen.encode_state(s)
            fh.write(struct.pack(f"<dqq{len(v)}q", t, tag, len(v), *v))
            count[0] += 1

        _python_run(gen, state, horizon, rng, sink)
        fh.seek(0)
        fh.write(_HEADER.pack(LOG_MAGIC, gen.id.encode().ljust(8, b"\0"), float(horizon),
                              seed_f, count[0], 0))
    return count[0]


# ---------------------------------------------------------------------------
# Initial conditions


def init_halfin_whitt(params: SystemParams, rng=None, expanded: bool = False,
                      p_hat: float | None = None):
    """All ``n`` servers busy, types i.i.d. with P(type 1) = p/mu1, empty queue.

    The aggregated form is ``AggState(N1, n - N1, 0)``; the expanded form is the
    very-good triplet with indices ``1..n`` and counter ``n``.  ``p_hat``
    overrides the type-1 probability.
    """
    if p_hat is None:
        p_hat = equilibrium_mix(params.service)
    rng = make_rng(rng)
    n = params.n
    if expanded:
        types = np.where(rng.random(n) < p_hat, 1, 2)
        return ExpTriplet(tuple((i + 1, int(z)) for i, z in enumerate(types)), (), n)
    n1 = int(rng.binomial(n, min(max(p_hat, 0.0), 1.0)))
    return AggState(n1, n - n1, 0)


def init_tracking(params: SystemParams, rng=None) -> TrackState:
    """Initial state of the tracking chain: binomial residual types, zero counters."""
    agg = init_halfin_whitt(params, rng)
    return TrackState(agg.N1, agg.N2, 0, 0, 0, 0, 0)


def init_coupled(params: SystemParams, rng=None) -> CoupledState:
    """Shared very-good start for the coupled chain."""
    tr = init_halfin_whitt(params, rng, expanded=True)
    return CoupledState(tr, tr)


# ---------------------------------------------------------------------------
# Audits


@dataclass
class AuditReport:
    passed: bool
    n_events: int
    first_violation: tuple | None = None  # (event index, time, reason)

    def __str__(self):
        if self.passed:
            return f"pass ({self.n_events} events)"
        k, t, why = self.first_violation
        return f"violation at event {k} (t={t:.6g}): {why}"


def dominance_audit(log: EventLog) -> AuditReport:
    """Check the coupling invariants at every state of a coupled log."""
    if log.generator != "QPRIME":
        raise ModelError("precondition", "dominance audit needs a QPRIME log")
    n = log.params.n
    init = log.states[0]
    if init.lower != init.upper or not is_very_good(init.lower, n):
        raise ModelError("precondition", "initial coupled state must be a shared very-good triplet")
    for k, st in enumerate(log.states):
        reason = coupled_violation(st, n)
        if reason is not None:
            t = 0.0 if k == 0 else float(log.times[k - 1])
            return AuditReport(False, len(log), (k, t, reason))
    return AuditReport(True, len(log))


def conservation_audit(log: EventLog) -> bool:
    """``W = ARR - REN - ABA + DMY`` at every state; DMY grows only when W = 0."""
    if log.generator != "QTILDE":
        raise ModelError("precondition", "conservation audit needs a QTILDE log")
    S = np.asarray(log.states)
    W, ARR, REN, ABA, DMY = S[:, 2], S[:, 3], S[:, 4], S[:, 5], S[:, 6]
    if np.any(W != ARR - REN - ABA + DMY):
        return False
    grew = np.diff(DMY) > 0
    return not np.any(grew & (W[:-1] > 0))


# ---------------------------------------------------------------------------
# Statistical checks


@dataclass
class TwoSampleReport:
    statistic: float
    p_value: float
    dof: int
    counts_a: np.ndarray
    counts_b: np.ndarray
    labels: tuple


def _queue_length_at(log: EventLog, part: str | None) -> int:
    st = log.final
    if part == "lower":
        return len(st.lower.W)
    if part == "upper":
        return len(st.upper.W)
    if isinstance(st, ExpTriplet):
        return len(st.W)
    return int(st.W)


def pooled_chi_square(a: np.ndarray, b: np.ndarray, min_expected: float = 5.0):
    """Chi-square homogeneity test on two integer samples with tail pooling.

    Categories are merged from the top until every expected count is at
    least ``min_expected``.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    top = int(max(a.max(initial=0), b.max(initial=0)))
    ca = np.bincount(a, minlength=top + 1).astype(float)
    cb = np.bincount(b, minlength=top + 1).astype(float)
    na, nb = ca.sum(), cb.sum()
    edges = []
    acc_a = acc_b = 0.0
    start = 0
    bins_a, bins_b = [], []
    for k in range(top + 1):
        acc_a += ca[k]
        acc_b += cb[k]
        tot = acc_a + acc_b
        if min(tot * na, tot * nb) / (na + nb) >= min_expected:
            bins_a.append(acc_a)
            bins_b.append(acc_b)
            edges.append((start, k))
            acc_a = acc_b = 0.0
            start = k + 1
    if acc_a + acc_b > 0:
        if bins_a:
            bins_a[-1] += acc_a
            bins_b[-1] += acc_b
            edges[-1] = (edges[-1][0], top)
        else:
            bins_a.append(acc_a)
            bins_b.append(acc_b)
            edges.append((start, top))
    table = np.array([bins_a, bins_b])
    if table.shape[1] < 2:
        return 0.0, 1.0, 0, table[0], table[1], tuple(edges)
    chi2, pval, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(chi2), float(pval), int(dof), table[0], table[1], tuple(edges)


def marginal_fidelity(n_reps: int, T: float, params: SystemParams, seed=0,
                      projection: str = "lower", reference: str | None = None) -> TwoSampleReport:
    """Compare one side of the coupled chain with a directly simulated chain.

    ``projection`` picks the lower (per-job queue) or upper (dominating queue)
    part of the coupled chain; ``reference`` defaults to the matching direct
    chain (``Q0`` or ``Q0BAR``).  Both samples start from the same shared
    very-good state and record the queue length at time ``T``.
    """
    if n_reps <= 0:
        raise ModelError("empty-sample", "n_reps must be positive")
    params.check_assumption(strict=True)
    if reference is None:
        reference = "Q0" if projection == "lower" else "Q0BAR"
    root = np.random.SeedSequence(seed)
    init_seq, coupled_seq, direct_seq = root.spawn(3)
    init = init_halfin_whitt(params, make_rng(init_seq), expanded=True)
    a = np.empty(n_reps, dtype=np.int64)
    b = np.empty(n_reps, dtype=np.int64)
    coupled_rngs = [make_rng(s) for s in coupled_seq.spawn(n_reps)]
    direct_rngs = [make_rng(s) for s in direct_seq.spawn(n_reps)]
    for r in range(n_reps):
        log = simulate("QPRIME", CoupledState(init, init), T, coupled_rngs[r], params, validate=(r == 0))
        a[r] = _queue_length_at(log, projection)
        log = simulate(reference, init, T, direct_rngs[r], params, validate=(r == 0))
        b[r] = _queue_length_at(log, None)
    stat, pval, dof, ca, cb, labels = pooled_chi_square(a, b)
    return TwoSampleReport(stat, pval, dof, ca, cb, labels)


# ---------------------------------------------------------------------------
# Steady-state tail of the scaled queue length


@dataclass
class SurvivalEstimate:
    x: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    n_events: int
    n_batches: int
    burn_in: float
    horizon: float


def default_burn_in(theta: float) -> float:
    return 10.0 * max(1.0 / theta, 1.0)


def steady_tail_estimate(params: SystemParams, horizon: float, n_reps: int = 1,
                         x_grid: Sequence[float] = (0.0, 0.5, 1.0, 1.5, 2.0),
                         burn_in: float | None = None, seed=0, generator: str = "Q",
                         n_batches: int = 30, min_events: int = 1000) -> SurvivalEstimate:
    """Time-averaged ``P(W / sqrt(n) > x)`` with batch-means standard errors.

    Each replication starts from the Halfin-Whitt initial state and discards
    ``burn_in`` time units.  The remaining window is cut into ``n_batches``
    equal batches per replication; the standard error comes from the spread
    of all batch means.
    """
    gen = make_generator(generator, params)
    if not isinstance(gen, (QGenerator, QBarGenerator)):
        raise ModelError("bad-generator", "steady tail needs Q or QBAR")
    if burn_in is None:
        burn_in = default_burn_in(params.theta)
    if not horizon > burn_in:
        raise ModelError("insufficient-data", "horizon must exceed burn-in")
    x = np.asarray(x_grid, dtype=float)
    n = params.n
    wmax = int(math.ceil(x.max() * math.sqrt(n))) + 2
    edges = np.linspace(burn_in, horizon, n_batches + 1)
    batch_means = []
    events = 0
    for rng in spawn_rngs(seed, n_reps):
        st = np.array(init_halfin_whitt(params, rng), dtype=np.int64)
        occ = np.zeros((n_batches, wmax + 1))
        nev = np.zeros(1, dtype=np.int64)
        t = 0.0
        block = rng.random((BLOCK_ROWS, 2))
        pos = 0
        while True:
            status, t, pos = _kernels.run_occupation(
                gen.kind, st, t, horizon, n, params.lambda_n, params.p, params.mu1,
                params.mu2, params.theta, block, pos, edges, occ, 2, nev)
            if status == _kernels.STATUS_BLOCK:
                block = rng.random((BLOCK_ROWS, 2))
                pos = 0
            elif status == _kernels.STATUS_OVERFLOW:
                raise ModelError("rate-overflow", "total rate is not finite")
            else:
                break
        events += int(nev[0])
        widths = np.diff(edges)
        levels = np.arange(wmax + 1) / math.sqrt(n)
        for b in range(n_batches):
            batch_means.append([occ[b, levels > xv].sum() / widths[b] for xv in x])
    if events < min_events:
        raise ModelError("insufficient-data", f"only {events} post-burn-in events")
    bm = np.array(batch_means)
    surv = bm.mean(axis=0)
    se = bm.std(axis=0, ddof=1) / math.sqrt(len(bm))
    return SurvivalEstimate(x, surv, se, events, len(bm), burn_in, horizon)


def birth_death_tail(n: int, lam: float, theta: float, x_grid: Sequence[float],
                     mu: float = 1.0, tol: float = 1e-300) -> np.ndarray:
    """Exact ``P((X - n)^+ / sqrt(n) > x)`` for the M/M/n+M birth-death chain.

    Birth rate ``lam``, death rate ``min(k, n)*mu + theta*(k - n)^+``.  The
    balance equations are solved in log space and the state space is
    truncated once the probabilities fall below ``tol`` relative to the mode.
    """
    logp = [0.0]
    k = 0
    best = 0.0
    while True:
        death = min(k + 1, n) * mu + theta * max(k + 1 - n, 0)
        nxt = logp[-1] + math.log(lam) - math.log(death)
        logp.append(nxt)
        best = max(best, nxt)
        k += 1
        if k > n and nxt - best < math.log(tol):
            break
    logp = np.array(logp)
    pi = np.exp(logp - logp.max())
    pi /= pi.sum()
    queue = np.maximum(np.arange(len(pi)) - n, 0) / math.sqrt(n)
    return np.array([pi[queue > xv].sum() for xv in np.asarray(x_grid, dtype=float)])
