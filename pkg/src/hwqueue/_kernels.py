"""Compiled event loops for the aggregated chains (Q, Q-bar, renewal, tracking).

The loops consume uniforms from a caller-supplied block of shape (m, 2): the
first column drives the exponential holding time, the second picks the
transition.  The pure-Python engine in :mod:`hwqueue.ctmc` reads uniforms in
the same order and adds rates in the same order, so both engines produce
identical logs for the same seed.
"""

from __future__ import annotations

import numpy as np
from numba import njit

KIND_Q = 0
KIND_QBAR = 1
KIND_REN = 2
KIND_QTILDE = 3

STATUS_BLOCK = 0
STATUS_HORIZON = 1
STATUS_FULL = 2
STATUS_ABSORBED = 3
STATUS_OVERFLOW = 4

# Per-kind state increments, indexed [kind, tag, component].
DELTAS = np.zeros((4, 8, 7), dtype=np.int64)
DELTAS[KIND_Q, :, :3] = [
    (1, 0, 0), (0, 1, 0), (0, 0, 1), (-1, 0, 0),
    (0, -1, 0), (-1, 1, -1), (1, -1, -1), (0, 0, -1),
]
DELTAS[KIND_QBAR, :6, :3] = [
    (0, 0, 1), (-1, 1, 0), (1, -1, 0), (-1, 1, -1), (1, -1, -1), (0, 0, -1),
]
DELTAS[KIND_REN, :3, :3] = [(-1, 1, 1), (1, -1, 1), (0, 0, 1)]
DELTAS[KIND_QTILDE, :, :] = [
    (-1, 1, 0, 0, 1, 0, 1), (1, -1, 0, 0, 1, 0, 1), (0, 0, 0, 0, 1, 0, 1),
    (0, 0, 1, 1, 0, 0, 0),
    (-1, 1, -1, 0, 1, 0, 0), (1, -1, -1, 0, 1, 0, 0), (0, 0, -1, 0, 1, 0, 0),
    (0, 0, -1, 0, 0, 1, 0),
]


@njit(cache=True)
def agg_rates(kind, state, n, lam, p, mu1, mu2, theta, rates, tags):
    """Fill ``rates``/``tags`` with the positive-rate moves; return how many."""
    q = 1.0 - p
    k = 0
    if kind == KIND_Q:
        N1 = state[0]
        N2 = state[1]
        W = state[2]
        if N1 + N2 <= n - 1:
            rates[k] = lam * p
            tags[k] = 0
            k += 1
            rates[k] = lam * q
            tags[k] = 1
            k += 1
        else:
            rates[k] = lam
            tags[k] = 2
            k += 1
        if W == 0:
            rates[k] = mu1 * N1
            tags[k] = 3
            k += 1
            rates[k] = mu2 * N2
            tags[k] = 4
            k += 1
        else:
            rates[k] = mu1 * N1 * q
            tags[k] = 5
            k += 1
            rates[k] = mu2 * N2 * p
            tags[k] = 6
            k += 1
            rates[k] = mu1 * N1 * p + mu2 * N2 * q + theta * W
            tags[k] = 7
            k += 1
    elif kind == KIND_QBAR:
        N1 = state[0]
        N2 = state[1]
        W = state[2]
        rates[k] = lam
        tags[k] = 0
        k += 1
        if W == 0:
            rates[k] = mu1 * N1 * q
            tags[k] = 1
            k += 1
            rates[k] = mu2 * N2 * p
            tags[k] = 2
            k += 1
        else:
            rates[k] = mu1 * N1 * q
            tags[k] = 3
            k += 1
            rates[k] = mu2 * N2 * p
            tags[k] = 4
            k += 1
            rates[k] = mu1 * N1 * p + mu2 * N2 * q + theta * W
            tags[k] = 5
            k += 1
    elif kind == KIND_REN:
        R1 = state[0]
        R2 = state[1]
        rates[k] = mu1 * R1 * q
        tags[k] = 0
        k += 1
        rates[k] = mu2 * R2 * p
        tags[k] = 1
        k += 1
        rates[k] = mu1 * R1 * p + mu2 * R2 * q
        tags[k] = 2
        k += 1
    else:
        R1 = state[0]
        R2 = state[1]
        W = state[2]
        if W == 0:
            rates[k] = mu1 * R1 * q
            tags[k] = 0
            k += 1
            rates[k] = mu2 * R2 * p
            tags[k] = 1
            k += 1
            rates[k] = mu1 * R1 * p + mu2 * R2 * q
            tags[k] = 2
            k += 1
        rates[k] = lam
        tags[k] = 3
        k += 1
        if W >= 1:
            rates[k] = mu1 * R1 * q
            tags[k] = 4
            k += 1
            rates[k] = mu2 * R2 * p
            tags[k] = 5
            k += 1
            rates[k] = mu1 * R1 * p + mu2 * R2 * q
            tags[k] = 6
            k += 1
            rates[k] = theta * W
            tags[k] = 7
            k += 1
    # drop zero-rate entries so the cumulative walk matches the Python engine
    m = 0
    for j in range(k):
        if rates[j] > 0.0:
            rates[m] = rates[j]
            tags[m] = tags[j]
            m += 1
    return m


@njit(cache=True)
def _pick(rates, tags, m, total, u):
    target = u * total
    cum = 0.0
    for j in range(m):
        cum += rates[j]
        if target < cum:
            return tags[j]
    return tags[m - 1]


@njit(cache=True)
def run_logged(kind, state, t, horizon, n, lam, p, mu1, mu2, theta,
               block, start, times_out, tags_out, states_out, count):
    """Advance the chain, appending events to the output buffers.

    Returns ``(status, t, block_position, count)``.  ``state`` is updated in
    place.  The routine stops when the block is used up, the horizon is
    passed, the buffers are full, or no move has positive rate.
    """
    rates = np.empty(8)
    tags = np.empty(8, dtype=np.int64)
    pos = start
    cap = times_out.shape[0]
    dim = state.shape[0]
    while True:
        m = agg_rates(kind, state, n, lam, p, mu1, mu2, theta, rates, tags)
        if m == 0:
            return STATUS_ABSORBED, t, pos, count
        total = 0.0
        for j in range(m):
            total += rates[j]
        if not np.isfinite(total):
            return STATUS_OVERFLOW, t, pos, count
        if pos >= block.shape[0]:
            return STATUS_BLOCK, t, pos, count
        if count >= cap:
            return STATUS_FULL, t, pos, count
        u1 = block[pos, 0]
        u2 = block[pos, 1]
        pos += 1
        t_next = t - np.log1p(-u1) / total
        if t_next > horizon:
            return STATUS_HORIZON, t, pos, count
        t = t_next
        tag = _pick(rates, tags, m, total, u2)
        for c in range(dim):
            state[c] += DELTAS[kind, tag, c]
        times_out[count] = t
        tags_out[count] = tag
        for c in range(dim):
            states_out[count, c] = state[c]
        count += 1


@njit(cache=True)
def run_occupation(kind, state, t, horizon, n, lam, p, mu1, mu2, theta,
                   block, start, edges, occupation, wcol, n_events):
    """Accumulate time spent at each queue length inside batch windows.

    ``edges`` are the batch boundaries (length n_batches + 1); time outside
    ``[edges[0], edges[-1]]`` is ignored.  ``occupation[b, w]`` collects the
    time with queue length ``w`` (the last column absorbs larger values).
    ``n_events[0]`` counts events inside the window.
    """
    rates = np.empty(8)
    tags = np.empty(8, dtype=np.int64)
    pos = start
    dim = state.shape[0]
    nb = edges.shape[0] - 1
    wmax = occupation.shape[1] - 1
    while True:
        m = agg_rates(kind, state, n, lam, p, mu1, mu2, theta, rates, tags)
        if m == 0:
            return STATUS_ABSORBED, t, pos
        total = 0.0
        for j in range(m):
            total += rates[j]
        if not np.isfinite(total):
            return STATUS_OVERFLOW, t, pos
        if pos >= block.shape[0]:
            return STATUS_BLOCK, t, pos
        u1 = block[pos, 0]
        u2 = block[pos, 1]
        pos += 1
        t_next = t - np.log1p(-u1) / total
        stop = t_next > horizon
        seg_end = horizon if stop else t_next
        w = state[wcol]
        if w > wmax:
            w = wmax
        # split the holding interval [t, seg_end) across batch windows
        if seg_end > edges[0] and t < edges[nb]:
            a = max(t, edges[0])
            e = min(seg_end, edges[nb])
            b = 0
            while b < nb and edges[b + 1] <= a:
                b += 1
            while a < e and b < nb:
                right = min(e, edges[b + 1])
                occupation[b, w] += right - a
                a = right
                b += 1
        if stop:
            return STATUS_HORIZON, t, pos
        t = t_next
        if t >= edges[0]:
            n_events[0] += 1
        tag = _pick(rates, tags, m, total, u2)
        for c in range(dim):
            state[c] += DELTAS[kind, tag, c]
