from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hwqueue.ctmc import EventLog, init_tracking, simulate
from hwqueue.model import ModelError
from hwqueue.skorokhod import (
    DecayPath, PathPL, SkorSolution, build_skor_path, err_process, lipschitz_ratio, phi_on_grid,
    random_path, reed_sup, solve_phi_psi, verify_skoro1, zeta,
)

from conftest import sb_params

TS = np.linspace(0.0, 10.0, 101)


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


# -- path carrier ----------------------------------------------------------------


def test_path_evaluation_and_limits():
    X = PathPL.from_increments([0.0, 1.0, 3.0], [0.0, 2.0, -1.0], [1.0, -0.5, 0.0], 5.0)
    assert X(0.5) == 0.5
    assert X.left_limit(1.0) == 1.0 and X(1.0) == 3.0
    assert X(2.0) == 2.5
    assert X.left_limit(3.0) == 2.0 and X(3.0) == 1.0
    assert X.end_value == 1.0
    assert X.integral(0.0, 1.0) == pytest.approx(0.5)
    assert X.sup_abs() == 3.0


def test_path_rejects_bad_breakpoints():
    with pytest.raises(ModelError):
        PathPL.from_increments([0.5], [0.0], [1.0], 2.0)
    with pytest.raises(ModelError):
        PathPL.from_increments([0.0, 1.0, 1.0], [0, 0, 0], [0, 0, 0], 2.0)


def test_path_csv_roundtrip_and_shift():
    X = random_path(_rng(1))
    Y = PathPL.from_csv(X.to_csv())
    assert np.array_equal(X(TS), Y(TS))
    Z = X.shift(2.5)
    s = np.linspace(0, 7.5, 31)
    assert np.allclose(Z(s), X(s + 2.5) - X(2.5), atol=1e-13)
    D = X - X
    assert np.max(np.abs(D(TS))) <= 1e-14


# -- reflection solver -------------------------------------------------------------


def test_decreasing_input_is_fully_pushed():
    sol = solve_phi_psi(PathPL.linear(-1.0, 10.0), 0.3)
    assert np.max(np.abs(sol.phi(TS))) == 0.0
    assert np.allclose(sol.psi(TS), TS, atol=1e-14)


@pytest.mark.parametrize("c,theta", [(1.0, 0.2), (2.5, 1.0)])
def test_increasing_input_is_linear_ode(c, theta):
    sol = solve_phi_psi(PathPL.linear(c, 10.0), theta)
    assert np.allclose(sol.phi(TS), (c / theta) * (1 - np.exp(-theta * TS)), atol=1e-13)
    assert sol.psi.end_value == 0.0


def test_zero_input():
    sol = solve_phi_psi(PathPL.zero(10.0), 0.5)
    assert np.max(np.abs(sol.phi(TS))) == 0.0 and sol.psi.end_value == 0.0


def test_solver_rejects_bad_inputs():
    with pytest.raises(ModelError):
        solve_phi_psi(PathPL.linear(1.0, 1.0), 0.0)
    with pytest.raises(ModelError):
        solve_phi_psi(PathPL.from_increments([0.0], [0.0], [1.0], 1.0, start=1.0), 0.5)


def test_solution_csv_has_rows():
    sol = solve_phi_psi(random_path(_rng(2)), 0.4)
    assert sol.to_csv().count("\n") == len(sol.phi) + 1


# -- decay transform ---------------------------------------------------------------


@pytest.mark.parametrize("s", [0.0, 2.0, 7.0])
def test_zeta_linear_input(s):
    z = zeta(PathPL.linear(1.0, 10.0), s, 0.4)
    u = np.linspace(0.0, 10.0 - s, 21)
    assert np.allclose(z(u), (1 / 0.4) * (1 - np.exp(-0.4 * u)), atol=1e-13)
    assert z(0.0) == 0.0


def test_zeta_impulse_response():
    X = PathPL.from_increments([0.0, 4.0], [0.0, 1.0], [0.0, 0.0], 10.0)
    s, theta = 1.5, 0.7
    z = zeta(X, s, theta)
    u = np.linspace(0.0, 8.5, 35)
    want = np.where(u >= 4.0 - s, np.exp(-theta * (u - (4.0 - s))), 0.0)
    assert np.allclose(z(u), want, atol=1e-14)


def test_zeta_s_out_of_range():
    with pytest.raises(ModelError) as e:
        zeta(PathPL.linear(1.0, 5.0), 6.0, 0.5)
    assert e.value.code == "s-out-of-range"


# -- supremum representation -------------------------------------------------------


def test_reed_sup_examples():
    assert np.all(reed_sup(PathPL.linear(-1.0, 10.0), 0.3, TS) == 0.0)
    c, theta = 1.7, 0.25
    assert np.allclose(reed_sup(PathPL.linear(c, 10.0), theta, TS), (c / theta) * (1 - np.exp(-theta * TS)),
                       atol=1e-13)
    assert isinstance(reed_sup(PathPL.linear(c, 10.0), theta, 3.0), float)


def test_reed_sup_matches_solver_on_random_path():
    X = random_path(_rng(7), n_segments=20)
    sol = solve_phi_psi(X, 0.2)
    assert np.max(np.abs(reed_sup(X, 0.2, TS) - phi_on_grid(sol, TS))) <= 1e-8


def _path_strategy():
    return st.builds(
        lambda seed, nseg, js, ss, jp: random_path(_rng(seed), nseg, 10.0, js, ss, jp),
        st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(0.01, 5.0),
        st.floats(0.01, 5.0), st.floats(0.0, 1.0))


@settings(max_examples=60)
@given(X=_path_strategy(), theta=st.floats(0.01, 3.0))
def test_solver_and_sup_representation_agree(X, theta):
    sol = solve_phi_psi(X, theta)
    ts = np.linspace(0.0, X.horizon, 100)
    assert np.max(np.abs(sol.phi(ts) - reed_sup(X, theta, ts))) <= 1e-8
    assert sol.complementarity() <= 1e-8
    assert sol.residual() <= 1e-9
    assert np.min(sol.phi(ts)) >= 0.0
    assert np.all(np.diff(sol.psi(ts)) >= -1e-15)


@settings(max_examples=40)
@given(X=_path_strategy(), theta=st.floats(0.01, 3.0), u=st.floats(0.0, 9.9), size=st.floats(0.0, 3.0))
def test_positive_jump_never_lowers_reflection(X, theta, u, size):
    bump = PathPL.from_increments([0.0, u], [0.0, size], [0.0, 0.0], X.horizon) if u > 0 else \
        PathPL.linear(0.0, X.horizon)
    Y = X + bump
    ts = np.linspace(u, X.horizon, 50)
    a = solve_phi_psi(X, theta).phi(ts)
    b = solve_phi_psi(Y, theta).phi(ts)
    assert np.all(b >= a - 1e-10)


def test_lipschitz_ratio():
    X = random_path(_rng(3))
    eps = 0.1
    shifted = X + PathPL.from_increments([0.0, 1e-9], [0.0, eps], [0.0, 0.0], X.horizon)
    r = lipschitz_ratio(X, shifted, 0.2, 10.0)
    assert 0.0 < r <= 1.0 + 1e-12
    with pytest.raises(ModelError) as e:
        lipschitz_ratio(X, X, 0.2)
    assert e.value.code == "identical-paths"


def test_lipschitz_ratio_bounded_on_corpus():
    g = _rng(11)
    ratios = [lipschitz_ratio(random_path(g), random_path(g), 0.2, 10.0) for _ in range(200)]
    assert np.all(np.isfinite(ratios)) and max(ratios) <= 2.0


# -- tracking-chain identity -------------------------------------------------------


def _hand_log(n, rows, horizon):
    """QTILDE log from rows ``(time, tag, state)``; the first row is the initial state."""
    prm = sb_params(n=n)
    times = np.array([r[0] for r in rows[1:]], dtype=float)
    tags = np.array([r[1] for r in rows[1:]], dtype=np.int64)
    states = np.array([r[2] for r in rows], dtype=np.int64)
    return EventLog("QTILDE", prm, times, tags, states, horizon)


def test_empty_log_path():
    log = _hand_log(4, [(0.0, -1, (4, 0, 0, 0, 0, 0, 0))], 3.0)
    X = build_skor_path(log)
    assert X.end_value == 0.0 and X.slope[0] == 0.0
    assert err_process(log) == 0.0
    assert verify_skoro1(log) == 0.0


def test_single_arrival_path():
    n = 4
    log = _hand_log(n, [(0.0, -1, (4, 0, 0, 0, 0, 0, 0)), (1.0, 3, (4, 0, 1, 1, 0, 0, 0))], 3.0)
    X = build_skor_path(log)
    theta = log.params.theta
    assert X.left_limit(1.0) == 0.0 and X(1.0) == 0.5
    assert X(3.0) == pytest.approx(0.5 + theta * 0.5 * 2.0, abs=1e-15)
    sol = solve_phi_psi(X, theta)
    assert sol.psi.end_value == 0.0
    assert verify_skoro1(log) <= 1e-15


def test_inconsistent_log_rejected():
    log = _hand_log(4, [(0.0, -1, (4, 0, 0, 0, 0, 0, 0)), (1.0, 3, (4, 0, 1, 2, 0, 0, 0))], 3.0)
    with pytest.raises(ModelError) as e:
        build_skor_path(log)
    assert e.value.code == "inconsistent-log"


@pytest.mark.parametrize("n,B", [(25, -1.0), (100, 1.0)])
def test_pathwise_identity_on_simulated_logs(n, B):
    prm = sb_params(n=n, B=B)
    for seed in range(10):
        log = simulate("QTILDE", init_tracking(prm, seed), 20.0, 900 + seed, prm)
        assert verify_skoro1(log) <= 1e-9
        assert err_process(log) >= 0.0


def test_decay_path_integrals_consistent():
    sol = solve_phi_psi(random_path(_rng(5)), 0.6)
    phi = sol.phi
    assert isinstance(phi, DecayPath) and isinstance(sol, SkorSolution)
    ib = phi.integrals_at_breaks()
    assert ib[0] == 0.0
    assert ib[-1] == pytest.approx(phi.integral(0.0, phi.horizon), rel=1e-12, abs=1e-12)
    mid = 0.5 * (phi.times[1] + phi.times[2]) if len(phi.times) > 2 else 1.0
    h = 1e-6
    deriv = (phi.integral(0.0, mid + h) - phi.integral(0.0, mid - h)) / (2 * h)
    assert deriv == pytest.approx(float(phi(mid)), abs=1e-6)
    assert math.isfinite(phi.end_value)
