from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hwqueue.diffusion import (
    LimitState, LowerBoundConfig, buf, buf_floor, default_window, drift_and_noise, euler_simulate,
    exact_ou_step, first_nonpositive, from_bar, gordon_check, limit_tail_campaign, noise_scale,
    occupation_survival, ou_flow, ou_step_covariance, ou_step_covariance_quadrature, ou_step_mean,
    pi_and_buf, pi_kernel, positivity_prob, refine_dt, to_bar, yhat2_explicit,
)
from hwqueue.model import ModelError, SystemParams, sup_variance

from conftest import sb_params

SB = sb_params(n=100, B=0.5)
P13 = SystemParams.build(100, 0.0, 1 / 3, 0.5, 2.0, 0.2)
coord = st.floats(-50.0, 50.0)


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


# -- coordinates and drifts ----------------------------------------------------


@given(coord, coord, st.floats(0.01, 0.99))
def test_coordinate_roundtrip(a, b, p):
    y1, y2 = from_bar(*to_bar(a, b, p), p)
    assert abs(y1 - a) <= 1e-14 * max(1.0, abs(a), abs(b)) * 10
    assert abs(y2 - b) <= 1e-14 * max(1.0, abs(a), abs(b)) * 10
    s = LimitState(a, b, "Y")
    back = s.to("YBAR", p).to("Y", p)
    assert back.coords == "Y"


@given(coord, st.floats(0.0, 50.0))
def test_switching_inactive_on_positive_queue(a, b):
    d_bar, _ = drift_and_noise("YBAR", [a, b], SB)
    d_hat, _ = drift_and_noise("YHAT", [a, b], SB)
    assert np.array_equal(d_bar, d_hat)


def test_origin_drift():
    d, cov = drift_and_noise("YBAR", [0.0, 0.0], SB)
    assert np.array_equal(d, [0.0, SB.B])
    assert np.allclose(cov, np.diag([2 * SB.p * (1 - SB.p), 2.0]))


@given(coord, coord)
def test_y_drift_maps_to_bar_drift(y1, y2):
    p = SB.p
    dy, cov_y = drift_and_noise("Y", [y1, y2], SB)
    db, cov_b = drift_and_noise("YBAR", to_bar(y1, y2, p), SB)
    mapped = np.array(to_bar(dy[0], dy[1], p))
    assert np.allclose(mapped, db, rtol=1e-12, atol=1e-10)
    T = np.array([[1 - p, -p], [1.0, 1.0]])
    assert np.allclose(T @ cov_y @ T.T, cov_b, atol=1e-15)


def test_printed_variant_differs_only_in_cross_term():
    s = [0.3, -1.2]
    a, _ = drift_and_noise("YBAR", s, SB, "derived")
    b, _ = drift_and_noise("YBAR", s, SB, "printed")
    assert a[1] == b[1] and a[0] != b[0]
    with pytest.raises(ModelError):
        drift_and_noise("YBAR", s, SB, "other")
    with pytest.raises(ModelError):
        drift_and_noise("Z", s, SB)


# -- Euler scheme ----------------------------------------------------------------


def test_euler_rejects_nonpositive_dt():
    with pytest.raises(ModelError) as e:
        euler_simulate("YHAT", [0.0, 0.0], 0.0, 1.0, _rng(0), SB)
    assert e.value.code == "nonpositive-dt"


def test_euler_deterministic_decay():
    dt = 1e-3
    path = euler_simulate("YHAT", [1.0, 0.0], dt, 2.0, params=SB, noise=False)
    mu = SB.mu1 * SB.mu2
    err = np.max(np.abs(path.states[:, 0, 0] - np.exp(-mu * path.times)))
    assert err <= 2 * mu * dt
    assert path.queue.shape == (len(path.times), 1)
    assert path.to_csv(every=500).startswith("t,y1,y2\n")


def test_common_noise_paths_coincide_until_queue_empties():
    dt, T, m = 1e-3, 20.0, 20
    steps = int(round(T / dt))
    z = _rng(3).standard_normal((steps, m, 2))
    init = np.tile([0.0, 2.0], (m, 1))
    a = euler_simulate("YBAR", init, dt, T, params=SB, increments=z)
    b = euler_simulate("YHAT", init, dt, T, params=SB, increments=z)
    stopped = 0
    for j in range(m):
        k = first_nonpositive(a.states[:, j, 1])
        assert np.array_equal(a.states[: k + 1, j], b.states[: k + 1, j])
        stopped += k < len(a.times)
    assert stopped > 0


def test_euler_strong_error_shrinks_with_dt():
    T, m, fine_dt = 2.0, 200, 2.0**-12
    steps = int(round(T / fine_dt))
    z = _rng(5).standard_normal((steps, m, 2))
    ref = euler_simulate("YBAR", [0.5, 0.5], fine_dt, T, params=SB, increments=z).states[-1]
    errs = []
    for level in (64, 32, 16):
        zc = z.reshape(steps // level, level, m, 2).sum(axis=1) / math.sqrt(level)
        y = euler_simulate("YBAR", [0.5, 0.5], fine_dt * level, T, params=SB, increments=zc).states[-1]
        errs.append(np.sqrt(np.mean(np.sum((y - ref) ** 2, axis=1))))
    assert errs[0] > errs[1] > errs[2]
    order = math.log2(errs[0] / errs[2]) / 2
    assert 0.4 <= order <= 1.3


def test_bad_increment_shape():
    with pytest.raises(ModelError):
        euler_simulate("YBAR", [0.0, 0.0], 0.1, 1.0, params=SB, increments=np.zeros((3, 1, 2)))


# -- exact linear transition -------------------------------------------------------


@pytest.mark.parametrize("dt", [1e-4, 0.3, 2.0, 25.0])
def test_step_covariance_closed_form_matches_quadrature(dt):
    assert np.allclose(ou_step_covariance(dt, SB), ou_step_covariance_quadrature(dt, SB), rtol=1e-10, atol=1e-14)


def test_short_step_limit():
    s = np.array([0.7, -1.1])
    assert np.allclose(ou_step_mean(s, 1e-12, SB), s, atol=1e-11)
    assert np.max(np.abs(ou_step_covariance(1e-12, SB))) <= 1e-11


def test_long_step_reaches_stationary_variance():
    t = 50 / SB.theta
    assert ou_step_covariance(t, SB)[1, 1] == pytest.approx(sup_variance(SB.theta, SB.mu1, SB.mu2), abs=1e-4)
    draws = exact_ou_step([1.0, 1.0], t, SB, _rng(2), size=20_000)
    var = sup_variance(SB.theta, SB.mu1, SB.mu2)
    assert abs(draws[:, 1].var(ddof=1) - var) <= 3 * var * math.sqrt(2 / 20_000)


def test_exact_step_rejects_resonance():
    prm = SystemParams.build(100, 0.0, 1 / 3, 0.5, 2.0, 1.0)
    with pytest.raises(ModelError) as e:
        exact_ou_step([0.0, 0.0], 1.0, prm, _rng(0))
    assert e.value.code == "resonant-parameters"


def test_euler_matches_exact_transition_in_law():
    n, dt, T = 10_000, 1e-3, 5.0
    init = np.array([0.5, 1.0])
    e = euler_simulate("YHAT", np.tile(init, (n, 1)), dt, T, _rng(10), SB, record_every=5000).states[-1]
    x = exact_ou_step(init, T, SB, _rng(11), size=n)
    for j in range(2):
        assert stats.ks_2samp(e[:, j], x[:, j]).pvalue > 0.01


def test_explicit_second_coordinate_matches_flow():
    dt, T = 1e-3, 3.0
    steps = int(round(T / dt))
    scale = noise_scale("YHAT", SB) * math.sqrt(dt)
    g = _rng(12)
    for _ in range(10):
        dB = g.standard_normal((steps, 2)) * scale
        init = g.normal(size=2)
        flow = ou_flow(init, dt, dB, SB)
        assert abs(flow[-1, 1] - yhat2_explicit(init, T, dt, dB, SB)) <= 1e-6


# -- lower-bound apparatus ---------------------------------------------------------


def test_lower_bound_config_validation():
    cfg = LowerBoundConfig.default(SB)
    cfg.validate(SB)
    with pytest.raises(ModelError) as e:
        LowerBoundConfig(4 * abs(SB.B) / SB.theta, 100.0, -1.0, 1.0).validate(SB)
    assert e.value.code == "invalid-config"
    with pytest.raises(ModelError):
        LowerBoundConfig(10.0, 11.0, 0.0, 0.0).validate(SB)
    box = cfg.sample_box(100, _rng(0))
    assert np.all((box[:, 0] >= cfg.C3) & (box[:, 0] <= cfg.C4) & (box[:, 1] >= cfg.C1) & (box[:, 1] <= cfg.C2))


def test_buf_values():
    cfg = LowerBoundConfig.default(SB)
    b0 = float(buf(0.0, cfg, SB))
    assert b0 == pytest.approx(cfg.C1 - abs(SB.B) / SB.theta, abs=1e-14)
    assert b0 > 3 * abs(SB.B) / SB.theta
    ts = np.linspace(0.0, 200.0, 20001)
    assert np.min(buf(ts, cfg, SB)) >= buf_floor(cfg, SB)


def test_pi_paths_start_at_zero_and_match_kernel_variance():
    cfg = LowerBoundConfig.default(SB)
    grid = np.linspace(0.0, 5.0, 51)
    n = 20_000
    pb = pi_and_buf(cfg, SB, grid, n, _rng(4))
    assert np.all(pb.pi[:, 0] == 0.0)
    var = float(pi_kernel(SB)(5.0, 5.0))
    assert abs(pb.pi[:, -1].var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_gordon_degenerate_cases():
    cfg = LowerBoundConfig(1.0, 2.0, 0.0, 0.01)
    low = gordon_check(cfg, P13, 5.0, -1e9, 2000, _rng(1))
    assert low.lhs == low.rhs == low.p_positive
    single = gordon_check(cfg, P13, 0.0, 0.5, 2000, _rng(2))
    assert single.lhs == pytest.approx(single.rhs)


def test_gordon_inequality_small_sample():
    cfg = LowerBoundConfig(1.0, 2.0, 0.0, 0.01)
    res = gordon_check(cfg, P13, 5.0, 2.0, 20_000, _rng(3))
    assert res.holds
    with pytest.raises(ModelError):
        gordon_check(cfg, P13, 5.0, 2.0, 0, _rng(3))


def test_positivity_probability():
    big = LowerBoundConfig(1e3 * abs(SB.B) / SB.theta + 1e3, 1e4, -1.0, 1.0)
    res = positivity_prob(big, SB, 1.0, 2000, _rng(5))
    assert res.estimate == 1.0 and res.positive
    res = positivity_prob(LowerBoundConfig.default(SB), SB, 5.0, 5000, _rng(6))
    assert res.positive and res.low <= res.estimate <= res.high
    with pytest.raises(ModelError) as e:
        positivity_prob(big, SB, 1.0, 0, _rng(5))
    assert e.value.code == "empty-sample"


# -- long-run tail campaign --------------------------------------------------------


def test_markovian_limit_tail():
    prm = SystemParams.build(100, 0.0, 0.5, 1.0, 1.0, 0.2)
    res = limit_tail_campaign(prm, 0.02, 20_000.0, 8, seed=1, n_boot=200)
    assert res.relative_error() <= 0.20
    assert res.true_exponent == res.dai_he_exponent == -0.1


def test_campaign_errors():
    with pytest.raises(ModelError) as e:
        limit_tail_campaign(SB, 0.01, 10.0, 2, burn_in=20.0)
    assert e.value.code == "insufficient-data"
    with pytest.raises(ModelError) as e:
        limit_tail_campaign(SB, 0.05, 60.0, 1, burn_in=50.0, window=(20.0, 30.0))
    assert e.value.code == "insufficient-exceedances"


def test_occupation_survival_is_monotone_in_x():
    xs = np.linspace(0.0, 5.0, 11)
    s = occupation_survival(SB, 0.01, 500.0, xs, _rng(7), burn_in=50.0)
    assert np.all(np.diff(s) <= 0) and 0.0 < s[0] < 1.0
    lo, hi = default_window(SB)
    assert hi == 2 * lo


def test_occupation_coarse_run_shares_fine_noise():
    xs = np.array([0.0, 1.0])
    a = occupation_survival(SB, 0.02, 50.0, xs, _rng(8), burn_in=10.0, sub=2, chunk_steps=300)
    b = occupation_survival(SB, 0.02, 50.0, xs, _rng(8), burn_in=10.0, sub=2, chunk_steps=10_000)
    assert np.array_equal(a, b)


def test_refine_dt_runs():
    dt, hist = refine_dt(SB, 0.04, 400.0, 2, seed=3, tol=10.0, burn_in=50.0)
    assert dt == 0.04 and len(hist) == 1 and hist[0][0] == 0.04
