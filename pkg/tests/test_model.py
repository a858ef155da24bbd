from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hwqueue.model import (
    AssumptionWarning, ExponentReport, HyperExp2, ModelError, SystemParams, check_hazard_order,
    counterexample_a, counterexample_b, dai_he_exponent, equilibrium_mix, exponent_asymptotics,
    exponents, mix_from_rates, service_moments, sup_variance, sup_variance_raw, true_exponent,
)

from conftest import SB_MU1, SB_MU2, SB_P, SQRT2

# frozen from exact symbolic evaluation (sympy, 20 digits)
SA_TRUE_02 = -0.054130424757478866422
SB_TRUE_02 = -0.061894078727723787868
SB_SUPVAR_02 = 8.0783171876510773229
SB_PHAT = 0.34876071694908969153

rates = st.tuples(st.floats(0.05, 0.98), st.floats(1.02, 30.0), st.floats(0.01, 0.99))


def _valid(t):
    mu1, mu2, frac = t
    return frac * min(mu1, mu2), mu1, mu2


# -- service distribution ----------------------------------------------------


def test_exponential_moments():
    assert service_moments(HyperExp2(0.5, 1.0, 1.0, degenerate=True)) == (1.0, 2.0)


@pytest.mark.parametrize("d", [counterexample_a(), counterexample_b()])
def test_counterexample_moments(d):
    m1, m2 = service_moments(d)
    assert abs(m1 - 1.0) <= 1e-12 and abs(m2 - 4.0) <= 1e-12


def test_counterexample_b_closed_form():
    d = counterexample_b()
    assert (d.p, d.mu1, d.mu2) == (SB_P, SB_MU1, SB_MU2)
    a = counterexample_a()
    assert a.mu2 == 2 * SQRT2 and a.p == pytest.approx((121 - 32 * SQRT2) / 257, abs=1e-15)


def test_equal_rates_need_degenerate_flag():
    with pytest.raises(ModelError) as e:
        HyperExp2(0.5, 1.0, 1.0)
    assert e.value.code == "degenerate"


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
def test_bad_mix(p):
    with pytest.raises(ModelError):
        HyperExp2(p, 0.5, 2.0)


def test_mix_from_rates_examples():
    assert mix_from_rates(SB_MU1, SB_MU2) == pytest.approx(SB_P, abs=1e-15)
    assert mix_from_rates(0.5, 2.0) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ModelError) as e:
        mix_from_rates(1.0, 1.0)
    assert e.value.code == "degenerate"


def test_mix_from_rates_out_of_range():
    with pytest.raises(ModelError) as e:
        mix_from_rates(2.0, 3.0)
    assert e.value.code == "no-unit-mean-mix"


@given(rates)
def test_mix_from_rates_gives_unit_mean(t):
    _, mu1, mu2 = _valid(t)
    p = mix_from_rates(mu1, mu2)
    assert abs(service_moments(HyperExp2(p, mu1, mu2))[0] - 1.0) <= 1e-14


def test_equilibrium_mix_examples():
    assert equilibrium_mix(HyperExp2(1 / 3, 0.5, 2.0)) == pytest.approx(2 / 3, abs=1e-15)
    assert equilibrium_mix(HyperExp2.exponential()) == 0.5
    d = counterexample_b()
    ph = equilibrium_mix(d)
    assert ph == pytest.approx(SB_PHAT, abs=1e-15)
    assert ph + (1 - d.p) / d.mu2 == pytest.approx(1.0, abs=1e-15)


def test_equilibrium_mix_requires_unit_mean():
    with pytest.raises(ModelError) as e:
        equilibrium_mix(HyperExp2(0.5, 1.0, 3.0))
    assert e.value.code == "not-normalized"


# -- system parameters -------------------------------------------------------


def test_system_params_rates_and_roundtrip():
    prm = SystemParams.build(100, 1.5, SB_P, SB_MU1, SB_MU2, 0.2)
    assert prm.lambda_n == 115.0
    assert SystemParams.from_config(prm.to_config()) == prm
    assert SystemParams.from_mapping(prm.to_mapping()) == prm


@pytest.mark.parametrize("kw", [dict(n=4, B=2.0), dict(n=0, B=0.0), dict(n=4, B=float("nan"))])
def test_system_params_rejects(kw):
    with pytest.raises(ModelError):
        SystemParams.build(kw["n"], kw["B"], 1 / 3, 0.5, 2.0, 0.1)


def test_system_params_requires_unit_mean():
    with pytest.raises(ModelError):
        SystemParams.build(10, 0.0, 0.5, 1.0, 3.0, 0.1)


def test_hazard_order_boundary_warns_and_violation_raises():
    with pytest.warns(AssumptionWarning):
        check_hazard_order(0.5, 0.5, 2.0)
    with pytest.raises(ModelError) as e:
        check_hazard_order(0.6, 0.5, 2.0)
    assert e.value.code == "assumption-violation"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_hazard_order(0.4, 0.5, 2.0)


# -- exponents -----------------------------------------------------------------


def test_markovian_exponents_equal():
    rep = exponents(0.2, 1.0, 1.0)
    assert rep.true_exponent == rep.dai_he_exponent == -0.1


def test_counterexample_exponents_frozen():
    a = exponents(0.2, counterexample_a().mu1, counterexample_a().mu2)
    b = exponents(0.2, SB_MU1, SB_MU2)
    assert a.true_exponent == pytest.approx(SA_TRUE_02, rel=1e-13)
    assert b.true_exponent == pytest.approx(SB_TRUE_02, rel=1e-13)
    assert b.sup_variance == pytest.approx(SB_SUPVAR_02, rel=1e-13)
    assert abs(a.true_exponent - b.true_exponent) >= 1e-3
    assert a.dai_he_exponent == pytest.approx(-0.05, abs=1e-15)
    assert b.dai_he_exponent == pytest.approx(-0.05, abs=1e-15)


def test_exponents_reject_wrong_mix_and_order():
    with pytest.raises(ModelError):
        exponents(0.2, 0.5, 2.0, p=0.4)
    with pytest.raises(ModelError):
        exponents(0.6, 0.5, 2.0)


def test_report_serialization():
    rep = exponents(0.2, SB_MU1, SB_MU2)
    assert ExponentReport.from_json(rep.to_json()) == rep
    lines = rep.to_csv_row(header=True).splitlines()
    assert lines[0] == "true_exponent,dai_he_exponent,sup_variance,gap"
    assert float(lines[1].split(",")[0]) == rep.true_exponent
    assert rep.gap == rep.true_exponent - rep.dai_he_exponent


@given(rates)
def test_exponent_is_borell_of_sup_variance(t):
    theta, mu1, mu2 = _valid(t)
    assert true_exponent(theta, mu1, mu2) == pytest.approx(-1 / (2 * sup_variance(theta, mu1, mu2)), rel=1e-14)


@given(rates)
def test_variance_forms_agree(t):
    theta, mu1, mu2 = _valid(t)
    p = mix_from_rates(mu1, mu2)
    assert sup_variance_raw(theta, mu1, mu2, p) == pytest.approx(sup_variance(theta, mu1, mu2), rel=1e-12)


@given(rates)
def test_true_exponent_strictly_below_conjecture(t):
    theta, mu1, mu2 = _valid(t)
    assert true_exponent(theta, mu1, mu2) < dai_he_exponent(theta, mu1, mu2)


@given(st.floats(0.01, 0.99))
def test_exponents_coincide_when_markovian(theta):
    assert true_exponent(theta, 1.0, 1.0) == pytest.approx(dai_he_exponent(theta, 1.0, 1.0), abs=1e-16)
    assert true_exponent(theta, 1.0, 1.0) == pytest.approx(-theta / 2, abs=1e-16)


# -- asymptotics -------------------------------------------------------------


def test_asymptotic_slope_markovian():
    slope, _ = exponent_asymptotics(1.0, 1.0)
    assert slope == -0.5


def test_asymptotic_small_theta():
    slope, _ = exponent_asymptotics(0.5, 2.0)
    assert slope == pytest.approx(-1 / 3, rel=1e-15)
    assert true_exponent(1e-6, 0.5, 2.0) / 1e-6 == pytest.approx(slope, rel=1e-4)


def test_asymptotic_large_mu2():
    _, limit = exponent_asymptotics(0.5, 2.0)
    assert true_exponent(0.2, 0.5, 1e6) == pytest.approx(limit(0.2, 0.5), rel=1e-4)
    assert limit(0.2, 0.5) == -0.05
    assert mix_from_rates(0.5, 1e6) == pytest.approx(0.5 * (1e6 - 1) / (1e6 - 0.5), rel=1e-15)


def test_implied_mix_vectorised_random_points():
    g = np.random.default_rng(3)
    for _ in range(50):
        mu1, mu2 = g.uniform(0.1, 0.9), g.uniform(1.1, 10)
        p = mix_from_rates(mu1, mu2)
        assert math.isclose(p / mu1 + (1 - p) / mu2, 1.0, abs_tol=1e-14)
