"""Parameter records and closed-form exponent formulas for the M/H2/n+M queue.

The service time is a two-branch hyper-exponential mixture: with probability
``p`` a job needs an Expo(mu1) amount of work, otherwise Expo(mu2).  Customers
arrive at rate ``lambda_n = n + B*sqrt(n)`` and abandon at rate ``theta`` while
waiting.  Everything here is a pure function of scalars.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

UNIT_MEAN_TOL = 1e-12


class ModelError(ValueError):
    """Validation failure carrying a short machine-readable ``code``."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class AssumptionWarning(UserWarning):
    """Issued when theta sits exactly on the hazard-rate ordering boundary."""


@dataclass(frozen=True)
class HyperExp2:
    """Two-branch hyper-exponential distribution.

    Equal branch rates describe a plain exponential law.  That case is allowed
    only when ``degenerate=True`` is passed explicitly, so that callers do not
    silently feed an exponential into code that expects two distinct phases.
    """

    p: float
    mu1: float
    mu2: float
    degenerate: bool = False

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ModelError("bad-mix", f"p={self.p} must lie in (0,1)")
        if not (self.mu1 > 0.0 and self.mu2 > 0.0):
            raise ModelError("bad-rate", f"rates must be positive, got {self.mu1}, {self.mu2}")
        if not (math.isfinite(self.mu1) and math.isfinite(self.mu2)):
            raise ModelError("bad-rate", "rates must be finite")
        if self.mu1 == self.mu2 and not self.degenerate:
            raise ModelError("degenerate", "mu1 == mu2 needs degenerate=True")

    @classmethod
    def exponential(cls, rate: float = 1.0) -> "HyperExp2":
        return cls(0.5, rate, rate, degenerate=True)

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def mean(self) -> float:
        return self.p / self.mu1 + self.q / self.mu2

    @property
    def second_moment(self) -> float:
        return 2.0 * self.p / self.mu1**2 + 2.0 * self.q / self.mu2**2

    @property
    def is_exponential(self) -> bool:
        return self.mu1 == self.mu2

    @property
    def is_normalized(self) -> bool:
        return abs(self.mean - 1.0) <= UNIT_MEAN_TOL

    def rate(self, z: int) -> float:
        return self.mu1 if z == 1 else self.mu2

    def mix(self, z: int) -> float:
        return self.p if z == 1 else self.q


def counterexample_a() -> HyperExp2:
    """First member of the moment-matched pair (mean 1, second moment 4)."""
    r2 = math.sqrt(2.0)
    return HyperExp2((121.0 - 32.0 * r2) / 257.0, (15.0 - 2.0 * r2) / 31.0, 2.0 * r2)


def counterexample_b() -> HyperExp2:
    """Second member of the moment-matched pair (mean 1, second moment 4)."""
    r2 = math.sqrt(2.0)
    return HyperExp2((7.0 - 4.0 * r2) / 17.0, (3.0 - r2) / 7.0, r2)


def service_moments(d: HyperExp2) -> tuple[float, float]:
    """Return ``(E[S], E[S^2])``."""
    return d.mean, d.second_moment


def mix_from_rates(mu1: float, mu2: float) -> float:
    """Mixing probability that gives the mixture unit mean."""
    if mu1 == mu2:
        raise ModelError("degenerate", "equal rates admit no unique mixing probability")
    p = mu1 * (mu2 - 1.0) / (mu2 - mu1)
    if not (0.0 < p < 1.0):
        raise ModelError("no-unit-mean-mix", f"rates ({mu1}, {mu2}) give p={p}")
    return p


def equilibrium_mix(d: HyperExp2) -> float:
    """Probability that a job in service in equilibrium is of type 1 (p/mu1)."""
    if not d.is_normalized:
        raise ModelError("not-normalized", f"mean is {d.mean}")
    return d.p / d.mu1


@dataclass(frozen=True)
class SystemParams:
    """All scalar inputs of one queueing system.

    ``halfin_whitt`` requests the unit-mean normalisation check.  The
    hazard-rate ordering ``theta < min(mu1, mu2)`` is checked separately by
    :meth:`check_assumption`, since only some experiments depend on it.
    """

    n: int
    B: float
    service: HyperExp2
    theta: float
    halfin_whitt: bool = True

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ModelError("bad-n", f"n={self.n} must be a positive integer")
        object.__setattr__(self, "n", int(self.n))
        if not math.isfinite(self.B):
            raise ModelError("bad-B", "B must be finite")
        if not self.n > self.B**2:
            raise ModelError("bad-B", f"need n > B^2, got n={self.n}, B={self.B}")
        if not (self.theta > 0.0 and math.isfinite(self.theta)):
            raise ModelError("nonpositive-theta", f"theta={self.theta}")
        if self.halfin_whitt and not self.service.is_normalized:
            raise ModelError("not-normalized", f"mean service time is {self.service.mean}")

    @classmethod
    def build(cls, n: int, B: float, p: float, mu1: float, mu2: float, theta: float,
              halfin_whitt: bool = True) -> "SystemParams":
        service = HyperExp2(p, mu1, mu2, degenerate=(mu1 == mu2))
        return cls(n, B, service, theta, halfin_whitt)

    @property
    def lambda_n(self) -> float:
        return self.n + self.B * math.sqrt(self.n)

    @property
    def p(self) -> float:
        return self.service.p

    @property
    def mu1(self) -> float:
        return self.service.mu1

    @property
    def mu2(self) -> float:
        return self.service.mu2

    @property
    def assumption_holds(self) -> bool:
        return self.theta < min(self.mu1, self.mu2)

    def check_assumption(self, strict: bool = True) -> None:
        """Enforce ``theta <= min(mu1, mu2)``; equality only warns.

        With ``strict=False`` a violation is downgraded to a warning, which is
        what experiments that do not rely on the coupling want.
        """
        check_hazard_order(self.theta, self.mu1, self.mu2, strict=strict)

    def with_n(self, n: int) -> "SystemParams":
        return SystemParams(n, self.B, self.service, self.theta, self.halfin_whitt)

    def to_mapping(self) -> dict[str, float]:
        return {"n": self.n, "B": self.B, "p": self.p, "mu1": self.mu1,
                "mu2": self.mu2, "theta": self.theta}

    def to_config(self) -> str:
        """Flat ``key = value`` text; floats use ``repr`` so they round-trip."""
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_mapping().items())

    @classmethod
    def from_mapping(cls, values, halfin_whitt: bool = True) -> "SystemParams":
        missing = [k for k in ("n", "B", "p", "mu1", "mu2", "theta") if k not in values]
        if missing:
            raise ModelError("bad-config", f"missing keys: {', '.join(missing)}")
        try:
            n_raw = float(values["n"])
            if n_raw != int(n_raw):
                raise ModelError("bad-n", f"n={values['n']} is not an integer")
            return cls.build(int(n_raw), float(values["B"]), float(values["p"]),
                             float(values["mu1"]), float(values["mu2"]),
                             float(values["theta"]), halfin_whitt)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError("bad-config", str(exc)) from exc

    @classmethod
    def from_config(cls, text: str, halfin_whitt: bool = True) -> "SystemParams":
        """Parse the flat key-value text written by :meth:`to_config`."""
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case sensitive (B vs b)
        try:
            parser.read_string("[system]\n" + text)
        except configparser.Error as exc:
            raise ModelError("bad-config", str(exc)) from exc
        return cls.from_mapping(dict(parser["system"]), halfin_whitt)


def check_hazard_order(theta: float, mu1: float, mu2: float, strict: bool = True) -> None:
    """Validate ``theta <= min(mu1, mu2)``; equality issues a warning."""
    bound = min(mu1, mu2)
    if theta > bound:
        if strict:
            raise ModelError("assumption-violation", f"theta={theta} > min rate {bound}")
        warnings.warn(f"theta={theta} exceeds min rate {bound}", AssumptionWarning, stacklevel=3)
    elif theta == bound:
        warnings.warn("theta equals min(mu1, mu2); boundary case", AssumptionWarning, stacklevel=3)


# Both exponents are written as -theta/2 times a ratio that is exactly 1.0 in
# floating point when mu1 = mu2 = 1.


def true_exponent(theta: float, mu1: float, mu2: float) -> float:
    return -0.5 * theta * ((theta + mu1 * mu2) / (theta + (mu1 + mu2 - 1.0)))


def dai_he_exponent(theta: float, mu1: float, mu2: float) -> float:
    """Exponent predicted by the insensitivity conjecture (depends on E[S^2] only)."""
    return -0.5 * theta * (mu1 * mu2 / (mu1 + mu2 - 1.0))


def sup_variance(theta: float, mu1: float, mu2: float) -> float:
    """Maximal variance of the centred Gaussian process driving the tail."""
    return (theta + (mu1 + mu2 - 1.0)) / (theta * (theta + mu1 * mu2))


def sup_variance_raw(theta: float, mu1: float, mu2: float, p: float) -> float:
    """Same quantity written through the mixing probability."""
    mu = mu1 * mu2
    return p * (1.0 - p) * (mu1 - mu2) ** 2 / (theta * mu * (mu + theta)) + 1.0 / theta


def implied_mix(mu1: float, mu2: float) -> float:
    """Unit-mean mixing probability, with the exponential case mapped to 1/2."""
    if mu1 == mu2:
        if mu1 != 1.0:
            raise ModelError("not-normalized", f"exponential with rate {mu1} has mean {1 / mu1}")
        return 0.5
    return mix_from_rates(mu1, mu2)


@dataclass(frozen=True)
class ExponentReport:
    true_exponent: float
    dai_he_exponent: float
    sup_variance: float
    gap: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gap", self.true_exponent - self.dai_he_exponent)

    FIELDS = ("true_exponent", "dai_he_exponent", "sup_variance", "gap")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "ExponentReport":
        data = json.loads(text)
        return cls(data["true_exponent"], data["dai_he_exponent"], data["sup_variance"])

    def to_csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(self.FIELDS)
        writer.writerow([repr(getattr(self, k)) for k in self.FIELDS])
        return buf.getvalue()


def exponents(theta: float, mu1: float, mu2: float, p: float | None = None) -> ExponentReport:
    """Tail exponents of the scaled steady-state queue length.

    The mixing probability is implied by the unit-mean constraint; if ``p`` is
    given it must agree with it.  The variance formula is evaluated in two
    algebraically equivalent ways and the results must match to 1e-12.
    """
    if not theta > 0.0:
        raise ModelError("nonpositive-theta", f"theta={theta}")
    implied = implied_mix(mu1, mu2)
    if p is not None and mu1 != mu2 and abs(p - implied) > 1e-12:
        raise ModelError("not-normalized", f"p={p} does not give unit mean (expected {implied})")
    check_hazard_order(theta, mu1, mu2, strict=True)
    var = sup_variance(theta, mu1, mu2)
    raw = sup_variance_raw(theta, mu1, mu2, implied)
    if abs(var - raw) > 1e-12 * max(1.0, abs(var)):
        raise ModelError("inconsistent", f"variance forms disagree: {var} vs {raw}")
    return ExponentReport(true_exponent(theta, mu1, mu2), dai_he_exponent(theta, mu1, mu2), var)


def exponents_for(params: SystemParams) -> ExponentReport:
    return exponents(params.theta, params.mu1, params.mu2)


def exponent_asymptotics(mu1: float, mu2: float) -> tuple[float, Callable[[float, float], float]]:
    """Small-theta slope of the exponent and its large-mu2 limit.

    Returns ``(theta_slope, limit)`` where ``limit(theta, mu1)`` is the value
    the exponent approaches as ``mu2`` grows with the mean held at one.
    """
    implied_mix(mu1, mu2)
    slope = -mu1 * mu2 / (2.0 * (mu1 + mu2 - 1.0))

    def mu2_infinity_limit(theta: float, mu1_: float) -> float:
        return -theta * mu1_ / 2.0

    return slope, mu2_infinity_limit
