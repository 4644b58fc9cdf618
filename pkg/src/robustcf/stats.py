"""Paired statistical comparison utilities.

The Student-t two-tailed p-value is computed from scratch through the
regularized incomplete beta function (continued-fraction evaluation,
tolerance 1e-12), so results do not depend on an external stats stack.
"""

import math
from dataclasses import dataclass

import numpy as np

_BETA_TOL = 1e-12
_BETA_MAX_ITER = 500


class DegenerateDifferences(Exception):
    """All paired differences identical: t statistic undefined."""

    def __init__(self, mean_difference):
        super().__init__(f"zero variance in differences (mean={mean_difference})")
        self.mean_difference = mean_difference


@dataclass
class PairedTestResult:
    mean_difference: float
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    significant: bool
    alpha: float = 0.05

    def as_dict(self):
        return {
            "mean_difference": self.mean_difference,
            "t_statistic": self.t_statistic,
            "degrees_of_freedom": self.degrees_of_freedom,
            "p_value": self.p_value,
            "p_scientific": format(self.p_value, ".3e"),
            "significant": self.significant,
            "degenerate": False,
        }


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x, a, b):
    """I_x(a, b) for x in [0, 1], a, b > 0."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t, dof):
    """CDF of Student's t with `dof` degrees of freedom."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    x = dof / (dof + t * t)
    tail = 0.5 * regularized_incomplete_beta(x, dof / 2.0, 0.5)
    return 1.0 - tail if t >= 0 else tail


def two_tailed_p(t, dof):
    """P(|T| >= |t|) = I_{dof/(dof+t^2)}(dof/2, 1/2)."""
    return regularized_incomplete_beta(dof / (dof + t * t), dof / 2.0, 0.5)


def paired_t_test(a, b, alpha=0.05):
    """Two-tailed paired t-test of H0: mean(a - b) = 0.

    Uses the sample (n-1) standard deviation. Zero-variance differences raise
    DegenerateDifferences carrying the mean difference.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired vectors must be 1-D with equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateDifferences(md)
    t = md / (sd / math.sqrt(n))
    p = two_tailed_p(t, n - 1)
    return PairedTestResult(mean_difference=md, t_statistic=float(t),
                            degrees_of_freedom=n - 1, p_value=float(p),
                            significant=bool(p < alpha), alpha=alpha)


def summarize(values):
    """(mean, sample standard deviation) of a vector, n >= 2."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("summarize needs n >= 2 for the sample std")
    return float(v.mean()), float(v.std(ddof=1))
