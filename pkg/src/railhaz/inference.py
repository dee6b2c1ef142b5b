"""Likelihood ratio tests, chi-square tails and Wald summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

from .errors import ValidationError

__all__ = [
    "LrtResult",
    "lr_test",
    "chisq_tail",
    "normal_quantile",
    "wald_interval",
    "wald_pvalue",
]

_STD_NORMAL = NormalDist()
_EPS = 1e-16
_TINY = 1e-300


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"lambda": self.statistic, "df": self.df, "p": self.p_value}


def lr_test(ll_simple: float, ll_complex: float, df: int, tol: float = 1e-6) -> LrtResult:
    """Likelihood ratio test of a simple model nested in a complex one.

    Parameters
    ----------
    ll_simple, ll_complex : float
        Maximized log-likelihoods of the restricted and the full model.
    df : int
        Difference in the number of free parameters.
    tol : float
        Allowed shortfall of ``ll_complex`` below ``ll_simple`` before the
        fits are declared non-nested.

    Returns
    -------
    LrtResult
        ``statistic = 2 (ll_complex - ll_simple)`` clamped at zero and its
        upper chi-square tail probability.
    """
    if int(df) != df or df < 1:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    if not (math.isfinite(ll_simple) and math.isfinite(ll_complex)):
        raise ValueError("log-likelihoods must be finite")
    if ll_complex < ll_simple - tol:
        raise ValidationError(
            f"complex model log-likelihood {ll_complex:.6g} is below the simple model's "
            f"{ll_simple:.6g}; the nested fit failed to converge or the models are not nested"
        )
    stat = max(0.0, 2.0 * (ll_complex - ll_simple))
    return LrtResult(stat, int(df), chisq_tail(stat, int(df)))


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(100000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # Modified Lentz evaluation of the continued fraction for Q(a, x).
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chisq_tail(x: float, df: int) -> float:
    """Upper tail ``P(X > x)`` of a chi-square variable with ``df`` degrees of freedom.

    Evaluated as the regularized upper incomplete gamma ``Q(df/2, x/2)``,
    by series below ``a + 1`` and by continued fraction above it.
    """
    if x < 0 or math.isnan(x):
        raise ValueError(f"x must be nonnegative, got {x!r}")
    if df <= 0:
        raise ValueError(f"df must be positive, got {df!r}")
    if x == 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    a = 0.5 * df
    h = 0.5 * x
    if h < a + 1.0:
        q = 1.0 - _gamma_p_series(a, h)
    else:
        q = _gamma_q_contfrac(a, h)
    return min(1.0, max(0.0, q))


def normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def wald_interval(estimate: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Confidence interval ``exp(estimate -/+ z * se)`` on the hazard-ratio scale."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if not se > 0:
        raise ValueError("se must be positive")
    z = normal_quantile(0.5 * (1.0 + level))
    return math.exp(estimate - z * se), math.exp(estimate + z * se)


def wald_pvalue(estimate: float, se: float) -> float:
    """Two-sided normal p-value of ``estimate / se``."""
    if not se > 0:
        raise ValueError("se must be positive")
    return math.erfc(abs(estimate / se) / math.sqrt(2.0))
