"""The pruning bound.

Around a hypothetical optimum explaining the reference RSS, the RSS at genetic
distance x is random through which individuals recombine.  Conditional on the
recombinant counts the effect estimate is a shifted normal, giving a two-sided
normal-mixture CDF; the marginal weights the conditional CDF by two binomial
terms truncated to +/-8 sigma.  The 1-eps quantile of the LogVar transform of
that distribution, solved on a 0.04-resolution grid with conservative upward
rounding, is what the search compares box centroids against.

The infinite-population expectation of LogVar is piecewise linear with slope
at most 0.04 per cM; :func:`logvar_infinite_expectation` exposes the closed
form for verification.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2 as _chi2

from .genome import flip_prob
from .regmodel import logvar_transform

# Mantissa bounds outside which the running binomial product is renormalised
# into the carried exponent.
_RENORM_HI = math.ldexp(1.0, 512)
_RENORM_LO = math.ldexp(1.0, -512)


def binomial_row(n_trials: int, p: float, index_range: tuple[int, int] | None = None) -> np.ndarray:
    """pmf of Binomial(n_trials, p) for every k in ``index_range`` (inclusive).

    One high-precision anchor at the range start, then the multiplicative
    recurrence B(k+1) = B(k) * (n-k)/(k+1) * p/(1-p) with a carried base-2
    exponent renormalised whenever the mantissa leaves floating range.  Work
    is linear in the range length.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if index_range is None:
        lo, hi = 0, n_trials
    else:
        lo, hi = index_range
    if not (0 <= lo <= hi <= n_trials):
        raise ValueError(f"index range [{lo}, {hi}] outside [0, {n_trials}]")
    ks = np.arange(lo, hi + 1)
    if p == 0.0:
        return (ks == 0).astype(float)
    if p == 1.0:
        return (ks == n_trials).astype(float)

    with mpmath.workprec(200):
        anchor = mpmath.mpf(math.comb(n_trials, lo)) * mpmath.mpf(p) ** lo * (1 - mpmath.mpf(p)) ** (n_trials - lo)
        mant, carry = mpmath.frexp(anchor)
        mant = float(mant)
        carry = int(carry)

    out = np.empty(hi - lo + 1)
    out[0] = math.ldexp(mant, carry)
    # Extended precision keeps the per-step rounding drift of the recurrence
    # well under the 1e-12 contract even for n in the thousands.
    b = np.longdouble(mant)
    p_ld = np.longdouble(p)
    q_ld = np.longdouble(1) - np.longdouble(p)
    for k in range(lo, hi):
        b = b * ((n_trials - k) * p_ld) / ((k + 1) * q_ld)
        bf = float(b)
        if bf != 0.0 and not (_RENORM_LO < abs(bf) < _RENORM_HI):
            b, ex = np.frexp(b)
            carry += int(ex)
        out[k - lo + 1] = math.ldexp(float(b), carry)
    return out


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the finite-population RSS distribution at a reference optimum.

    All sums-of-squares are in SS units (not variances).  ``epsilon`` is the
    per-test residual probability of the pruning quantile.
    """

    n: int
    n0: int
    n1: int
    reference_rss: float
    rss_total: float
    effect_mu: float
    effect_a: float
    within_class_sd: float
    epsilon: float

    def __post_init__(self):
        if self.n0 + self.n1 != self.n:
            raise ValueError(f"class counts {self.n0}+{self.n1} != n={self.n}")
        if not 0 < self.reference_rss <= self.rss_total:
            raise ValueError(
                f"need 0 < reference_rss <= rss_total, got {self.reference_rss} vs {self.rss_total}"
            )
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must be in (0, 0.5), got {self.epsilon}")


def make_bound_params(
    n: int,
    rss_total: float,
    reference_rss: float,
    epsilon: float,
    class_counts: np.ndarray | None = None,
    grand_mean: float = 0.0,
) -> BoundParams:
    """Fill :class:`BoundParams` from a reference fit.

    Classes default to the balanced n/2 split; actual counts are substituted
    only when a two-class reference fit deviates from balance by more than 5%.
    The hypothetical single-locus effect is sized so a balanced locus explains
    exactly the reference's explained SS, and the within-class spread is
    estimated as sqrt(reference_rss / n), which keeps the bound calibrated for
    any phenotype scale.
    """
    n0 = n // 2
    n1 = n - n0
    if class_counts is not None and len(class_counts) == 2:
        c0, c1 = int(class_counts[0]), int(class_counts[1])
        if c0 + c1 == n and abs(c0 - n / 2) > 0.05 * (n / 2):
            n0, n1 = c0, c1
    reference_rss = min(reference_rss, rss_total)
    a2_0 = n0 * n1 / n
    explained = max(rss_total - reference_rss, 0.0)
    effect_a = math.sqrt(explained / a2_0) if a2_0 > 0 else 0.0
    effect_mu = grand_mean - effect_a * n1 / n
    return BoundParams(
        n=n,
        n0=n0,
        n1=n1,
        reference_rss=reference_rss,
        rss_total=rss_total,
        effect_mu=effect_mu,
        effect_a=effect_a,
        within_class_sd=math.sqrt(reference_rss / n),
        epsilon=epsilon,
    )


@dataclass(frozen=True)
class RecombCounts:
    """Counts of individuals whose class flipped between the reference point
    and the probe: m01 from class 0 to 1, m10 from 1 to 0."""

    m01: int
    m10: int

    def __post_init__(self):
        if self.m01 < 0 or self.m10 < 0:
            raise ValueError("recombinant counts must be non-negative")


def _conditional_core(
    rss_x: float,
    m01: np.ndarray,
    m10: np.ndarray,
    params: BoundParams,
) -> tuple[np.ndarray, int]:
    """Conditional CDF of RSS at the probe given recombinant counts.

    Broadcasts over ``m01``/``m10``.  Returns (values, #variance clamps).
    The only stochastic term is the recombinants' phenotype sum; its normal
    approximation carries finite-population corrections, clamped to zero
    variance where the correction goes negative.
    """
    m01 = np.asarray(m01, dtype=float)
    m10 = np.asarray(m10, dtype=float)
    n = params.n
    n0x = params.n0 + m10 - m01
    n1x = params.n1 + m01 - m10
    zbar = n1x / n
    a2 = n0x * zbar**2 + n1x * (1.0 - zbar) ** 2

    mu, a = params.effect_mu, params.effect_a
    mu11 = mu * (m01 - m10) - a * m10
    # Expectation of the non-recombinant covariance term under the reference
    # effect; exact under balanced classes.
    a12 = mu * (params.n1 - n1x) + a * params.n1 * n0x / n
    c = a12 + mu11

    s2 = params.within_class_sd**2
    with np.errstate(divide="ignore", invalid="ignore"):
        f01 = 1.0 - (m01 - 1.0) / (n0x - 1.0)
        f10 = 1.0 - (m10 - 1.0) / (n1x - 1.0)
    f01 = np.where(m01 > 0, f01, 0.0)
    f10 = np.where(m10 > 0, f10, 0.0)
    f01 = np.where(np.isfinite(f01), f01, 0.0)
    f10 = np.where(np.isfinite(f10), f10, 0.0)
    n_clamped = int(np.sum((f01 < 0) | (f01 > 1) | (f10 < 0) | (f10 > 1)))
    var = s2 * (m01 * np.clip(f01, 0.0, 1.0) + m10 * np.clip(f10, 0.0, 1.0))
    sigma = np.sqrt(var)

    R = np.sqrt(max(params.rss_total - rss_x, 0.0) * a2)
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = (R - c) / sigma
        lower = (-R - c) / sigma
    stochastic = 1.0 - ndtr(upper) + ndtr(lower)
    # The step comparison tolerates an ulp so self-consistent references land
    # exactly on their own deterministic value.
    degenerate = np.where(np.abs(c) >= R * (1.0 - 1e-12), 1.0, 0.0)
    out = np.where(sigma > 0, stochastic, degenerate)
    # No estimable effect at the probe: RSS there equals the total SS.
    out = np.where(a2 > 0, out, float(rss_x >= params.rss_total))
    return out, n_clamped


def conditional_rss_cdf(rss_x: float, counts: RecombCounts, params: BoundParams) -> float:
    """P(RSS at the probe <= rss_x) given fixed recombinant counts."""
    if rss_x > params.rss_total * (1 + 1e-9):
        raise ValueError(f"rss_x {rss_x} exceeds rss_total {params.rss_total}")
    if counts.m01 > params.n0 or counts.m10 > params.n1:
        raise ValueError(f"counts {counts} exceed class sizes ({params.n0}, {params.n1})")
    value, n_clamped = _conditional_core(rss_x, np.array(counts.m01), np.array(counts.m10), params)
    if n_clamped:
        warnings.warn(
            "finite-population variance correction went negative; clamped to a point mass",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(value)


def _truncation_range(n_class: int, p: float) -> tuple[int, int]:
    """+/-8 sigma index window of a Binomial(n_class, p)."""
    mean = n_class * p
    sd = math.sqrt(n_class * p * (1.0 - p))
    lo = max(0, math.floor(mean - 8.0 * sd))
    hi = min(n_class, math.ceil(mean + 8.0 * sd))
    return lo, hi


def _weight_row(n_class: int, p: float, epsilon: float) -> tuple[np.ndarray, int]:
    """Truncated binomial weights whose deficit cannot eat the epsilon budget.

    Starts from the +/-8 sigma window and widens while the discarded mass
    exceeds epsilon/100: the quantile solver charges missing mass fully
    against the exceedance probability, so the deficit must be negligible
    versus epsilon itself (for skewed small-p binomials the 8-sigma window
    alone can leak more than a tight epsilon).  Returns (weights, lo index).
    """
    lo, hi = _truncation_range(n_class, p)
    budget = epsilon * 0.01
    while True:
        row = binomial_row(n_class, p, (lo, hi))
        if 1.0 - float(row.sum()) <= budget or (lo == 0 and hi == n_class):
            return row, lo
        grow = max(4, (hi - lo) // 2)
        lo = max(0, lo - grow)
        hi = min(n_class, hi + grow)


def marginal_rss_cdf(rss_x: float, x: float, params: BoundParams, truncate: bool = True) -> float:
    """P(RSS at distance x <= rss_x): the conditional CDF summed over the two
    binomial recombinant-count distributions.

    ``truncate`` restricts both sums to the +/-8 sigma window, dropping at
    most ~1e-15 of mass per binomial while cutting the term count from
    O(n^2) to O(n).
    """
    if x < 0 or not math.isfinite(x):
        raise ValueError(f"distance must be finite and non-negative, got {x}")
    p = flip_prob(x)
    if p == 0.0:
        return conditional_rss_cdf(rss_x, RecombCounts(0, 0), params)
    if truncate:
        w0, lo0 = _weight_row(params.n0, p, params.epsilon)
        w1, lo1 = _weight_row(params.n1, p, params.epsilon)
        hi0 = lo0 + len(w0) - 1
        hi1 = lo1 + len(w1) - 1
    else:
        lo0, hi0 = 0, params.n0
        lo1, hi1 = 0, params.n1
        w0 = binomial_row(params.n0, p, (lo0, hi0))
        w1 = binomial_row(params.n1, p, (lo1, hi1))
    m01 = np.arange(lo0, hi0 + 1, dtype=float)[:, None]
    m10 = np.arange(lo1, hi1 + 1, dtype=float)[None, :]
    grid, _ = _conditional_core(rss_x, m01, m10, params)
    return float(np.clip(w0 @ grid @ w1, 0.0, 1.0))


def chi2_mean_logvar(dof_model: int, rss_total: float, n: int) -> float:
    """LogVar of the chance-level explained variance for a model with
    ``dof_model`` free class means.

    Under the null the explained SS has mean (dof_model - 1) * sigma^2 with
    sigma^2 = rss_total / n.  Models with a single occupied class are floored
    at dof 2 so the level stays finite.
    """
    if dof_model < 1:
        raise ValueError(f"dof_model must be >= 1, got {dof_model}")
    dof_explained = max(dof_model - 1, 1)
    return -math.log(dof_explained * (rss_total / n) / n)


def chi2_guard(logvar_value: float, dof_model: int, rss_total: float, n: int) -> float:
    """Cap a LogVar value at the chance level for its model size.

    Values worse (higher) than the expected null explained variance are
    replaced by that level; differences beyond it are phenotype-specific
    noise the Gaussian machinery should not act on.  Idempotent.
    """
    return min(logvar_value, chi2_mean_logvar(dof_model, rss_total, n))


class QuantileTable:
    """Cached 1-eps LogVar quantiles indexed by Manhattan radius, for one
    fixed reference value.

    Quantiles are solved on the LogVar grid base + k * resolution by a
    monotone bisection over k, rounding up (conservative).  Neighbouring
    radii warm-start each other's brackets, and the conditional CDF values
    at a given grid level are independent of the radius, so they are cached
    once per level and reused across radii.  Entries above the dof-2 chance
    level can never prune anything and are reported as ``inf``.

    Concurrent reads of cached entries are safe; computing new entries
    mutates the caches and needs external exclusivity.  Entry values are
    deterministic functions of their keys, so insertion order is irrelevant.
    """

    RESOLUTION = 0.04  # LogVar units; ~1 cM of expected slope

    def __init__(self, params: BoundParams, step_cm: float, resolution: float = RESOLUTION):
        self.params = params
        self.step_cm = float(step_cm)
        self.resolution = float(resolution)
        self.base_logvar = logvar_transform(params.reference_rss, params.rss_total, params.n)
        self.cap_logvar = chi2_mean_logvar(2, params.rss_total, params.n)
        self.max_k = max(0, math.ceil((self.cap_logvar - self.base_logvar) / self.resolution)) + 1
        self._by_key: dict[int, float] = {}
        self._k_by_key: dict[int, int | None] = {}
        self._rows: dict[float, tuple[np.ndarray, int, np.ndarray, int]] = {}
        self._cond: dict[int, tuple[tuple[int, int, int, int], np.ndarray]] = {}
        self.diagnostics = {"variance_clamps": 0, "cap_exceeded": 0}

    # -- grid ---------------------------------------------------------------

    def _logvar_at(self, k: int) -> float:
        return self.base_logvar + k * self.resolution

    def _rss_at(self, k: int) -> float:
        if k == 0:
            # The grid base is the reference by construction; avoid the
            # exp/log roundtrip landing an ulp off the deterministic step.
            return self.params.reference_rss
        return self.params.rss_total - self.params.n * math.exp(-self._logvar_at(k))

    def _rows_for(self, radius_cm: float) -> tuple[np.ndarray, int, np.ndarray, int]:
        cached = self._rows.get(radius_cm)
        if cached is None:
            p = flip_prob(radius_cm)
            w0, lo0 = _weight_row(self.params.n0, p, self.params.epsilon)
            w1, lo1 = _weight_row(self.params.n1, p, self.params.epsilon)
            cached = (w0, lo0, w1, lo1)
            self._rows[radius_cm] = cached
        return cached

    def _conditional_grid(self, k: int, lo0: int, hi0: int, lo1: int, hi1: int) -> np.ndarray:
        """Conditional CDF values at grid level k covering at least the
        requested count ranges; grown (and recomputed) on demand."""
        cached = self._cond.get(k)
        if cached is not None:
            (c_lo0, c_hi0, c_lo1, c_hi1), grid = cached
            if c_lo0 <= lo0 and hi0 <= c_hi0 and c_lo1 <= lo1 and hi1 <= c_hi1:
                return grid[lo0 - c_lo0 : hi0 - c_lo0 + 1, lo1 - c_lo1 : hi1 - c_lo1 + 1]
            u_lo0, u_hi0 = min(lo0, c_lo0), max(hi0, c_hi0)
            u_lo1, u_hi1 = min(lo1, c_lo1), max(hi1, c_hi1)
        else:
            u_lo0, u_hi0, u_lo1, u_hi1 = lo0, hi0, lo1, hi1
        m01 = np.arange(u_lo0, u_hi0 + 1, dtype=float)[:, None]
        m10 = np.arange(u_lo1, u_hi1 + 1, dtype=float)[None, :]
        grid, n_clamped = _conditional_core(self._rss_at(k), m01, m10, self.params)
        self.diagnostics["variance_clamps"] += n_clamped
        self._cond[k] = ((u_lo0, u_hi0, u_lo1, u_hi1), grid)
        return self._conditional_grid(k, lo0, hi0, lo1, hi1)

    def _cdf_at(self, radius_cm: float, k: int) -> float:
        p = flip_prob(radius_cm)
        if p == 0.0:
            value, _ = _conditional_core(self._rss_at(k), np.array(0.0), np.array(0.0), self.params)
            return float(value)
        w0, lo0, w1, lo1 = self._rows_for(radius_cm)
        grid = self._conditional_grid(k, lo0, lo0 + len(w0) - 1, lo1, lo1 + len(w1) - 1)
        return float(np.clip(w0 @ grid @ w1, 0.0, 1.0))

    # -- solving ------------------------------------------------------------

    def _solve(self, radius_cm: float, lo_k: int, hi_hint: int | None) -> int | None:
        """Smallest grid index whose CDF reaches 1 - eps, or None beyond cap."""
        target = 1.0 - self.params.epsilon

        def ok(k: int) -> bool:
            return self._cdf_at(radius_cm, k) >= target

        if hi_hint is not None and hi_hint <= self.max_k and ok(hi_hint):
            hi = hi_hint
        else:
            # Exponential expansion from the warm lower bracket.
            stride = 1
            k = lo_k
            while True:
                if ok(k):
                    hi = k
                    break
                lo_k = k + 1
                if lo_k > self.max_k:
                    self.diagnostics["cap_exceeded"] += 1
                    return None
                k = min(lo_k + stride - 1, self.max_k)
                stride *= 2
        while lo_k < hi:
            mid = (lo_k + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo_k = mid + 1
        return hi

    def quantile_cm(self, radius_cm: float) -> float:
        """1-eps LogVar quantile at an arbitrary radius (no key cache)."""
        if radius_cm < 0:
            raise ValueError(f"radius must be non-negative, got {radius_cm}")
        k = self._solve(radius_cm, 0, None)
        return math.inf if k is None else self._logvar_at(k)

    def quantile(self, radius_key: int) -> float:
        """1-eps LogVar quantile for a lattice-quantized radius.

        ``radius_key`` counts half lattice steps: radius_cm = key * step / 2.
        Cached; brackets warm-started from the nearest solved neighbours
        (quantiles are nondecreasing in the radius).
        """
        hit = self._by_key.get(radius_key)
        if hit is not None:
            return hit
        lo_k = 0
        hi_hint: int | None = None
        for key, k in self._k_by_key.items():
            if k is None:
                if key <= radius_key:
                    # A smaller radius already exceeded the cap.
                    self._by_key[radius_key] = math.inf
                    self._k_by_key[radius_key] = None
                    return math.inf
                continue
            if key <= radius_key:
                lo_k = max(lo_k, k)
            else:
                hi_hint = k if hi_hint is None else min(hi_hint, k)
        k = self._solve(radius_key * self.step_cm / 2.0, lo_k, hi_hint)
        value = math.inf if k is None else self._logvar_at(k)
        self._by_key[radius_key] = value
        self._k_by_key[radius_key] = k
        return value

    def to_dict(self) -> dict:
        """JSON-ready diagnostic dump of all solved entries."""
        entries = [
            {"radius_cm": key * self.step_cm / 2.0, "logvar_quantile": value}
            for key, value in sorted(self._by_key.items())
        ]
        return {
            "reference_rss": self.params.reference_rss,
            "rss_total": self.params.rss_total,
            "epsilon": self.params.epsilon,
            "base_logvar": self.base_logvar,
            "cap_logvar": self.cap_logvar,
            "resolution": self.resolution,
            "entries": entries,
            "diagnostics": dict(self.diagnostics),
        }


def logvar_quantile(x: float, params: BoundParams) -> float:
    """1-eps LogVar quantile of the RSS distribution at distance ``x`` cM.

    One-shot convenience over :class:`QuantileTable`; scans reuse a table so
    radii warm-start each other.
    """
    return QuantileTable(params, step_cm=1.0).quantile_cm(x)


def logvar_infinite_expectation(positions, qtl_positions, genetic_variances) -> np.ndarray:
    """Closed-form infinite-population LogVar for a multi-locus model.

    Each model coordinate is paired with its linked QTL; unlinked components
    contribute nothing.  With V_r(x) = V_t - sum_i Vg_i e^(-4|x_i-z_i|/100),

        LogVar(x) = -ln(V_t - V_r(x)) = -ln sum_i Vg_i e^(-4|x_i-z_i|/100)

    ``positions`` broadcasts over leading axes; the last axis is the locus
    axis, matched against ``qtl_positions`` / ``genetic_variances``.
    """
    x = np.asarray(positions, dtype=float)
    z = np.asarray(qtl_positions, dtype=float)
    vg = np.asarray(genetic_variances, dtype=float)
    discovered = vg * np.exp(-4.0 * np.abs(x - z) / 100.0)
    return -np.log(discovered.sum(axis=-1))
