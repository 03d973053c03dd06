"""Exact probabilities for deterministic finite initial configurations.

Two equivalent representations of the rank-m position law are implemented:
the all-large-contour sum over subsets of the configuration, and the mixed
large/small-contour sum over split subsets.  Their numerical agreement is the
central cross-check of the contour-transformation algebra; the site
occupation law is the rank sum of the mixed form with its own closed
coefficients.

Variable-index convention, frozen here: a split subset ``S_- u S_+`` gets
indices ``-k_minus .. -1`` (elements of S_- in increasing order) and
``1 .. k_plus`` (elements of S_+ in increasing order), and the pairwise
integrand factor for indices i < j is ``f(xi_i, xi_j)``.  Getting this order
wrong flips signs, so all weight lists are built in one place
(:func:`_subset_bins`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import AsepError, InvalidRank
from .kernel import (
    BernoulliDensities,
    FiniteConfig,
    IndexedSubset,
    ModelParams,
    coeff_cmk,
    sigma,
    tau_binomial,
)
from .quad import BlockSpec, contract_blocks, assemble_moment, refine_vector, select_radii, _unit_roots

__all__ = [
    "PositionQuery",
    "SiteQuery",
    "FiniteOptions",
    "I_integrand",
    "deltaI_integrand",
    "coeff_cmss",
    "coeff_css",
    "prob_mth_leq_large",
    "prob_mth_at_large",
    "prob_mth_leq_mixed",
    "prob_site_finite",
    "position_law_tables",
    "site_prob_table",
]

MAX_CONFIG_SIZE = 12
IMAG_TOL = 1e-9


@dataclass(frozen=True)
class PositionQuery:
    """Law of the m-th particle from the left: P(x_m(t) <= x) and friends."""

    config: FiniteConfig
    m: int
    x: int
    t: float

    def __post_init__(self):
        if self.m < 1:
            raise InvalidRank(f"particle rank must be >= 1, got {self.m}")
        if self.t < 0:
            raise ValueError("t must be >= 0")


@dataclass(frozen=True)
class SiteQuery:
    config: FiniteConfig
    x: int
    t: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("t must be >= 0")


@dataclass(frozen=True)
class FiniteOptions:
    """Quadrature policy for the finite-configuration formulas."""

    M0: int = 32
    node_budget: int = 1 << 28
    max_M: int = 512
    quad_rel_tol: float = 1e-9
    quad_abs_tol: float = 1e-12
    margin: float = 0.1
    safety: float = 0.75
    ratio_cap: float = 0.72
    allow_longdouble: bool = True

    def max_M_for(self, k: int) -> int:
        M = self.M0
        while (2 * M) ** max(k, 1) <= self.node_budget and 2 * M <= self.max_M:
            M *= 2
        return M


DEFAULT_OPTIONS = FiniteOptions()
_ZERO_DENS = BernoulliDensities(0.0, 0.0)


# ---------------------------------------------------------------------------
# direct integrand evaluation (reference path, used by tests)
# ---------------------------------------------------------------------------

def I_integrand(x: int, k: int, xs, t: float, params: ModelParams):
    """prod_{i<j} f(xi_i, xi_j) * prod_i xi_i^x e^(eps(xi_i) t) / (1 - xi_i).

    ``xs`` lists the variables in increasing index order.
    """
    if len(xs) != k:
        raise ValueError("xs must have length k")
    out = 1.0 + 0.0j
    for i in range(k):
        for j in range(i + 1, k):
            out *= (xs[j] - xs[i]) / (params.p + params.q * xs[i] * xs[j] - xs[i])
    for xi in xs:
        out *= xi**x * np.exp((params.p / xi + params.q * xi - 1.0) * t) / (1.0 - xi)
    return out


def deltaI_integrand(x: int, k: int, xs, t: float, params: ModelParams):
    """(1 - prod_i 1/xi_i) * I(x, k, xs)."""
    pref = 1.0 + 0.0j
    for xi in xs:
        pref /= xi
    return (1.0 - pref) * I_integrand(x, k, xs, t, params)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

def coeff_cmss(m: int, subset: IndexedSubset, config: FiniteConfig, params: ModelParams) -> float:
    """Coefficient of the mixed-contour integral for the rank-m law.

    The empty subset is the explicit branch: 1 when m <= |Y_-|, else 0.
    """
    if m < 1:
        raise InvalidRank(f"particle rank must be >= 1, got {m}")
    subset.validate_within(config)
    k_minus, k_plus = subset.k_minus, subset.k_plus
    k = k_minus + k_plus
    y_minus = config.y_minus
    if k == 0:
        return 1.0 if m <= len(y_minus) else 0.0
    rest_minus = sorted(set(y_minus) - set(subset.s_minus))
    L = len(rest_minus)
    b = tau_binomial(k - 1, m - L - 1, params.tau)
    if b == 0.0:
        return 0.0
    expo = (
        m * (m - 1) / 2.0
        - k_plus * m
        + sigma(subset.s_plus, config.sites)
        + sigma(y_minus, rest_minus)
        - m * len(y_minus)
        + k_minus * (k_minus + 1) / 2.0
    )
    sign = -1.0 if (m + L) % 2 else 1.0
    return sign * params.tau**expo * params.q ** (k * (k - 1) // 2) * b


def coeff_css(subset: IndexedSubset, config: FiniteConfig, params: ModelParams) -> float:
    """Coefficient of the mixed-contour integral in the site occupation law.

    ``-tau^(sigma(S+, Y+\\S+) - sigma(Y-\\S-, S-)) * prod_{j<k} (p^j - q^j)``;
    requires a nonempty subset.
    """
    subset.validate_within(config)
    k = subset.k
    if k < 1:
        raise ValueError("site-law coefficient needs a nonempty subset")
    rest_minus = sorted(set(config.y_minus) - set(subset.s_minus))
    rest_plus = sorted(set(config.y_plus) - set(subset.s_plus))
    expo = sigma(subset.s_plus, rest_plus) - sigma(rest_minus, subset.s_minus)
    prod = 1.0
    for j in range(1, k):
        prod *= params.p**j - params.q**j
        if prod == 0.0:
            return 0.0
    return -params.tau**expo * prod


# ---------------------------------------------------------------------------
# cached subset integrals
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def _bins_cached(
    p: float,
    t: float,
    r: float,
    R: float,
    M: int,
    longdouble: bool,
    s_minus: tuple[int, ...],
    s_plus: tuple[int, ...],
) -> np.ndarray:
    """Binned contraction for one split subset; shared across m, x and configs."""
    params = ModelParams(p)
    dtype = np.clongdouble if longdouble else np.complex128
    roots = _unit_roots(M, longdouble)

    def weight(radius, s):
        nodes = radius * roots
        eps = params.p / nodes + params.q * nodes - 1.0
        return nodes ** (-s) * np.exp(eps * t) / (1.0 - nodes) * nodes / M

    small = None
    if s_minus:
        # ascending elements <-> ascending index -k_minus..-1 <-> processing order
        small = BlockSpec(radius=r, weights=[weight(r, s).astype(dtype) for s in s_minus])
    large = None
    if s_plus:
        # descending elements: index k_plus (largest element) is processed first
        large = BlockSpec(
            radius=R, weights=[weight(R, s).astype(dtype) for s in reversed(s_plus)]
        )
    return contract_blocks(small, large, params, M, dtype=dtype)


def _subset_values(p, t, r, R, M, dtype, s_minus, s_plus, xs, kind):
    """Integral values for one subset at every x; kind 'I' or 'deltaI'."""
    k_minus, k_plus = len(s_minus), len(s_plus)
    rr = r if k_minus else 1.0
    RR = R if k_plus else 1.0
    G2 = _bins_cached(p, t, rr, RR, M, dtype == np.clongdouble, tuple(s_minus), tuple(s_plus))
    lo = min(xs) - (1 if kind == "deltaI" else 0)
    vals = {x: assemble_moment(G2, rr, RR, k_minus, k_plus, x) for x in range(lo, max(xs) + 1)}
    if kind == "I":
        return np.array([vals[x] for x in xs])
    return np.array([vals[x] - vals[x - 1] for x in xs])


def _real_part(z: complex) -> float:
    if abs(z.imag) > IMAG_TOL * (1.0 + abs(z)):
        raise AsepError(f"imaginary residue {z.imag:g} exceeds tolerance at value {z!r}")
    return float(z.real)


def _check_config(config: FiniteConfig):
    if len(config) > MAX_CONFIG_SIZE:
        raise ValueError(f"configuration size {len(config)} exceeds cap {MAX_CONFIG_SIZE}")


# ---------------------------------------------------------------------------
# the four exact laws
# ---------------------------------------------------------------------------

def _large_subset_rows(config: FiniteConfig):
    """All nonempty subsets of the full configuration, with their index weights."""
    sites = config.sites
    rows = []
    for k in range(1, len(sites) + 1):
        for S in combinations(sites, k):
            rows.append((S, sigma(S, sites)))
    return rows


def _large_table(config, params, t, xs, ms, kind, M, dtype, R):
    rows = _large_subset_rows(config)
    out = np.zeros((len(ms), len(xs)), dtype=complex)
    for S, sig in rows:
        coeffs = np.array(
            [coeff_cmk(m, len(S), params) * params.tau**sig for m in ms]
        )
        if not np.any(coeffs):
            continue
        vals = _subset_values(params.p, t, 1.0, R, M, dtype, (), S, xs, kind)
        out += coeffs[:, None] * vals[None, :]
    return out


def _mixed_subset_list(config: FiniteConfig):
    subs = []
    for km in range(len(config.y_minus) + 1):
        for sm in combinations(config.y_minus, km):
            for kp in range(len(config.y_plus) + 1):
                for sp in combinations(config.y_plus, kp):
                    if km + kp >= 1:
                        subs.append(IndexedSubset(sm, sp))
    return subs


def _mixed_table(config, params, t, xs, ms, kind, M, dtype, r, R):
    """kind: 'leq' (I form), 'at' (deltaI form) or 'site' (deltaI, rank-summed)."""
    subs = _mixed_subset_list(config)
    want_delta = kind in ("at", "site")
    out = np.zeros((len(ms), len(xs)), dtype=complex)
    if kind == "leq":
        for mi, m in enumerate(ms):
            if m <= len(config.y_minus):
                out[mi, :] += 1.0
    for sub in subs:
        if kind == "site":
            coeffs = np.array([coeff_css(sub, config, params)])
        else:
            coeffs = np.array([coeff_cmss(m, sub, config, params) for m in ms])
        if not np.any(coeffs):
            continue
        vals = _subset_values(
            params.p,
            t,
            r,
            R,
            M,
            dtype,
            sub.s_minus,
            sub.s_plus,
            xs,
            "deltaI" if want_delta else "I",
        )
        out += coeffs[:, None] * vals[None, :]
    return out


def _radii_for(config: FiniteConfig, params: ModelParams, options: FiniteOptions, form: str):
    k_minus = len(config.y_minus) if form == "mixed" else 0
    k_plus = len(config.y_plus) if form == "mixed" else len(config)
    return select_radii(
        k_minus,
        k_plus,
        params,
        _ZERO_DENS,
        k_max=max(len(config), 1),
        margin=options.margin,
        safety=options.safety,
        ratio_cap=options.ratio_cap,
    )


def _refined_scalar(fn, k, options: FiniteOptions):
    vals, est, converged = refine_vector(
        fn,
        options.M0,
        options.max_M_for(k),
        options.quad_rel_tol,
        options.quad_abs_tol,
        options.allow_longdouble,
    )
    return _real_part(complex(vals.ravel()[0]))


def prob_mth_leq_large(
    query: PositionQuery, params: ModelParams, options: FiniteOptions = DEFAULT_OPTIONS
) -> float:
    """P(x_m(t) <= x) as the all-large-contour subset sum."""
    _check_config(query.config)
    _, R = _radii_for(query.config, params, options, "large")

    def fn(M, dtype):
        return _large_table(
            query.config, params, query.t, [query.x], [query.m], "I", M, dtype, R
        )

    return _refined_scalar(fn, len(query.config), options)


def prob_mth_at_large(
    query: PositionQuery, params: ModelParams, options: FiniteOptions = DEFAULT_OPTIONS
) -> float:
    """P(x_m(t) = x); the summed form's increment."""
    _check_config(query.config)
    _, R = _radii_for(query.config, params, options, "large")

    def fn(M, dtype):
        return _large_table(
            query.config, params, query.t, [query.x], [query.m], "deltaI", M, dtype, R
        )

    return _refined_scalar(fn, len(query.config), options)


def prob_mth_leq_mixed(
    query: PositionQuery, params: ModelParams, options: FiniteOptions = DEFAULT_OPTIONS
) -> float:
    """P(x_m(t) <= x) as the mixed large/small-contour split-subset sum."""
    _check_config(query.config)
    r, R = _radii_for(query.config, params, options, "mixed")

    def fn(M, dtype):
        return _mixed_table(
            query.config, params, query.t, [query.x], [query.m], "leq", M, dtype, r, R
        )

    return _refined_scalar(fn, len(query.config), options)


def prob_site_finite(
    query: SiteQuery, params: ModelParams, options: FiniteOptions = DEFAULT_OPTIONS
) -> float:
    """P(site x occupied at t) for the finite configuration."""
    _check_config(query.config)
    r, R = _radii_for(query.config, params, options, "mixed")

    def fn(M, dtype):
        return _mixed_table(
            query.config, params, query.t, [query.x], [0], "site", M, dtype, r, R
        )

    return _refined_scalar(fn, len(query.config), options)


# ---------------------------------------------------------------------------
# batch tables (shared contractions across x and m)
# ---------------------------------------------------------------------------

def position_law_tables(
    config: FiniteConfig,
    params: ModelParams,
    t: float,
    xs,
    ms,
    options: FiniteOptions = DEFAULT_OPTIONS,
    forms=("large", "mixed"),
    kind: str = "leq",
) -> dict[str, np.ndarray]:
    """Tables value[m_i, x_j] of the rank law in each requested form.

    One contraction per subset serves the whole (m, x) grid; adaptive in M
    with the same stall-escalation policy as the scalar entry points.
    """
    _check_config(config)
    xs, ms = list(xs), list(ms)
    out = {}
    k = len(config)
    for form in forms:
        if form == "large":
            _, R = _radii_for(config, params, options, "large")
            fn = lambda M, dtype: _large_table(config, params, t, xs, ms, kind, M, dtype, R)
        else:
            r, R = _radii_for(config, params, options, "mixed")
            lkind = {"leq": "leq", "at": "at"}[kind]
            fn = lambda M, dtype: _mixed_table(
                config, params, t, xs, ms, lkind, M, dtype, r, R
            )
        vals, est, converged = refine_vector(
            fn,
            options.M0,
            options.max_M_for(k),
            options.quad_rel_tol,
            options.quad_abs_tol,
            options.allow_longdouble,
        )
        if np.max(np.abs(vals.imag)) > IMAG_TOL * (1.0 + np.max(np.abs(vals))):
            raise AsepError("imaginary residue exceeds tolerance in batch table")
        out[form] = vals.real.copy()
    return out


def site_prob_table(
    config: FiniteConfig,
    params: ModelParams,
    t: float,
    xs,
    options: FiniteOptions = DEFAULT_OPTIONS,
) -> np.ndarray:
    """Site occupation probabilities over a sweep of sites."""
    _check_config(config)
    xs = list(xs)
    r, R = _radii_for(config, params, options, "mixed")
    fn = lambda M, dtype: _mixed_table(config, params, t, xs, [0], "site", M, dtype, r, R)
    vals, est, converged = refine_vector(
        fn,
        options.M0,
        options.max_M_for(len(config)),
        options.quad_rel_tol,
        options.quad_abs_tol,
        options.allow_longdouble,
    )
    if np.max(np.abs(vals.imag)) > IMAG_TOL * (1.0 + np.max(np.abs(vals))):
        raise AsepError("imaginary residue exceeds tolerance in site table")
    return vals.real.ravel().copy()
