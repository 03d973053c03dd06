"""Infinite-volume laws for two-sided Bernoulli initial data.

Site occupation probability, the equal-site two-time correlation, the net
flux distribution across the bond (0,1) and its exponential generating
function, each as a truncated double series of mixed-contour integrals over
(k_minus, k_plus) blocks, plus the symmetrized determinantal form of the
site series and the symmetric-rates closed forms.

Truncation walks antidiagonals k_minus + k_plus = K and stops once every
term on two consecutive antidiagonals falls below ``term_tol``; a term's
integral is refined adaptively in the node count and escalated to 80-bit
arithmetic when roundoff stalls the refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import AsepError
from .kernel import BernoulliDensities, ModelParams, f_matrix, tau_binomial
from .quad import (
    BlockSpec,
    ContourGrid,
    assemble_moment,
    contract_blocks,
    integrate_adaptive,
    refine_vector,
    select_radii,
    _unit_roots,
)

__all__ = [
    "TruncationPolicy",
    "SeriesReport",
    "FluxQuery",
    "phi_plus",
    "phi_minus",
    "site_probability",
    "ssep_site_probability",
    "kernel_K_plus",
    "kernel_K_minus",
    "site_probability_det",
    "correlation",
    "density_step_site_probability",
    "flux_tail",
    "flux_mgf",
    "ssep_flux_mgf",
]

IMAG_TOL = 1e-9


@dataclass(frozen=True)
class TruncationPolicy:
    """Caps and tolerances for the (k_minus, k_plus) double series."""

    k_max: int = 8
    term_tol: float = 1e-10
    quad_rel_tol: float = 1e-8
    quad_abs_tol: float = 1e-13
    M0: int = 16
    node_budget: int = 1 << 28
    max_M: int = 512
    margin: float = 0.1
    safety: float = 0.75
    ratio_cap: float = 0.72
    allow_longdouble: bool = True

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        for name in ("term_tol", "quad_rel_tol", "quad_abs_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def max_M_for(self, k: int) -> int:
        M = self.M0
        while (2 * M) ** max(k, 1) <= self.node_budget and 2 * M <= self.max_M:
            M *= 2
        return M


DEFAULT_POLICY = TruncationPolicy()


@dataclass
class SeriesReport:
    """Value of a truncated series plus everything needed to judge it."""

    value: float
    value_complex: complex
    terms: dict[tuple[int, int], complex]
    truncation_estimate: float
    quad_estimate: float
    converged: bool


@dataclass(frozen=True)
class FluxQuery:
    """Net leftward flux across the bond (0,1) up to time t."""

    t: float
    params: ModelParams
    densities: BernoulliDensities
    m: int | None = None
    lam: complex | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("t must be >= 0")


# ---------------------------------------------------------------------------
# scalar pieces (reference path, used directly by tests)
# ---------------------------------------------------------------------------

def phi_plus(k_plus: int, rho_plus: float, xs, params: ModelParams):
    """Bernoulli-average factor of the large-contour block.

    ``xs[i-1]`` is the variable of index i, i = 1..k_plus.
    """
    out = 1.0 + 0.0j
    tau = params.tau
    for i in range(1, k_plus + 1):
        prod = 1.0 + 0.0j
        for j in range(i, k_plus + 1):
            prod *= xs[j - 1]
        out *= rho_plus / (prod - 1.0 + rho_plus * (1.0 - tau ** (k_plus - i + 1)))
    return out


def phi_minus(k_minus: int, rho_minus: float, xs, params: ModelParams):
    """Bernoulli-average factor of the small-contour block.

    ``xs`` lists the variables in increasing index order, i.e. ``xs[0]`` is
    the variable of index -k_minus and ``xs[-1]`` the variable of index -1.
    """
    out = 1.0 + 0.0j
    tau = params.tau
    for i in range(1, k_minus + 1):
        # xi_{-i} = xs[k_minus - i]
        prod = 1.0 + 0.0j
        for j in range(i, k_minus + 1):
            prod *= xs[k_minus - j]
        out *= (rho_minus / xs[k_minus - i]) / (
            1.0 / prod - 1.0 + rho_minus * (1.0 - tau ** (i - k_minus - 1))
        )
    return out


def kernel_K_plus(xi, xi_prime, x: int, t: float, params: ModelParams, rho_plus: float):
    """Large-contour symmetrized kernel."""
    p, q, tau = params.p, params.q, params.tau
    eps = p / xi + q * xi - 1.0
    return (
        rho_plus
        * (q * xi - p)
        / (xi - 1.0 + rho_plus * (1.0 - tau))
        * xi**x
        * np.exp(eps * t)
        / (p + q * xi * xi_prime - xi)
    )


def kernel_K_minus(xi, xi_prime, x: int, t: float, params: ModelParams, rho_minus: float):
    """Small-contour symmetrized kernel."""
    p, q, tau = params.p, params.q, params.tau
    eps = p / xi + q * xi - 1.0
    return (
        rho_minus
        * (q - p / xi)
        / (1.0 / xi - 1.0 + rho_minus * (1.0 - 1.0 / tau))
        * xi**x
        * np.exp(eps * t)
        / (p + q * xi * xi_prime - xi)
    )


# ---------------------------------------------------------------------------
# cached contractions
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _radii_cached(p, rho_minus, rho_plus, k_minus_eff, k_plus_eff, k_max, margin, safety, ratio_cap):
    return select_radii(
        k_minus_eff,
        k_plus_eff,
        ModelParams(p),
        BernoulliDensities(rho_minus, rho_plus),
        k_max,
        margin=margin,
        safety=safety,
        ratio_cap=ratio_cap,
    )


def _series_radii(params: ModelParams, densities: BernoulliDensities, policy: TruncationPolicy):
    k_minus_eff = 0 if densities.rho_minus == 0.0 else policy.k_max
    k_plus_eff = 0 if densities.rho_plus == 0.0 else policy.k_max
    return _radii_cached(
        params.p,
        densities.rho_minus,
        densities.rho_plus,
        k_minus_eff,
        k_plus_eff,
        policy.k_max,
        policy.margin,
        policy.safety,
        policy.ratio_cap,
    )


def _phi_blocks(params, densities, t, r, R, M, dtype, k_minus, k_plus):
    longdouble = dtype == np.clongdouble
    roots = _unit_roots(M, longdouble)
    tau = params.tau
    s = np.arange(M)
    omega = roots  # exp(2 pi i s / M)

    small = None
    if k_minus:
        nodes = r * roots
        eps = params.p / nodes + params.q * nodes - 1.0
        w = (densities.rho_minus * np.exp(eps * t) / (1.0 - nodes) / M).astype(dtype)
        tables = []
        for step in range(1, k_minus + 1):
            denom = (
                float(r) ** (-step) * np.conj(omega)
                - 1.0
                + densities.rho_minus * (1.0 - tau ** (-step))
            )
            tables.append((1.0 / denom).astype(dtype))
        small = BlockSpec(radius=r, weights=[w.copy() for _ in range(k_minus)], group_tables=tables)
    large = None
    if k_plus:
        nodes = R * roots
        eps = params.p / nodes + params.q * nodes - 1.0
        w = (densities.rho_plus * np.exp(eps * t) / (1.0 - nodes) * nodes / M).astype(dtype)
        tables = []
        for step in range(1, k_plus + 1):
            denom = float(R) ** step * omega - 1.0 + densities.rho_plus * (1.0 - tau**step)
            tables.append((1.0 / denom).astype(dtype))
        large = BlockSpec(radius=R, weights=[w.copy() for _ in range(k_plus)], group_tables=tables)
    return small, large


@lru_cache(maxsize=1024)
def _phi_bins(p, rho_minus, rho_plus, t, r, R, M, longdouble, k_minus, k_plus):
    params = ModelParams(p)
    densities = BernoulliDensities(rho_minus, rho_plus)
    dtype = np.clongdouble if longdouble else np.complex128
    small, large = _phi_blocks(params, densities, t, r, R, M, dtype, k_minus, k_plus)
    return contract_blocks(small, large, params, M, dtype=dtype)


# ---------------------------------------------------------------------------
# determinantal contraction
# ---------------------------------------------------------------------------

def _batched_det(mats: np.ndarray) -> np.ndarray:
    """Determinants of a stack of small matrices, dtype-preserving for n <= 3."""
    n = mats.shape[-1]
    if n == 1:
        return mats[..., 0, 0]
    if n == 2:
        return mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    if n == 3:
        a = mats
        return (
            a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
        )
    return np.linalg.det(mats.astype(np.complex128))


def _det_block(nodes, per_var, params, k):
    """D[tuple] = det(core(xi_i, xi_j)) * prod_i per_var(xi_i) over all node tuples."""
    M = nodes.shape[0]
    core = 1.0 / (params.p + params.q * nodes[:, None] * nodes[None, :] - nodes[:, None])
    if k == 0:
        return np.ones((), dtype=nodes.dtype)
    grids = np.indices((M,) * k)
    mats = core[grids[:, None], grids[None, :]]  # (k, k, M, ..., M)
    mats = np.moveaxis(mats, (0, 1), (-2, -1))
    D = _batched_det(mats).astype(nodes.dtype)
    for i in range(k):
        shape = [1] * k
        shape[i] = M
        D = D * per_var.reshape(shape)
    return D


@lru_cache(maxsize=512)
def _det_bins(p, rho_minus, rho_plus, t, r, R, M, longdouble, k_minus, k_plus):
    params = ModelParams(p)
    dtype = np.clongdouble if longdouble else np.complex128
    roots = _unit_roots(M, longdouble)
    tau = params.tau
    q = params.q

    D_small = None
    if k_minus:
        nodes = (r * roots).astype(dtype)
        eps = params.p / nodes + q * nodes - 1.0
        per_var = (
            rho_minus
            * (q - params.p / nodes)
            / (1.0 / nodes - 1.0 + rho_minus * (1.0 - 1.0 / tau))
            * np.exp(eps * t)
            * nodes
            / M
        ).astype(dtype)
        D_small = _det_block(nodes, per_var, params, k_minus)
    D_large = None
    if k_plus:
        nodes = (R * roots).astype(dtype)
        eps = params.p / nodes + q * nodes - 1.0
        per_var = (
            rho_plus
            * (q * nodes - params.p)
            / (nodes - 1.0 + rho_plus * (1.0 - tau))
            * np.exp(eps * t)
            * nodes
            / M
        ).astype(dtype)
        D_large = _det_block(nodes, per_var, params, k_plus)

    # combine with cross interaction factors and bin by block index sums
    from .quad import _merge_block_axes

    if k_minus and k_plus:
        F_sl = f_matrix((r * roots).astype(dtype), (R * roots).astype(dtype), params).astype(dtype)
        slab = D_small.reshape(D_small.shape + (1,) * k_plus) * D_large.reshape(
            (1,) * k_minus + D_large.shape
        )
        for i in range(k_minus):
            for j in range(k_plus):
                shape = [1] * (k_minus + k_plus)
                shape[i] = M
                shape[k_minus + j] = M
                slab = slab * F_sl.reshape(shape)
        T = _merge_block_axes(slab, 0, k_minus, M)
        T = _merge_block_axes(T, 1, k_plus, M)
        return T
    G2 = np.zeros((M, M), dtype=dtype)
    if k_minus:
        G2[:, 0] = _merge_block_axes(D_small, 0, k_minus, M)
    else:
        G2[0, :] = _merge_block_axes(D_large, 0, k_plus, M)
    return G2


# ---------------------------------------------------------------------------
# series driver
# ---------------------------------------------------------------------------

def _evaluate_series(
    params: ModelParams,
    densities: BernoulliDensities,
    t: float,
    policy: TruncationPolicy,
    coeff_fn,
    moment_fn,
    k0_value: complex,
    bins_fn=None,
    expect_real: bool = True,
) -> SeriesReport:
    """Shared antidiagonal walk for every series in this module."""
    r, R = _series_radii(params, densities, policy)
    bins = bins_fn or _phi_bins
    terms: dict[tuple[int, int], complex] = {}
    total = complex(k0_value)
    quad_estimate = 0.0
    seen_active = False
    consecutive_small = 0
    truncation_estimate = 0.0
    converged = True

    for K in range(1, policy.k_max + 1):
        row_max = 0.0
        row_sum = 0.0
        active = False
        for k_minus in range(K + 1):
            k_plus = K - k_minus
            if k_minus and densities.rho_minus == 0.0:
                continue
            if k_plus and densities.rho_plus == 0.0:
                continue
            c = complex(coeff_fn(k_minus, k_plus))
            if c == 0.0:
                continue
            active = True

            def fn(M, dtype, k_minus=k_minus, k_plus=k_plus, c=c):
                G2 = bins(
                    params.p,
                    densities.rho_minus,
                    densities.rho_plus,
                    t,
                    r if k_minus else 1.0,
                    R if k_plus else 1.0,
                    M,
                    dtype == np.clongdouble,
                    k_minus,
                    k_plus,
                )
                return np.array([c * moment_fn(G2, k_minus, k_plus, r, R)])

            max_M = policy.max_M_for(K)
            if max_M <= policy.M0:
                vals = fn(policy.M0, np.complex128)
                est = float(np.max(np.abs(vals)))
                ok = False
            else:
                vals, est, ok = refine_vector(
                    fn,
                    policy.M0,
                    max_M,
                    policy.quad_rel_tol,
                    max(policy.quad_abs_tol, 0.05 * policy.term_tol),
                    policy.allow_longdouble,
                )
            term = complex(vals.ravel()[0])
            terms[(k_minus, k_plus)] = term
            total += term
            quad_estimate += min(est, abs(term)) if not ok else est
            if not ok:
                converged = False
            row_max = max(row_max, abs(term))
            row_sum += abs(term)
        if active:
            seen_active = True
            truncation_estimate = row_sum
            if row_max < policy.term_tol:
                consecutive_small += 1
                if consecutive_small >= 2:
                    break
            else:
                consecutive_small = 0
        elif seen_active:
            consecutive_small += 1
            if consecutive_small >= 2:
                break
    else:
        if seen_active and consecutive_small < 2:
            converged = False

    value = total.real
    if expect_real and abs(total.imag) > IMAG_TOL * (1.0 + abs(total)):
        raise AsepError(f"imaginary residue {total.imag:g} in series value {total!r}")
    return SeriesReport(
        value=value,
        value_complex=total,
        terms=terms,
        truncation_estimate=truncation_estimate,
        quad_estimate=quad_estimate,
        converged=converged,
    )


def _sign_product(params: ModelParams, k: int) -> float:
    """prod_{j=1}^{k-1} (p^j - q^j); exactly zero at symmetric rates for k >= 2."""
    out = 1.0
    for j in range(1, k):
        out *= params.p**j - params.q**j
        if out == 0.0:
            return 0.0
    return out


def _delta_moment(x: int, small_multiplier_fn=None):
    def moment(G2, k_minus, k_plus, r, R):
        mult = None
        if small_multiplier_fn is not None:
            mult = small_multiplier_fn(G2, k_minus, r)
        rr = r if k_minus else 1.0
        RR = R if k_plus else 1.0
        hi = assemble_moment(G2, rr, RR, k_minus, k_plus, x, small_multiplier=mult)
        lo = assemble_moment(G2, rr, RR, k_minus, k_plus, x - 1, small_multiplier=mult)
        return hi - lo

    return moment


def _plain_moment(x: int):
    def moment(G2, k_minus, k_plus, r, R):
        rr = r if k_minus else 1.0
        RR = R if k_plus else 1.0
        return assemble_moment(G2, rr, RR, k_minus, k_plus, x)

    return moment


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def site_probability(
    x: int,
    t: float,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """P(site x occupied at time t) under the two-sided Bernoulli initial law."""
    coeff = lambda k_minus, k_plus: -_sign_product(params, k_minus + k_plus)
    return _evaluate_series(params, densities, t, trunc, coeff, _delta_moment(x), 0.0)


def density_step_site_probability(
    x: int,
    t: float,
    y: int,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """Site occupation law when the density step sits at y (rho_minus on sites <= y).

    Shifting the step translates the lattice, so every site power in the
    integrand shifts by the step location: the result is the standard series
    evaluated at x - y.
    """
    coeff = lambda k_minus, k_plus: -_sign_product(params, k_minus + k_plus)
    return _evaluate_series(params, densities, t, trunc, coeff, _delta_moment(x - y), 0.0)


def correlation(
    x: int,
    t: float,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """P(site x occupied at t AND site 0 occupied at 0).

    The site series with each integrand multiplied by
    ``1 - (1 - rho_minus) * prod_{i<0} xi_i``; one truncation error instead
    of a difference of two series.
    """
    rho_minus = densities.rho_minus

    def mult_fn(G2, k_minus, r):
        M = G2.shape[0]
        roots = _unit_roots(M, G2.dtype == np.clongdouble)
        return 1.0 - (1.0 - rho_minus) * (r if k_minus else 1.0) ** k_minus * roots

    coeff = lambda k_minus, k_plus: -_sign_product(params, k_minus + k_plus)
    return _evaluate_series(
        params, densities, t, trunc, coeff, _delta_moment(x, mult_fn), 0.0
    )


def site_probability_det(
    x: int,
    t: float,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """Symmetrized form of the site series: determinants of the one-sided kernels."""

    def coeff(k_minus, k_plus):
        k = k_minus + k_plus
        prod = 1.0
        for j in range(1, k):
            prod *= params.q**j - params.p**j
            if prod == 0.0:
                return 0.0
        return (
            prod
            / (math.factorial(k_minus) * math.factorial(k_plus))
            * params.p ** (-k_plus * (k_plus - 1) / 2.0)
            * params.q ** (-k_minus * (k_minus - 1) / 2.0)
        )

    return _evaluate_series(
        params, densities, t, trunc, coeff, _delta_moment(x), 0.0, bins_fn=_det_bins
    )


def ssep_site_probability(x: int, t: float, densities: BernoulliDensities) -> float:
    """Closed two-integral form of the site law at symmetric rates (p = q = 1/2)."""
    params = ModelParams(0.5)
    rm, rp = densities.rho_minus, densities.rho_plus

    def outer(xi):
        return xi ** (x - 1) * np.exp((0.5 / xi + 0.5 * xi - 1.0) * t) / (xi - 1.0)

    def inner(xi):
        return xi ** (x - 1) * np.exp((0.5 / xi + 0.5 * xi - 1.0) * t) / (1.0 - xi)

    big = integrate_adaptive(outer, ContourGrid((2.0,), 64), rel_tol=1e-13, abs_tol=1e-15)
    small = integrate_adaptive(inner, ContourGrid((0.5,), 64), rel_tol=1e-13, abs_tol=1e-15)
    val = rp * big.value + rm * small.value
    if abs(val.imag) > IMAG_TOL * (1.0 + abs(val)):
        raise AsepError(f"imaginary residue in symmetric site law: {val!r}")
    return float(val.real)


def flux_tail(
    m: int,
    t: float,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """P(Q_t >= m): net leftward crossings of the bond (0,1) reach m.

    The empty term contributes 1 exactly when m <= 0 (at time zero the flux
    is zero), matching the finite-configuration coefficient branch.
    """
    tau, q = params.tau, params.q

    def coeff(k_minus, k_plus):
        k = k_minus + k_plus
        b = tau_binomial(k - 1, m + k_minus - 1, tau)
        if b == 0.0:
            return 0.0
        sign = -1.0 if (m + k_minus) % 2 else 1.0
        expo = m * (m - 1) / 2.0 + k_plus * (k_plus + 1) / 2.0 - m * k_plus
        return sign * tau**expo * q ** (k * (k - 1) // 2) * b

    k0 = 1.0 if m <= 0 else 0.0
    return _evaluate_series(params, densities, t, trunc, coeff, _plain_moment(0), k0)


def flux_mgf(
    lam: complex,
    t: float,
    params: ModelParams,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """<exp(lam * Q_t)>, an entire function of lam; lam may be complex."""
    lam = complex(lam)
    tau, q = params.tau, params.q
    expect_real = lam.imag == 0.0

    def coeff(k_minus, k_plus):
        k = k_minus + k_plus
        prod = 1.0 + 0.0j
        for j in range(k):
            prod *= 1.0 - np.exp(-lam) * tau**j
            if prod == 0.0:
                return 0.0
        sign = -1.0 if k % 2 else 1.0
        return sign * q ** (k * (k - 1) // 2) * np.exp(lam * k_plus) * prod

    return _evaluate_series(
        params,
        densities,
        t,
        trunc,
        coeff,
        _plain_moment(0),
        1.0,
        expect_real=expect_real,
    )


def ssep_flux_mgf(
    lam: complex,
    t: float,
    densities: BernoulliDensities,
    trunc: TruncationPolicy = DEFAULT_POLICY,
) -> SeriesReport:
    """Flux generating function at symmetric rates.

    Densities enter the coefficients only, through rho_minus (1 - e^-lam)
    and rho_plus (e^lam - 1); the integrals use saturated-density factors.
    """
    lam = complex(lam)
    params = ModelParams(0.5)
    expect_real = lam.imag == 0.0
    a_minus = densities.rho_minus * (1.0 - np.exp(-lam))
    a_plus = densities.rho_plus * (np.exp(lam) - 1.0)
    ones = BernoulliDensities(1.0, 1.0)

    def coeff(k_minus, k_plus):
        k = k_minus + k_plus
        sign = -1.0 if k % 2 else 1.0
        return sign * 2.0 ** (-k * (k - 1) / 2.0) * a_minus**k_minus * a_plus**k_plus

    report = _evaluate_series(
        params, ones, t, trunc, coeff, _plain_moment(0), 1.0, expect_real=expect_real
    )
    return report
