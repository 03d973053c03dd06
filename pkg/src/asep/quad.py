"""Tensor-product quadrature over products of circles in the complex plane.

Two layers live here:

* a generic integrator (`integrate`, `integrate_adaptive`) that applies the
  trapezoid rule on circles to an arbitrary callable, with an optional
  extended-precision mode, and
* a structured contraction engine (`contract_blocks`) for integrands of the
  form ``prod_{i<j} f(xi_i, xi_j) * prod_i w_i(xi_i) * (suffix-product
  factors)`` over a small-radius block and a large-radius block.  Its output
  is binned by the index sums of each block, so a single tensor pass serves
  every integer power ``prod_i xi_i^x`` at assembly time.

Conventions, frozen here and relied on everywhere else:

* every contour integral carries a factor 1/(2*pi*i) per variable, realized
  as the node weight ``xi / M`` on an M-point equispaced grid;
* integration is counterclockwise;
* variables carry indices ``-k_minus .. -1`` (small circle) and
  ``1 .. k_plus`` (large circle), and the pairwise factor for indices i < j
  is ``f(xi_i, xi_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NoAdmissibleRadii, NodeBudgetExceeded
from .kernel import BernoulliDensities, ModelParams, f_matrix

__all__ = [
    "ContourGrid",
    "QuadResult",
    "select_radii",
    "radii_certificate",
    "integrate",
    "integrate_adaptive",
    "BlockSpec",
    "contract_blocks",
    "assemble_moment",
    "magnitude_estimate",
]

LONGDOUBLE_EPS = float(np.finfo(np.longdouble).eps)
FLOAT64_EPS = float(np.finfo(np.float64).eps)

_DEFAULT_MARGIN = 0.1
_DEFAULT_SAFETY = 0.75
_DEFAULT_RATIO_CAP = 0.72


@dataclass(frozen=True)
class ContourGrid:
    """Per-variable circle radii plus a shared node count per circle."""

    radii: tuple[float, ...]
    nodes_per_circle: int

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if any(r <= 0 for r in self.radii):
            raise ValueError(f"radii must be positive, got {self.radii}")
        if self.nodes_per_circle < 2:
            raise ValueError("need at least 2 nodes per circle")

    @classmethod
    def mixed(cls, k_minus: int, k_plus: int, r: float, R: float, M: int) -> "ContourGrid":
        return cls(radii=(r,) * k_minus + (R,) * k_plus, nodes_per_circle=M)

    @property
    def dim(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class QuadResult:
    value: complex
    error_estimate: float
    nodes_used: int


def _unit_roots(M: int, longdouble: bool = False) -> np.ndarray:
    if longdouble:
        theta = 2.0 * np.arange(M, dtype=np.longdouble) / np.longdouble(M)
        # cospi/sinpi-style evaluation keeps the roots accurate at this width
        return (np.cos(np.pi * theta) + 1j * np.sin(np.pi * theta)).astype(np.clongdouble)
    return np.exp(2j * np.pi * np.arange(M) / M)


# ---------------------------------------------------------------------------
# radius selection
# ---------------------------------------------------------------------------

def radii_certificate(
    r: float,
    R: float,
    params: ModelParams,
    densities: BernoulliDensities,
    k_minus: int,
    k_plus: int,
    k_max: int,
    margin: float = _DEFAULT_MARGIN,
) -> dict[str, float]:
    """Slack of every admissibility constraint at (r, R); all must be positive.

    Constraint names mirror the selection logic: interaction denominators
    between small/small, small/large and large/large variables, the 1/(1-xi)
    poles, and the geometric-sum denominators of the Bernoulli averages whose
    j-th factor pairs the j-fold radius product with the j-th rate-ratio
    power.
    """
    p, q, tau = params.p, params.q, params.tau
    rm, rp = densities.rho_minus, densities.rho_plus
    slack: dict[str, float] = {}
    if k_minus >= 1:
        slack["small_one_pole"] = (1.0 - margin) - r
        for j in range(1, k_max + 1):
            c = abs(1.0 - rm * (1.0 - tau ** (-j)))
            slack[f"phi_minus_j{j}"] = r ** (-j) - c - margin
    if k_minus >= 2:
        # margin scaled by p, the denominator scale of a small/small pair
        slack["f_small_small"] = p - r - q * r * r - margin * p
    if k_plus >= 1:
        slack["large_one_pole"] = R - (1.0 + margin)
        for j in range(1, k_max + 1):
            c = abs(1.0 - rp * (1.0 - tau**j))
            slack[f"phi_plus_j{j}"] = R**j - c - margin
    if k_plus >= 2:
        # margin scaled by q, the quadratic coefficient of a large/large pair
        slack["f_large_large"] = q * R * R - R - p - margin * q
    if k_minus >= 1 and k_plus >= 1:
        slack["f_small_large"] = q * r * R - p - r - margin
    return slack


def select_radii(
    k_minus: int,
    k_plus: int,
    params: ModelParams,
    densities: BernoulliDensities,
    k_max: int,
    margin: float = _DEFAULT_MARGIN,
    safety: float = _DEFAULT_SAFETY,
    ratio_cap: float = _DEFAULT_RATIO_CAP,
) -> tuple[float, float]:
    """Choose circle radii (r, R) with every integrand denominator bounded away from zero.

    ``margin`` is the hard additive bound entering the admissibility
    certificate; ``safety`` and ``ratio_cap`` additionally keep every pole at
    a modulus ratio of at most roughly ``ratio_cap`` from its contour, which
    is what controls the trapezoid convergence rate.  Raises
    :class:`NoAdmissibleRadii` naming the binding constraint if the system is
    infeasible.
    """
    if k_max < max(k_minus, k_plus, 1):
        raise ValueError("k_max must cover the largest block in play")
    p, q, tau = params.p, params.q, params.tau
    rm, rp = densities.rho_minus, densities.rho_plus

    r = 0.5  # inert default when no small variables are in play
    if k_minus >= 1:
        caps: list[tuple[float, str]] = [(1.0 - margin, "small_one_pole")]
        for j in range(1, k_max + 1):
            c = abs(1.0 - rm * (1.0 - tau ** (-j)))
            caps.append(((c + margin) ** (-1.0 / j), f"phi_minus_j{j}"))
        if k_minus >= 2 or k_plus >= 1:
            # small/small interaction poles also bound r whenever a term can
            # hold two small variables under the shared k_max
            disc = 1.0 + 4.0 * q * p * (1.0 - margin)
            caps.append(((-1.0 + math.sqrt(disc)) / (2.0 * q), "f_small_small"))
        cap, which = min(caps, key=lambda cw: cw[0])
        r = safety * cap
        if r <= 1e-6:
            raise NoAdmissibleRadii(f"binding constraint {which}: r would be {r:.3g}")

    R = 2.0
    if k_plus >= 1:
        floors: list[tuple[float, str]] = [(1.0 + margin, "large_one_pole")]
        for j in range(1, k_max + 1):
            c = abs(1.0 - rp * (1.0 - tau**j))
            floors.append(((c + margin) ** (1.0 / j), f"phi_plus_j{j}"))
        # large/large interaction: admissibility plus pole-ratio quality
        floors.append(
            (
                (1.0 + math.sqrt(1.0 + 4.0 * q * (p + margin * q))) / (2.0 * q),
                "f_large_large",
            )
        )
        floors.append(
            (
                (1.0 + math.sqrt(1.0 + 4.0 * ratio_cap * q * p)) / (2.0 * ratio_cap * q),
                "f_large_large_ratio",
            )
        )
        if k_minus >= 1:
            floors.append(((p + r + margin) / (q * r), "f_small_large"))
            floors.append(((r + p) / (ratio_cap * q * r), "f_small_large_ratio"))
            floors.append(((p / (ratio_cap * r) + 1.0) / q, "f_small_large_inner_ratio"))
        floor, which = max(floors, key=lambda cw: cw[0])
        R = 1.05 * floor
        if R > 1e5:
            raise NoAdmissibleRadii(f"binding constraint {which}: R would be {R:.3g}")

    cert = radii_certificate(r, R, params, densities, k_minus, k_plus, k_max, margin)
    bad = {k: v for k, v in cert.items() if v <= 0}
    if bad:
        worst = min(bad, key=bad.get)
        raise NoAdmissibleRadii(f"binding constraint {worst}: slack {bad[worst]:.3g}")
    return r, R


# ---------------------------------------------------------------------------
# generic tensor-product trapezoid rule
# ---------------------------------------------------------------------------

def _integrate_numpy(integrand, grid: ContourGrid, longdouble: bool, chunk: int) -> complex:
    M = grid.nodes_per_circle
    k = grid.dim
    roots = _unit_roots(M, longdouble)
    nodes = [rad * roots for rad in grid.radii]
    total_cells = M**k
    dtype = np.clongdouble if longdouble else np.complex128
    acc = dtype(0)
    strides = [M ** (k - 1 - v) for v in range(k)]
    for start in range(0, total_cells, chunk):
        idx = np.arange(start, min(start + chunk, total_cells))
        xs = [nodes[v][(idx // strides[v]) % M] for v in range(k)]
        vals = np.asarray(integrand(*xs), dtype=dtype)
        meas = xs[0].copy()
        for x in xs[1:]:
            meas *= x
        acc += np.sum(vals * meas)
    return complex(acc / dtype(total_cells))


def _integrate_mpmath(integrand, grid: ContourGrid, precision_bits: int) -> complex:
    import mpmath as mp

    M = grid.nodes_per_circle
    k = grid.dim
    with mp.workprec(precision_bits):
        nodes = [
            [mp.mpf(rad) * mp.expjpi(mp.mpf(2 * a) / M) for a in range(M)]
            for rad in grid.radii
        ]
        terms = []
        for flat in range(M**k):
            rem = flat
            xs = []
            for v in range(k):
                rem, a = divmod(rem, M)
                xs.append(nodes[v][a])
            val = integrand(*xs)
            for x in xs:
                val *= x
            terms.append(val)
        total = mp.fsum(terms) / mp.mpf(M) ** k
        return complex(total)


def integrate(
    integrand: Callable,
    grid: ContourGrid,
    precision_bits: int | None = None,
    chunk: int = 1 << 18,
) -> complex:
    """Trapezoid rule on the product of circles, one 1/(2*pi*i) per variable.

    ``integrand`` is called with one argument per variable; in the default
    and 64-bit modes these are numpy arrays (a flat batch of nodes), in the
    arbitrary-precision mode (``precision_bits > 64``) they are mpmath
    scalars and the integrand must be polynomial/rational in its inputs or
    otherwise mpmath-compatible.
    """
    if precision_bits is None:
        return _integrate_numpy(integrand, grid, longdouble=False, chunk=chunk)
    if precision_bits <= 64:
        return _integrate_numpy(integrand, grid, longdouble=True, chunk=chunk)
    return _integrate_mpmath(integrand, grid, precision_bits)


def integrate_adaptive(
    integrand: Callable,
    grid: ContourGrid,
    rel_tol: float = 1e-10,
    abs_tol: float = 1e-13,
    max_nodes: int = 1 << 22,
    precision_bits: int | None = None,
) -> QuadResult:
    """Double the per-circle node count until two successive values agree.

    Raises :class:`NodeBudgetExceeded` (carrying the best value and estimate)
    when the next doubling would exceed ``max_nodes`` total nodes.
    """
    k = grid.dim
    M = grid.nodes_per_circle
    value = integrate(integrand, grid, precision_bits)
    nodes_used = M**k
    diff = math.inf
    while True:
        M2 = 2 * M
        if M2**k > max_nodes:
            raise NodeBudgetExceeded(
                f"node budget {max_nodes} reached at M={M} for k={k}",
                value=value,
                error_estimate=diff,
                nodes_used=nodes_used,
            )
        grid2 = ContourGrid(grid.radii, M2)
        value2 = integrate(integrand, grid2, precision_bits)
        nodes_used += M2**k
        diff = abs(value2 - value)
        value, M = value2, M2
        if diff <= max(abs_tol, rel_tol * abs(value2)):
            return QuadResult(value=value, error_estimate=diff, nodes_used=nodes_used)


# ---------------------------------------------------------------------------
# structured pair-product contraction
# ---------------------------------------------------------------------------

@dataclass
class BlockSpec:
    """One contour block of the structured integrand.

    ``weights[i]`` is the node-weight vector of the block's i-th variable in
    processing order and must already include the quadrature measure
    ``xi / M``.  Processing order is ascending variable index for the small
    block (leftmost index -k_minus first) and descending for the large block
    (index k_plus first), so that ``group_tables[i]``, when present, is the
    factor attached to the running product of the block's first i+1
    variables; it is indexed by the running node-index sum mod M.
    """

    radius: float
    weights: list[np.ndarray] = field(default_factory=list)
    group_tables: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.group_tables:
            self.group_tables = [None] * len(self.weights)
        if len(self.group_tables) != len(self.weights):
            raise ValueError("group_tables must align with weights")

    @property
    def k(self) -> int:
        return len(self.weights)


def _merge_leading_pair(T: np.ndarray, M: int) -> np.ndarray:
    """Merge the first two axes of T into one by index sum mod M."""
    out = np.zeros((M,) + T.shape[2:], dtype=T.dtype)
    for a in range(M):
        row = T[a]
        out[a:] += row[: M - a]
        if a:
            out[:a] += row[M - a :]
    return out


def _merge_block_axes(T: np.ndarray, first: int, count: int, M: int) -> np.ndarray:
    """Merge ``count`` consecutive axes starting at ``first`` into one axis."""
    while count > 1:
        view = np.moveaxis(T, [first, first + 1], [0, 1])
        merged = _merge_leading_pair(view, M)
        T = np.moveaxis(merged, 0, first)
        count -= 1
    return T


def contract_blocks(
    small: BlockSpec | None,
    large: BlockSpec | None,
    params: ModelParams,
    M: int,
    dtype=np.complex128,
    slab_cells: int = 1 << 22,
) -> np.ndarray:
    """Sum the pair-product integrand over the tensor node grid, binned by index sums.

    Returns ``G2`` of shape (M, M) with ``G2[s_small, s_large]`` holding the
    sum of ``prod_{i<j} f(xi_i, xi_j) * prod_i weights_i(xi_i) * (group
    factors)`` over all node tuples whose small-block indices sum to
    ``s_small`` (mod M) and large-block indices to ``s_large``.  Multiplying
    by ``(r^k_minus R^k_plus)^x * omega^(x (s_small+s_large))`` and summing
    then yields the integral with an extra ``prod_i xi_i^x`` for any integer
    ``x`` (see :func:`assemble_moment`).
    """
    ks = small.k if small is not None else 0
    kl = large.k if large is not None else 0
    k = ks + kl
    if k == 0:
        raise ValueError("contract_blocks needs at least one variable")
    longdouble = dtype == np.clongdouble
    roots = _unit_roots(M, longdouble)
    ns = small.radius * roots if ks else None
    nl = large.radius * roots if kl else None

    F_ss = f_matrix(ns, ns, params).astype(dtype) if ks >= 2 else None
    F_sl = f_matrix(ns, nl, params).astype(dtype) if ks >= 1 and kl >= 1 else None
    F_ll = f_matrix(nl, nl, params).astype(dtype) if kl >= 2 else None

    # variables in processing order: small block first, then large block
    var_block = [0] * ks + [1] * kl
    weights = [w.astype(dtype) for w in (small.weights if small else [])] + [
        w.astype(dtype) for w in (large.weights if large else [])
    ]
    tables = list(small.group_tables if small else []) + list(
        large.group_tables if large else []
    )
    tables = [None if t is None else t.astype(dtype) for t in tables]

    def pair_matrix(v_earlier: int, v_new: int) -> np.ndarray:
        b_e, b_n = var_block[v_earlier], var_block[v_new]
        if b_e == 0 and b_n == 0:
            # both small: earlier has the more negative index i, so f(earlier, new)
            return F_ss
        if b_e == 0 and b_n == 1:
            # small index < large index always: f(small, large)
            return F_sl
        # both large: processing is descending index, so the new variable has
        # the smaller index i and sits first: f(new, earlier) = F_ll[new, earlier]
        return F_ll.T

    # choose how many leading variables to enumerate scalar-wise
    lead = 0
    while M ** (k - lead) > slab_cells:
        lead += 1
    n_broadcast = k - lead

    # blocks containing any suffix-product factor need a running index sum
    block_needs_rs = [
        any(tables[v] is not None for v in range(k) if var_block[v] == b) for b in (0, 1)
    ]

    G2 = np.zeros((M, M), dtype=dtype)
    arangeM = np.arange(M)

    for lead_idx in np.ndindex(*((M,) * lead)):
        slab = None  # scalar 1 until the first broadcast variable
        scalar_factor = dtype(1)
        run_sum = [0, 0]  # running index sums per block (scalar part)
        rs_arr: list = [None, None]  # broadcast running-sum arrays per block
        axis_of: list[int | None] = [None] * k

        for v in range(k):
            blk = var_block[v]
            if v < lead:
                a = lead_idx[v]
                scalar_factor = scalar_factor * weights[v][a]
                for u in range(v):
                    Fm = pair_matrix(u, v)
                    scalar_factor = scalar_factor * Fm[lead_idx[u], a]
                run_sum[blk] += a
                if tables[v] is not None:
                    scalar_factor = scalar_factor * tables[v][run_sum[blk] % M]
            else:
                axis = v - lead
                axis_of[v] = axis
                w = weights[v]
                if slab is None:
                    slab = (scalar_factor * w).copy()
                else:
                    slab = slab[..., None] * w
                for u in range(v):
                    Fm = pair_matrix(u, v)
                    if u < lead:
                        slab *= Fm[lead_idx[u], :]
                    else:
                        au = axis_of[u]
                        shape = [1] * (axis + 1)
                        shape[au] = M
                        shape[axis] = M
                        slab *= Fm.reshape(shape)
                if block_needs_rs[blk]:
                    prev = rs_arr[blk]
                    if prev is None:
                        rs = run_sum[blk] + arangeM.reshape((1,) * axis + (M,))
                    else:
                        rs = prev[..., None] + arangeM
                    rs_arr[blk] = rs
                    if tables[v] is not None:
                        slab *= tables[v][rs % M]

        if slab is None:
            # all variables enumerated scalar-wise
            G2[run_sum[0] % M, run_sum[1] % M] += scalar_factor
            continue

        # bin: merge each block's broadcast axes by index sum, in axis order
        small_bcast = sum(1 for v in range(lead, k) if var_block[v] == 0)
        large_bcast = n_broadcast - small_bcast
        T = _merge_block_axes(slab, 0, small_bcast, M) if small_bcast else slab
        off = 1 if small_bcast else 0
        T = _merge_block_axes(T, off, large_bcast, M) if large_bcast else T

        # fold scalar offsets in by circular shift, then accumulate
        sh_s = run_sum[0] % M
        sh_l = run_sum[1] % M
        if small_bcast and large_bcast:
            part = np.roll(np.roll(T, sh_s, axis=0), sh_l, axis=1)
            G2 += part
        elif small_bcast:
            G2[:, sh_l] += np.roll(T, sh_s)
        else:
            G2[sh_s, :] += np.roll(T, sh_l)
    return G2


def magnitude_estimate(
    small: BlockSpec | None, large: BlockSpec | None, params: ModelParams, M: int
) -> float:
    """Rough upper scale of the contraction's absolute cell sum.

    Used to predict the float64 roundoff floor of a slab (roundoff is of
    order ``eps * estimate``) and decide whether the 80-bit path is needed.
    """
    est = 1.0
    blocks = [b for b in (small, large) if b is not None and b.k]
    for blk in blocks:
        for w, tab in zip(blk.weights, blk.group_tables):
            s = float(np.sum(np.abs(w)))
            if tab is not None:
                s *= float(np.max(np.abs(tab)))
            est *= s
    ks = small.k if small else 0
    kl = large.k if large else 0
    roots = _unit_roots(M)
    rms = lambda F: float(np.sqrt(np.mean(np.abs(F) ** 2)))
    if ks >= 2:
        est *= rms(f_matrix(small.radius * roots, small.radius * roots, params)) ** (
            ks * (ks - 1) // 2
        )
    if kl >= 2:
        est *= rms(f_matrix(large.radius * roots, large.radius * roots, params)) ** (
            kl * (kl - 1) // 2
        )
    if ks >= 1 and kl >= 1:
        est *= rms(f_matrix(small.radius * roots, large.radius * roots, params)) ** (ks * kl)
    return est


def _refine_loop(fn, dtype, M_start: int, max_M: int, tol_fn):
    prev = np.asarray(fn(M_start, dtype))
    M = 2 * M_start
    last = math.inf
    while M <= max_M:
        cur = np.asarray(fn(M, dtype))
        diff = float(np.max(np.abs(cur - prev)))
        if diff <= tol_fn(cur):
            return cur, diff, M, "converged"
        if diff > 0.5 * last:
            return cur, diff, M, "stalled"
        prev, last = cur, diff
        M *= 2
    return prev, last, M // 2, "budget"


def refine_vector(
    fn,
    M0: int,
    max_M: int,
    rel_tol: float,
    abs_tol: float,
    allow_longdouble: bool = True,
    accept_below: float = 0.0,
):
    """Double the node count of ``fn(M, dtype) -> ndarray`` until stable.

    Stalled improvement (change not halving per doubling) is read as a
    roundoff floor and triggers one escalation to the 80-bit path.  When the
    coarsest evaluation is already below ``accept_below`` it is accepted
    as-is (used to dismiss negligible series terms cheaply).  Returns
    ``(values, error_estimate, converged)``.
    """

    def tol_fn(cur):
        return max(abs_tol, rel_tol * float(np.max(np.abs(cur))))

    if accept_below > 0.0:
        first = np.asarray(fn(M0, np.complex128))
        scale = float(np.max(np.abs(first)))
        if scale < accept_below:
            return first, scale, True
    if max_M <= M0:
        first = np.asarray(fn(M0, np.complex128))
        return first, float(np.max(np.abs(first))), False
    cur, diff, M, status = _refine_loop(fn, np.complex128, M0, max_M, tol_fn)
    if status == "converged":
        return cur, diff, True
    if allow_longdouble:
        start = max(M0, M // 2)
        cur2, diff2, _, status2 = _refine_loop(fn, np.clongdouble, start, max_M, tol_fn)
        if status2 == "converged" or diff2 < diff:
            return cur2, diff2, status2 == "converged"
    return cur, diff, False


def assemble_moment(
    G2: np.ndarray,
    r: float,
    R: float,
    k_minus: int,
    k_plus: int,
    x: int,
    small_multiplier: np.ndarray | None = None,
) -> complex:
    """Evaluate the binned contraction with an extra ``prod_i xi_i^x``.

    ``small_multiplier``, when given, is a length-M vector applied on the
    small-block bin index (a factor diagonal in the small-block product,
    e.g. the joint-occupation multiplier ``1 - (1-rho) * prod_{i<0} xi_i``).
    """
    M = G2.shape[0]
    dtype = G2.dtype
    if dtype == np.clongdouble:
        theta = 2.0 * (x % M) * np.arange(M, dtype=np.longdouble) / np.longdouble(M)
        phase = (np.cos(np.pi * theta) + 1j * np.sin(np.pi * theta)).astype(np.clongdouble)
        scale = np.longdouble(r) ** (k_minus * x) * np.longdouble(R) ** (k_plus * x)
    else:
        phase = np.exp(2j * np.pi * (x % M) * np.arange(M) / M)
        scale = float(r) ** (k_minus * x) * float(R) ** (k_plus * x)
    left = phase if small_multiplier is None else phase * small_multiplier.astype(dtype)
    return complex(scale * np.sum(left[:, None] * G2 * phase[None, :]))
