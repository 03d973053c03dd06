"""Exact finite-state transient solver for small deterministic configurations.

States are n-particle subsets of a finite window, ranked combinadically; the
transient law is computed by uniformization (Poisson-weighted powers of the
discrete kernel) with a certified tail cut.  This module is the independent
ground truth against which the contour-integral formulas are checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .errors import InvalidRank, StateSpaceTooLarge
from .kernel import FiniteConfig, ModelParams
from .mcsim import LatticeWindow, light_cone_margin

__all__ = [
    "StateSpace",
    "Generator",
    "build_state_space",
    "build_generator",
    "transient_distribution",
    "oracle_site_prob",
    "oracle_mth_leq",
]

STATE_CAP = 2_000_000


@dataclass(frozen=True)
class StateSpace:
    """All n-subsets of the window's sites, in colex (combinadic) order."""

    window: LatticeWindow
    n: int
    states: np.ndarray  # (count, n) int32, site offsets 0..size-1, rows sorted

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def rank_of(self, offsets) -> int:
        """Colex rank of a sorted offset tuple."""
        return sum(math.comb(int(c), i + 1) for i, c in enumerate(sorted(offsets)))


@dataclass(frozen=True)
class Generator:
    """Sparse rate matrix over a StateSpace; rows sum to zero."""

    space: StateSpace
    Q: sp.csr_matrix
    uniformization_rate: float


def build_state_space(window: LatticeWindow, n: int, cap: int = STATE_CAP) -> StateSpace:
    size = window.size
    total = math.comb(size, n)
    if total > cap:
        raise StateSpaceTooLarge(f"C({size}, {n}) = {total} exceeds cap {cap}")
    if n == 0:
        states = np.zeros((1, 0), dtype=np.int32)
    else:
        states = np.fromiter(
            (c for combo in combinations(range(size), n) for c in combo),
            dtype=np.int32,
            count=total * n,
        ).reshape(total, n)
    # itertools.combinations is lex order on tuples; rank rows combinadically
    # to get a stable index in colex order
    order = np.argsort(_colex_ranks(states, size), kind="stable")
    return StateSpace(window=window, n=n, states=states[order])


def _colex_ranks(states: np.ndarray, size: int) -> np.ndarray:
    n = states.shape[1]
    comb_table = np.zeros((size + 2, n + 1), dtype=np.int64)
    for c in range(size + 2):
        for j in range(1, n + 1):
            comb_table[c, j] = math.comb(c, j) if c >= j else 0
    ranks = np.zeros(states.shape[0], dtype=np.int64)
    for i in range(n):
        ranks += comb_table[states[:, i], i + 1]
    return ranks


def build_generator(window: LatticeWindow, n: int, params: ModelParams) -> Generator:
    """Nearest-neighbor hops, rate p right / q left, excluded targets blocked.

    The window boundary blocks like an occupied site.
    """
    space = build_state_space(window, n)
    states = space.states
    size = window.size
    count = space.count
    if n == 0:
        Q = sp.csr_matrix((1, 1))
        return Generator(space=space, Q=Q, uniformization_rate=1.0)

    comb_table = np.zeros((size + 2, n + 1), dtype=np.int64)
    for c in range(size + 2):
        for j in range(1, n + 1):
            comb_table[c, j] = math.comb(c, j) if c >= j else 0
    ranks = np.zeros(count, dtype=np.int64)
    for i in range(n):
        ranks += comb_table[states[:, i], i + 1]
    pos_of_rank = np.empty(count, dtype=np.int64)
    pos_of_rank[ranks] = np.arange(count)

    rows, cols, vals = [], [], []
    for i in range(n):
        c = states[:, i]
        # rightward: target c+1 inside window and vacant
        free_r = c + 1 < size
        if i < n - 1:
            free_r &= states[:, i + 1] != c + 1
        idx = np.flatnonzero(free_r)
        new_rank = ranks[idx] - comb_table[c[idx], i + 1] + comb_table[c[idx] + 1, i + 1]
        rows.append(idx)
        cols.append(pos_of_rank[new_rank])
        vals.append(np.full(idx.size, params.p))
        # leftward: target c-1 inside window and vacant
        free_l = c - 1 >= 0
        if i > 0:
            free_l &= states[:, i - 1] != c - 1
        idx = np.flatnonzero(free_l)
        new_rank = ranks[idx] - comb_table[c[idx], i + 1] + comb_table[c[idx] - 1, i + 1]
        rows.append(idx)
        cols.append(pos_of_rank[new_rank])
        vals.append(np.full(idx.size, params.q))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(count, count)).tocsr()
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Generator(space=space, Q=Q.tocsr(), uniformization_rate=float(n))


def transient_distribution(
    gen: Generator, initial_index: int, t: float, tol: float = 1e-12
) -> np.ndarray:
    """Row of exp(Q t) from the initial state, to within `tol` in L1.

    Poisson-weighted powers of P = I + Q/rate; the cut keeps the neglected
    Poisson tail mass below tol, which bounds the total variation error.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    count = gen.space.count
    v = np.zeros(count)
    v[initial_index] = 1.0
    lam = gen.uniformization_rate * t
    if lam == 0:
        return v
    PT = (sp.identity(count, format="csr") + gen.Q / gen.uniformization_rate).T.tocsr()
    out = np.zeros(count)
    w = math.exp(-lam)
    cum = w
    out += w * v
    j = 0
    # certified: stop once the remaining Poisson mass is below tol
    while 1.0 - cum > tol:
        j += 1
        v = PT @ v
        w *= lam / j
        cum += w
        out += w * v
        if j > 1000 * (1 + lam):
            raise RuntimeError("uniformization failed to converge")
    return out


def _default_window(config: FiniteConfig, x: int, t: float) -> LatticeWindow:
    m = light_cone_margin(t)
    sites = config.sites
    left = min(min(sites), x, 0) - m
    right = max(max(sites), x, 1) + m
    return LatticeWindow(left, right)


def oracle_site_prob(
    config: FiniteConfig,
    x: int,
    t: float,
    params: ModelParams,
    window: LatticeWindow | None = None,
    tol: float = 1e-12,
) -> float:
    """Exact (to tol) occupation probability of site x at time t."""
    window = window or _default_window(config, x, t)
    gen = build_generator(window, len(config), params)
    init = gen.space.rank_of([window.offset(s) for s in config.sites])
    # rank order == row order by construction
    dist = transient_distribution(gen, init, t, tol)
    if len(config) == 0:
        return 0.0
    mask = (gen.space.states == window.offset(x)).any(axis=1)
    return float(dist[mask].sum())


def oracle_mth_leq(
    config: FiniteConfig,
    m: int,
    x: int,
    t: float,
    params: ModelParams,
    window: LatticeWindow | None = None,
    tol: float = 1e-12,
) -> float:
    """Exact (to tol) law P(position of the m-th particle from the left <= x)."""
    if m < 1:
        raise InvalidRank(f"particle rank must be >= 1, got {m}")
    if m > len(config):
        return 0.0
    window = window or _default_window(config, x, t)
    gen = build_generator(window, len(config), params)
    init = gen.space.rank_of([window.offset(s) for s in config.sites])
    dist = transient_distribution(gen, init, t, tol)
    mask = gen.space.states[:, m - 1] <= window.offset(x)
    return float(dist[mask].sum())
