"""Model parameters, combinatorial weights, and scalar building blocks.

Everything here is a pure function of its arguments; the heavier contour
machinery in :mod:`asep.quad` and the series in :mod:`asep.finite` /
:mod:`asep.bernoulli` are assembled from these pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DenominatorAtPole

__all__ = [
    "ModelParams",
    "BernoulliDensities",
    "FiniteConfig",
    "IndexedSubset",
    "tau_binomial",
    "sigma",
    "epsilon",
    "f_factor",
    "f_matrix",
    "coeff_cmk",
]

#: Scale of the relative floor below which an interaction denominator is
#: treated as an effective pole (contour misconfiguration).
POLE_FLOOR_SCALE = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Hop rates of the process: right with rate ``p``, left with rate ``q``.

    ``q`` is stored implicitly as ``1 - p`` so that ``p + q == 1`` holds
    exactly.  Both rates must be nonzero, hence ``0 < p < 1``.
    """

    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"need 0 < p < 1 (both hop rates nonzero), got p={self.p}")

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def tau(self) -> float:
        """Rate ratio p/q.  Equals 1 exactly in the symmetric case p = 1/2."""
        return self.p / self.q

    @property
    def symmetric(self) -> bool:
        return self.p == 0.5


@dataclass(frozen=True)
class BernoulliDensities:
    """Initial occupation densities: ``rho_minus`` on sites <= 0, ``rho_plus`` on sites >= 1."""

    rho_minus: float
    rho_plus: float

    def __post_init__(self):
        for name in ("rho_minus", "rho_plus"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class FiniteConfig:
    """A deterministic finite initial configuration, split into a left and a right part.

    ``y_minus`` must lie strictly to the left of ``y_plus``; both halves are
    strictly increasing.  Flux computations additionally expect
    ``max(y_minus) <= 0 < min(y_plus)``.
    """

    y_minus: tuple[int, ...]
    y_plus: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "y_minus", tuple(int(y) for y in self.y_minus))
        object.__setattr__(self, "y_plus", tuple(int(y) for y in self.y_plus))
        for name in ("y_minus", "y_plus"):
            ys = getattr(self, name)
            if any(a >= b for a, b in zip(ys, ys[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {ys}")
        if self.y_minus and self.y_plus and self.y_minus[-1] >= self.y_plus[0]:
            raise ValueError(
                f"y_minus must lie strictly left of y_plus: {self.y_minus} vs {self.y_plus}"
            )

    @classmethod
    def from_sites(cls, sites: Iterable[int], split_at: int = 0) -> "FiniteConfig":
        """Split a plain site collection at ``split_at`` (left half: sites <= split_at)."""
        ss = sorted(int(s) for s in sites)
        return cls(
            y_minus=tuple(s for s in ss if s <= split_at),
            y_plus=tuple(s for s in ss if s > split_at),
        )

    @property
    def sites(self) -> tuple[int, ...]:
        return self.y_minus + self.y_plus

    def __len__(self) -> int:
        return len(self.y_minus) + len(self.y_plus)


@dataclass(frozen=True)
class IndexedSubset:
    """A subset of a :class:`FiniteConfig`, split the same way.

    Elements of ``s_minus`` carry the negative variable indices
    ``-k_minus .. -1`` (in increasing site order) and elements of ``s_plus``
    the positive indices ``1 .. k_plus``.
    """

    s_minus: tuple[int, ...] = field(default=())
    s_plus: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "s_minus", tuple(int(s) for s in self.s_minus))
        object.__setattr__(self, "s_plus", tuple(int(s) for s in self.s_plus))
        for name in ("s_minus", "s_plus"):
            ss = getattr(self, name)
            if any(a >= b for a, b in zip(ss, ss[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {ss}")

    def validate_within(self, config: FiniteConfig) -> None:
        if not set(self.s_minus) <= set(config.y_minus):
            raise ValueError(f"s_minus {self.s_minus} not a subset of {config.y_minus}")
        if not set(self.s_plus) <= set(config.y_plus):
            raise ValueError(f"s_plus {self.s_plus} not a subset of {config.y_plus}")

    @property
    def k_minus(self) -> int:
        return len(self.s_minus)

    @property
    def k_plus(self) -> int:
        return len(self.s_plus)

    @property
    def k(self) -> int:
        return self.k_minus + self.k_plus


def tau_binomial(N: int, n: int, tau: float) -> float:
    """Deformed binomial coefficient with deformation parameter ``tau``.

    Defined as the product ``(1-tau^N)(1-tau^(N-1))...(1-tau^(N-n+1)) /
    ((1-tau)(1-tau^2)...(1-tau^n))`` for n > 0, as 1 for n = 0 and as 0 for
    n < 0.  ``N`` may be any integer; at ``tau == 1`` the limit value (the
    ordinary, possibly generalized, binomial coefficient) is returned.

    The running-product form short-circuits the exact zeros that occur for
    0 <= N < n, which keeps the function finite and cancellation-free.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if n < 0:
        return 0.0
    if n == 0:
        return 1.0
    if tau == 1.0:
        out = 1.0
        for i in range(n):
            out *= (N - i) / (i + 1)
        return out
    out = 1.0
    for i in range(n):
        e = N - i
        if e == 0:
            return 0.0
        out *= (1.0 - tau**e) / (1.0 - tau ** (i + 1))
    return out


def sigma(U: Iterable[int], V: Iterable[int]) -> int:
    """Number of pairs (u, v) with u in U, v in V and u >= v."""
    vs = sorted(V)
    # count via binary search; small sets, but keep it O((|U|+|V|) log |V|)
    import bisect

    return sum(bisect.bisect_right(vs, u) for u in U)


def epsilon(xi, params: ModelParams):
    """Single-jump symbol p/xi + q*xi - 1 of the free-particle generator.

    Accepts scalars or arrays; ``xi`` must be nonzero.
    """
    xi = np.asarray(xi)
    if np.any(xi == 0):
        raise ValueError("epsilon undefined at xi = 0")
    out = params.p / xi + params.q * xi - 1.0
    return out if out.ndim else out[()]


def f_factor(xi_i, xi_j, params: ModelParams, pole_floor_scale: float = POLE_FLOOR_SCALE):
    """Pairwise interaction factor (xi_j - xi_i) / (p + q*xi_i*xi_j - xi_i).

    Raises :class:`DenominatorAtPole` when the denominator is below
    ``pole_floor_scale * (1 + |xi_i| |xi_j|)``, which indicates the two
    contour radii were chosen inadmissibly.
    """
    den = params.p + params.q * xi_i * xi_j - xi_i
    floor = pole_floor_scale * (1.0 + abs(xi_i) * abs(xi_j))
    if abs(den) < floor:
        raise DenominatorAtPole(
            f"f denominator {den!r} below floor {floor:g} at xi_i={xi_i!r}, xi_j={xi_j!r}"
        )
    return (xi_j - xi_i) / den


def f_matrix(
    nodes_i: np.ndarray,
    nodes_j: np.ndarray,
    params: ModelParams,
    pole_floor_scale: float = POLE_FLOOR_SCALE,
) -> np.ndarray:
    """Matrix F[a, b] = f(nodes_i[a], nodes_j[b]) with a vectorized pole check."""
    xi = nodes_i[:, None]
    xj = nodes_j[None, :]
    den = params.p + params.q * xi * xj - xi
    floor = pole_floor_scale * (1.0 + np.abs(xi) * np.abs(xj))
    bad = np.abs(den) < floor
    if np.any(bad):
        a, b = np.argwhere(bad)[0]
        raise DenominatorAtPole(
            f"f denominator below floor on node grid at xi_i={nodes_i[a]!r}, xi_j={nodes_j[b]!r}"
        )
    return (xj - xi) / den


def coeff_cmk(m: int, k: int, params: ModelParams) -> float:
    """Coefficient of the k-fold large-contour integral in the rank-m position law.

    ``(-1)^m q^{k(k-1)/2} tau^{m(m-1)/2 - k m} tbinom(k-1, m-1)``; vanishes
    for k < m.
    """
    if m < 1 or k < 1:
        raise ValueError(f"need m, k >= 1, got m={m}, k={k}")
    b = tau_binomial(k - 1, m - 1, params.tau)
    if b == 0.0:
        return 0.0
    sign = -1.0 if m % 2 else 1.0
    return (
        sign
        * params.q ** (k * (k - 1) // 2)
        * params.tau ** (m * (m - 1) / 2.0 - k * m)
        * b
    )
