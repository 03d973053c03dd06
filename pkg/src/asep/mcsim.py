"""Event-driven continuous-time simulation of the exclusion process.

Dynamics: every particle carries an independent rate-1 exponential clock;
when it rings the particle picks right with probability p, left with
probability q, and moves only if the target site is vacant and inside the
window (the window boundary acts as an occupied wall).  Blocked attempts
consume time but leave the state unchanged, which reproduces the same law as
the clock-restart description.

Trials are partitioned into fixed blocks; each block draws from its own
counter-based stream (Philox) derived from the master seed, so estimates are
bit-identical for any number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .errors import WindowTooSmall
from .kernel import BernoulliDensities, FiniteConfig, ModelParams

__all__ = [
    "LatticeWindow",
    "SimConfig",
    "McEstimate",
    "default_window",
    "sample_initial",
    "evolve",
    "evolve_clock_reference",
    "SimulationEnsemble",
    "estimate_site",
    "estimate_correlation",
    "estimate_flux",
    "estimate_mgf",
]

TRIAL_BLOCK = 4096


def light_cone_margin(t: float) -> int:
    """Sites a disturbance can plausibly cross by time t, plus slack."""
    return math.ceil(6.0 * t) + 20


@dataclass(frozen=True)
class LatticeWindow:
    """Closed interval of sites standing in for the infinite lattice."""

    left: int
    right: int

    def __post_init__(self):
        if not (self.left < 0 < self.right):
            raise ValueError(f"window must straddle 0, got [{self.left}, {self.right}]")

    @property
    def size(self) -> int:
        return self.right - self.left + 1

    def sites(self) -> np.ndarray:
        return np.arange(self.left, self.right + 1)

    def offset(self, x: int) -> int:
        return x - self.left

    def contains_safely(self, x: int, t: float) -> bool:
        m = light_cone_margin(t)
        return self.left + m <= x <= self.right - m


def default_window(xs, t: float, y: int = 0) -> LatticeWindow:
    """Window covering the light cone of every queried site (and the bond at 0/1)."""
    xs = list(xs)
    m = light_cone_margin(t)
    left = min(min(xs, default=0), 0, y) - m
    right = max(max(xs, default=1), 1, y) + m
    return LatticeWindow(left, right)


@dataclass(frozen=True)
class SimConfig:
    """Everything a reproducible ensemble needs."""

    window: LatticeWindow
    params: ModelParams
    densities: BernoulliDensities | None = None
    initial: FiniteConfig | None = None
    t_end: float = 1.0
    trials: int = 10_000
    master_seed: int = 0
    y: int = 0  # density-step location: rho_minus on sites <= y

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if (self.densities is None) == (self.initial is None):
            raise ValueError("exactly one of densities / initial must be given")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    trials: int


def _block_rng(master_seed: int, block: int) -> Generator:
    return Generator(Philox(SeedSequence(entropy=master_seed, spawn_key=(block,))))


def sample_initial(
    window: LatticeWindow, densities: BernoulliDensities, y: int, rng: Generator
) -> np.ndarray:
    """Independent Bernoulli occupancy: rho_minus on sites <= y, rho_plus above."""
    sites = window.sites()
    probs = np.where(sites <= y, densities.rho_minus, densities.rho_plus)
    return (rng.random(window.size) < probs).astype(np.int8)


def _config_occupancy(window: LatticeWindow, config: FiniteConfig) -> np.ndarray:
    occ = np.zeros(window.size, dtype=np.int8)
    for s in config.sites:
        if not (window.left <= s <= window.right):
            raise WindowTooSmall(f"site {s} outside window [{window.left}, {window.right}]")
        occ[window.offset(s)] = 1
    return occ


def evolve(
    state: np.ndarray,
    t_end: float,
    params: ModelParams,
    rng: Generator,
    t_start: float = 0.0,
    log: list | None = None,
):
    """Advance one occupancy vector to t_end; returns (state, executed jumps).

    The jump records are (time, source_offset, target_offset).  The state is
    modified in place and also returned.
    """
    n = int(state.sum())
    events = [] if log is None else log
    if n == 0:
        return state, events
    positions = np.flatnonzero(state)
    t = t_start
    size = state.shape[0]
    while True:
        t += rng.exponential(1.0 / n)
        if t >= t_end:
            break
        i = rng.integers(n)
        step = 1 if rng.random() < params.p else -1
        src = positions[i]
        tgt = src + step
        if 0 <= tgt < size and state[tgt] == 0:
            state[src] = 0
            state[tgt] = 1
            positions[i] = tgt
            events.append((t, int(src), int(tgt)))
    return state, events


def evolve_clock_reference(
    state: np.ndarray, t_end: float, params: ModelParams, rng: Generator
) -> np.ndarray:
    """Per-particle exponential-clock scheme, kept as a slow cross-check."""
    state = state.copy()
    size = state.shape[0]
    clocks = {int(s): rng.exponential() for s in np.flatnonzero(state)}
    while clocks:
        src = min(clocks, key=clocks.get)
        t = clocks[src]
        if t >= t_end:
            break
        step = 1 if rng.random() < params.p else -1
        tgt = src + step
        if 0 <= tgt < size and state[tgt] == 0:
            state[src] = 0
            state[tgt] = 1
            del clocks[src]
            clocks[tgt] = t + rng.exponential()
        else:
            clocks[src] = t + rng.exponential()
    return state


# ---------------------------------------------------------------------------
# vectorized ensembles
# ---------------------------------------------------------------------------

class _BlockResult:
    __slots__ = ("count", "initial", "snapshots", "flux")

    def __init__(self, count, initial, snapshots, flux):
        self.count = count
        self.initial = initial  # (count, size) int8
        self.snapshots = snapshots  # dict t -> (count, size) int8
        self.flux = flux  # dict t -> (count,) int32


def _run_block(config: SimConfig, block: int, count: int, snap_times: tuple[float, ...]):
    """Simulate `count` trials with the block's own stream; fully vectorized.

    Every iteration draws for all trials of the block (finished ones included)
    so the stream consumption is a pure function of the block inputs.
    """
    rng = _block_rng(config.master_seed, block)
    window = config.window
    size = window.size
    p = config.params.p

    if config.densities is not None:
        sites = window.sites()
        probs = np.where(sites <= config.y, config.densities.rho_minus, config.densities.rho_plus)
        occ = (rng.random((count, size)) < probs).astype(np.int8)
    else:
        occ = np.tile(_config_occupancy(window, config.initial), (count, 1))

    initial = occ.copy()
    nmax = int(occ.sum(axis=1).max(initial=0))
    # particle position table, padded with -1
    pos = np.full((count, max(nmax, 1)), -1, dtype=np.int32)
    nprt = occ.sum(axis=1).astype(np.int64)
    for i in range(count):
        w = np.flatnonzero(occ[i])
        pos[i, : w.size] = w

    t_now = np.zeros(count)
    q_net = np.zeros(count, dtype=np.int32)  # leftward crossings of bond (0,1)
    bond_right = window.offset(1)  # offset of site 1

    snaps: dict[float, np.ndarray] = {}
    fluxes: dict[float, np.ndarray] = {}
    snap_left = sorted(snap_times)
    recorded = np.zeros((len(snap_left), count), dtype=bool)

    trial_idx = np.arange(count)
    alive = nprt > 0
    t_now[~alive] = math.inf  # empty trials never move

    horizon = max(snap_left, default=0.0)
    while True:
        pending = t_now <= horizon
        if not pending.any():
            break
        # one event per trial; rate = particle count
        dt = rng.exponential(size=count) / np.maximum(nprt, 1)
        u_part = rng.random(count)
        u_dir = rng.random(count)
        t_next = t_now + dt

        # record snapshots crossed by this event interval
        for si, ts in enumerate(snap_left):
            hit = (~recorded[si]) & (t_now <= ts) & (t_next > ts) & np.isfinite(t_now)
            if hit.any():
                if ts not in snaps:
                    snaps[ts] = np.empty((count, size), dtype=np.int8)
                    fluxes[ts] = np.empty(count, dtype=np.int32)
                snaps[ts][hit] = occ[hit]
                fluxes[ts][hit] = q_net[hit]
                recorded[si] |= hit

        act = pending & np.isfinite(t_now)
        t_now = np.where(pending, t_next, t_now)
        if not act.any():
            continue
        k = (u_part * nprt).astype(np.int64)
        k = np.minimum(k, np.maximum(nprt - 1, 0))
        src = pos[trial_idx, k]
        step = np.where(u_dir < p, 1, -1)
        tgt = src + step
        ok = act & (tgt >= 0) & (tgt < size) & (src >= 0)
        ok &= occ[trial_idx, np.clip(tgt, 0, size - 1)] == 0
        if ok.any():
            occ[trial_idx[ok], src[ok]] = 0
            occ[trial_idx[ok], tgt[ok]] = 1
            pos[trial_idx[ok], k[ok]] = tgt[ok]
            crossing = ok & (src == bond_right) & (step == -1)
            q_net[crossing] += 1
            crossing = ok & (src == bond_right - 1) & (step == 1)
            q_net[crossing] -= 1

    # trials that never crossed a snapshot time (e.g. empty): state is final state
    for si, ts in enumerate(snap_left):
        rest = ~recorded[si]
        if rest.any():
            if ts not in snaps:
                snaps[ts] = np.empty((count, size), dtype=np.int8)
                fluxes[ts] = np.empty(count, dtype=np.int32)
            snaps[ts][rest] = occ[rest]
            fluxes[ts][rest] = q_net[rest]
    return _BlockResult(count, initial, snaps, fluxes)


class SimulationEnsemble:
    """Snapshot store for one SimConfig, reused across estimators.

    Runs all trial blocks (optionally on a thread pool sized by
    ``ASEP_NUM_THREADS``) and aggregates in fixed block order, so results do
    not depend on the thread count.
    """

    def __init__(self, config: SimConfig, snap_times: tuple[float, ...] | None = None):
        self.config = config
        times = tuple(sorted(set(snap_times if snap_times is not None else (config.t_end,))))
        for ts in times:
            if ts > config.t_end:
                raise ValueError(f"snapshot time {ts} beyond t_end={config.t_end}")
        self.snap_times = times
        self._run()

    def _run(self):
        cfg = self.config
        nblocks = (cfg.trials + TRIAL_BLOCK - 1) // TRIAL_BLOCK
        counts = [
            min(TRIAL_BLOCK, cfg.trials - b * TRIAL_BLOCK) for b in range(nblocks)
        ]
        workers = int(os.environ.get("ASEP_NUM_THREADS", "1") or 1)
        if workers > 1 and nblocks > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(
                    ex.map(
                        lambda b: _run_block(cfg, b, counts[b], self.snap_times),
                        range(nblocks),
                    )
                )
        else:
            results = [_run_block(cfg, b, counts[b], self.snap_times) for b in range(nblocks)]
        self.initial = np.concatenate([res.initial for res in results], axis=0)
        self.snapshots = {
            ts: np.concatenate([res.snapshots[ts] for res in results], axis=0)
            for ts in self.snap_times
        }
        self.flux = {
            ts: np.concatenate([res.flux[ts] for res in results], axis=0)
            for ts in self.snap_times
        }

    # -- estimators ---------------------------------------------------------

    def _check_site(self, x: int, t: float):
        if t not in self.snapshots:
            raise ValueError(f"time {t} was not recorded; have {self.snap_times}")
        if not self.config.window.contains_safely(x, t):
            raise WindowTooSmall(
                f"site {x} within light-cone margin of window "
                f"[{self.config.window.left}, {self.config.window.right}] at t={t}"
            )

    def site(self, x: int, t: float) -> McEstimate:
        self._check_site(x, t)
        vals = self.snapshots[t][:, self.config.window.offset(x)].astype(float)
        return _mc_estimate(vals)

    def correlation(self, x: int, t: float) -> McEstimate:
        self._check_site(x, t)
        joint = (
            self.snapshots[t][:, self.config.window.offset(x)]
            * self.initial[:, self.config.window.offset(0)]
        ).astype(float)
        return _mc_estimate(joint)

    def flux_tail(self, t: float, m: int) -> McEstimate:
        self._check_flux(t)
        vals = (self.flux[t] >= m).astype(float)
        return _mc_estimate(vals)

    def flux_mgf(self, t: float, lam: float) -> McEstimate:
        self._check_flux(t)
        vals = np.exp(lam * self.flux[t].astype(float))
        return _mc_estimate(vals)

    def flux_mean(self, t: float) -> McEstimate:
        self._check_flux(t)
        return _mc_estimate(self.flux[t].astype(float))

    def _check_flux(self, t: float):
        if t not in self.flux:
            raise ValueError(f"time {t} was not recorded; have {self.snap_times}")
        w = self.config.window
        if not (w.contains_safely(0, t) and w.contains_safely(1, t)):
            raise WindowTooSmall("bond (0,1) within light-cone margin of the window")


def _mc_estimate(vals: np.ndarray) -> McEstimate:
    n = vals.size
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1)) if n > 1 else 0.0
    return McEstimate(mean=mean, stderr=sd / math.sqrt(n), trials=n)


# module-level convenience wrappers (one-shot ensembles)

def estimate_site(config: SimConfig, x: int, t: float) -> McEstimate:
    return SimulationEnsemble(config, (t,)).site(x, t)


def estimate_correlation(config: SimConfig, x: int, t: float) -> McEstimate:
    return SimulationEnsemble(config, (t,)).correlation(x, t)


def estimate_flux(config: SimConfig, t: float, m_range) -> dict[int, McEstimate]:
    ens = SimulationEnsemble(config, (t,))
    return {int(m): ens.flux_tail(t, int(m)) for m in m_range}


def estimate_mgf(config: SimConfig, t: float, lambdas) -> list[McEstimate]:
    ens = SimulationEnsemble(config, (t,))
    return [ens.flux_mgf(t, float(l)) for l in lambdas]
