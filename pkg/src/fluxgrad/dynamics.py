"""Finite-volume jump process on flux space and its macroscopic limit.

The stochastic model tracks integrated reaction fluxes: the net number of
slow reaction events divided by ``V`` and the number of fast reaction
events divided by ``V**2``. States follow from the continuity map
``rho = rho0 + gamma.T @ w``. All bookkeeping in :func:`simulate_ssa` is in
integers, so the continuity identity holds exactly at every sample.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.special import gammaln, xlogy

from fluxgrad.errors import ExplosionGuard, InsufficientParticles, ToleranceFailure
from fluxgrad.network import ReactionNetwork, as_concentration, kinetic_flux

DEFAULT_MAX_EVENTS = 10**8
_RANDOM_BLOCK = 1 << 16

_DONE, _NEED_RANDOM, _EXPLODED = 0, 1, 2


@dataclass(frozen=True)
class JumpProcessConfig:
    """Parameters of one stochastic run.

    ``record_grid`` defaults to 101 equally spaced times on ``[0, t_end]``.
    """

    volume: int
    t_end: float
    seed: int = 0
    record_grid: np.ndarray | None = None
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        if isinstance(self.volume, bool) or int(self.volume) != self.volume or self.volume < 1:
            raise ValueError(f"volume must be a positive integer, got {self.volume!r}")
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise ValueError(f"t_end must be positive and finite, got {self.t_end!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        grid = self.record_grid
        if grid is None:
            grid = np.linspace(0.0, self.t_end, 101)
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("record_grid must be a nonempty 1-d array")
        if np.any(np.diff(grid) < 0) or grid[0] < 0 or grid[-1] > self.t_end:
            raise ValueError("record_grid must be sorted and lie within [0, t_end]")
        grid.setflags(write=False)
        object.__setattr__(self, "record_grid", grid)
        object.__setattr__(self, "volume", int(self.volume))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class FluxVector:
    """Integrated fluxes split into slow (net) and fast (one-way) parts."""

    slow: np.ndarray
    fast: np.ndarray

    def __post_init__(self):
        slow = np.asarray(self.slow, dtype=float)
        fast = np.asarray(self.fast, dtype=float)
        if not (np.all(np.isfinite(slow)) and np.all(np.isfinite(fast))):
            raise ValueError("flux entries must be finite")
        if np.any(fast < 0):
            raise ValueError("fast fluxes count one-way events and must be >= 0")
        object.__setattr__(self, "slow", slow)
        object.__setattr__(self, "fast", fast)

    @classmethod
    def from_full(cls, net: ReactionNetwork, w) -> "FluxVector":
        w = np.asarray(w, dtype=float)
        return cls(w[net.slow], w[net.fast])

    def full(self, net: ReactionNetwork) -> np.ndarray:
        w = np.zeros(net.n_reactions)
        w[net.slow] = self.slow
        w[net.fast] = self.fast
        return w


@dataclass
class Trajectory:
    """Sampled path of states and integrated fluxes.

    ``fluxes`` has one column per reaction in network order; use
    :attr:`slow_fluxes` / :attr:`fast_fluxes` for the split view. Stochastic
    trajectories also carry the exact integer counts: ``state_counts`` is
    ``rho * unit`` and ``flux_counts`` the raw event tallies (net for slow,
    one-way for fast reactions).
    """

    net: ReactionNetwork
    times: np.ndarray
    states: np.ndarray
    fluxes: np.ndarray
    volume: int | None = None
    unit: int | None = None
    state_counts: np.ndarray | None = None
    flux_counts: np.ndarray | None = None
    interpolant: Callable | None = field(default=None, repr=False)

    @property
    def slow_fluxes(self) -> np.ndarray:
        return self.fluxes[:, self.net.slow]

    @property
    def fast_fluxes(self) -> np.ndarray:
        return self.fluxes[:, self.net.fast]

    def flux_vector(self, k: int) -> FluxVector:
        return FluxVector.from_full(self.net, self.fluxes[k])


def _state_unit(net: ReactionNetwork, volume: int) -> int:
    return volume * volume if net.has_fast else volume


def _falling_factorial(x: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """``prod_y x_y (x_y - 1) ... (x_y - p_y + 1)`` per row of ``powers``, clipped at 0."""
    out = np.ones(powers.shape[0])
    for r in range(powers.shape[0]):
        for y in range(powers.shape[1]):
            for i in range(int(powers[r, y])):
                out[r] *= max(x[y] - i, 0.0)
    return out


def propensities(net: ReactionNetwork, rho, volume: int) -> tuple[np.ndarray, np.ndarray]:
    """Jump rates of the finite-volume process at concentration ``rho``.

    Slow reactions: ``kappa * V**(1 - order) * (rho V)! / (rho V - alpha)!``.
    Fast reactions carry an extra factor ``V`` so that ``V**-2`` times the
    rate tends to the limit kinetics. Reactions lacking reactant particles
    get rate zero.
    """
    rho = as_concentration(rho, net.n_species)
    unit = _state_unit(net, volume)
    counts = rho * unit
    if np.max(np.abs(counts - np.round(counts)), initial=0.0) > 1e-8 * max(1.0, np.max(counts)):
        raise InsufficientParticles(f"rho * {unit} must be integer-valued, got {counts}")
    x = rho * volume
    order_fw = net.alpha.sum(axis=1)
    order_bw = net.beta.sum(axis=1)
    lift = np.where(net.fast, 2.0, 1.0)
    lam_fw = net.kappa_fw * float(volume) ** (lift - order_fw) * _falling_factorial(x, net.alpha)
    lam_bw = net.kappa_bw * float(volume) ** (1.0 - order_bw) * _falling_factorial(x, net.beta)
    lam_bw[net.fast] = 0.0
    return lam_fw, lam_bw


@njit(cache=True, nogil=True)
def _ssa_kernel(m, fc, t, t_end, rec_times, rec_i, out_m, out_f, reac, coef, delta, fidx, fstep, xscale,
                uniforms, max_events, events):
    n_ch, n_y = reac.shape
    n_rec = rec_times.shape[0]
    a = np.empty(n_ch)
    ui = 0
    n_u = uniforms.shape[0]
    while True:
        if ui + 2 > n_u:
            return _NEED_RANDOM, t, rec_i, events
        a0 = 0.0
        for c in range(n_ch):
            p = coef[c]
            for y in range(n_y):
                x = m[y] * xscale
                for i in range(reac[c, y]):
                    v = x - i
                    if v < 0.0:
                        v = 0.0
                    p *= v
            a[c] = p
            a0 += p
        if a0 <= 0.0:
            t_new = np.inf
        else:
            t_new = t - np.log(1.0 - uniforms[ui]) / a0
        while rec_i < n_rec and rec_times[rec_i] < t_new:
            out_m[rec_i, :] = m
            out_f[rec_i, :] = fc
            rec_i += 1
        if t_new > t_end:
            return _DONE, t_end, rec_i, events
        target = uniforms[ui + 1] * a0
        ui += 2
        chosen = -1
        acc = 0.0
        for c in range(n_ch):
            if a[c] > 0.0:
                chosen = c
                acc += a[c]
                if acc > target:
                    break
        for y in range(n_y):
            m[y] += delta[chosen, y]
        fc[fidx[chosen]] += fstep[chosen]
        events += 1
        if events > max_events:
            return _EXPLODED, t_new, rec_i, events
        t = t_new


def _channels(net: ReactionNetwork, volume: int):
    unit = _state_unit(net, volume)
    reac, coef, delta, fidx, fstep = [], [], [], [], []
    V = float(volume)
    for r, reaction in enumerate(net.reactions):
        g = net.gamma[r]
        if reaction.is_fast:
            reac.append(net.alpha[r])
            coef.append(reaction.kappa_fw * V ** (2 - net.alpha[r].sum()))
            delta.append(g * (unit // (volume * volume)))
            fidx.append(r)
            fstep.append(1)
            continue
        step = unit // volume
        reac.append(net.alpha[r])
        coef.append(reaction.kappa_fw * V ** (1 - net.alpha[r].sum()))
        delta.append(g * step)
        fidx.append(r)
        fstep.append(1)
        reac.append(net.beta[r])
        coef.append(reaction.kappa_bw * V ** (1 - net.beta[r].sum()))
        delta.append(-g * step)
        fidx.append(r)
        fstep.append(-1)
    n_y = net.n_species
    return (
        np.array(reac, dtype=np.int64).reshape(-1, n_y),
        np.array(coef, dtype=float),
        np.array(delta, dtype=np.int64).reshape(-1, n_y),
        np.array(fidx, dtype=np.int64),
        np.array(fstep, dtype=np.int64),
    )


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based stream for one replicate, independent of run order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(replicate,))))


def simulate_ssa(net: ReactionNetwork, rho0, config: JumpProcessConfig, replicate: int = 0) -> Trajectory:
    """Exact stochastic simulation (Gillespie direct method) on flux space.

    Slow events move the net flux by ``+-1/V`` and the state by
    ``+-gamma_r/V``; fast events move the fast flux by ``1/V**2`` and the
    state by ``gamma_r/V**2``. Fluxes start at zero.

    Raises
    ------
    InsufficientParticles
        If ``rho0`` does not correspond to an integer particle
        configuration.
    ExplosionGuard
        If more than ``config.max_events`` events occur.
    """
    rho0 = as_concentration(rho0, net.n_species)
    V = config.volume
    unit = _state_unit(net, V)
    counts0 = rho0 * unit
    rounded = np.round(counts0)
    if np.max(np.abs(counts0 - rounded), initial=0.0) > 1e-8 * max(1.0, np.max(counts0)):
        raise InsufficientParticles(f"rho0 * {unit} must be integer-valued, got {counts0}")
    m = rounded.astype(np.int64)
    fc = np.zeros(net.n_reactions, dtype=np.int64)
    m0 = m.copy()
    reac, coef, delta, fidx, fstep = _channels(net, V)
    rec_times = np.ascontiguousarray(config.record_grid)
    n_rec = rec_times.size
    out_m = np.empty((n_rec, net.n_species), dtype=np.int64)
    out_f = np.empty((n_rec, net.n_reactions), dtype=np.int64)
    rng = replicate_rng(config.seed, replicate)
    t, rec_i, events = 0.0, 0, 0
    while True:
        uniforms = rng.random(_RANDOM_BLOCK)
        status, t, rec_i, events = _ssa_kernel(
            m, fc, t, float(config.t_end), rec_times, rec_i, out_m, out_f, reac, coef, delta, fidx, fstep,
            V / unit, uniforms, int(config.max_events), events,
        )
        if status == _DONE:
            break
        if status == _EXPLODED:
            raise ExplosionGuard(f"event cap {config.max_events} exceeded at t={t:.6g}")
    flux_scale = np.where(net.fast, 1.0 / (V * V), 1.0 / V)
    assert np.all(out_m - m0 == (out_f * (unit // np.where(net.fast, V * V, V))) @ net.gamma)
    return Trajectory(
        net=net,
        times=rec_times.copy(),
        states=out_m / unit,
        fluxes=out_f * flux_scale,
        volume=V,
        unit=unit,
        state_counts=out_m,
        flux_counts=out_f,
    )


def _worker_count(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("FLUXGRAD_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def simulate_ensemble(
    net: ReactionNetwork, rho0, config: JumpProcessConfig, replicates: int, threads: int | None = None
) -> list[Trajectory]:
    """Independent replicates ``0..replicates-1``, returned in replicate order.

    ``threads`` defaults to ``FLUXGRAD_THREADS`` (or the CPU count). The
    result does not depend on the number of threads.
    """
    workers = min(_worker_count(threads), max(1, replicates))
    if workers == 1:
        return [simulate_ssa(net, rho0, config, k) for k in range(replicates)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: simulate_ssa(net, rho0, config, k), range(replicates)))


def invariant_distribution_logprob(net: ReactionNetwork, rho_star, rho, volume: int) -> float:
    """Log of the product-Poisson invariant law at ``rho``.

    ``sum_y V rho_y log(V rho*_y) - log((V rho_y)!) - V rho*_y``, which is the
    stationary law of a detailed-balanced network on the whole lattice; the
    law on one compatibility class is this one conditioned on the class.
    """
    rho_star = as_concentration(rho_star, net.n_species)
    rho = as_concentration(rho, net.n_species)
    n = volume * rho
    if np.max(np.abs(n - np.round(n))) > 1e-8 * max(1.0, np.max(n)):
        raise InsufficientParticles("V * rho must be integer-valued")
    n = np.round(n)
    lam = volume * rho_star
    return float(np.sum(xlogy(n, lam) - gammaln(n + 1.0) - lam))


# Dormand-Prince 5(4) coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class HermiteInterpolant:
    """Piecewise cubic Hermite interpolant through accepted ODE steps."""

    def __init__(self, ts, ys, fs):
        self.ts = np.asarray(ts)
        self.ys = np.asarray(ys)
        self.fs = np.asarray(fs)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        i = np.clip(np.searchsorted(self.ts, t, side="right") - 1, 0, len(self.ts) - 2)
        t0, t1 = self.ts[i], self.ts[i + 1]
        h = (t1 - t0)[:, None]
        s = ((t - t0) / (t1 - t0))[:, None]
        y0, y1, f0, f1 = self.ys[i], self.ys[i + 1], self.fs[i], self.fs[i + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        out = h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
        return out[0] if scalar else out


def _dopri(fun, y0, t_eval, rtol, atol, admissible):
    t = 0.0
    y = np.array(y0, dtype=float)
    f = fun(t, y)
    ts, ys, fs = [t], [y.copy()], [f.copy()]
    out = [y.copy()] if t_eval[0] == 0.0 else []
    targets = [te for te in t_eval if te > 0.0]
    scale = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f / scale) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    k = np.empty((7, y.size))
    for target in targets:
        while t < target:
            h = min(h, target - t)
            if h <= 16 * np.finfo(float).eps * max(1.0, abs(t)):
                raise ToleranceFailure(f"step size underflow at t={t:.6g}")
            k[0] = f
            for s in range(1, 7):
                k[s] = fun(t + _C[s] * h, y + h * (np.array(_A[s]) @ k[:s]))
            y_new = y + h * (_B5[:6] @ k[:6])
            err_vec = h * (_E @ k)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.sqrt(np.mean((err_vec / scale) ** 2))
            if not admissible(y_new):
                h *= 0.5
                continue
            if err <= 1.0:
                t_next = target if target - t - h <= 1e-14 * max(1.0, target) else t + h
                t, y, f = t_next, y_new, k[6].copy()
                ts.append(t)
                ys.append(y.copy())
                fs.append(f.copy())
                factor = 5.0 if err == 0 else min(5.0, 0.9 * err ** (-0.2))
            else:
                factor = max(0.2, 0.9 * err ** (-0.2))
            h *= factor
        out.append(y.copy())
    return np.array(out), HermiteInterpolant(ts, ys, fs)


def integrate_rre(
    net: ReactionNetwork,
    rho0,
    t_end: float,
    t_eval: Sequence[float] | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> Trajectory:
    """Integrate the macroscopic flux equations ``dw/dt = k(rho0 + gamma.T w)``.

    Explicit adaptive Dormand-Prince 5(4). Steps landing outside the
    nonnegative orthant are rejected and retried with half the step size.
    The returned trajectory carries a cubic Hermite ``interpolant`` for
    ``w(t)``.

    Raises
    ------
    ToleranceFailure
        On step size underflow.
    """
    rho0 = as_concentration(rho0, net.n_species)
    if t_eval is None:
        t_eval = np.linspace(0.0, t_end, 101)
    t_eval = np.asarray(t_eval, dtype=float)
    if np.any(np.diff(t_eval) < 0) or t_eval[0] < 0 or t_eval[-1] > t_end:
        raise ValueError("t_eval must be sorted within [0, t_end]")
    floor = -1e-14 * max(1.0, float(np.max(rho0)))

    def fun(_t, w):
        return kinetic_flux(net, np.maximum(net.phi(rho0, w), 0.0))

    def admissible(w):
        return bool(np.all(net.phi(rho0, w) >= floor))

    grid = t_eval if t_eval[-1] == t_end else np.append(t_eval, t_end)
    w, interp = _dopri(fun, np.zeros(net.n_reactions), grid, rtol, atol, admissible)
    w = w[: t_eval.size]
    states = rho0[None, :] + w @ net.gamma
    return Trajectory(net=net, times=t_eval.copy(), states=states, fluxes=w, interpolant=interp)
