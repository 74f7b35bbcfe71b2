"""Reaction networks with mass-action kinetics.

A network is a list of species and a list of reactions. Each reaction
carries forward reactant counts ``alpha`` and forward product counts
``beta``; the state-change vector of reaction ``r`` is
``gamma[r] = beta[r] - alpha[r]``. Arrays are laid out reaction-major, so
``gamma`` has shape ``(n_reactions, n_species)`` and the continuity map
reads ``rho = rho0 + gamma.T @ w``.

Reactions are tagged ``"slow"`` (reversible pair, rates of order one) or
``"fast"`` (one-way, rate of order ``V**2`` with jumps of size ``1/V**2``
in the stochastic model). For fast reactions the limit kinetics
``kappa_fw * rho**alpha`` is what enters the macroscopic equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import sympy

from fluxgrad.errors import InvalidConcentration, NotDetailedBalanced, ValidationError

SLOW = "slow"
FAST = "fast"
TIMESCALES = (SLOW, FAST)

DB_LOG_TOL = 1e-10
DB_CHECK_TOL = 1e-8


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Reaction:
    """One reaction ``alpha -> beta`` (and back, if ``kappa_bw > 0``).

    ``alpha`` and ``beta`` are integer count vectors indexed by the species
    of the owning network.
    """

    alpha: tuple[int, ...]
    beta: tuple[int, ...]
    kappa_fw: float
    kappa_bw: float = 0.0
    timescale: str = SLOW

    def __post_init__(self):
        problems = _reaction_problems(self.alpha, self.beta, self.kappa_fw, self.kappa_bw, self.timescale)
        if problems:
            raise ValidationError(problems)
        object.__setattr__(self, "alpha", tuple(int(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(int(b) for b in self.beta))
        object.__setattr__(self, "kappa_fw", float(self.kappa_fw))
        object.__setattr__(self, "kappa_bw", float(self.kappa_bw))

    @property
    def gamma(self) -> np.ndarray:
        return np.subtract(self.beta, self.alpha)

    @property
    def is_fast(self) -> bool:
        return self.timescale == FAST

    @classmethod
    def from_mapping(
        cls,
        species: Sequence[str],
        alpha: Mapping[str, int],
        beta: Mapping[str, int],
        kappa_fw: float,
        kappa_bw: float = 0.0,
        timescale: str = SLOW,
    ) -> "Reaction":
        """Build a reaction from ``{species: count}`` dictionaries."""
        index = {s: i for i, s in enumerate(species)}
        unknown = sorted(set(alpha) - set(index)) + sorted(set(beta) - set(index))
        if unknown:
            raise ValidationError([f"unknown species {u!r}" for u in unknown])
        a = [0] * len(species)
        b = [0] * len(species)
        for s, c in alpha.items():
            a[index[s]] = c
        for s, c in beta.items():
            b[index[s]] = c
        return cls(tuple(a), tuple(b), kappa_fw, kappa_bw, timescale)


def _is_count(x) -> bool:
    if isinstance(x, bool):
        return False
    if isinstance(x, (int, np.integer)):
        return x >= 0
    if isinstance(x, (float, np.floating)):
        return math.isfinite(x) and x >= 0 and float(x).is_integer()
    return False


def _reaction_problems(alpha, beta, kappa_fw, kappa_bw, timescale, label="reaction"):
    problems = []
    if len(alpha) != len(beta):
        problems.append(f"{label}: alpha and beta have different lengths")
    for name, vec in (("alpha", alpha), ("beta", beta)):
        if not all(_is_count(x) for x in vec):
            problems.append(f"{label}: {name} must hold nonnegative integers")
    for name, k in (("kappa_fw", kappa_fw), ("kappa_bw", kappa_bw)):
        if not isinstance(k, (int, float, np.integer, np.floating)) or isinstance(k, bool):
            problems.append(f"{label}: {name} must be a number")
        elif not math.isfinite(k) or k < 0:
            problems.append(f"{label}: {name} must be finite and >= 0, got {k}")
    if timescale not in TIMESCALES:
        problems.append(f"{label}: timescale must be one of {TIMESCALES}, got {timescale!r}")
    elif timescale == FAST and isinstance(kappa_bw, (int, float)) and kappa_bw != 0:
        problems.append(f"{label}: fast reactions are one-way, kappa_bw must be 0")
    return problems


class ReactionNetwork:
    """Immutable reaction network.

    Parameters
    ----------
    species : sequence of str
        Unique species identifiers; fixes the index order of all vectors.
    reactions : sequence of Reaction
        Their ``alpha``/``beta`` vectors must have ``len(species)`` entries.
    """

    def __init__(self, species: Sequence[str], reactions: Sequence[Reaction]):
        species = tuple(str(s) for s in species)
        problems = []
        if len(set(species)) != len(species):
            problems.append("species identifiers must be unique")
        if not species:
            problems.append("network needs at least one species")
        for i, r in enumerate(reactions):
            if len(r.alpha) != len(species):
                problems.append(f"reaction {i}: stoichiometry length {len(r.alpha)} != {len(species)} species")
        if problems:
            raise ValidationError(problems)
        self._species = species
        self._reactions = tuple(reactions)
        n_y = len(species)
        self._alpha = _readonly(np.array([r.alpha for r in reactions], dtype=np.int64).reshape(-1, n_y))
        self._beta = _readonly(np.array([r.beta for r in reactions], dtype=np.int64).reshape(-1, n_y))
        self._gamma = _readonly(self._beta - self._alpha)
        self._kappa_fw = _readonly(np.array([r.kappa_fw for r in reactions], dtype=float))
        self._kappa_bw = _readonly(np.array([r.kappa_bw for r in reactions], dtype=float))
        self._fast = _readonly(np.array([r.is_fast for r in reactions], dtype=bool))

    def __repr__(self):
        return f"ReactionNetwork(species={list(self._species)}, n_reactions={self.n_reactions})"

    def __eq__(self, other):
        if not isinstance(other, ReactionNetwork):
            return NotImplemented
        return self._species == other._species and self._reactions == other._reactions

    def __hash__(self):
        return hash((self._species, self._reactions))

    @property
    def species(self) -> tuple[str, ...]:
        return self._species

    @property
    def reactions(self) -> tuple[Reaction, ...]:
        return self._reactions

    @property
    def n_species(self) -> int:
        return len(self._species)

    @property
    def n_reactions(self) -> int:
        return len(self._reactions)

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha

    @property
    def beta(self) -> np.ndarray:
        return self._beta

    @property
    def gamma(self) -> np.ndarray:
        """State-change matrix, one row per reaction."""
        return self._gamma

    @property
    def kappa_fw(self) -> np.ndarray:
        return self._kappa_fw

    @property
    def kappa_bw(self) -> np.ndarray:
        return self._kappa_bw

    @property
    def fast(self) -> np.ndarray:
        """Boolean mask of fast reactions."""
        return self._fast

    @property
    def slow(self) -> np.ndarray:
        return ~self._fast

    @property
    def has_fast(self) -> bool:
        return bool(self._fast.any())

    def species_index(self, name: str) -> int:
        return self._species.index(name)

    def phi(self, rho0, w) -> np.ndarray:
        """Continuity map ``rho0 + gamma.T @ w``."""
        return np.asarray(rho0, dtype=float) + self._gamma.T @ np.asarray(w, dtype=float)

    def pullback(self, xi) -> np.ndarray:
        """Adjoint of the continuity map: ``(gamma @ xi)[r] = gamma_r . xi``."""
        return self._gamma @ np.asarray(xi, dtype=float)

    def conservation_laws(self, which: str = "all") -> np.ndarray:
        """Integer basis of the left null space of the stoichiometry.

        Rows ``m`` satisfy ``gamma[r] @ m == 0`` for every reaction in the
        selection (``"all"`` or ``"slow"``), so ``m @ rho`` is constant along
        the corresponding dynamics.
        """
        if which == "all":
            return self._laws_all
        if which == "slow":
            return self._laws_slow
        raise ValueError(f"which must be 'all' or 'slow', got {which!r}")

    @cached_property
    def _laws_all(self):
        return _readonly(integer_left_null_basis(self._gamma, self.n_species))

    @cached_property
    def _laws_slow(self):
        return _readonly(integer_left_null_basis(self._gamma[self.slow], self.n_species))

    def conserved_totals(self, rho0, which: str = "all") -> np.ndarray:
        """Per-class totals ``m @ rho0`` for each conservation law."""
        return self.conservation_laws(which) @ np.asarray(rho0, dtype=float)

    def to_spec(self) -> dict:
        """Canonical JSON-ready description (zero counts dropped)."""
        reactions = []
        for r in self._reactions:
            reactions.append(
                {
                    "alpha": {s: int(c) for s, c in zip(self._species, r.alpha) if c},
                    "beta": {s: int(c) for s, c in zip(self._species, r.beta) if c},
                    "kappa_fw": r.kappa_fw,
                    "kappa_bw": r.kappa_bw,
                    "timescale": r.timescale,
                }
            )
        return {"species": list(self._species), "reactions": reactions}

    @classmethod
    def from_spec(cls, spec: Mapping) -> "ReactionNetwork":
        species = list(spec["species"])
        reactions = []
        problems = []
        for i, r in enumerate(spec["reactions"]):
            try:
                reactions.append(
                    Reaction.from_mapping(
                        species,
                        r.get("alpha", {}),
                        r.get("beta", {}),
                        r["kappa_fw"],
                        r.get("kappa_bw", 0.0),
                        r.get("timescale", SLOW),
                    )
                )
            except ValidationError as exc:
                problems.extend(f"reaction {i}: {v}" for v in exc.violations)
        if problems:
            raise ValidationError(problems)
        return cls(species, reactions)


def integer_left_null_basis(gamma_rows: np.ndarray, n_species: int) -> np.ndarray:
    """Integer vectors ``m`` with ``gamma_rows @ m == 0``, exact arithmetic."""
    if gamma_rows.shape[0] == 0:
        return np.eye(n_species, dtype=np.int64)
    basis = sympy.Matrix(gamma_rows.tolist()).nullspace()
    out = []
    for v in basis:
        denom = sympy.ilcm(*[sympy.fraction(x)[1] for x in v])
        ints = [int(x * denom) for x in v]
        g = math.gcd(*ints)
        ints = [i // g for i in ints]
        # make the first nonzero entry positive
        lead = next(i for i in ints if i != 0)
        if lead < 0:
            ints = [-i for i in ints]
        out.append(ints)
    if not out:
        return np.zeros((0, n_species), dtype=np.int64)
    return np.array(out, dtype=np.int64)


def as_concentration(rho, n_species: int | None = None) -> np.ndarray:
    """Validate a concentration vector: finite, nonnegative, right length."""
    arr = np.asarray(rho, dtype=float)
    if arr.ndim != 1:
        raise InvalidConcentration(f"concentration must be a 1-d vector, got shape {arr.shape}")
    if n_species is not None and arr.shape[0] != n_species:
        raise InvalidConcentration(f"concentration has {arr.shape[0]} entries, network has {n_species} species")
    if not np.all(np.isfinite(arr)):
        raise InvalidConcentration("concentration has non-finite entries")
    if np.any(arr < 0):
        raise InvalidConcentration(f"concentration has negative entries: {arr}")
    return arr


def mass_action_rates(net: ReactionNetwork, rho) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward mass-action rates ``kappa * rho**alpha``.

    Returns two arrays of length ``n_reactions``. ``0**0 == 1``, so
    zeroth-order (source) reactions have constant rates.
    """
    rho = as_concentration(rho, net.n_species)
    k_fw = net.kappa_fw * np.prod(rho[None, :] ** net.alpha, axis=1)
    k_bw = net.kappa_bw * np.prod(rho[None, :] ** net.beta, axis=1)
    return k_fw, k_bw


def kinetic_flux(net: ReactionNetwork, rho) -> np.ndarray:
    """Macroscopic flux velocity: net rate for slow, limit rate for fast reactions."""
    k_fw, k_bw = mass_action_rates(net, rho)
    return k_fw - k_bw


def rre_rhs(net: ReactionNetwork, rho) -> np.ndarray:
    """Right-hand side of the reaction rate equation, ``gamma.T @ kinetic_flux``."""
    return net.gamma.T @ kinetic_flux(net, rho)


def find_detailed_balance(net: ReactionNetwork, rho0, tol: float = DB_LOG_TOL) -> np.ndarray:
    """Detailed-balanced equilibrium of the slow reactions in the class of ``rho0``.

    Solves ``gamma_slow @ log(rho*) = log(kappa_fw / kappa_bw)`` by least
    squares, then fixes the free directions (the slow conservation laws) by
    damped Newton on the convex dual of the class constraint
    ``M @ rho* = M @ rho0``.

    Raises
    ------
    NotDetailedBalanced
        If some slow reaction is one-way, the log-linear system is
        inconsistent, or the class has no strictly positive point.
    """
    rho0 = as_concentration(rho0, net.n_species)
    slow = net.slow
    kf, kb = net.kappa_fw[slow], net.kappa_bw[slow]
    if np.any(kf <= 0) or np.any(kb <= 0):
        raise NotDetailedBalanced("every slow reaction needs kappa_fw > 0 and kappa_bw > 0")
    G = net.gamma[slow].astype(float)
    c = np.log(kf) - np.log(kb)
    if G.shape[0]:
        u0, *_ = np.linalg.lstsq(G, c, rcond=None)
        resid = np.max(np.abs(G @ u0 - c))
        if resid > tol * max(1.0, np.max(np.abs(c))):
            raise NotDetailedBalanced(f"log-linear detailed-balance system is inconsistent (residual {resid:.3e})")
    else:
        u0 = np.zeros(net.n_species)
    M = net.conservation_laws("slow").astype(float)
    if M.shape[0] == 0:
        rho_star = np.exp(u0)
    else:
        if np.any(rho0 <= 0) and not _class_has_interior(M, rho0):
            raise NotDetailedBalanced("compatibility class has no strictly positive point (boundary equilibrium)")
        rho_star = _fit_class(u0, M, M @ rho0)
    _check_detailed_balance(net, rho_star)
    return rho_star


def _class_has_interior(M, rho0) -> bool:
    from scipy.optimize import linprog

    n = M.shape[1]
    # maximise t subject to M x = M rho0, x_y >= t, t <= 1
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    A_eq = np.hstack([M, np.zeros((M.shape[0], 1))])
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = linprog(
        cost,
        A_ub=A_ub,
        b_ub=np.zeros(n),
        A_eq=A_eq,
        b_eq=M @ rho0,
        bounds=[(0, None)] * n + [(None, 1.0)],
        method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-12)


def _fit_class(u0, M, totals, max_iter=500):
    def objective(mu):
        return np.sum(np.exp(u0 + M.T @ mu)) - mu @ totals

    mu = np.zeros(M.shape[0])
    scale = max(1.0, np.max(np.abs(totals)))
    for _ in range(max_iter):
        rho = np.exp(u0 + M.T @ mu)
        grad = M @ rho - totals
        if np.max(np.abs(grad)) <= 1e-14 * scale:
            return rho
        hess = (M * rho) @ M.T
        step = -np.linalg.solve(hess, grad)
        f0 = objective(mu)
        slope = grad @ step
        t = 1.0
        # near the optimum the Armijo test drowns in round-off; Newton is exact there
        if np.max(np.abs(grad)) > 1e-6 * scale:
            while objective(mu + t * step) > f0 + 0.25 * t * slope and t > 1e-12:
                t *= 0.5
        mu = mu + t * step
        if t * np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(mu))):
            rho = np.exp(u0 + M.T @ mu)
            if np.max(np.abs(M @ rho - totals)) <= 1e-10 * scale:
                return rho
            break
    raise NotDetailedBalanced("class projection did not converge (equilibrium on the boundary?)")


def _check_detailed_balance(net, rho_star):
    if np.any(rho_star <= 0) or not np.all(np.isfinite(rho_star)):
        raise NotDetailedBalanced("detailed-balance point is not strictly positive")
    slow = net.slow
    log_rho = np.log(rho_star)
    lhs = np.log(net.kappa_fw[slow]) + net.alpha[slow] @ log_rho
    rhs = np.log(net.kappa_bw[slow]) + net.beta[slow] @ log_rho
    if lhs.size and np.max(np.abs(lhs - rhs)) > DB_CHECK_TOL:
        raise NotDetailedBalanced(f"detailed balance violated by {np.max(np.abs(lhs - rhs)):.3e}")


def is_detailed_balanced(net: ReactionNetwork, rho0=None) -> bool:
    """True if the slow subnetwork admits a positive detailed-balance point."""
    if rho0 is None:
        rho0 = np.ones(net.n_species)
    try:
        find_detailed_balance(net, rho0)
    except NotDetailedBalanced:
        return False
    return True
