"""Free energies, dissipation potentials and numerical structure checks.

The checkers sample points ``w`` in flux space and test the defining
identities of a generalized gradient system (GGS), a pre-GENERIC system
with drift (pGGEN) and the non-interaction conditions of GENERIC. Each
check produces a :class:`StructureReport`; nothing is raised for a failed
identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from fluxgrad.dynamics import integrate_rre
from fluxgrad.ldp import FAST_FLUX_TOL, cosh_star, flux_H, flux_L, flux_state
from fluxgrad.network import ReactionNetwork, as_concentration, find_detailed_balance, mass_action_rates

FD_STEP = 1e-5
SAMPLE_MARGIN = 1e-3
NIC_SHIFTS = (-1.0, 0.5, 2.0)


def relative_entropy(rho, rho_star) -> float:
    """``sum rho log(rho/rho*) - rho + rho*`` with ``0 log 0 = 0``.

    Returns ``inf`` if some ``rho_y > 0`` where ``rho*_y = 0``.
    """
    rho = as_concentration(rho)
    rho_star = as_concentration(rho_star, rho.size)
    if np.any((rho > 0) & (rho_star <= 0)):
        return math.inf
    pos = rho > 0
    terms = rho_star.copy()
    terms[pos] = rho[pos] * (np.log(rho[pos]) - np.log(rho_star[pos])) - rho[pos] + rho_star[pos]
    return float(np.sum(terms))


@dataclass(frozen=True)
class FreeEnergy:
    """``F(w) = 1/2 h(phi[w] | rho_star)`` on flux space."""

    net: ReactionNetwork
    rho0: np.ndarray
    rho_star: np.ndarray
    scale: float = 0.5

    def of_state(self, rho) -> float:
        return self.scale * relative_entropy(rho, self.rho_star)

    def __call__(self, w) -> float:
        return self.of_state(flux_state(self.net, w, self.rho0))

    def state_gradient(self, rho) -> np.ndarray:
        return self.scale * np.log(np.asarray(rho, dtype=float) / self.rho_star)

    def gradient(self, w) -> np.ndarray:
        """Exact ``dF(w)``: the state-space gradient pulled back through ``gamma``."""
        return self.net.pullback(self.state_gradient(flux_state(self.net, w, self.rho0)))


@dataclass(frozen=True)
class DissipationPotentialPair:
    """Dual dissipation potentials on flux space.

    ``psi_star(w, zeta)`` and ``psi(w, j)`` take full per-reaction vectors;
    ``psi`` returns ``inf`` outside its domain.
    """

    psi_star: Callable[[np.ndarray, np.ndarray], float]
    psi: Callable[[np.ndarray, np.ndarray], float]
    form: str


def reaction_mobility(net: ReactionNetwork, rho) -> np.ndarray:
    """``sigma_r = 2 sqrt(k_fw k_bw)`` for slow reactions (fast entries are 0)."""
    k_fw, k_bw = mass_action_rates(net, rho)
    sigma = 2.0 * np.sqrt(k_fw * k_bw)
    sigma[net.fast] = 0.0
    return sigma


def cosh_dissipation(net: ReactionNetwork, rho0) -> DissipationPotentialPair:
    """``Psi*(w, zeta) = sum sigma (cosh zeta - 1)`` over slow reactions and its conjugate.

    ``Psi`` is ``sum sigma (cosh*(j/sigma) + 1)`` on slow fluxes plus the
    indicator of vanishing fast flux. Reactions with ``sigma = 0`` only
    admit zero flux.
    """
    rho0 = as_concentration(rho0, net.n_species)
    slow, fast = net.slow, net.fast

    def psi_star(w, zeta):
        sigma = reaction_mobility(net, flux_state(net, w, rho0))[slow]
        z = np.asarray(zeta, dtype=float)[slow]
        return float(np.sum(sigma * (np.cosh(z) - 1.0)))

    def psi(w, j):
        sigma = reaction_mobility(net, flux_state(net, w, rho0))[slow]
        j = np.asarray(j, dtype=float)
        if np.any(np.abs(j[fast]) > FAST_FLUX_TOL):
            return math.inf
        js = j[slow]
        if np.any((sigma <= 0) & (js != 0)):
            return math.inf
        pos = sigma > 0
        return float(np.sum(sigma[pos] * (cosh_star(js[pos] / sigma[pos]) + 1.0)))

    return DissipationPotentialPair(psi_star=psi_star, psi=psi, form="cosh")


def build_cosh_ggs(net: ReactionNetwork, rho0) -> tuple[FreeEnergy, DissipationPotentialPair]:
    """Free energy and cosh dissipation pair induced by detailed balance.

    Raises
    ------
    NotDetailedBalanced
        If the slow subnetwork has no positive detailed-balance point.
    """
    rho0 = as_concentration(rho0, net.n_species)
    rho_star = find_detailed_balance(net, rho0)
    return FreeEnergy(net, rho0, rho_star), cosh_dissipation(net, rho0)


def fast_drift(net: ReactionNetwork, w, rho0) -> np.ndarray:
    """Drift ``b(w)``: zero on slow coordinates, limit rate on fast ones."""
    k_fw, _ = mass_action_rates(net, flux_state(net, w, rho0))
    b = np.zeros(net.n_reactions)
    b[net.fast] = k_fw[net.fast]
    return b


@dataclass
class ConditionResult:
    name: str
    residual: float
    tolerance: float
    passed: bool
    witness: list | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "witness": self.witness,
        }


@dataclass
class StructureReport:
    """Per-condition verdicts; ``overall`` holds iff every condition passes."""

    structure: str
    conditions: list[ConditionResult] = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.conditions)

    def condition(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "overall": self.overall,
            "conditions": [c.to_dict() for c in sorted(self.conditions, key=lambda c: c.name)],
        }


class _Tracker:
    """Accumulates the worst residual of one condition over the samples."""

    def __init__(self, name, tol):
        self.name, self.tol = name, tol
        self.residual = 0.0
        self.witness = None

    def update(self, residual, w):
        residual = float(residual)
        if math.isnan(residual):
            residual = math.inf
        if self.witness is None or residual > self.residual:
            self.residual, self.witness = residual, [float(x) for x in w]

    def result(self) -> ConditionResult:
        return ConditionResult(self.name, self.residual, self.tol, self.residual <= self.tol, self.witness)


def central_gradient(f: Callable[[np.ndarray], float], x, coords=None, h: float = FD_STEP, richardson: bool = False):
    """Central-difference gradient over ``coords``; optional Richardson extrapolation."""
    x = np.asarray(x, dtype=float)
    coords = range(x.size) if coords is None else coords
    out = np.zeros(x.size)

    def diff(i, step):
        e = np.zeros(x.size)
        e[i] = step
        return (f(x + e) - f(x - e)) / (2 * step)

    for i in coords:
        d = diff(i, h)
        if richardson:
            d = (4.0 * diff(i, h / 2) - d) / 3.0
        out[i] = d
    return out


def _fd_with_fallback(f, x, target, coords, tol):
    """Gradient minus target; retries with Richardson extrapolation when above ``tol``."""
    coords = list(coords)
    if not coords:
        return 0.0
    g = central_gradient(f, x, coords)
    res = float(np.max(np.abs(g[coords] - target[coords])))
    if res > tol:
        g = central_gradient(f, x, coords, richardson=True)
        res = min(res, float(np.max(np.abs(g[coords] - target[coords]))))
    return res


def sample_flux_points(net: ReactionNetwork, rho0, samples: int, seed: int = 0, margin: float = SAMPLE_MARGIN):
    """Uniform points in a flux box whose states keep every entry ``>= margin``.

    The box half-width is a quarter of the largest initial concentration;
    fast coordinates are sampled nonnegative.
    """
    rho0 = as_concentration(rho0, net.n_species)
    rng = np.random.default_rng(seed)
    half = 0.25 * max(float(np.max(rho0)), 1e-12)
    lo = np.where(net.fast, 0.0, -half)
    points = []
    attempts = 0
    while len(points) < samples and attempts < 1000 * max(1, samples):
        attempts += 1
        w = rng.uniform(lo, half)
        if np.min(net.phi(rho0, w)) >= margin:
            points.append(w)
    if len(points) < samples:
        if np.min(rho0) < margin:
            raise ValueError("could not sample flux points with states away from the boundary")
        points += [np.zeros(net.n_reactions)] * (samples - len(points))
    return points


def _check_gradient_structure(net, rho0, F, pair, samples, tol, seed, drift, report):
    slow_idx = np.flatnonzero(net.slow)
    rng = np.random.default_rng(seed + 1)
    flux_scale = max(1.0, float(np.max(np.abs(mass_action_rates(net, rho0)[0]))))
    suffix = "" if drift is None else "shifted_"
    dec = _Tracker(f"{suffix}decomposition", tol)
    flow = _Tracker("flux_at_force" if drift is None else "drift_identity", tol)
    force = _Tracker("force_at_zero_flux", tol)
    recon = _Tracker("dual_reconstruction", tol)
    for w in sample_flux_points(net, rho0, samples, seed):
        b = fast_drift(net, w, rho0) if drift is not None else np.zeros(net.n_reactions)
        dF = central_gradient(F, w)
        j = b.copy()
        j[slow_idx] = rng.normal(scale=flux_scale, size=slow_idx.size)
        lval = flux_L(net, w, rho0, j)
        decomposition = pair.psi(w, j - b) + pair.psi_star(w, -dF) + float(dF @ j)
        if lval.finite and math.isfinite(decomposition):
            dec.update(abs(lval.value - decomposition), w)
        elif lval.finite != math.isfinite(decomposition):
            dec.update(math.inf, w)

        def ham(z, w=w):
            return flux_H(net, w, rho0, z)

        flow.update(_fd_with_fallback(ham, dF, b, range(net.n_reactions), tol), w)

        def lag(jj, w=w):
            ev = flux_L(net, w, rho0, jj)
            return ev.value if ev.finite else math.inf

        force.update(_fd_with_fallback(lag, b, dF, slow_idx, tol), w)

        zeta = np.zeros(net.n_reactions)
        zeta[slow_idx] = rng.normal(size=slow_idx.size)
        zeta[net.fast] = rng.normal(size=int(net.fast.sum()))
        rebuilt = flux_H(net, w, rho0, zeta + dF) - flux_H(net, w, rho0, dF) - float(b @ zeta)
        recon.update(abs(pair.psi_star(w, zeta) - rebuilt), w)
    report.conditions += [dec.result(), flow.result(), force.result(), recon.result()]


def verify_ggs(
    net: ReactionNetwork,
    rho0,
    F: FreeEnergy,
    pair: DissipationPotentialPair,
    samples: int = 20,
    tol: float = 1e-5,
    seed: int = 0,
) -> StructureReport:
    """Check that the flux rate function induces the GGS ``(Psi, Psi*, F)``.

    Conditions, each maximised over sampled points:

    * ``decomposition``: ``L(w, j) = Psi(w, j) + Psi*(w, -dF) + <dF, j>``;
    * ``flux_at_force``: ``d_zeta H(w, dF(w)) = 0``;
    * ``force_at_zero_flux``: ``d_j L(w, 0) = dF(w)`` on slow coordinates;
    * ``dual_reconstruction``: ``Psi*(w, zeta) = H(w, zeta + dF) - H(w, dF)``.

    ``dF`` and the derivatives are central differences with step ``1e-5``.
    """
    report = StructureReport("ggs")
    _check_gradient_structure(net, rho0, F, pair, samples, tol, seed, None, report)
    return report


def verify_pggen(
    net: ReactionNetwork,
    rho0,
    F: FreeEnergy,
    pair: DissipationPotentialPair,
    samples: int = 20,
    tol: float = 1e-5,
    orthogonality_tol: float = 1e-10,
    seed: int = 0,
) -> StructureReport:
    """Check the pre-GENERIC structure with drift ``b = (0, k_fast)``.

    Adds ``divergence_free`` (``gamma_fast.T @ k_fast = 0``) and
    ``orthogonality`` (``<dF, b> = 0``, exact gradient) to the GGS
    conditions, with the decomposition shifted by ``b`` and the flux
    condition replaced by ``d_zeta H(w, dF) = b``. All conditions are
    evaluated even when the drift is not divergence free.
    """
    rho0 = as_concentration(rho0, net.n_species)
    report = StructureReport("pggen")
    div = _Tracker("divergence_free", orthogonality_tol)
    orth = _Tracker("orthogonality", orthogonality_tol)
    for w in sample_flux_points(net, rho0, samples, seed):
        b = fast_drift(net, w, rho0)
        scale = max(1.0, float(np.max(np.abs(b))))
        div.update(np.max(np.abs(net.gamma.T @ b)) / scale, w)
        orth.update(abs(float(F.gradient(w) @ b)), w)
    report.conditions += [div.result(), orth.result()]
    _check_gradient_structure(net, rho0, F, pair, samples, tol, seed, True, report)
    return report


def verify_ggen_nic(
    pair: DissipationPotentialPair,
    F: FreeEnergy,
    E: Callable[[np.ndarray], float],
    Lmat,
    samples: int = 20,
    tol: float = 1e-8,
    seed: int = 0,
) -> StructureReport:
    """Check the GENERIC non-interaction conditions for a supplied ``(E, Lmat)``.

    ``Lmat`` is a constant matrix on flux space. Conditions:
    ``skew_symmetry`` of ``Lmat``, ``degeneracy`` ``Lmat @ dF = 0`` and
    ``shift_invariance`` ``Psi*(w, zeta + lam dE) = Psi*(w, zeta)`` for
    ``lam`` in ``NIC_SHIFTS`` (``zeta = 0`` is always among the probes).
    """
    net, rho0 = F.net, F.rho0
    Lmat = np.asarray(Lmat, dtype=float)
    rng = np.random.default_rng(seed + 2)
    report = StructureReport("ggen")
    skew = _Tracker("skew_symmetry", tol)
    degen = _Tracker("degeneracy", tol)
    shift = _Tracker("shift_invariance", tol)
    skew.update(np.max(np.abs(Lmat + Lmat.T), initial=0.0), np.zeros(net.n_reactions))
    for w in sample_flux_points(net, rho0, samples, seed):
        zeta = rng.normal(size=net.n_reactions)
        skew.update(abs(float(zeta @ Lmat @ zeta)), w)
        degen.update(np.max(np.abs(Lmat @ F.gradient(w)), initial=0.0), w)
        dE = central_gradient(E, w)
        for probe in (np.zeros(net.n_reactions), zeta):
            base = pair.psi_star(w, probe)
            for lam in NIC_SHIFTS:
                shift.update(abs(pair.psi_star(w, probe + lam * dE) - base), w)
    report.conditions += [skew.result(), degen.result(), shift.result()]
    return report


@dataclass(frozen=True)
class EnergyBalance:
    """``F(w_T) - F(w_0) + int_0^T (Psi(w, dw/dt - b) + Psi*(w, -dF)) dt``."""

    F_start: float
    F_end: float
    dissipation: float
    residual: float
    max_increase: float


def energy_balance(
    net: ReactionNetwork,
    rho0,
    F: FreeEnergy,
    pair: DissipationPotentialPair,
    t_end: float,
    n_record: int = 201,
) -> EnergyBalance:
    """Energy-dissipation balance along the macroscopic flow from ``w = 0``.

    The integrand uses the dense ODE output, the exact gradient of ``F`` and
    the flow velocity ``dw/dt = k(phi[w])``; ``max_increase`` is the largest
    increase of ``F`` between consecutive record times.
    """
    rho0 = as_concentration(rho0, net.n_species)
    times = np.linspace(0.0, t_end, n_record)
    traj = integrate_rre(net, rho0, t_end, times)
    w_of_t = traj.interpolant

    def integrand(t):
        w = w_of_t(t)
        k_fw, k_bw = mass_action_rates(net, flux_state(net, w, rho0))
        velocity = k_fw - k_bw
        b = fast_drift(net, w, rho0)
        return pair.psi(w, velocity - b) + pair.psi_star(w, -F.gradient(w))

    dissipation = 0.0
    for a, b in zip(times[:-1], times[1:]):
        val, _ = quad(integrand, a, b, epsabs=1e-13, epsrel=1e-12, limit=100)
        dissipation += val
    values = np.array([F(w) for w in traj.fluxes])
    F0, FT = float(values[0]), float(values[-1])
    return EnergyBalance(
        F_start=F0,
        F_end=FT,
        dissipation=dissipation,
        residual=FT - F0 + dissipation,
        max_increase=float(np.max(np.diff(values), initial=0.0)),
    )
