"""Hamiltonians and rate functions on state space and flux space.

Flux-space objects take the integrated flux ``w`` together with the initial
state ``rho0``; the state is ``phi[w] = rho0 + gamma.T @ w``. Flux and
cotangent arguments are full per-reaction vectors in network order (or a
:class:`~fluxgrad.dynamics.FluxVector`).

An infinite rate is reported as a :class:`RateEvaluation` with
``finite=False``; callers should branch on that flag rather than compute
with the value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from fluxgrad.errors import (
    InfeasibleConstraint,
    InfeasibleState,
    NonConvexityDetected,
    NotConverged,
    NumericalError,
)
from fluxgrad.network import ReactionNetwork, as_concentration, mass_action_rates

FAST_FLUX_TOL = 1e-9
EXP_CLIP = 700.0
NEGATIVE_STATE_TOL = 1e-12


@dataclass(frozen=True)
class RateEvaluation:
    """Value of a rate function together with its optimizer.

    ``optimizer`` is the maximizing cotangent for dual evaluations, the
    optimal flux for :func:`contraction`, and the optimal one-way pair
    ``(j_fw, j_bw)`` for :func:`flux_L`. ``parts`` holds named pieces of
    composite optimizers.
    """

    value: float
    optimizer: np.ndarray | None = None
    converged: bool = True
    residual: float = 0.0
    finite: bool = True
    parts: dict | None = None

    def __post_init__(self):
        if self.finite and -1e-12 <= self.value < 0:
            object.__setattr__(self, "value", 0.0)

    @classmethod
    def infinite(cls, reason_residual: float = math.inf) -> "RateEvaluation":
        return cls(value=math.inf, optimizer=None, converged=True, residual=reason_residual, finite=False)


def cosh_star(x):
    """Convex conjugate of ``cosh``: ``x asinh(x) - sqrt(1 + x**2)``."""
    x = np.asarray(x, dtype=float)
    return x * np.arcsinh(x) - np.hypot(1.0, x)


def entropy_cost(j, k):
    """``h(j|k) = j log(j/k) - j + k`` for ``j, k >= 0`` (``inf`` outside the domain)."""
    j = np.asarray(j, dtype=float)
    k = np.asarray(k, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(j > 0, j * (np.log(j) - np.log(np.where(k > 0, k, 1.0))) - j + k, k)
    val = np.where((j > 0) & (k <= 0), np.inf, val)
    return np.where(j < 0, np.inf, val)


def _as_flux(net: ReactionNetwork, v) -> np.ndarray:
    if hasattr(v, "full"):
        return v.full(net)
    arr = np.asarray(v, dtype=float)
    if arr.shape != (net.n_reactions,):
        raise ValueError(f"expected a per-reaction vector of length {net.n_reactions}, got shape {arr.shape}")
    return arr


def flux_state(net: ReactionNetwork, w, rho0) -> np.ndarray:
    """``phi[w]``, with round-off negatives clipped and real negatives rejected."""
    rho0 = as_concentration(rho0, net.n_species)
    rho = net.phi(rho0, _as_flux(net, w))
    floor = -NEGATIVE_STATE_TOL * max(1.0, float(np.max(np.abs(rho0))))
    if np.any(rho < floor):
        raise InfeasibleState(f"phi[w] has negative entries: {rho}")
    return np.maximum(rho, 0.0)


def _cosh_terms(k_fw, k_bw, z):
    """``k_fw (e^z - 1) + k_bw (e^-z - 1)``, zero where a rate vanishes."""
    k_fw = np.asarray(k_fw, dtype=float)
    k_bw = np.asarray(k_bw, dtype=float)
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        fw = np.where(k_fw > 0, k_fw * np.expm1(np.where(k_fw > 0, z, 0.0)), 0.0)
        bw = np.where(k_bw > 0, k_bw * np.expm1(np.where(k_bw > 0, -z, 0.0)), 0.0)
    return fw + bw


def _hamiltonian(net: ReactionNetwork, rho, zeta) -> float:
    k_fw, k_bw = mass_action_rates(net, rho)
    slow, fast = net.slow, net.fast
    total = np.sum(_cosh_terms(k_fw[slow], k_bw[slow], zeta[slow]))
    total += float(k_fw[fast] @ zeta[fast])
    return float(total)


def state_H(net: ReactionNetwork, rho, xi) -> float:
    """Hamiltonian on state space at concentration ``rho`` and cotangent ``xi``.

    Slow reactions contribute ``k_fw (e^{xi.gamma} - 1) + k_bw (e^{-xi.gamma} - 1)``;
    fast reactions contribute the linear term ``k_fast (xi.gamma)``. The
    result overflows to ``inf`` when some active ``xi.gamma`` is very large.
    """
    rho = as_concentration(rho, net.n_species)
    xi = np.asarray(xi, dtype=float)
    return _hamiltonian(net, rho, net.pullback(xi))


def flux_H(net: ReactionNetwork, w, rho0, zeta) -> float:
    """Hamiltonian on flux space; depends on ``w`` only through ``phi[w]``.

    Raises
    ------
    InfeasibleState
        If ``phi[w]`` has a negative component.
    """
    rho = flux_state(net, w, rho0)
    return _hamiltonian(net, rho, _as_flux(net, zeta))


def reaction_flux_cost(j, k_fw, k_bw):
    """Per-reaction ``inf_{a - b = j} h(a|k_fw) + h(b|k_bw)`` and its optimal pair."""
    j = np.asarray(j, dtype=float)
    value = np.empty_like(j)
    a = np.zeros_like(j)
    b = np.zeros_like(j)
    both = (k_fw > 0) & (k_bw > 0)
    if np.any(both):
        jj, k1, k2 = j[both], k_fw[both], k_bw[both]
        sigma = 2.0 * np.sqrt(k1 * k2)
        root = np.hypot(jj, sigma)
        value[both] = jj * np.arcsinh(jj / sigma) + 0.5 * jj * np.log(k2 / k1) - root + k1 + k2
        # stable root of a^2 - j a - k1 k2 = 0 for either sign of j
        a_both = np.where(jj >= 0, 0.5 * (jj + root), 0.5 * sigma**2 / np.maximum(root - jj, 1e-300))
        a[both] = a_both
        b[both] = a_both - jj
    fw_only = (k_fw > 0) & ~(k_bw > 0)
    value[fw_only] = entropy_cost(j[fw_only], k_fw[fw_only])
    a[fw_only] = np.maximum(j[fw_only], 0.0)
    bw_only = ~(k_fw > 0) & (k_bw > 0)
    value[bw_only] = entropy_cost(-j[bw_only], k_bw[bw_only])
    b[bw_only] = np.maximum(-j[bw_only], 0.0)
    neither = ~(k_fw > 0) & ~(k_bw > 0)
    value[neither] = np.where(j[neither] == 0, 0.0, np.inf)
    return value, a, b


def flux_L(net: ReactionNetwork, w, rho0, j) -> RateEvaluation:
    """Flux-space rate function at integrated flux ``w`` and flux velocity ``j``.

    Each slow reaction costs the cheapest split of its net flux into one-way
    fluxes, priced by relative entropy against the forward and backward
    rates (closed form). Fast fluxes must equal their limit rates within
    ``FAST_FLUX_TOL``; otherwise the value is infinite. The optimizer is the
    ``(2, n_slow)`` array of optimal forward/backward fluxes.
    """
    rho = flux_state(net, w, rho0)
    j = _as_flux(net, j)
    k_fw, k_bw = mass_action_rates(net, rho)
    slow, fast = net.slow, net.fast
    if np.any(np.abs(j[fast] - k_fw[fast]) > FAST_FLUX_TOL):
        return RateEvaluation.infinite(float(np.max(np.abs(j[fast] - k_fw[fast]))))
    value, a, b = reaction_flux_cost(j[slow], k_fw[slow], k_bw[slow])
    if not np.all(np.isfinite(value)):
        return RateEvaluation.infinite()
    return RateEvaluation(value=float(np.sum(value)), optimizer=np.vstack([a, b]))


@dataclass(frozen=True)
class LegendreResult:
    value: float
    argmax: np.ndarray
    converged: bool
    residual: float
    iterations: int


def legendre_nd(
    evaluate: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    point,
    x0=None,
    tol: float = 1e-11,
    max_iter: int = 200,
    admissible: Callable[[np.ndarray], bool] | None = None,
) -> LegendreResult:
    """Convex conjugate ``sup_x <x, point> - f(x)`` by damped Newton.

    ``evaluate(x)`` returns ``(f, grad f, hess f)``. The line search keeps
    iterates inside ``admissible`` and enforces Armijo ascent. Convergence
    means ``|point - grad f| <= tol * max(1, |point|)``.

    Raises
    ------
    NonConvexityDetected
        If the Hessian has a clearly negative eigenvalue.
    """
    s = np.atleast_1d(np.asarray(point, dtype=float))
    x = np.zeros_like(s) if x0 is None else np.array(x0, dtype=float)
    ok = admissible or (lambda _x: True)
    scale = max(1.0, float(np.linalg.norm(s)))
    f, g, hess = evaluate(x)
    objective = float(x @ s - f)
    residual = float(np.linalg.norm(s - g))
    for it in range(max_iter):
        if residual <= tol * scale:
            return LegendreResult(objective, x, True, residual, it)
        hess = 0.5 * (hess + hess.T)
        eig = np.linalg.eigvalsh(hess)
        if eig[0] < -1e-8 * max(1.0, abs(eig[-1])):
            raise NonConvexityDetected(f"Hessian eigenvalue {eig[0]:.3e} < 0")
        try:
            step = np.linalg.solve(hess + 1e-14 * max(1.0, abs(eig[-1])) * np.eye(len(s)), s - g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, s - g, rcond=None)[0]
        slope = float((s - g) @ step)
        t = 1.0
        accepted = False
        while t > 1e-14:
            cand = x + t * step
            if ok(cand):
                fc, gc, hc = evaluate(cand)
                obj_c = float(cand @ s - fc)
                if np.isfinite(obj_c) and obj_c >= objective + 1e-4 * t * slope - 1e-15 * abs(objective):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        x, f, g, hess, objective = cand, fc, gc, hc, obj_c
        residual = float(np.linalg.norm(s - g))
    return LegendreResult(objective, x, residual <= tol * scale, residual, max_iter)


def legendre_1d(f: Callable[[float], float], point: float, x0: float = 0.0, step: float = 1e-4) -> LegendreResult:
    """Scalar convex conjugate of a black-box ``f`` (finite-difference Newton)."""

    def evaluate(x):
        x0_ = float(x[0])
        fm, f0, fp = f(x0_ - step), f(x0_), f(x0_ + step)
        return f0, np.array([(fp - fm) / (2 * step)]), np.array([[(fp - 2 * f0 + fm) / step**2]])

    return legendre_nd(evaluate, [point], x0=[x0], tol=1e-8)


def _row_space(G: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis (as columns) of the span of the rows of ``G``."""
    if G.size == 0:
        return np.zeros((G.shape[1], 0))
    _, sv, vt = np.linalg.svd(G, full_matrices=False)
    rank = int(np.sum(sv > rtol * max(1.0, sv[0] if sv.size else 0.0)))
    return vt[:rank].T


def _cone_feasible(G_active: np.ndarray, signs: np.ndarray, target: np.ndarray) -> bool:
    """Is ``target = G_active.T @ j`` solvable with ``sign_r * j_r >= 0`` where ``sign_r != 0``?"""
    bounds = [(0, None) if sg > 0 else (None, 0) if sg < 0 else (None, None) for sg in signs]
    res = linprog(np.zeros(len(signs)), A_eq=G_active.T, b_eq=target, bounds=bounds, method="highs")
    return res.status == 0


def _one_sided_signs(k_fw, k_bw):
    return np.where((k_fw > 0) & (k_bw > 0), 0, np.where(k_fw > 0, 1, -1))


def state_L(net: ReactionNetwork, rho, s, tol: float = 1e-11) -> RateEvaluation:
    """State-space rate function ``sup_xi xi.s - state_H(rho, xi)``.

    The sup runs over the span of the active reaction vectors, where the
    dual is strictly concave, so damped Newton converges from ``xi = 0``;
    a coarse multistart grid is used if it does not. The value is infinite
    when ``s`` minus the fast drift is not a combination of active reaction
    vectors with admissible signs.
    """
    rho = as_concentration(rho, net.n_species)
    s = np.asarray(s, dtype=float)
    k_fw, k_bw = mass_action_rates(net, rho)
    slow, fast = net.slow, net.fast
    target = s - net.gamma[fast].T @ k_fw[fast]
    kf, kb = k_fw[slow], k_bw[slow]
    active = (kf > 0) | (kb > 0)
    G = net.gamma[slow][active].astype(float)
    kf, kb = kf[active], kb[active]
    basis = _row_space(G)
    off_span = target - basis @ (basis.T @ target)
    if np.linalg.norm(off_span) > 1e-10 * max(1.0, np.linalg.norm(target)):
        return RateEvaluation.infinite(float(np.linalg.norm(off_span)))
    signs = _one_sided_signs(kf, kb)
    if np.any(signs != 0) and not _cone_feasible(G, signs, target):
        return RateEvaluation.infinite()
    if basis.shape[1] == 0:
        return RateEvaluation(value=0.0, optimizer=np.zeros(net.n_species))
    A = G @ basis
    reduced = basis.T @ target

    def evaluate(c):
        z = A @ c
        ef, eb = np.exp(z), np.exp(-z)
        f = float(np.sum(kf * (ef - 1.0) + kb * (eb - 1.0)))
        g = A.T @ (kf * ef - kb * eb)
        h = (A.T * (kf * ef + kb * eb)) @ A
        return f, g, h

    def admissible(c):
        return bool(np.all(np.abs(A @ c) <= EXP_CLIP))

    best = legendre_nd(evaluate, reduced, tol=tol, admissible=admissible)
    if not best.converged:
        dim = basis.shape[1]
        starts = itertools.product((-2.0, 0.0, 2.0), repeat=dim) if dim <= 4 else np.eye(dim)
        for start in starts:
            trial = legendre_nd(evaluate, reduced, x0=np.asarray(start, dtype=float), tol=tol, admissible=admissible)
            if trial.value > best.value or (trial.converged and not best.converged):
                best = trial
            if best.converged:
                break
    xi = basis @ best.argmax
    value = float(xi @ s - state_H(net, rho, xi))
    return RateEvaluation(value=value, optimizer=xi, converged=best.converged, residual=best.residual)


def contraction(
    net: ReactionNetwork, w, rho0, s, tol: float = 1e-12, max_iter: int = 200, cross_check: bool = False
) -> RateEvaluation:
    """``inf flux_L(w, j)`` over fluxes ``j`` with ``gamma.T @ j = s``.

    Primal computation, independent of :func:`state_L`: the fast part is
    pinned at its limit rates and the slow part is found by infeasible-start
    Newton on the KKT system of the per-reaction closed-form costs. With
    ``cross_check`` the result is compared against :func:`state_L`.

    Raises
    ------
    InfeasibleConstraint
        If no admissible flux reproduces ``s``.
    """
    rho = flux_state(net, w, rho0)
    s = np.asarray(s, dtype=float)
    k_fw, k_bw = mass_action_rates(net, rho)
    slow_idx = np.flatnonzero(net.slow)
    fast = net.fast
    target = s - net.gamma[fast].T @ k_fw[fast]
    kf, kb = k_fw[slow_idx], k_bw[slow_idx]
    active = (kf > 0) | (kb > 0)
    idx = slow_idx[active]
    kf, kb = kf[active], kb[active]
    G = net.gamma[idx].T.astype(float)
    j_full = np.zeros(net.n_reactions)
    j_full[fast] = k_fw[fast]
    # full-row-rank reduction of the constraint G x = target
    if G.shape[1]:
        u, sv, _ = np.linalg.svd(G, full_matrices=False)
        rank = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
        u = u[:, :rank]
    else:
        u = np.zeros((net.n_species, 0))
    off = target - u @ (u.T @ target)
    if np.linalg.norm(off) > 1e-10 * max(1.0, np.linalg.norm(target)):
        raise InfeasibleConstraint(f"s is not reachable by the active reactions (residual {np.linalg.norm(off):.3e})")
    signs = _one_sided_signs(kf, kb)
    if np.any(signs != 0) and not _cone_feasible(G.T, signs, target):
        raise InfeasibleConstraint("s requires a one-way reaction to run backwards")
    if G.shape[1] == 0:
        return RateEvaluation(value=0.0, optimizer=j_full)
    A = u.T @ G
    b = u.T @ target
    sigma = 2.0 * np.sqrt(kf * kb)
    both = signs == 0
    log_ratio = np.where(both, 0.5 * np.log(np.where(both, kb, 1.0) / np.where(both, kf, 1.0)), 0.0)

    def grad_hess(x):
        g = np.empty_like(x)
        h = np.empty_like(x)
        xb = x[both]
        g[both] = np.arcsinh(xb / sigma[both]) + log_ratio[both]
        h[both] = 1.0 / np.hypot(xb, sigma[both])
        fw = signs > 0
        g[fw] = np.log(x[fw] / kf[fw])
        h[fw] = 1.0 / x[fw]
        bw = signs < 0
        g[bw] = -np.log(-x[bw] / kb[bw])
        h[bw] = -1.0 / x[bw]
        return g, h

    def in_domain(x):
        return bool(np.all(signs[signs != 0] * x[signs != 0] > 0))

    x = np.where(signs > 0, kf, np.where(signs < 0, -kb, 0.0))
    nu = np.zeros(A.shape[0])

    def kkt_residual(x, nu):
        g, _ = grad_hess(x)
        return np.concatenate([g + A.T @ nu, A @ x - b])

    r = kkt_residual(x, nu)
    scale = max(1.0, np.linalg.norm(target))
    converged = False
    n, m = len(x), len(nu)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * scale:
            converged = True
            break
        _, h = grad_hess(x)
        K = np.zeros((n + m, n + m))
        K[:n, :n] = np.diag(h)
        K[:n, n:] = A.T
        K[n:, :n] = A
        d = np.linalg.solve(K, -r)
        dx, dnu = d[:n], d[n:]
        t = 1.0
        norm_r = np.linalg.norm(r)
        while t > 1e-14:
            xc, nuc = x + t * dx, nu + t * dnu
            if in_domain(xc):
                rc = kkt_residual(xc, nuc)
                if np.linalg.norm(rc) <= (1 - 0.01 * t) * norm_r:
                    break
            t *= 0.5
        else:
            break
        x, nu, r = xc, nuc, rc
    if not converged and np.linalg.norm(r) > 1e-8 * scale:
        raise NotConverged(f"contraction Newton stalled with KKT residual {np.linalg.norm(r):.3e}")
    j_full[idx] = x
    value, _, _ = reaction_flux_cost(x, kf, kb)
    result = RateEvaluation(
        value=float(np.sum(value)), optimizer=j_full, converged=converged, residual=float(np.linalg.norm(r))
    )
    if cross_check:
        dual = state_L(net, rho, s)
        if not dual.finite or abs(dual.value - result.value) > 1e-6:
            raise NumericalError(f"contraction {result.value!r} disagrees with state_L {dual.value!r}")
    return result
