"""Independent random walkers and unimolecular reaction-diffusion on a torus.

Scalar fields have shape ``grid.shape``; face fields have shape
``(dim, *grid.shape)`` where ``W[l][x]`` lives on the face between ``x``
and ``x + e_l`` and is positive for transport in the ``+e_l`` direction.
Inner products are plain sums over sites or faces, so ``grad`` is exactly
the negative adjoint of ``div``. Densities are particles per unit ``V`` at
each site, and the continuity equation reads ``rho = rho0 - div w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from fluxgrad.errors import ExplosionGuard, InfeasibleState, NotConverged, NotSolvable, StabilityViolation
from fluxgrad.ldp import RateEvaluation, cosh_star, reaction_flux_cost

FACE_MEANS = ("arithmetic", "logarithmic")
DEFAULT_WALKER_EVENT_CAP = 10**9


@dataclass(frozen=True)
class Grid:
    """Periodic ``n**dim`` lattice with spacing ``eps``."""

    dim: int
    n: int
    eps: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def face_shape(self) -> tuple[int, ...]:
        return (self.dim,) + self.shape

    @property
    def size(self) -> int:
        return self.n**self.dim

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def zero_faces(self) -> np.ndarray:
        return np.zeros(self.face_shape)


def discrete_div(grid: Grid, W) -> np.ndarray:
    """``div W(x) = sum_l (W_l(x) - W_l(x - e_l)) / eps``."""
    W = np.asarray(W, dtype=float)
    out = np.zeros(grid.shape)
    for l in range(grid.dim):
        out += W[l] - np.roll(W[l], 1, axis=l)
    return out / grid.eps


def discrete_grad(grid: Grid, f) -> np.ndarray:
    """``grad f_l(x) = (f(x + e_l) - f(x)) / eps``."""
    f = np.asarray(f, dtype=float)
    return np.stack([np.roll(f, -1, axis=l) - f for l in range(grid.dim)]) / grid.eps


def discrete_laplacian(grid: Grid, f) -> np.ndarray:
    return discrete_div(grid, discrete_grad(grid, f))


def face_density(grid: Grid, rho, mean: str = "arithmetic") -> np.ndarray:
    """Density on faces from the two adjacent sites.

    ``"logarithmic"`` uses ``(a - b) / (log a - log b)``, which makes the
    entropic gradient structure exact on the lattice.
    """
    rho = np.asarray(rho, dtype=float)
    nb = np.stack([np.roll(rho, -1, axis=l) for l in range(grid.dim)])
    here = np.broadcast_to(rho, nb.shape)
    if mean == "arithmetic":
        return 0.5 * (here + nb)
    if mean == "logarithmic":
        out = np.zeros(nb.shape)
        pos = (here > 0) & (nb > 0)
        a, b = here[pos], nb[pos]
        close = np.abs(a - b) <= 1e-8 * np.maximum(a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            lm = (a - b) / (np.log(a) - np.log(b))
        # series expansion near a == b
        mid = 0.5 * (a + b)
        lm = np.where(close, mid - (a - b) ** 2 / (12 * mid), lm)
        out[pos] = lm
        return out
    raise ValueError(f"face mean must be one of {FACE_MEANS}")


def lattice_state(grid: Grid, w, rho0) -> np.ndarray:
    """``rho0 - div w``; raises :class:`InfeasibleState` on negative entries."""
    rho = np.asarray(rho0, dtype=float) - discrete_div(grid, w)
    if np.any(rho < -1e-12 * max(1.0, float(np.max(np.abs(rho0))))):
        raise InfeasibleState("rho0 - div w has negative entries")
    return np.maximum(rho, 0.0)


def diffusion_H(grid: Grid, w, rho0, zeta, diffusivity: float = 1.0, face_mean: str = "arithmetic") -> float:
    """``D (sum rho_face zeta**2 - <zeta, grad rho>)`` at ``rho = rho0 - div w``."""
    rho = lattice_state(grid, w, rho0)
    zeta = np.asarray(zeta, dtype=float)
    rbar = face_density(grid, rho, face_mean)
    return float(diffusivity * (np.sum(rbar * zeta**2) - np.sum(zeta * discrete_grad(grid, rho))))


def diffusion_L(grid: Grid, w, rho0, j, diffusivity: float = 1.0, face_mean: str = "arithmetic") -> RateEvaluation:
    """``sum (j + D grad rho)**2 / (4 D rho_face)``; infinite where ``rho_face = 0`` and the numerator is not."""
    rho = lattice_state(grid, w, rho0)
    j = np.asarray(j, dtype=float)
    rbar = face_density(grid, rho, face_mean)
    excess = j + diffusivity * discrete_grad(grid, rho)
    empty = rbar <= 0
    if np.any(np.abs(excess[empty]) > 0):
        return RateEvaluation.infinite()
    pos = ~empty
    value = float(np.sum(excess[pos] ** 2 / (4.0 * diffusivity * rbar[pos])))
    return RateEvaluation(value=value)


def diffusion_free_energy(grid: Grid, w, rho0) -> float:
    """``1/2 sum rho log rho - rho`` at ``rho = rho0 - div w``."""
    rho = lattice_state(grid, w, rho0)
    pos = rho > 0
    return float(0.5 * (np.sum(rho[pos] * np.log(rho[pos])) - np.sum(rho)))


def diffusion_dissipation(grid: Grid, w, rho0, diffusivity: float = 1.0, face_mean: str = "arithmetic"):
    """Quadratic pair ``(Psi*(zeta), Psi(j))`` at ``w`` as two callables."""
    rbar = face_density(grid, lattice_state(grid, w, rho0), face_mean)

    def psi_star(zeta):
        return float(diffusivity * np.sum(rbar * np.asarray(zeta) ** 2))

    def psi(j):
        j = np.asarray(j, dtype=float)
        if np.any((rbar <= 0) & (j != 0)):
            return math.inf
        pos = rbar > 0
        return float(np.sum(j[pos] ** 2 / (4.0 * diffusivity * rbar[pos])))

    return psi_star, psi


def _weighted_laplacian(grid: Grid, rbar: np.ndarray) -> LinearOperator:
    """``xi -> -div(rbar grad xi)`` as a symmetric PSD operator on flat site vectors."""

    def matvec(v):
        f = np.asarray(v).reshape(grid.shape)
        return -discrete_div(grid, rbar * discrete_grad(grid, f)).ravel()

    return LinearOperator((grid.size, grid.size), matvec=matvec, rmatvec=matvec, dtype=float)


def _potential(grid: Grid, rbar: np.ndarray, s: np.ndarray, rtol: float = 1e-13) -> np.ndarray:
    """Mean-zero solution of ``-div(rbar grad xi) = s`` by conjugate gradients."""
    b = s.ravel() - s.mean()
    if not np.any(b):
        return np.zeros(grid.shape)
    A = _weighted_laplacian(grid, rbar)
    xi, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=50 * grid.size)
    if info != 0:
        raise NotConverged(f"conjugate gradient did not converge (info={info})")
    xi -= xi.mean()
    return xi.reshape(grid.shape)


def _check_mean_zero(s):
    m = float(np.mean(s))
    if abs(m) > 1e-12 * max(1.0, float(np.max(np.abs(s)))):
        raise NotSolvable(f"source must have zero total mass on the torus (mean {m:.3e})")


def hminus1_norm(grid: Grid, rho, s, face_mean: str = "arithmetic") -> float:
    """``<s, xi>`` with ``-div(rho_face grad xi) = s``: the squared dual norm of ``s``.

    Raises
    ------
    NotSolvable
        If ``s`` does not sum to zero.
    """
    rho = np.asarray(rho, dtype=float)
    s = np.asarray(s, dtype=float)
    _check_mean_zero(s)
    if np.any(rho <= 0):
        raise InfeasibleState("the dual norm needs a strictly positive density")
    xi = _potential(grid, face_density(grid, rho, face_mean), s)
    return float(np.sum(s * xi))


def state_diffusion_L(grid: Grid, rho, s, diffusivity: float = 1.0, face_mean: str = "arithmetic") -> float:
    """State rate ``||s - D lap rho||^2_{H^-1(D rho)} / 4`` for independent walkers."""
    rho = np.asarray(rho, dtype=float)
    target = np.asarray(s, dtype=float) - diffusivity * discrete_laplacian(grid, rho)
    return hminus1_norm(grid, rho, target, face_mean) / (4.0 * diffusivity)


def heat_step(grid: Grid, rho, dt: float, diffusivity: float = 1.0) -> np.ndarray:
    """One explicit Euler step of ``d rho/dt = D lap rho``.

    Raises
    ------
    StabilityViolation
        If ``dt > eps**2 / (2 dim D)``.
    """
    bound = grid.eps**2 / (2 * grid.dim * diffusivity)
    if dt > bound * (1 + 1e-12):
        raise StabilityViolation(f"dt={dt:.3e} exceeds the explicit stability bound {bound:.3e}")
    rho = np.asarray(rho, dtype=float)
    return rho + dt * diffusivity * discrete_laplacian(grid, rho)


def solve_heat(grid: Grid, rho0, t_end: float, diffusivity: float = 1.0, safety: float = 0.5) -> np.ndarray:
    """Explicit Euler from ``rho0`` to ``t_end`` with ``safety`` times the stability bound."""
    bound = grid.eps**2 / (2 * grid.dim * diffusivity)
    steps = max(1, math.ceil(t_end / (safety * bound)))
    dt = t_end / steps
    rho = np.asarray(rho0, dtype=float)
    for _ in range(steps):
        rho = heat_step(grid, rho, dt, diffusivity)
    return rho


@dataclass
class WalkerRun:
    """Sampled densities and face fluxes of a walker simulation.

    ``occupation`` and ``crossings`` are the exact integer counts:
    ``densities = occupation / V`` and ``fluxes = crossings * eps / V``.
    """

    grid: Grid
    volume: float
    times: np.ndarray
    densities: np.ndarray
    fluxes: np.ndarray
    occupation: np.ndarray
    crossings: np.ndarray


def simulate_walkers(
    grid: Grid,
    particles,
    diffusivity: float,
    t_end: float,
    seed: int = 0,
    volume: float | None = None,
    record_times=None,
    max_events: int = DEFAULT_WALKER_EVENT_CAP,
) -> WalkerRun:
    """Continuous-time independent random walks with face-crossing counters.

    ``particles`` is an integer occupation field. Each particle jumps to each
    of its ``2 dim`` neighbours at rate ``D / eps**2``. Between record times
    the number of jumps per particle is Poisson; jumps are applied in rounds,
    which is exact in distribution because jump directions are independent
    of the clock. ``volume`` defaults to the total particle number.
    """
    occ0 = np.asarray(particles)
    if occ0.shape != grid.shape or np.any(occ0 < 0) or not np.all(occ0 == np.round(occ0)):
        raise ValueError("particles must be a nonnegative integer field on the grid")
    occ0 = occ0.astype(np.int64)
    total = int(occ0.sum())
    if total < 1:
        raise ValueError("need at least one particle")
    V = float(total if volume is None else volume)
    times = np.linspace(0.0, t_end, 11) if record_times is None else np.asarray(record_times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("record_times must be sorted and nonnegative")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    sites = np.repeat(np.arange(grid.size), occ0.ravel())
    pos = np.stack(np.unravel_index(sites, grid.shape), axis=1).astype(np.int64)
    crossings = np.zeros(grid.face_shape, dtype=np.int64)
    rate = 2 * grid.dim * diffusivity / grid.eps**2
    occ_out = np.empty((times.size,) + grid.shape, dtype=np.int64)
    cross_out = np.empty((times.size,) + grid.face_shape, dtype=np.int64)
    t, events = 0.0, 0
    for k, t_rec in enumerate(times):
        jumps = rng.poisson(rate * (t_rec - t), size=total)
        events += int(jumps.sum())
        if events > max_events:
            raise ExplosionGuard(f"walker event cap {max_events} exceeded")
        active = np.flatnonzero(jumps)
        remaining = jumps[active]
        while active.size:
            axis = rng.integers(0, grid.dim, size=active.size)
            up = rng.random(active.size) < 0.5
            here = pos[active, axis]
            face = np.where(up, here, (here - 1) % grid.n)
            index = pos[active].copy()
            index[np.arange(active.size), axis] = face
            np.add.at(crossings, (axis,) + tuple(index.T), np.where(up, 1, -1))
            pos[active, axis] = (here + np.where(up, 1, -1)) % grid.n
            remaining -= 1
            keep = remaining > 0
            active, remaining = active[keep], remaining[keep]
        t = t_rec
        flat = np.ravel_multi_index(tuple(pos.T), grid.shape)
        occ_out[k] = np.bincount(flat, minlength=grid.size).reshape(grid.shape)
        cross_out[k] = crossings
    return WalkerRun(
        grid=grid,
        volume=V,
        times=times,
        densities=occ_out / V,
        fluxes=cross_out * (grid.eps / V),
        occupation=occ_out,
        crossings=cross_out,
    )


@dataclass(frozen=True)
class RDState:
    """Two-species reaction-diffusion state ``A <-> B`` on a grid.

    ``rho0`` has shape ``(2, *grid.shape)``, ``w_tr`` shape
    ``(2, dim, *grid.shape)`` and ``w_re`` shape ``grid.shape``.
    """

    grid: Grid
    rho0: np.ndarray
    w_tr: np.ndarray
    w_re: np.ndarray
    diffusivity: tuple[float, float]
    kappa_fw: float
    kappa_bw: float
    face_mean: str = "arithmetic"

    @classmethod
    def initial(cls, grid: Grid, rho0, diffusivity, kappa_fw: float, kappa_bw: float, face_mean="arithmetic"):
        rho0 = np.asarray(rho0, dtype=float)
        if rho0.shape != (2,) + grid.shape:
            raise ValueError(f"rho0 must have shape {(2,) + grid.shape}")
        return cls(
            grid,
            rho0,
            np.zeros((2,) + grid.face_shape),
            grid.zeros(),
            tuple(float(d) for d in diffusivity),
            float(kappa_fw),
            float(kappa_bw),
            face_mean,
        )

    @property
    def rho(self) -> np.ndarray:
        """``rho_y = rho0_y - div w_tr_y + gamma_y w_re`` with ``gamma = (-1, 1)``."""
        g = self.grid
        a = self.rho0[0] - discrete_div(g, self.w_tr[0]) - self.w_re
        b = self.rho0[1] - discrete_div(g, self.w_tr[1]) + self.w_re
        return np.stack([a, b])

    def checked_rho(self) -> np.ndarray:
        rho = self.rho
        if np.any(rho < -1e-12 * max(1.0, float(np.max(np.abs(self.rho0))))):
            raise InfeasibleState("reaction-diffusion state has negative densities")
        return np.maximum(rho, 0.0)

    def reaction_rates(self) -> tuple[np.ndarray, np.ndarray]:
        rho = self.checked_rho()
        return self.kappa_fw * rho[0], self.kappa_bw * rho[1]


def rd_H_parts(state: RDState, zeta_tr, zeta_re) -> tuple[float, float]:
    """Transport and reaction parts of the reaction-diffusion Hamiltonian."""
    rho = state.checked_rho()
    g = state.grid
    zeta_tr = np.asarray(zeta_tr, dtype=float)
    h_tr = 0.0
    for y in range(2):
        D = state.diffusivity[y]
        rbar = face_density(g, rho[y], state.face_mean)
        h_tr += D * (np.sum(rbar * zeta_tr[y] ** 2) - np.sum(zeta_tr[y] * discrete_grad(g, rho[y])))
    k_fw, k_bw = state.reaction_rates()
    z = np.asarray(zeta_re, dtype=float)
    h_re = float(np.sum(k_fw * np.expm1(z) + k_bw * np.expm1(-z)))
    return float(h_tr), h_re


def rd_H(state: RDState, zeta_tr, zeta_re) -> float:
    return sum(rd_H_parts(state, zeta_tr, zeta_re))


def rd_L_parts(state: RDState, j_tr, j_re) -> tuple[RateEvaluation, RateEvaluation]:
    """Transport (quadratic) and reaction (entropic) parts of the flux rate function."""
    rho = state.checked_rho()
    g = state.grid
    j_tr = np.asarray(j_tr, dtype=float)
    total, finite = 0.0, True
    for y in range(2):
        D = state.diffusivity[y]
        rbar = face_density(g, rho[y], state.face_mean)
        excess = j_tr[y] + D * discrete_grad(g, rho[y])
        if np.any((rbar <= 0) & (excess != 0)):
            finite = False
            continue
        pos = rbar > 0
        total += float(np.sum(excess[pos] ** 2 / (4.0 * D * rbar[pos])))
    tr = RateEvaluation(value=total) if finite else RateEvaluation.infinite()
    k_fw, k_bw = state.reaction_rates()
    cost, _, _ = reaction_flux_cost(np.asarray(j_re, dtype=float).ravel(), k_fw.ravel(), k_bw.ravel())
    re = RateEvaluation(value=float(np.sum(cost))) if np.all(np.isfinite(cost)) else RateEvaluation.infinite()
    return tr, re


def rd_L(state: RDState, j_tr, j_re) -> RateEvaluation:
    tr, re = rd_L_parts(state, j_tr, j_re)
    if not (tr.finite and re.finite):
        return RateEvaluation.infinite()
    return RateEvaluation(value=tr.value + re.value, parts={"transport": tr.value, "reaction": re.value})


def rd_free_energy(state: RDState) -> float:
    """``1/2 sum_y rho_y log(kappa_y rho_y) - rho_y`` with ``kappa = (kappa_fw, kappa_bw)``."""
    rho = state.checked_rho()
    total = 0.0
    for y, kappa in enumerate((state.kappa_fw, state.kappa_bw)):
        r = rho[y]
        pos = r > 0
        total += 0.5 * (np.sum(r[pos] * np.log(kappa * r[pos])) - np.sum(r))
    return float(total)


def _dense_pinv_laplacian(grid: Grid, rbar: np.ndarray) -> np.ndarray:
    """Pseudo-inverse of ``-div(rbar grad .)`` assembled column by column."""
    A = _weighted_laplacian(grid, rbar)
    M = np.column_stack([A.matvec(e) for e in np.eye(grid.size)])
    M = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(M)
    keep = vals > 1e-12 * vals[-1]
    return (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T


MAX_DENSE_SITES = 4096


def rd_state_psi(state: RDState, s, tol: float = 1e-12, max_iter: int = 10_000) -> RateEvaluation:
    """Inf-convolution of transport and reaction dissipation at the current state.

    Minimizes ``Psi_tr(j_tr) + Psi_re(j_re)`` subject to
    ``s = -div j_tr + gamma j_re``. For fixed ``j_re`` the transport part is
    an exact dual-norm solve, so the problem reduces to a smooth convex
    problem in ``j_re`` under the single constraint
    ``sum j_re = sum s_B``, solved by Newton's method. ``parts`` holds the
    optimal ``j_tr`` and ``j_re``.

    Raises
    ------
    NotSolvable
        If ``s_A + s_B`` does not sum to zero.
    NotConverged
        If Newton's method stalls.
    """
    g = state.grid
    s = np.asarray(s, dtype=float)
    if s.shape != (2,) + g.shape:
        raise ValueError(f"s must have shape {(2,) + g.shape}")
    _check_mean_zero(s[0] + s[1])
    if g.size > MAX_DENSE_SITES:
        raise ValueError(f"grid too large for the dense inf-convolution solver ({g.size} > {MAX_DENSE_SITES} sites)")
    rho = state.checked_rho()
    if np.any(rho <= 0):
        raise InfeasibleState("inf-convolution needs strictly positive densities")
    k_fw, k_bw = state.reaction_rates()
    sigma = (2.0 * np.sqrt(k_fw * k_bw)).ravel()
    D = state.diffusivity
    rbars = [face_density(g, rho[y], state.face_mean) for y in range(2)]
    P = [_dense_pinv_laplacian(g, rbars[y]) for y in range(2)]
    sA, sB = s[0].ravel(), s[1].ravel()
    n = g.size

    def transport_targets(j):
        tA = sA + j
        tB = sB - j
        return tA - tA.mean(), tB - tB.mean()

    def objective_parts(j):
        tA, tB = transport_targets(j)
        xA, xB = P[0] @ tA, P[1] @ tB
        val_tr = tA @ xA / (4 * D[0]) + tB @ xB / (4 * D[1])
        val_re = float(np.sum(sigma * (cosh_star(j / sigma) + 1.0)))
        grad = xA / (2 * D[0]) - xB / (2 * D[1]) + np.arcsinh(j / sigma)
        return val_tr + val_re, grad, (xA, xB)

    hess_tr = P[0] / (2 * D[0]) + P[1] / (2 * D[1])
    ones = np.ones(n)
    c = float(sB.sum())
    j = np.full(n, c / n)
    value, grad, _ = objective_parts(j)
    converged = False
    residual = math.inf
    for _ in range(max_iter):
        H = hess_tr + np.diag(1.0 / np.hypot(j, sigma))
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = H
        K[:n, n] = ones
        K[n, :n] = ones
        rhs = np.concatenate([-grad, [c - j.sum()]])
        sol = np.linalg.solve(K, rhs)
        step, mult = sol[:n], sol[n]
        residual = float(np.linalg.norm(grad + mult * ones))
        decrement = float(step @ H @ step)
        if decrement <= tol**2 * max(1.0, abs(value)) or residual <= tol * max(1.0, np.linalg.norm(grad)):
            converged = True
            break
        t = 1.0
        while t > 1e-14:
            cand = j + t * step
            v_c, g_c, _ = objective_parts(cand)
            if v_c <= value + 1e-4 * t * float(grad @ step) + 1e-15 * abs(value):
                break
            t *= 0.5
        else:
            break
        change = np.linalg.norm(cand - j) / max(1.0, np.linalg.norm(j))
        j, value, grad = cand, v_c, g_c
        if change <= 1e-15:
            converged = True
            break
    if not converged:
        raise NotConverged(f"inf-convolution Newton stalled (residual {residual:.3e})")
    value, _, (xA, xB) = objective_parts(j)
    j_tr = np.stack(
        [
            rbars[0] * discrete_grad(g, xA.reshape(g.shape)),
            rbars[1] * discrete_grad(g, xB.reshape(g.shape)),
        ]
    )
    j_re = j.reshape(g.shape)
    return RateEvaluation(
        value=float(value),
        optimizer=j_re,
        converged=True,
        residual=residual,
        parts={"j_tr": j_tr, "j_re": j_re},
    )


def rd_transport_only(state: RDState, s) -> float:
    """Transport-only dissipation for ``s`` (finite only when each species' source has zero mass)."""
    g = state.grid
    s = np.asarray(s, dtype=float)
    rho = state.checked_rho()
    total = 0.0
    for y in range(2):
        m = float(np.mean(s[y]))
        if abs(m) > 1e-12 * max(1.0, float(np.max(np.abs(s[y])))):
            return math.inf
        total += hminus1_norm(g, rho[y], s[y], state.face_mean) / (4 * state.diffusivity[y])
    return total


def rd_reaction_only(state: RDState, s) -> float:
    """Reaction-only dissipation for ``s`` (finite only when ``s = gamma a`` site-wise)."""
    s = np.asarray(s, dtype=float)
    if np.max(np.abs(s[0] + s[1])) > 1e-12 * max(1.0, float(np.max(np.abs(s)))):
        return math.inf
    k_fw, k_bw = state.reaction_rates()
    sigma = 2.0 * np.sqrt(k_fw * k_bw)
    a = s[1]
    if np.any((sigma <= 0) & (a != 0)):
        return math.inf
    pos = sigma > 0
    return float(np.sum(sigma[pos] * (cosh_star(a[pos] / sigma[pos]) + 1.0)))


def rd_step(state: RDState, dt: float) -> RDState:
    """Explicit Euler step of the flux equations ``dw_tr = -D grad rho``, ``dw_re = k_fw - k_bw``.

    Raises
    ------
    StabilityViolation
        If ``dt`` exceeds ``eps**2 / (2 dim max D)`` or ``2 / (kappa_fw + kappa_bw)``.
    """
    g = state.grid
    bound = g.eps**2 / (2 * g.dim * max(state.diffusivity))
    kappa_sum = state.kappa_fw + state.kappa_bw
    if kappa_sum > 0:
        bound = min(bound, 2.0 / kappa_sum)
    if dt > bound * (1 + 1e-12):
        raise StabilityViolation(f"dt={dt:.3e} exceeds the explicit stability bound {bound:.3e}")
    rho = state.checked_rho()
    velocity_tr = np.stack([-state.diffusivity[y] * discrete_grad(g, rho[y]) for y in range(2)])
    velocity_re = state.kappa_fw * rho[0] - state.kappa_bw * rho[1]
    return replace(state, w_tr=state.w_tr + dt * velocity_tr, w_re=state.w_re + dt * velocity_re)
