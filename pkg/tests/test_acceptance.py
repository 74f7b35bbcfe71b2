"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. Run directly with ``python3 tests/test_acceptance.py``.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.optimize import minimize, minimize_scalar

from conftest import a_to_b, load
from fluxgrad import dynamics, lattice, ldp, structures
from fluxgrad.cli import shipped_model_path
from fluxgrad.network import find_detailed_balance, kinetic_flux, mass_action_rates


def test_criterion_01_stirling_limit_of_invariant_law(criterion):
    net = a_to_b(2.0, 1.0)
    rho_star = find_detailed_balance(net, [3.0, 0.0])
    start = time.perf_counter()
    worst = []
    for V in (100, 1000, 10000):
        gaps = []
        for x in np.linspace(0.1, 2.9, 20):
            a = round(V * x) / V
            rho = np.array([a, 3.0 - a])
            logp = dynamics.invariant_distribution_logprob(net, rho_star, rho, V)
            gaps.append(abs(-logp / V - structures.relative_entropy(rho, rho_star)))
        worst.append((V, max(gaps), 5 * math.log(V) / V))
    elapsed = time.perf_counter() - start
    ok = all(g <= b for _, g, b in worst) and elapsed < 1.0
    detail = ", ".join(f"V={V}: {g:.2e}<={b:.2e}" for V, g, b in worst) + f", {elapsed:.2f}s"
    criterion(1, "invariant law -> relative entropy", ok, detail)
    assert ok


def test_criterion_02_ssa_mean_tracks_ode(criterion):
    net = a_to_b(2.0, 1.0)
    grid = np.linspace(0.0, 1.0, 21)
    config = dynamics.JumpProcessConfig(volume=10_000, t_end=1.0, seed=2024, record_grid=grid)
    dynamics.simulate_ssa(net, [3.0, 0.0], dynamics.JumpProcessConfig(volume=10, t_end=0.1))  # JIT warm-up
    start = time.perf_counter()
    trajs = dynamics.simulate_ensemble(net, [3.0, 0.0], config, 100)
    elapsed = time.perf_counter() - start
    mean_a = np.mean([tr.states[:, 0] for tr in trajs], axis=0)
    exact = 1.0 + 2.0 * np.exp(-3.0 * grid)
    gap = float(np.max(np.abs(mean_a - exact)))
    ok = gap <= 0.05 and elapsed < 30.0
    criterion(2, "SSA ensemble mean vs ODE", ok, f"sup gap {gap:.2e} <= 5e-02, {elapsed:.1f}s")
    assert ok


def _random_points(net, rho0, count, rng, half=0.2):
    pts = []
    while len(pts) < count:
        w = rng.uniform(-half, half, net.n_reactions)
        w[net.fast] = np.abs(w[net.fast])
        if np.min(net.phi(rho0, w)) > 0.05:
            pts.append(w)
    return pts


CASES = [
    ("a_b", [1.5, 1.0]),
    ("two_channel", [1.0, 2.0]),
    ("chain3", [1.0, 0.5, 2.0]),
    ("fast_catalytic", [1.0, 1.0, 0.8, 1.2]),
]


def test_criterion_03_rate_function_zero_and_positivity(criterion):
    rng = np.random.default_rng(3)
    lowest, at_flow = math.inf, 0.0
    for name, rho0 in CASES:
        net = load(name)
        for w in _random_points(net, np.array(rho0), 50, rng):
            kin = kinetic_flux(net, net.phi(rho0, w))
            j = kin.copy()
            j[net.slow] = rng.normal(scale=2.0, size=int(net.slow.sum()))
            lowest = min(lowest, ldp.flux_L(net, w, rho0, j).value)
            at_flow = max(at_flow, abs(ldp.flux_L(net, w, rho0, kin).value))
    ok = lowest >= -1e-12 and at_flow <= 1e-10
    criterion(3, "flux_L >= 0 with zero on the flow", ok, f"min {lowest:.2e}, max at flow {at_flow:.2e}")
    assert ok


def _conjugate_by_search(net, w, rho0, zeta):
    """sup_j zeta.j - flux_L(w, j): dense grid then bounded Brent refinement, per reaction."""
    kin = kinetic_flux(net, net.phi(rho0, w))
    total = float(zeta[net.fast] @ kin[net.fast])
    for r in np.flatnonzero(net.slow):

        def negative(t, r=r):
            j = kin.copy()
            j[r] = t
            ev = ldp.flux_L(net, w, rho0, j)
            return -(zeta[r] * t - ev.value) if ev.finite else math.inf

        grid = np.linspace(-40.0, 40.0, 801)
        vals = np.array([negative(t) for t in grid])
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(negative, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        total += -min(res.fun, vals[i])
    return total


def test_criterion_04_duality(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    count = 0
    for name, rho0 in CASES:
        net = load(name)
        rho0 = np.array(rho0)
        for w in _random_points(net, rho0, 13 if name != "fast_catalytic" else 11, rng):
            zeta = rng.uniform(-1.5, 1.5, net.n_reactions)
            h = ldp.flux_H(net, w, rho0, zeta)
            worst = max(worst, abs(h - _conjugate_by_search(net, w, rho0, zeta)))
            count += 1
    ok = worst <= 1e-6 and count >= 50
    criterion(4, "flux_H is the conjugate of flux_L", ok, f"max gap {worst:.2e} over {count} draws")
    assert ok


def test_criterion_05_contraction_identity(criterion):
    rng = np.random.default_rng(5)
    worst, count, nontrivial = 0.0, 0, False
    for name, rho0 in CASES:
        net = load(name)
        rho0 = np.array(rho0)
        for w in _random_points(net, rho0, 13 if name != "fast_catalytic" else 11, rng):
            rho = net.phi(rho0, w)
            k_fw, _ = mass_action_rates(net, rho)
            j = rng.normal(size=net.n_reactions)
            j[net.fast] = k_fw[net.fast]
            s = net.gamma.T @ j
            primal = ldp.contraction(net, w, rho0, s)
            dual = ldp.state_L(net, rho, s)
            worst = max(worst, abs(primal.value - dual.value))
            count += 1
            if name == "two_channel":
                split = primal.optimizer
                nontrivial |= min(abs(split[0]), abs(split[1])) > 1e-3
    ok = worst <= 1e-6 and count >= 50 and nontrivial
    criterion(5, "state_L equals contraction of flux_L", ok, f"max gap {worst:.2e} over {count} draws")
    assert ok


def test_criterion_06_ggs_verification(criterion):
    worst = 0.0
    for name, rho0 in [("a_b", [2.0, 1.0]), ("chain3", [1.0, 0.5, 2.0]), ("two_channel", [1.0, 2.0])]:
        net = load(name)
        F, pair = structures.build_cosh_ggs(net, rho0)
        report = structures.verify_ggs(net, rho0, F, pair, samples=10)
        worst = max(worst, max(c.residual for c in report.conditions))
        assert report.overall, report.to_dict()
    cycle = load("three_cycle")
    rho0 = np.array([1.0, 1.0, 1.0])
    steady = np.array([1.0, 0.5, 1.0 / 3.0])
    steady *= rho0.sum() / steady.sum()
    F = structures.FreeEnergy(cycle, rho0, steady)
    bad = structures.verify_ggs(cycle, rho0, F, structures.cosh_dissipation(cycle, rho0), samples=10)
    cycle_residual = bad.condition("flux_at_force").residual
    ok = worst <= 1e-5 and cycle_residual >= 0.1
    criterion(6, "GGS conditions", ok, f"max residual {worst:.2e}; 3-cycle flux_at_force {cycle_residual:.3f}")
    assert ok


def test_criterion_07_energy_balance(criterion):
    residuals = []
    for name, rho0 in [("a_b", [3.0, 0.2]), ("chain3", [2.0, 0.3, 0.1])]:
        net = load(name)
        F, pair = structures.build_cosh_ggs(net, rho0)
        eb = structures.energy_balance(net, rho0, F, pair, t_end=5.0)
        residuals.append(abs(eb.residual))
    ok = max(residuals) <= 1e-4
    criterion(7, "energy-dissipation balance on [0, 5]", ok, "residuals " + ", ".join(f"{r:.2e}" for r in residuals))
    assert ok


def test_criterion_08_pggen(criterion):
    good_net = load("fast_catalytic")
    rho0 = [1.0, 1.0, 0.8, 1.2]
    F, pair = structures.build_cosh_ggs(good_net, rho0)
    good = structures.verify_pggen(good_net, rho0, F, pair, samples=10)
    div = good.condition("divergence_free")
    orth = good.condition("orthogonality")
    dec = good.condition("shifted_decomposition")
    bad_net = load("fast_leaky")
    F2, pair2 = structures.build_cosh_ggs(bad_net, [1.0, 1.0])
    bad = structures.verify_pggen(bad_net, [1.0, 1.0], F2, pair2, samples=10)
    flagged = not bad.condition("divergence_free").passed and bad.condition("orthogonality").residual > 1e-3
    ok = div.passed and orth.residual <= 1e-10 and dec.residual <= 1e-5 and flagged
    detail = f"orthogonality {orth.residual:.1e}, decomposition {dec.residual:.1e}, violating model flagged={flagged}"
    criterion(8, "pGGEN with divergence-free fast drift", ok, detail)
    assert ok


def _dense_dual_norm(rho, s):
    """sup_xi 2 s.xi - sum rho_face (grad xi)^2 on a 1-d torus with eps = 1, via the assembled form."""
    n = rho.size
    rbar = 0.5 * (rho + np.roll(rho, -1))
    Q = np.zeros((n, n))
    for x in range(n):  # face between x and x+1
        e = np.zeros(n)
        e[x], e[(x + 1) % n] = -1.0, 1.0
        Q += rbar[x] * np.outer(e, e)
    return float(s @ np.linalg.pinv(Q) @ s)


def test_criterion_09_diffusion(criterion):
    rng = np.random.default_rng(9)
    g2 = lattice.Grid(2, 8, 0.5)
    f = rng.normal(size=g2.shape)
    W = rng.normal(size=g2.face_shape)
    lhs = np.sum(lattice.discrete_grad(g2, f) * W)
    rhs = -np.sum(f * lattice.discrete_div(g2, W))
    adj = abs(lhs - rhs) / (np.linalg.norm(f) * np.linalg.norm(W) / g2.eps)

    g4 = lattice.Grid(1, 4, 1.0)
    dual_gap = 0.0
    for _ in range(5):
        rho = rng.uniform(0.5, 2.0, 4)
        s = rng.normal(size=4)
        s -= s.mean()
        dual_gap = max(dual_gap, abs(lattice.hminus1_norm(g4, rho, s) - _dense_dual_norm(rho, s)))

    start = time.perf_counter()
    g = lattice.Grid(1, 32, 1.0 / 32)
    V = 10_000
    occ = np.zeros(32, dtype=np.int64)
    occ[:16] = V
    run = lattice.simulate_walkers(g, occ, 1.0, 0.1, seed=9, volume=V, record_times=[0.0, 0.1])
    heat = lattice.solve_heat(g, occ / V, 0.1)
    walk = run.densities[-1]
    sigma_hat = np.sqrt(walk)  # Poisson-type per-site spread of V * rho
    bound = 3 * sigma_hat / np.sqrt(V) + 2 * g.eps**2
    walk_ok = bool(np.all(np.abs(walk - heat) <= bound))
    elapsed = time.perf_counter() - start
    ok = adj <= 1e-14 and dual_gap <= 1e-6 and walk_ok and elapsed < 60
    detail = f"adjointness {adj:.1e}, dual-norm gap {dual_gap:.1e}, walkers within band={walk_ok}, {elapsed:.1f}s"
    criterion(9, "diffusion lattice", ok, detail)
    assert ok


def _joint_oracle(state, s):
    """Brute-force min of transport + reaction dissipation over all fluxes meeting the constraint."""
    g = state.grid
    n = g.n
    rho = state.rho
    rbar = [0.5 * (rho[y] + np.roll(rho[y], -1)) for y in range(2)]
    sigma = 2 * np.sqrt(state.kappa_fw * rho[0] * state.kappa_bw * rho[1])
    # unknowns: jA (n faces), jB (n faces), jre (n sites); constraint s = -div j + gamma jre
    div = np.zeros((n, n))
    for x in range(n):
        div[x, x] += 1.0 / g.eps
        div[x, (x - 1) % n] -= 1.0 / g.eps
    A = np.block([[-div, np.zeros((n, n)), -np.eye(n)], [np.zeros((n, n)), -div, np.eye(n)]])
    b = np.concatenate([s[0], s[1]])
    x0 = np.linalg.lstsq(A, b, rcond=None)[0]
    _, sv, vt = np.linalg.svd(A)
    null = vt[np.sum(sv > 1e-10):].T

    def cost(z):
        x = x0 + null @ z
        jA, jB, jr = x[:n], x[n : 2 * n], x[2 * n :]
        tr = np.sum(jA**2 / (4 * state.diffusivity[0] * rbar[0])) + np.sum(jB**2 / (4 * state.diffusivity[1] * rbar[1]))
        u = jr / sigma
        re = np.sum(sigma * (u * np.arcsinh(u) - np.sqrt(1 + u * u) + 1))
        return tr + re

    res = minimize(cost, np.zeros(null.shape[1]), method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    return res.fun


def test_criterion_10_reaction_diffusion_inf_convolution(criterion):
    rng = np.random.default_rng(10)
    g = lattice.Grid(1, 4, 1.0)
    gap = 0.0
    for _ in range(3):
        rho0 = rng.uniform(0.5, 2.0, (2, 4))
        state = lattice.RDState.initial(g, rho0, (1.0, 0.5), 1.5, 0.7)
        s = rng.normal(size=(2, 4))
        s -= (s[0] + s[1]).mean() / 2
        gap = max(gap, abs(lattice.rd_state_psi(state, s).value - _joint_oracle(state, s)))

    kf, kb = 2.0, 1.0
    uniform = np.stack([np.full(4, 1.0), np.full(4, 2.0)])  # kf rho_A = kb rho_B
    state = lattice.RDState.initial(g, uniform, (1.0, 1.0), kf, kb)
    a = 0.7
    value = lattice.rd_state_psi(state, np.stack([np.full(4, -a), np.full(4, a)])).value
    per_site = ldp.flux_L(a_to_b(kf, kb), [0.0], [1.0, 2.0], [a]).value
    site_gap = abs(value - 4 * per_site)
    ok = gap <= 1e-4 and site_gap <= 1e-8
    criterion(10, "reaction-diffusion inf-convolution", ok, f"oracle gap {gap:.1e}, site-limit gap {site_gap:.1e}")
    assert ok


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "fluxgrad", *args], cwd=cwd, capture_output=True, check=True)


def test_criterion_11_determinism(criterion, tmp_path):
    model = str(shipped_model_path("a_b"))
    outputs = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        _cli(["simulate", "--model", model, "--volume", "200", "--t-end", "1", "--replicates", "4", "--seed", "7",
              "--rho0", "3,0", "--out", "traj.csv", "--report", "env.json"], d)
        _cli(["verify", "--model", model, "--structure", "ggs", "--rho0", "2,1", "--samples", "4", "--out", "ggs.json"], d)
        outputs.append([(d / f).read_bytes() for f in ("traj.csv", "env.json", "ggs.json")])
    ok = outputs[0] == outputs[1]
    serial = dynamics.simulate_ensemble(a_to_b(), [3, 0], dynamics.JumpProcessConfig(100, 1.0, seed=3), 6, threads=1)
    threaded = dynamics.simulate_ensemble(a_to_b(), [3, 0], dynamics.JumpProcessConfig(100, 1.0, seed=3), 6, threads=3)
    ok &= all(np.array_equal(a.state_counts, b.state_counts) for a, b in zip(serial, threaded))
    criterion(11, "byte-identical payloads for fixed seeds", ok)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
