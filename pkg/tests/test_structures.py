import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import a_to_b, load
from fluxgrad.errors import NotDetailedBalanced
from fluxgrad.ldp import flux_H, flux_L
from fluxgrad.structures import (
    FreeEnergy,
    build_cosh_ggs,
    central_gradient,
    cosh_dissipation,
    energy_balance,
    reaction_mobility,
    relative_entropy,
    sample_flux_points,
    verify_ggen_nic,
    verify_ggs,
    verify_pggen,
)


# relative entropy and free energy


def test_relative_entropy_examples():
    assert relative_entropy([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_entropy([math.e, 1.0], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-15)
    assert relative_entropy([0.0, 1.0], [2.0, 1.0]) == pytest.approx(2.0)
    assert relative_entropy([1.0, 1.0], [0.0, 1.0]) == math.inf


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3),
    st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3),
    st.lists(st.floats(0.1, 5.0), min_size=3, max_size=3),
)
def test_relative_entropy_midpoint_convexity(a, b, ref):
    mid = relative_entropy(0.5 * (np.array(a) + np.array(b)), ref)
    assert relative_entropy(a, ref) >= 0 and relative_entropy(b, ref) >= 0
    assert mid <= 0.5 * (relative_entropy(a, ref) + relative_entropy(b, ref)) + 1e-12


def test_free_energy_gradient_matches_finite_differences(rng):
    net = load("na_cl2")
    rho0 = np.array([1.0, 2.0, 0.5])
    F, _ = build_cosh_ggs(net, rho0)
    for w in sample_flux_points(net, rho0, 5, seed=3):
        np.testing.assert_allclose(F.gradient(w), central_gradient(F, w), atol=1e-8)


def test_free_energy_vanishes_only_at_equilibrium():
    net = a_to_b(2.0, 1.0)
    F, _ = build_cosh_ggs(net, [3.0, 0.0])
    w_star = np.array([2.0])  # phi = (1, 2)
    assert F(w_star) == pytest.approx(0.0, abs=1e-15)
    assert F(w_star + 0.1) > 0 and F(w_star - 0.1) > 0


def test_no_detailed_balance_propagates():
    with pytest.raises(NotDetailedBalanced):
        build_cosh_ggs(load("three_cycle"), [1.0, 1.0, 1.0])


# dissipation pair


def test_cosh_pair_example():
    net = a_to_b(1.0, 1.0)
    pair = cosh_dissipation(net, [1.0, 1.0])
    w = np.zeros(1)
    assert reaction_mobility(net, [1.0, 1.0])[0] == 2.0
    # 2 (0.5 asinh 0.5 - sqrt 1.25 + 1) evaluates to 0.245144
    assert pair.psi(w, [1.0]) == pytest.approx(2 * (0.5 * math.asinh(0.5) - math.sqrt(1.25) + 1), abs=1e-14)
    assert pair.psi(w, [1.0]) == pytest.approx(0.245144, abs=1e-6)
    assert pair.psi_star(w, [0.4]) == pytest.approx(2 * (math.cosh(0.4) - 1), abs=1e-15)
    assert pair.psi(w, [0.0]) == 0.0 and pair.psi_star(w, [0.0]) == 0.0


@pytest.mark.parametrize("j", [-2.0, -0.5, 0.3, 1.0, 4.0])
def test_cosh_pair_conjugacy(j):
    net = load("chain3")
    rho0 = np.array([1.0, 0.5, 1.5])
    pair = cosh_dissipation(net, rho0)
    w = np.array([0.05, -0.1])
    js = np.array([j, -0.5 * j])
    total = 0.0
    for r in range(2):

        def neg(z, r=r):
            zeta = np.zeros(2)
            zeta[r] = z
            return -(z * js[r] - pair.psi_star(w, zeta))

        total += -minimize_scalar(neg, bounds=(-20, 20), method="bounded", options={"xatol": 1e-12}).fun
    assert pair.psi(w, js) == pytest.approx(total, abs=1e-8)


def test_psi_excludes_fast_flux():
    net = load("fast_catalytic")
    pair = cosh_dissipation(net, np.ones(4))
    w = np.zeros(3)
    assert math.isfinite(pair.psi(w, [0.2, 0.0, 0.0]))
    assert pair.psi(w, [0.2, 0.1, 0.0]) == math.inf


def test_force_at_zero_flux_example():
    # rho = (2, 1), rho* = (1.5, 1.5): d_j L(w, 0) = 1/2 log(1/2) = dF . gamma
    net = a_to_b(1.0, 1.0)
    rho0 = np.array([2.0, 1.0])
    F, _ = build_cosh_ggs(net, rho0)
    np.testing.assert_allclose(F.rho_star, [1.5, 1.5], rtol=1e-12)
    h = 1e-5
    fd = (flux_L(net, [0.0], rho0, [h]).value - flux_L(net, [0.0], rho0, [-h]).value) / (2 * h)
    assert fd == pytest.approx(0.5 * math.log(0.5), abs=1e-8)
    assert F.gradient([0.0])[0] == pytest.approx(0.5 * math.log(0.5), abs=1e-14)
    assert fd == pytest.approx(-0.34657, abs=1e-5)


@pytest.mark.parametrize("name", ["a_b", "na_cl2", "chain3", "two_channel"])
def test_dual_reconstruction_from_hamiltonian(name, rng):
    net = load(name)
    rho0 = np.linspace(0.8, 1.6, net.n_species)
    F, pair = build_cosh_ggs(net, rho0)
    for w in sample_flux_points(net, rho0, 10, seed=7):
        dF = F.gradient(w)
        zeta = rng.normal(size=net.n_reactions)
        rebuilt = flux_H(net, w, rho0, zeta + dF) - flux_H(net, w, rho0, dF)
        assert pair.psi_star(w, zeta) == pytest.approx(rebuilt, abs=1e-8)


# verification reports


@pytest.mark.parametrize("name", ["a_b", "na_cl2", "chain3", "two_channel"])
def test_detailed_balanced_models_pass_ggs(name):
    net = load(name)
    rho0 = np.linspace(0.8, 1.6, net.n_species)
    F, pair = build_cosh_ggs(net, rho0)
    report = verify_ggs(net, rho0, F, pair, samples=8)
    assert report.overall, report.to_dict()
    names = [c["name"] for c in report.to_dict()["conditions"]]
    assert names == sorted(["decomposition", "flux_at_force", "force_at_zero_flux", "dual_reconstruction"])


def test_three_cycle_fails_flux_at_force():
    net = load("three_cycle")
    rho0 = np.ones(3)
    rho_ss = np.array([1.0, 0.5, 1.0 / 3.0])
    rho_ss *= 3.0 / rho_ss.sum()
    F = FreeEnergy(net, rho0, rho_ss)
    report = verify_ggs(net, rho0, F, cosh_dissipation(net, rho0), samples=8)
    assert not report.overall
    assert report.condition("flux_at_force").residual > 0.1


def test_wrong_free_energy_is_caught():
    net = a_to_b(2.0, 1.0)
    rho0 = np.array([1.5, 1.5])
    _, pair = build_cosh_ggs(net, rho0)
    F_bad = FreeEnergy(net, rho0, np.array([1.5, 1.5]))
    report = verify_ggs(net, rho0, F_bad, pair, samples=5)
    assert not report.condition("flux_at_force").passed
    assert not report.condition("force_at_zero_flux").passed


def test_report_overall_requires_every_condition():
    net = a_to_b(2.0, 1.0)
    rho0 = np.array([1.5, 1.5])
    F, pair = build_cosh_ggs(net, rho0)
    report = verify_ggs(net, rho0, F, pair, samples=3)
    assert report.overall
    report.condition("decomposition").passed = False
    assert not report.overall
    with pytest.raises(KeyError):
        report.condition("nonexistent")


def test_pggen_fast_catalytic_passes():
    net = load("fast_catalytic")
    rho0 = np.ones(4)
    F, pair = build_cosh_ggs(net, rho0)
    report = verify_pggen(net, rho0, F, pair, samples=8)
    assert report.overall, report.to_dict()
    assert report.condition("orthogonality").residual <= 1e-10


def test_pggen_without_fast_reactions_is_ggs():
    net = load("chain3")
    rho0 = np.array([1.0, 0.5, 1.5])
    F, pair = build_cosh_ggs(net, rho0)
    ggs = verify_ggs(net, rho0, F, pair, samples=6)
    pggen = verify_pggen(net, rho0, F, pair, samples=6)
    assert ggs.overall and pggen.overall
    assert pggen.condition("divergence_free").residual == 0.0
    assert pggen.condition("orthogonality").residual == 0.0
    assert pggen.condition("shifted_decomposition").residual == ggs.condition("decomposition").residual
    assert pggen.condition("drift_identity").residual == ggs.condition("flux_at_force").residual


def test_pggen_leaky_drift_reports_orthogonality_residual():
    net = load("fast_leaky")
    rho0 = np.array([1.0, 1.0])
    F, pair = build_cosh_ggs(net, rho0)
    report = verify_pggen(net, rho0, F, pair, samples=6)
    assert not report.condition("divergence_free").passed
    assert not report.condition("orthogonality").passed
    # direct evaluation at the witness
    w = np.array(report.condition("orthogonality").witness)
    k_fast = 0.5 * net.phi(rho0, w)[0]
    direct = abs(F.gradient(w) @ np.array([0.0, k_fast]))
    assert report.condition("orthogonality").residual == pytest.approx(direct, rel=1e-12)
    assert report.condition("orthogonality").residual > 0


def test_nic_trivial_cases():
    net = load("chain3")
    rho0 = np.array([1.0, 0.5, 1.5])
    F, pair = build_cosh_ggs(net, rho0)
    zero = np.zeros((2, 2))
    report = verify_ggen_nic(pair, F, lambda w: float(w @ w), zero, samples=4)
    assert report.condition("skew_symmetry").passed and report.condition("degeneracy").passed
    assert verify_ggen_nic(pair, F, lambda w: 3.0, zero, samples=4).condition("shift_invariance").residual <= 1e-8


def test_nic_cosh_is_not_shift_invariant():
    net = load("chain3")
    rho0 = np.array([1.0, 0.5, 1.5])
    F, pair = build_cosh_ggs(net, rho0)
    report = verify_ggen_nic(pair, F, lambda w: float(w[0]), np.zeros((2, 2)), samples=4)
    shift = report.condition("shift_invariance")
    assert not shift.passed
    # at zeta = 0 and lam = 1 the shift alone costs sigma_0 (cosh 1 - 1) > 0
    w = np.array(shift.witness)
    sigma = reaction_mobility(net, net.phi(rho0, w))[0]
    assert shift.residual >= sigma * (math.cosh(1.0) - 1) - 1e-8


def test_nic_skew_and_degeneracy():
    net = load("chain3")
    rho0 = np.array([1.0, 0.5, 1.5])
    F, pair = build_cosh_ggs(net, rho0)
    sym = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert not verify_ggen_nic(pair, F, lambda w: 0.0, sym, samples=4).condition("skew_symmetry").passed
    skew = np.array([[0.0, 1.0], [-1.0, 0.0]])
    report = verify_ggen_nic(pair, F, lambda w: 0.0, skew, samples=4)
    assert report.condition("skew_symmetry").passed
    assert not report.condition("degeneracy").passed


# energy balance along the flow


@pytest.mark.parametrize("name,rho0", [("a_b", [3.0, 0.0]), ("chain3", [2.0, 0.5, 0.5]), ("na_cl2", [1.0, 2.0, 0.5])])
def test_free_energy_decreases_along_flow(name, rho0):
    net = load(name)
    rho0 = np.array(rho0) + 1e-3
    F, pair = build_cosh_ggs(net, rho0)
    res = energy_balance(net, rho0, F, pair, t_end=2.0, n_record=41)
    assert res.max_increase <= 1e-9
    assert res.F_end < res.F_start


def test_energy_balance_chain():
    net = load("chain3")
    rho0 = np.array([2.0, 0.5, 0.5])
    F, pair = build_cosh_ggs(net, rho0)
    res = energy_balance(net, rho0, F, pair, t_end=2.0, n_record=41)
    assert abs(res.residual) <= 1e-5
