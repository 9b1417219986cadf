import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_evolution, distinguishable_rw

from fermicavity import observables as obs
from fermicavity.config import FieldSpec, Quantization, Regime, SimulationConfig
from fermicavity.errors import ConfigError
from fermicavity.fock import build_hamiltonian, build_mode_table, initial_state
from fermicavity.propagator import propagate
from fermicavity.simulation import run_exact


def sector(cfg):
    ens = initial_state(build_mode_table(cfg), cfg.field, cfg.quantization)
    return ens.components[0][1]


def evolved(cfg, t):
    sv = sector(cfg)
    H = build_hamiltonian(sv.basis, cfg)
    return propagate(H, sv.amplitudes, [0.0, t], method="krylov").states[-1], sv.basis


RN = SimulationConfig(FieldSpec.fock(3, 3), Na=2, nd=2, kF=0.1, E2q=1.0)
BRAGG = SimulationConfig(FieldSpec.fock(3, 3), Na=2, kF=0.1, E2q=20.0, regime=Regime.BRAGG)


def test_initial_occupations_are_one_or_zero():
    sv = sector(RN)
    for p in (-0.1, 0.1):
        assert obs.occupation(sv.amplitudes, sv.basis, p) == 1.0
    for p in (-2.1, 1.9, 4.1):
        assert obs.occupation(sv.amplitudes, sv.basis, p) == 0.0


def test_occupations_sum_to_atom_number():
    res = run_exact(RN.replace(t_grid=np.linspace(0, 5, 11)))
    total = sum(v for k, v in res.series.channels.items() if k.startswith("P_"))
    assert np.allclose(total, 2.0, atol=1e-10)
    assert np.all((res.rung_probabilities >= -1e-12) & (res.rung_probabilities <= 1 + 1e-12))


def test_nobody_is_scattered_initially():
    sv = sector(BRAGG)
    assert obs.n_scattered(sv.amplitudes, sv.basis) == 0.0


def test_scattered_count_needs_bragg_basis():
    sv = sector(RN)
    with pytest.raises(ConfigError):
        obs.n_scattered(sv.amplitudes, sv.basis)


def test_resonant_standing_wave_scatters_every_atom():
    cfg = SimulationConfig(
        FieldSpec.fock(12), Na=5, kF=0.0, E2q=50.0, regime=Regime.BRAGG,
        quantization=Quantization.STANDING,
    )
    psi, basis = evolved(cfg, np.pi / 12)
    assert obs.n_scattered(psi, basis) == pytest.approx(5.0, abs=1e-9)


# --- chi --------------------------------------------------------------------------


def test_chi_vanishes_for_a_product_state():
    sv = sector(RN)
    assert obs.cross_correlation_chi(sv.amplitudes, sv.basis) == 0.0


def test_chi_matches_distinguishable_atom_oracle():
    nd, L, times = 2, 5, np.linspace(0, 4, 9)
    res = run_exact(RN.replace(t_grid=times))
    H = distinguishable_rw(2, 0.1, nd, 1.0, 1.0, 6)
    n = np.arange(7)
    A = np.kron(np.diag(np.sqrt((n[:-1] + 1.0) * (6 - n[:-1])), -1), np.eye(L * L))
    lower = np.diag(np.ones(L - 1), 1)
    B = np.kron(np.eye(7), np.kron(lower, np.eye(L)) + np.kron(np.eye(L), lower))
    psi0 = np.zeros(H.shape[0])
    psi0[3 * L * L + nd * L + nd] = 1.0
    chi = []
    for psi in dense_evolution(H, psi0, times):
        ab, a, b = (np.vdot(psi, M @ psi) for M in (A @ B, A, B))
        chi.append(ab - a * b)
    chi = np.array(chi)
    assert np.abs(res.series.channels["chi_re"] - chi.real).max() <= 1e-10
    assert np.abs(res.series.channels["chi_im"] - chi.imag).max() <= 1e-10
    assert np.abs(chi).max() > 0.1


def test_chi_is_real_for_fock_light():
    res = run_exact(RN.replace(t_grid=np.linspace(0, 5, 11)))
    assert np.abs(res.series.channels["chi_im"]).max() <= 1e-12


def test_chi_undefined_for_standing_wave():
    sv = sector(SimulationConfig(FieldSpec.fock(4), quantization=Quantization.STANDING))
    with pytest.raises(ConfigError):
        obs.ChiOperators(sv.basis)


def test_ensemble_chi_starts_at_zero_for_coherent_light():
    cfg = RN.replace(field=FieldSpec.coherent(2, 2))
    ens = initial_state(build_mode_table(cfg), cfg.field, cfg.quantization)
    assert len(ens.components) > 1 and obs.ensemble_chi(ens) == 0.0


# --- products of bilinears ---------------------------------------------------------


def test_third_order_correlators_of_the_initial_state():
    sv = sector(RN.replace(field=FieldSpec.fock(3, 3)))
    assert obs.third_order_exact(sv.amplitudes, sv.basis, "ffa") == pytest.approx(12.0)
    assert obs.third_order_exact(sv.amplitudes, sv.basis, "faa") == pytest.approx(3.0)


def test_third_order_correlators_vanish_without_photons():
    sv = sector(RN.replace(field=FieldSpec.fock(0, 0)))
    for which in ("ffa", "faa"):
        assert obs.third_order_exact(sv.amplitudes, sv.basis, which) == 0.0


def test_evolved_third_order_correlators_are_real_and_non_negative():
    psi, basis = evolved(RN, 2.0)
    for which in ("ffa", "faa"):
        v = obs.third_order_exact(psi, basis, which)
        assert abs(v.imag) <= 1e-12 and v.real >= 0.0


def test_factorization_is_exact_on_a_basis_state():
    sv = sector(RN)
    for which in ("ffa", "faa"):
        first, second = obs.factorization_components(sv.amplitudes, sv.basis, which)
        fac = obs.factorized_third_order(first, second, which)
        assert fac == pytest.approx(obs.third_order_exact(sv.amplitudes, sv.basis, which), abs=1e-12)


def test_unknown_correlator_rejected():
    with pytest.raises(ValueError):
        obs.third_order_ops("fff", 0)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    ops=st.lists(
        st.one_of(
            st.tuples(st.just("f"), st.integers(0, 1), st.integers(0, 1)),
            st.tuples(st.just("c"), st.integers(0, 9), st.integers(0, 9)),
        ),
        min_size=1,
        max_size=4,
    ),
)
def test_adjoint_products_give_conjugate_expectations(seed, ops):
    basis = sector(RN).basis
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    psi /= np.linalg.norm(psi)
    a = obs.expect_product(psi, basis, ops)
    b = obs.expect_product(psi, basis, obs.adjoint_ops(ops))
    assert abs(a - np.conj(b)) <= 1e-10


def test_number_operator_products_count_photons():
    sv = sector(RN.replace(field=FieldSpec.fock(2, 5)))
    assert obs.expect_product(sv.amplitudes, sv.basis, [("f", 1, 1), ("f", 0, 0)]) == pytest.approx(10.0)


def test_bad_operator_specifications():
    sv = sector(RN)
    with pytest.raises(IndexError):
        obs.apply_product(sv.amplitudes, sv.basis, [("c", 99, 0)])
    with pytest.raises(ValueError):
        obs.apply_product(sv.amplitudes, sv.basis, [("x", 0, 0)])


# --- Poisson averaging and labels ---------------------------------------------------


def test_poisson_average_of_a_constant_is_that_constant():
    per_n = {n: np.full(4, 2.5) for n in range(40)}
    assert np.allclose(obs.poisson_average(per_n, 6.0), 2.5, rtol=1e-14)


def test_poisson_average_demands_coverage():
    with pytest.raises(ConfigError):
        obs.poisson_average({n: np.ones(2) for n in range(4, 9)}, 6.0)


def test_coherent_standing_wave_is_poisson_average_of_fock_runs():
    times = np.linspace(0, 3, 7)
    base = SimulationConfig(
        FieldSpec.coherent(3), Na=1, nd=2, E2q=1.0, quantization=Quantization.STANDING, t_grid=times
    )
    coherent = run_exact(base)
    sectors, _ = base.field.sector_weights()
    label = obs.channel_label(2.0)
    per_n = {int(n): run_exact(base.replace(field=FieldSpec.fock(int(n)))).series.channels[label] for n in sectors}
    expected = obs.poisson_average(per_n, 3.0, base.field.truncation_epsilon)
    assert np.abs(coherent.series.channels[label] - expected).max() <= 1e-10


@pytest.mark.parametrize("p,label", [(0.1, "P_p+0.1"), (-2.1, "P_p-2.1"), (-1e-15, "P_p+0"), (2.0, "P_p+2")])
def test_channel_labels(p, label):
    assert obs.channel_label(p) == label
