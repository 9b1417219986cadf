import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_evolution

from fermicavity.bragg import BraggConfig, bragg_spectrum, build_bragg_hamiltonian_sw
from fermicavity.config import FieldSpec, Quantization, SimulationConfig
from fermicavity.errors import ConfigError, NumericalError
from fermicavity.fock import SparseOperator, build_hamiltonian, build_mode_table, conserved_operators, initial_state
from fermicavity.propagator import (
    SpectrumProjection,
    band_analysis,
    eigendecompose,
    label_blocks,
    norm_estimate,
    propagate,
    spectral_projection,
)


def op(dense):
    return SparseOperator(sp.csr_matrix(np.asarray(dense, dtype=complex)), hermitian=True)


def sector(cfg, which=0):
    ens = initial_state(build_mode_table(cfg), cfg.field, cfg.quantization)
    _, sv = ens.components[which]
    return build_hamiltonian(sv.basis, cfg), sv


def fig2a_small():
    cfg = SimulationConfig(FieldSpec.fock(3, 3), Na=2, nd=1, kF=0.1, E2q=1.0, t_grid=np.linspace(0, 10, 21))
    return cfg, *sector(cfg)


@pytest.mark.parametrize("method", ["eig", "krylov"])
def test_zero_hamiltonian_leaves_state_alone(method):
    psi0 = np.array([0.6, 0.8j])
    traj = propagate(op(np.zeros((2, 2))), psi0, [0, 1, 5], method=method)
    assert all(np.allclose(s, psi0) for s in traj.states)


@pytest.mark.parametrize("method", ["eig", "krylov"])
def test_resonant_two_level_rabi_flopping(method):
    g = 0.7
    times = np.linspace(0, 6, 25)
    traj = propagate(op([[0, g], [g, 0]]), np.array([1, 0]), times, method=method)
    flip = np.abs(np.array(traj.states)[:, 1]) ** 2
    assert np.abs(flip - np.sin(g * times) ** 2).max() < 1e-10


def test_63_dimensional_raman_nath_sector_matches_dense_exponential():
    cfg, H, sv = fig2a_small()
    assert H.dim == 63
    oracle = dense_evolution(H.dense(), sv.amplitudes, cfg.t_grid)
    for method in ("eig", "krylov"):
        traj = propagate(H, sv.amplitudes, cfg.t_grid, method=method)
        assert np.abs(np.array(traj.states) - oracle).max() <= 1e-8


def test_blockwise_evolution_matches_full_sector():
    cfg, H, sv = fig2a_small()
    P = conserved_operators(cfg, sv.basis)["P"].matrix.diagonal().real
    blocks = label_blocks(H, P)
    assert len(blocks) > 1 and sum(map(len, blocks)) == H.dim
    a = propagate(H, sv.amplitudes, cfg.t_grid, blocks=blocks).states
    b = propagate(H, sv.amplitudes, cfg.t_grid, method="eig").states
    assert np.abs(np.array(a) - np.array(b)).max() < 1e-12


def test_labels_that_do_not_commute_are_rejected():
    with pytest.raises(ConfigError):
        label_blocks(op([[0, 1], [1, 0]]), np.array([0.0, 1.0]))


def test_split_propagation_equals_single_shot():
    cfg, H, sv = fig2a_small()
    first = propagate(H, sv.amplitudes, [0.0, 3.0], method="krylov").states[-1]
    second = propagate(H, first, [0.0, 4.0], method="krylov").states[-1]
    direct = propagate(H, sv.amplitudes, [0.0, 7.0], method="krylov").states[-1]
    assert np.abs(second - direct).max() <= 1e-8


@settings(max_examples=8, deadline=None)
@given(Na=st.integers(1, 3), nd=st.integers(1, 2), N=st.integers(0, 6), E2q=st.floats(0, 2), kF=st.floats(0, 0.4))
def test_eigendecomposition_and_stepping_agree(Na, nd, N, E2q, kF):
    cfg = SimulationConfig(FieldSpec.fock(N, 0), Na=Na, nd=nd, kF=kF, E2q=E2q)
    H, sv = sector(cfg)
    if H.dim > 1000:
        return
    times = np.linspace(0, 3, 4)
    a = np.array(propagate(H, sv.amplitudes, times, method="eig").states)
    b = np.array(propagate(H, sv.amplitudes, times, method="krylov").states)
    assert np.abs(a - b).max() <= 1e-7


def test_energy_and_conserved_quantities_are_constant():
    cfg, H, sv = fig2a_small()
    ops = conserved_operators(cfg, sv.basis)
    channels = {"E": lambda psi: H.expect(psi).real}
    channels.update({k: (lambda psi, o=o: o.expect(psi).real) for k, o in ops.items()})
    traj = propagate(H, sv.amplitudes, cfg.t_grid, method="krylov", observables=channels, keep_states=False)
    for values in traj.observables.values():
        assert np.abs(values - values[0]).max() <= 1e-8 * max(1.0, abs(values[0]))
    assert traj.states is None and traj.max_norm_drift < 1e-10


@pytest.mark.parametrize(
    "kwargs",
    [dict(psi0=np.ones(3)), dict(tol=1e-3), dict(times=[1.0, 0.5]), dict(method="rk4")],
)
def test_propagate_rejects_bad_input(kwargs):
    args = dict(H=op(np.eye(2)), psi0=np.array([1.0, 0.0]), times=[0.0, 1.0])
    args.update(kwargs)
    with pytest.raises(ConfigError):
        propagate(**args)


def test_runaway_norm_aborts():
    leaky = SparseOperator(sp.csr_matrix(np.array([[-0.5j, 0], [0, 0]])))
    with pytest.raises(NumericalError):
        propagate(leaky, np.array([1.0, 0.0]), [0.0, 1.0], method="krylov")


def test_norm_estimate_finds_largest_eigenvalue():
    cfg, H, _ = fig2a_small()
    top = np.abs(np.linalg.eigvalsh(H.dense())).max()
    assert norm_estimate(H) == pytest.approx(top, rel=0.05)


def test_diagonal_hamiltonian_decomposes_trivially():
    w, V = eigendecompose(op(np.diag([3.0, -1.0, 2.0])))
    assert np.allclose(w, [-1.0, 2.0, 3.0])
    assert np.allclose(np.abs(V), np.eye(3)[:, [1, 2, 0]])


def test_eigendecomposition_cap():
    with pytest.raises(ConfigError):
        eigendecompose(op(np.eye(4)), cap=3)


def test_standing_wave_bragg_block_eigengap():
    for k, photons in ((0.1, 12), (0.05, 7)):
        cfg = BraggConfig(3, k, 50.0, 1.0, FieldSpec.fock(photons), Quantization.STANDING)
        for dw, block in zip(cfg.detunings, build_bragg_hamiltonian_sw(cfg, photons)):
            w, _ = eigendecompose(op(block))
            assert w[1] - w[0] == pytest.approx(2 * np.sqrt((dw / 2) ** 2 + (photons / 2) ** 2), rel=1e-14)


def test_projection_of_an_eigenvector():
    w, V = eigendecompose(op([[1.0, 0.3], [0.3, -1.0]]))
    proj = spectral_projection((w, V), V[:, 1])
    assert np.allclose(proj.weights, [0, 1], atol=1e-15)
    proj = spectral_projection((w, V), (V[:, 0] + V[:, 1]) / np.sqrt(2))
    assert np.allclose(proj.weights, [0.5, 0.5])


def test_even_band_spacing_means_no_revival_beat():
    proj = SpectrumProjection(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), np.full(5, 0.2))
    assert band_analysis(proj).inverse_revival_frequency == 0.0


def test_two_bands_leave_the_revival_undefined():
    proj = SpectrumProjection(np.array([-1.0, -0.99, 1.0, 1.01]), np.full(4, 0.25))
    res = band_analysis(proj)
    assert len(res.bands) == 2 and res.inverse_revival_frequency is None
    assert res.revival_time is None


def test_band_clustering_and_widths():
    freqs = np.array([-3.0, -2.99, -1.0, -0.98, 1.01, 1.0, 3.0])
    proj = SpectrumProjection(freqs, np.full(7, 1 / 7))
    res = band_analysis(proj)
    assert [len(b.members) for b in res.bands] == [2, 2, 2, 1]
    assert sum(b.weight for b in res.bands) == pytest.approx(1.0)
    assert res.inverse_revival_frequency == pytest.approx(0.01, abs=1e-12)
    assert band_analysis(proj, cluster_gap=0.0).bands[0].width == 0.0


def test_weightless_projection_rejected():
    with pytest.raises(ConfigError):
        band_analysis(SpectrumProjection(np.zeros(2), np.zeros(2)))


def test_bragg_spectrum_weights_sum_to_one_and_few_bands_dominate():
    cfg = BraggConfig(5, 0.1, 50.0, 1.0, FieldSpec.fock(6, 6))
    proj = bragg_spectrum(cfg)
    assert proj.weights.sum() == pytest.approx(1.0, abs=1e-8)
    res = band_analysis(proj)
    top = sorted((b.weight for b in res.bands), reverse=True)[:8]
    assert sum(top) >= 0.99


def test_revival_beat_approaches_matrix_element_estimate_with_photon_number():
    # the neighbouring-m estimate sqrt((j+1)j) - sqrt((j+2)(j-1)) is a large-j statement
    ratios = []
    for n in (6, 12, 20):
        cfg = BraggConfig(5, 0.0, 50.0, 1.0, FieldSpec.fock(n, n))
        beat = band_analysis(bragg_spectrum(cfg)).inverse_revival_frequency
        j = n
        ratios.append(beat / (np.sqrt((j + 1) * j) - np.sqrt((j + 2) * (j - 1))))
    assert ratios[0] > ratios[1] > ratios[2] > 1.0
