import numpy as np
import pytest

from fermicavity import observables as obs
from fermicavity.config import FieldSpec, Quantization, SimulationConfig
from fermicavity.errors import ConfigError, IncompatibleSolverError
from fermicavity.fock import build_hamiltonian, build_mode_table, initial_state
from fermicavity.moments import (
    ClosureOrder,
    MomentState,
    closure_third_order,
    exact_moments,
    factorization_diagnostics,
    init_moments,
    integrate_moments,
    moment_model,
    rhs_first_order,
    rhs_second_order,
    run_moments,
)
from fermicavity.propagator import propagate
from fermicavity.simulation import run_exact


def rw(field, **kw):
    kw.setdefault("t_grid", np.linspace(0, 3, 31))
    return SimulationConfig(field, **kw)


def probabilities(series):
    return {k: v for k, v in series.channels.items() if k.startswith("P_p")}


def exact_state(cfg, t):
    ens = initial_state(build_mode_table(cfg), cfg.field, cfg.quantization)
    _, sv = ens.components[0]
    H = build_hamiltonian(sv.basis, cfg)
    psi = propagate(H, sv.amplitudes, [0.0, t]).states[-1]
    return H, sv.basis, psi


# --- initial data -----------------------------------------------------------------


def test_fock_field_has_no_relative_phase():
    cfg = rw(FieldSpec.fock(3, 3))
    m = init_moments(build_mode_table(cfg), cfg.field, ClosureOrder.SECOND)
    assert m.f[0, 1] == 0 and np.allclose(np.diag(m.f), [3, 3])


def test_coherent_field_cross_moment():
    cfg = rw(FieldSpec.coherent(3, 3))
    m = init_moments(build_mode_table(cfg), cfg.field, ClosureOrder.FIRST)
    assert m.f[0, 1] == pytest.approx(3.0)


def test_fermi_sea_occupations():
    cfg = rw(FieldSpec.fock(3, 3), Na=2, nd=2)
    table = build_mode_table(cfg)
    m = init_moments(table, cfg.field, ClosureOrder.FIRST)
    occ = np.real(np.diag(m.rho))
    assert occ.sum() == 2 and set(occ) == {0.0, 1.0}
    assert np.all(occ[table.position[:, table.initial_rung]] == 1)


@pytest.mark.parametrize("field", [FieldSpec.fock(2, 1), FieldSpec.coherent(1.5, 0.5, phases=(0.3, -0.2))])
def test_second_order_initial_data_is_exact(field):
    cfg = rw(field, Na=2, nd=1, kF=0.2)
    table = build_mode_table(cfg)
    m = init_moments(table, field, ClosureOrder.SECOND)
    ens = initial_state(table, field, cfg.quantization)
    per_sector = [exact_moments(sv.amplitudes, sv.basis).tensors() for _, sv in ens.components]
    weighted = [sum(w * t for w, t in zip(ens.weights, ts)) for ts in zip(*per_sector)]
    for mine, ref in zip(m.tensors(), weighted):
        assert np.abs(mine - ref).max() < 1e-6


# --- first order ------------------------------------------------------------------------


def test_first_order_predicts_no_scattering_from_fock_light():
    cfg = rw(FieldSpec.fock(3, 3), nd=3, t_grid=np.linspace(0, 10, 101))
    series, _ = run_moments(cfg, ClosureOrder.FIRST)
    for values in probabilities(series).values():
        assert np.abs(values - values[0]).max() <= 1e-12


def test_first_order_field_moments_and_trace_are_constant():
    cfg = rw(FieldSpec.coherent(3, 3, phases=(0.0, 0.7)), nd=3, t_grid=np.linspace(0, 5, 51))
    _, traj = run_moments(cfg, ClosureOrder.FIRST)
    f = traj.field()
    assert np.abs(f - f[0]).max() <= 1e-10
    assert np.abs(traj.occupations().sum(axis=1) - 2).max() <= 1e-10


def test_unbalanced_mean_field_exchanges_photons_but_keeps_totals():
    cfg = rw(FieldSpec.coherent(3, 2), nd=3, t_grid=np.linspace(0, 5, 51))
    _, traj = run_moments(cfg, ClosureOrder.FIRST)
    f = traj.field()
    assert np.abs(f - f[0]).max() > 0.1
    total = np.real(f[:, 0, 0] + f[:, 1, 1])
    assert np.abs(total - 5).max() <= 1e-10
    assert np.abs(traj.occupations().sum(axis=1) - 2).max() <= 1e-10


def test_coherent_mean_field_is_a_classical_standing_wave():
    # <a_q^+ a_-q> = 3 acts like a standing wave with g N / 2 = 3
    times = np.linspace(0, 4, 41)
    rw_series, _ = run_moments(rw(FieldSpec.coherent(3, 3), nd=4, t_grid=times), ClosureOrder.FIRST)
    sw_cfg = SimulationConfig(FieldSpec.fock(6), quantization=Quantization.STANDING, nd=4, t_grid=times)
    sw_series = run_exact(sw_cfg).series
    for key, values in probabilities(rw_series).items():
        assert np.abs(values - sw_series.channels[key]).max() < 1e-8


@pytest.mark.parametrize("Na,field", [(1, FieldSpec.fock(6)), (2, FieldSpec.fock(4)), (2, FieldSpec.coherent(3))])
def test_standing_wave_first_order_is_exact(Na, field):
    cfg = SimulationConfig(field, quantization=Quantization.STANDING, Na=Na, nd=4, E2q=1.0, t_grid=np.linspace(0, 5, 26))
    mom, _ = run_moments(cfg, ClosureOrder.FIRST)
    ex = run_exact(cfg).series
    for key, values in probabilities(mom).items():
        assert np.abs(values - ex.channels[key]).max() <= 1e-8


def test_zero_coupling_freezes_occupations():
    cfg = rw(FieldSpec.coherent(3, 3), nd=2, g=0.0, t_grid=np.linspace(0, 3, 7))
    for order in ClosureOrder:
        _, traj = run_moments(cfg, order)
        occ = traj.occupations()
        assert np.abs(occ - occ[0]).max() < 1e-12


def test_standing_wave_refuses_second_order():
    cfg = SimulationConfig(FieldSpec.fock(6), quantization=Quantization.STANDING)
    with pytest.raises(IncompatibleSolverError):
        run_moments(cfg, ClosureOrder.SECOND)


# --- second order equations --------------------------------------------------------------


def test_unclosed_second_order_equations_match_exact_derivatives():
    cfg = rw(FieldSpec.fock(2, 0), Na=1, nd=2, E2q=0.6, g=0.9)
    H, basis, psi = exact_state(cfg, 0.8)
    phi = -1j * (H.matrix @ psi)
    # d<O>/dt = <psi|O|phi> + <phi|O|psi> = (<u|O|u> - <v|O|v>) / 2
    up = exact_moments(psi + phi, basis).tensors()
    down = exact_moments(psi - phi, basis).tensors()
    derivative = [(a - b) / 2 for a, b in zip(up, down)]
    state, third = exact_moments(psi, basis, with_third=True)
    model = moment_model(cfg)
    rhs = rhs_second_order(state, model, third_order=lambda _m: third)
    for mine, ref in zip(rhs.tensors(), derivative):
        assert np.abs(mine - ref).max() <= 1e-6


def test_first_order_equations_match_exact_derivative_for_single_sector_field():
    # with one photon mode empty the product closure is exact at t = 0
    cfg = rw(FieldSpec.fock(0, 0), Na=1, nd=2)
    model = moment_model(cfg)
    m = init_moments(model.table, cfg.field, ClosureOrder.FIRST)
    d = rhs_first_order(m, model)
    assert np.abs(d.rho).max() == 0 and np.abs(d.f).max() == 0


@pytest.mark.parametrize("ordering", ["symmetric", "literal"])
def test_substituted_closure_matches_materialized_tensors(ordering):
    cfg = rw(FieldSpec.coherent(1.2, 0.8, phases=(0.4, 0.0)), Na=2, nd=1, kF=0.15)
    _, basis, psi = exact_state(cfg.replace(field=FieldSpec.fock(1, 1)), 0.6)
    state = exact_moments(psi, basis)
    model = moment_model(cfg)
    direct = rhs_second_order(state, model, ordering=ordering)
    built = rhs_second_order(state, model, third_order=lambda mm: closure_third_order(mm, ordering))
    for a, b in zip(direct.tensors(), built.tensors()):
        assert np.abs(a - b).max() < 1e-12


def test_closure_is_exact_on_the_uncorrelated_initial_state():
    cfg = rw(FieldSpec.fock(2, 1), Na=1, nd=1)
    table = build_mode_table(cfg)
    ens = initial_state(table, cfg.field, cfg.quantization)
    _, sv = ens.components[0]
    state, (T3f, T3a) = exact_moments(sv.amplitudes, sv.basis, with_third=True)
    fff, faa = closure_third_order(state)
    assert np.abs(fff - T3f).max() < 1e-12 and np.abs(faa - T3a).max() < 1e-12


def test_unknown_ordering_rejected():
    cfg = rw(FieldSpec.fock(1, 1), Na=1, nd=1)
    model = moment_model(cfg)
    m = init_moments(model.table, cfg.field, ClosureOrder.SECOND)
    with pytest.raises(ConfigError):
        rhs_second_order(m, model, ordering="normal")


def test_second_order_lets_fock_light_scatter():
    cfg = rw(FieldSpec.fock(3, 3), nd=2, t_grid=np.linspace(0, 1, 11))
    series, _ = run_moments(cfg, ClosureOrder.SECOND)
    side = series.channels["P_p+1.9"] + series.channels["P_p+2.1"]
    assert side[0] == 0 and side[-1] > 1e-2


def test_second_order_negative_occupation_is_reported_not_clipped():
    cfg = rw(FieldSpec.fock(3, 3), nd=2, t_grid=np.linspace(0, 1, 21))
    series, traj = run_moments(cfg, ClosureOrder.SECOND)
    assert traj.negative_occupation_time == pytest.approx(0.25)
    assert traj.negative_occupation_value < -1e-3
    assert traj.occupations().min() == pytest.approx(min(v.min() for v in probabilities(series).values()))
    assert any("negative occupation" in f for f in series.flags)


def test_hermiticity_is_preserved_by_the_symmetric_closure():
    cfg = rw(FieldSpec.coherent(3, 3), nd=2, t_grid=np.linspace(0, 2, 21))
    _, traj = run_moments(cfg, ClosureOrder.SECOND)
    assert traj.max_hermiticity_deviation <= 1e-8 * 2
    for s in traj.states:
        assert np.abs(s.rho - s.rho.conj().T).max() < 1e-12
    assert np.abs(traj.occupations().sum(axis=1) - 2).max() < 1e-8


def test_literal_closure_breaks_hermiticity_for_coherent_light():
    cfg = rw(FieldSpec.coherent(3, 3), nd=1, t_grid=np.linspace(0, 1, 3))
    model = moment_model(cfg)
    m0 = init_moments(model.table, cfg.field, ClosureOrder.SECOND)
    traj = integrate_moments(m0, lambda m: rhs_second_order(m, model, ordering="literal"), cfg.t_grid)
    assert traj.max_hermiticity_deviation > 1e-3


def test_symmetrized_reports_deviation():
    rho = np.array([[1.0, 0.2], [0.0, 0.0]], complex)
    out, dev = MomentState(ClosureOrder.FIRST, rho).symmetrized()
    assert dev == pytest.approx(0.2) and np.allclose(out.rho, out.rho.conj().T)


# --- factorization diagnostics --------------------------------------------------------------


def test_third_order_factorization_on_exact_states():
    cfg = rw(FieldSpec.fock(3, 3), nd=2)
    H, basis, psi0 = exact_state(cfg, 0.0)
    times = np.linspace(0, 3, 13)
    states = propagate(H, psi0, times).states
    for which in ("ffa", "faa"):
        exact = np.array([obs.third_order_exact(p, basis, which) for p in states])
        fac = np.array([obs.factorized_third_order(*obs.factorization_components(p, basis, which), which) for p in states])
        report = factorization_diagnostics(exact, fac)
        assert report["abs_error"][0] < 1e-12
        assert report["abs_error"].max() > 1e-3
        assert np.abs(exact.imag).max() < 1e-10 and exact.real.min() >= -1e-12


def test_diagnostics_require_matching_grids():
    with pytest.raises(ConfigError):
        factorization_diagnostics(np.zeros(3), np.zeros(4))
