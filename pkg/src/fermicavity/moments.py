"""Truncated moment hierarchies for the atom-field system.

Operators are written with the bilinears E^c_ab = c_a^+ c_b (atoms, indexed
by canonical ladder position) and E^f_ab = a_a^+ a_b (photons, 0 = +q,
1 = -q).  Both families obey [E_ab, E_cd] = d_bc E_ad - d_ad E_cb, so the
Hamiltonian

    H = sum_a eps_a E^c_aa + sum G[al, be, a, b] E^f_{al be} E^c_ab

generates the equations of motion below without any reference to
statistics.  Carried moments (all products kept in the written order):

    rho[c, d]          <E^c_cd>
    f[g, d]            <E^f_gd>
    X[g, d, c, e]      <E^f_gd E^c_ce>
    F[g, d, m, n]      <E^f_gd E^f_mn>
    C[a, b, c, d]      <E^c_ab E^c_cd>

First order closes with X = f rho; second order closes the three-bilinear
moments by pair factorization.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .config import FieldKind, FieldSpec, Quantization, SimulationConfig
from .errors import ConfigError, IncompatibleSolverError, NumericalError
from .fock import ModeTable, build_mode_table
from .observables import ObservableSeries, channel_label, poisson_average

log = logging.getLogger(__name__)

NEGATIVE_THRESHOLD = 1e-10


class ClosureOrder(enum.Enum):
    FIRST = 1
    SECOND = 2


@dataclass
class MomentState:
    order: ClosureOrder
    rho: np.ndarray
    f: np.ndarray | None = None
    X: np.ndarray | None = None
    F: np.ndarray | None = None
    C: np.ndarray | None = None

    def tensors(self) -> list[np.ndarray]:
        names = ["rho"] if self.f is None else ["rho", "f"]
        if self.order is ClosureOrder.SECOND:
            names += ["X", "F", "C"]
        return [getattr(self, n) for n in names]

    def pack(self) -> np.ndarray:
        return np.concatenate([np.ravel(t) for t in self.tensors()], dtype=complex)

    def unpack(self, y: np.ndarray) -> "MomentState":
        out, k = [], 0
        for t in self.tensors():
            out.append(y[k:k + t.size].reshape(t.shape))
            k += t.size
        names = ["rho", "f", "X", "F", "C"][: len(out)]
        return MomentState(self.order, **dict(zip(names, out)))

    def symmetrized(self) -> tuple["MomentState", float]:
        """Project every tensor onto its Hermitian part; returns the deviation."""
        pairs = [("rho", (1, 0)), ("f", (1, 0)), ("X", (1, 0, 3, 2)), ("F", (3, 2, 1, 0)), ("C", (3, 2, 1, 0))]
        out = MomentState(self.order, self.rho)
        dev = 0.0
        for name, perm in pairs:
            t = getattr(self, name)
            if t is None:
                continue
            partner = np.conj(np.transpose(t, perm))
            dev = max(dev, float(np.abs(t - partner).max(initial=0.0)))
            setattr(out, name, 0.5 * (t + partner))
        return out, dev


@dataclass(frozen=True)
class MomentModel:
    """Single-particle energies and the atom-field coupling tensor.

    For a standing wave the field enters only through ``sw_photons`` and
    the atoms see h = eps + (g N / 2)(T + T^T).
    """

    table: ModeTable
    eps: np.ndarray
    hop: np.ndarray
    G: np.ndarray
    quantization: Quantization
    sw_photons: float = 0.0
    g: float = 1.0

    @property
    def n_modes(self) -> int:
        return len(self.eps)

    def coupling_blocks(self):
        """(alpha, beta, G[alpha, beta]) for the non-zero field index pairs."""
        return [(a, b, self.G[a, b]) for a in range(2) for b in range(2) if self.G[a, b].any()]

    def single_particle(self) -> np.ndarray:
        h = np.diag(self.eps).astype(complex)
        if self.quantization is Quantization.STANDING:
            h = h + 0.5 * self.g * self.sw_photons * (self.hop + self.hop.T)
        return h


def moment_model(config: SimulationConfig, sw_photons: float | None = None) -> MomentModel:
    table = build_mode_table(config)
    M = table.n_modes
    eps = np.empty(M)
    eps[table.position.ravel()] = config.kinetic(table.momenta).ravel()
    hop = np.zeros((M, M))
    for lo, hi in table.hop_pairs():
        hop[lo, hi] = 1.0
    G = np.zeros((2, 2, M, M))
    G[0, 1] = config.g * hop
    G[1, 0] = config.g * hop.T
    if sw_photons is None:
        sw_photons = config.field.total_mean if config.quantization is Quantization.STANDING else 0.0
    return MomentModel(table, eps, hop, G, config.quantization, float(sw_photons), config.g)


def _field_moments(field: FieldSpec) -> tuple[np.ndarray, np.ndarray]:
    """<a_g^+ a_d> and <a_g^+ a_d a_m^+ a_n> on the initial field state."""
    d = np.eye(2)
    if field.kind is FieldKind.FOCK:
        n = np.array(field.photons)
        f = np.diag(n).astype(complex)
        # normal-ordered part <a_g^+ a_m^+ a_d a_n> of a number state
        normal = np.einsum("g,m,gd,mn->gdmn", n, n, d, d) + np.einsum("g,m,gn,md->gdmn", n, n, d, d)
        same = np.einsum("gd,gm,gn->gdmn", d, d, d)
        normal = normal - same * (n**2 + n)[:, None, None, None]
    else:
        a = field.alphas
        f = np.outer(a.conj(), a)
        normal = np.einsum("g,m,d,n->gdmn", a.conj(), a.conj(), a, a)
    F = normal + np.einsum("dm,gn->gdmn", d, f)
    return f, F


def init_moments(table: ModeTable, field: FieldSpec, order: ClosureOrder, quantization=Quantization.RUNNING) -> MomentState:
    """Moments of the uncorrelated initial state: Fermi sea times field state."""
    M = table.n_modes
    occ = np.zeros(M)
    occ[table.position[:, table.initial_rung]] = 1.0
    rho = np.diag(occ).astype(complex)
    if quantization is Quantization.STANDING:
        if order is ClosureOrder.SECOND:
            raise IncompatibleSolverError("the standing-wave hierarchy closes at first order")
        return MomentState(order, rho)
    f, F = _field_moments(field)
    if order is ClosureOrder.FIRST:
        return MomentState(order, rho, f)
    eye = np.eye(M)
    X = np.einsum("gd,ce->gdce", f, rho)
    # Wick contraction for a Slater determinant
    C = np.einsum("ab,cd->abcd", rho, rho) + np.einsum("ad,bc->abcd", rho, eye) - np.einsum("ad,cb->abcd", rho, rho)
    return MomentState(order, rho, f, X, F, C)


def _kinetic_rho(eps, rho):
    return (eps[:, None] - eps[None, :]) * rho


def rhs_first_order(m: MomentState, model: MomentModel) -> MomentState:
    """Equations of motion under the product closure <E^f E^c> = <E^f><E^c>."""
    if model.quantization is Quantization.STANDING:
        h = model.single_particle()
        return MomentState(m.order, 1j * (h.T @ m.rho - m.rho @ h.T))
    G, rho, f = model.G, m.rho, m.f
    h = np.diag(model.eps) + np.einsum("ab,abcd->cd", f, G)
    drho = 1j * (h.T @ rho - rho @ h.T)
    s = np.einsum("abcd,cd->ab", G, rho)
    df = 1j * (s.T @ f - f @ s.T)
    return MomentState(m.order, drho, df)


ORDERINGS = ("symmetric", "literal")


def _swapped(F, C):
    """F and C with their two bilinears exchanged."""
    return np.transpose(F, (2, 3, 0, 1)), np.transpose(C, (2, 3, 0, 1))


def closure_third_order(m: MomentState, ordering: str = "symmetric") -> tuple[np.ndarray, np.ndarray]:
    """Pair factorization of <E^f E^f E^c> and <E^f E^c E^c>.

    ``literal`` factorizes the products in the order written.  That breaks
    the identity between the two orderings of a pair of like bilinears,
    which differ by an exact commutator, and with it Hermiticity of the
    closed equations.  ``symmetric`` factorizes the symmetrized product and
    adds half the commutator exactly; on uncorrelated states both agree with
    the exact value.
    """
    if ordering not in ORDERINGS:
        raise ConfigError(f"ordering must be one of {ORDERINGS}")
    f, rho, X, F, C = m.f, m.rho, m.X, m.F, m.C
    d2, dM = np.eye(2), np.eye(len(rho))
    if ordering == "symmetric":
        Fw, Cw = _swapped(F, C)
        F, C = 0.5 * (F + Fw), 0.5 * (C + Cw)
    fff = (
        np.einsum("mn,rsab->mnrsab", f, X)
        + np.einsum("mnrs,ab->mnrsab", F, rho)
        + np.einsum("mnab,rs->mnrsab", X, f)
        - 2 * np.einsum("mn,rs,ab->mnrsab", f, f, rho)
    )
    faa = (
        np.einsum("ab,mncd->mnabcd", rho, X)
        + np.einsum("abcd,mn->mnabcd", C, f)
        + np.einsum("mnab,cd->mnabcd", X, rho)
        - 2 * np.einsum("ab,cd,mn->mnabcd", rho, rho, f)
    )
    if ordering == "symmetric":
        fff += 0.5 * (np.einsum("nr,msab->mnrsab", d2, X) - np.einsum("ms,rnab->mnrsab", d2, X))
        faa += 0.5 * (np.einsum("bc,mnad->mnabcd", dM, X) - np.einsum("ad,mncb->mnabcd", dM, X))
    return fff, faa


ThirdOrder = Callable[[MomentState], tuple[np.ndarray, np.ndarray]]


def rhs_second_order(
    m: MomentState,
    model: MomentModel,
    third_order: ThirdOrder | None = None,
    ordering: str = "symmetric",
) -> MomentState:
    """Exact equations for rho, f, X, F, C with the three-bilinear moments
    supplied by ``third_order``.

    Without ``third_order`` the pair factorization (see
    :func:`closure_third_order`) is substituted into the contractions
    directly, which avoids building the rank-6 tensors.
    """
    if model.quantization is Quantization.STANDING:
        raise IncompatibleSolverError("the standing-wave hierarchy closes at first order")
    if third_order is None:
        if ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}")
        return _rhs_factorized(m, model, ordering == "symmetric")
    return _rhs_materialized(m, model, *third_order(m))


def _rhs_materialized(m: MomentState, model: MomentModel, T3f: np.ndarray, T3a: np.ndarray) -> MomentState:
    eps = model.eps
    rho, X, C = m.rho, m.X, m.C
    de = eps[:, None] - eps[None, :]

    drho = de * rho
    df = np.zeros((2, 2), complex)
    dX = de[None, None] * X
    dF = np.zeros((2,) * 4, complex)
    dC = (de[:, :, None, None] + de[None, None, :, :]) * C
    # G has two non-zero blocks, K = G[A, B]; every contraction is a matrix
    # product along one or two indices
    for A, B, K in model.coupling_blocks():
        Kt = K.T
        XAB = X[A, B]
        drho += Kt @ XAB - XAB @ Kt
        df[B, :] += np.tensordot(X[A], K, ([1, 2], [0, 1]))
        df[:, A] -= np.tensordot(X[:, B], K, ([1, 2], [0, 1]))

        dX[B] += np.tensordot(T3a[A], K, ([1, 2], [0, 1]))
        dX[:, A] -= np.tensordot(T3a[:, B], K, ([1, 2], [0, 1]))
        dX += Kt @ T3f[:, :, A, B] - T3f[:, :, A, B] @ Kt

        dF[B] += np.tensordot(T3f[A], K, ([3, 4], [0, 1]))
        dF[:, A] -= np.tensordot(T3f[:, B], K, ([3, 4], [0, 1]))
        dF[:, :, B] += np.tensordot(T3f[:, :, A], K, ([3, 4], [0, 1]))
        dF[:, :, :, A] -= np.tensordot(T3f[:, :, :, B], K, ([3, 4], [0, 1]))

        T = T3a[A, B]
        dC += np.tensordot(K, T, ([0], [0]))
        dC -= np.moveaxis(np.tensordot(T, K, ([1], [1])), -1, 1)
        dC += np.moveaxis(np.tensordot(T, K, ([2], [0])), -1, 2)
        dC -= T @ Kt
    return MomentState(m.order, 1j * drho, 1j * df, 1j * dX, 1j * dF, 1j * dC)




def _commutes(Kt, P):
    return Kt @ P - P @ Kt


def _act_all(K: np.ndarray, C: np.ndarray) -> np.ndarray:
    """sum_x (K_xa C_xbcd - K_bx C_axcd + K_xc C_abxd - K_dx C_abcx) for sparse K."""
    out = np.zeros_like(C)
    for x, y in zip(*np.nonzero(K)):
        k = K[x, y]
        out[y] += k * C[x]
        out[:, x] -= k * C[:, y]
        out[:, :, y] += k * C[:, :, x]
        out[:, :, :, x] -= k * C[:, :, :, y]
    return out


def _rhs_factorized(m: MomentState, model: MomentModel, symmetric: bool = True) -> MomentState:
    rho, f, X, F, C = m.rho, m.f, m.X, m.F, m.C
    # C and F below only ever enter through the closure
    Cc, Fc = C, F
    if symmetric:
        Fw, Cw = _swapped(F, C)
        Fc, Cc = 0.5 * (F + Fw), 0.5 * (C + Cw)
    eps = model.eps
    de = eps[:, None] - eps[None, :]
    drho = de * rho
    df = np.zeros((2, 2), complex)
    dX = de[None, None] * X
    dF = np.zeros((2,) * 4, complex)
    dC = (de[:, :, None, None] + de[None, None, :, :]) * C
    left, right = [], []
    K_eff = np.zeros_like(model.hop, dtype=complex)
    half = np.zeros_like(rho)
    for A, B, K in model.coupling_blocks():
        Kt = K.T
        XAB = X[A, B]
        k_rho = np.sum(K * rho)
        kX = np.tensordot(X, K, ([2, 3], [0, 1]))
        kC = np.tensordot(K, Cc, ([0, 1], [0, 1]))
        drho += _commutes(Kt, XAB)
        df[B, :] += kX[A]
        df[:, A] -= kX[:, B]

        # sum_xy K_xy <E^f_mn E^c_xy E^c_ce> under the factorization
        R = (
            k_rho * X
            + f[:, :, None, None] * kC
            + kX[:, :, None, None] * rho
            - 2 * k_rho * f[:, :, None, None] * rho
        )
        cr, cx = _commutes(Kt, rho), _commutes(Kt, XAB)
        cX = Kt @ X - X @ Kt
        if symmetric:
            R = R + 0.5 * cX
        dX[B] += R[A]
        dX[:, A] -= R[:, B]
        dX += (
            f[:, :, None, None] * cx
            + Fc[:, :, A, B][:, :, None, None] * cr
            + f[A, B] * cX
            - 2 * f[A, B] * f[:, :, None, None] * cr
        )
        if symmetric:
            dX[:, A] += 0.5 * cX[:, B]
            dX[B, :] -= 0.5 * cX[A, :]

        # sum_xy K_xy <E^f_mn E^f_rs E^c_xy> under the factorization
        S = (
            np.einsum("mn,rs->mnrs", f, kX)
            + k_rho * Fc
            + np.einsum("mn,rs->mnrs", kX, f)
            - 2 * k_rho * np.einsum("mn,rs->mnrs", f, f)
        )
        if symmetric:
            d2 = np.eye(2)
            S = S + 0.5 * (np.einsum("nr,ms->mnrs", d2, kX) - np.einsum("ms,rn->mnrs", d2, kX))
        dF[B] += S[A]
        dF[:, A] -= S[:, B]
        dF[:, :, B] += S[:, :, A]
        dF[:, :, :, A] -= S[:, :, :, B]

        left += [cr, rho, cx, XAB, -2 * f[A, B] * cr, -2 * f[A, B] * rho]
        right += [XAB, cx, rho, cr, rho, cr]
        K_eff += f[A, B] * K
        if symmetric:
            half += 0.5 * cx
    dC += np.tensordot(np.array(left), np.array(right), ([0], [0]))
    dC += _act_all(K_eff, Cc)
    if symmetric:
        # delta_bc half_ad - delta_ad half_cb
        idx = np.arange(len(rho))
        dC[:, idx, idx, :] += half[:, None, :]
        dC[idx, :, :, idx] -= half.T[None, :, :]
    return MomentState(m.order, 1j * drho, 1j * df, 1j * dX, 1j * dF, 1j * dC)


@dataclass
class MomentTrajectory:
    times: np.ndarray
    states: list[MomentState]
    max_hermiticity_deviation: float = 0.0
    negative_occupation_time: float | None = None
    negative_occupation_value: float | None = None
    flags: list[str] = field(default_factory=list)

    def occupations(self) -> np.ndarray:
        """Diagonal <c_a^+ c_a> at every time, shape (T, M)."""
        return np.array([np.real(np.diagonal(s.rho)) for s in self.states])

    def field(self) -> np.ndarray:
        return np.array([s.f for s in self.states])


def integrate_moments(
    m0: MomentState,
    rhs: Callable[[MomentState], MomentState],
    times,
    tol: float = 1e-10,
    method: str = "DOP853",
) -> MomentTrajectory:
    """Single adaptive integration sampled at ``times`` by dense output.

    Reported tensors are projected onto their Hermitian parts and the
    largest deviation removed is kept.  Occupations are never clipped: the
    first time one drops below zero is recorded.
    """
    times = np.asarray(times, dtype=float)
    template = m0

    def f(_t, y):
        return rhs(template.unpack(y)).pack()

    states = [m0]
    traj = MomentTrajectory(times, states)
    _check_occupations(traj, times[0], m0)
    if len(times) > 1:
        sol = solve_ivp(f, (times[0], times[-1]), m0.pack(), method=method, t_eval=times, rtol=tol, atol=tol)
        if not sol.success:
            raise NumericalError(f"moment integration failed at t={sol.t[-1]:.6g}: {sol.message}")
        for t, y in zip(times[1:], sol.y.T[1:]):
            state, dev = template.unpack(y).symmetrized()
            traj.max_hermiticity_deviation = max(traj.max_hermiticity_deviation, dev)
            _check_occupations(traj, t, state)
            states.append(state)
    if traj.max_hermiticity_deviation > 1e-6:
        log.warning("Hermiticity deviation %.2e removed by symmetrization", traj.max_hermiticity_deviation)
    return traj


def _check_occupations(traj: MomentTrajectory, t: float, state: MomentState):
    occ = np.real(np.diagonal(state.rho))
    if traj.negative_occupation_time is None and occ.min() < -NEGATIVE_THRESHOLD:
        traj.negative_occupation_time = float(t)
        traj.negative_occupation_value = float(occ.min())
        traj.flags.append(f"negative occupation {occ.min():.6g} at t={t:.6g}")


def run_moments(config: SimulationConfig, order: ClosureOrder, tol: float = 1e-10) -> tuple[ObservableSeries, MomentTrajectory]:
    """Moment-hierarchy run reported on the same channels as exact runs.

    A coherent standing-wave field is handled by Poisson-averaging the
    fixed-photon-number first-order result.
    """
    if config.quantization is Quantization.STANDING:
        if order is ClosureOrder.SECOND:
            raise IncompatibleSolverError("moments2 needs running-wave quantization")
        return _run_sw_first_order(config, tol)
    model = moment_model(config)
    m0 = init_moments(model.table, config.field, order)
    if order is ClosureOrder.FIRST:
        rhs = lambda m: rhs_first_order(m, model)  # noqa: E731
    else:
        rhs = lambda m: rhs_second_order(m, model)  # noqa: E731
    traj = integrate_moments(m0, rhs, config.t_grid, tol)
    series = _series(config, model.table, traj.occupations())
    if order is ClosureOrder.SECOND:
        chi = np.array([_chi(s, model) for s in traj.states])
        series.channels["chi_re"] = chi.real
        series.channels["chi_im"] = chi.imag
    series.flags.extend(traj.flags)
    return series, traj


def _chi(m: MomentState, model: MomentModel) -> complex:
    """sum over hops of <A c_l^+ c_u> - <A><c_l^+ c_u>, A = a_q^+ a_-q."""
    T = model.hop
    return complex(np.sum(T * (m.X[0, 1] - m.f[0, 1] * m.rho)))


def _series(config, table, occ) -> ObservableSeries:
    series = ObservableSeries(config.t_grid)
    per_mode = occ[:, table.position]  # (T, Na, L)
    for p in table.distinct_momenta():
        mask = np.abs(table.momenta - p) < 1e-9
        series.channels[channel_label(p)] = per_mode[:, mask].sum(axis=1)
    if table.regime.value == "bragg":
        series.channels["N_sc"] = per_mode[:, :, 1].sum(axis=1)
    return series


def _run_sw_first_order(config, tol):
    sectors, _ = config.field.sector_weights()
    occs, traj0 = {}, None
    for n in sectors:
        model = moment_model(config, sw_photons=float(n))
        m0 = init_moments(model.table, config.field, ClosureOrder.FIRST, Quantization.STANDING)
        traj = integrate_moments(m0, lambda m, model=model: rhs_first_order(m, model), config.t_grid, tol)
        occs[int(n)] = traj.occupations()
        traj0 = traj0 or traj
    if config.field.kind is FieldKind.FOCK:
        occ = occs[int(sectors[0])]
    else:
        occ = poisson_average(occs, config.field.total_mean, config.field.truncation_epsilon)
    table = build_mode_table(config)
    return _series(config, table, occ), traj0


def factorization_diagnostics(exact_values: np.ndarray, factorized_values: np.ndarray) -> dict[str, np.ndarray]:
    """Per-time exact and factorized third-order values and their difference."""
    exact_values = np.asarray(exact_values)
    factorized_values = np.asarray(factorized_values)
    if exact_values.shape != factorized_values.shape:
        raise ConfigError("exact and factorized series must share a time grid")
    return {
        "exact": exact_values,
        "factorized": factorized_values,
        "abs_error": np.abs(exact_values - factorized_values),
    }


def exact_moments(psi: np.ndarray, basis, with_third: bool = False):
    """Every carried moment (and optionally the three-bilinear ones) evaluated
    exactly on a running-wave state vector; used to validate the equations."""
    from itertools import product

    from .observables import expect_product

    M = basis.table.n_modes
    F2, Mr = range(2), range(M)

    def ev(*ops):
        return expect_product(psi, basis, list(ops))

    rho = np.array([[ev(("c", a, b)) for b in Mr] for a in Mr])
    f = np.array([[ev(("f", a, b)) for b in F2] for a in F2])
    X = np.zeros((2, 2, M, M), complex)
    for g, d, c, e in product(F2, F2, Mr, Mr):
        X[g, d, c, e] = ev(("f", g, d), ("c", c, e))
    F = np.zeros((2,) * 4, complex)
    for idx in product(F2, repeat=4):
        F[idx] = ev(("f", idx[0], idx[1]), ("f", idx[2], idx[3]))
    C = np.zeros((M,) * 4, complex)
    for a, b, c, d in product(Mr, repeat=4):
        C[a, b, c, d] = ev(("c", a, b), ("c", c, d))
    state = MomentState(ClosureOrder.SECOND, rho, f, X, F, C)
    if not with_third:
        return state
    T3f = np.zeros((2,) * 4 + (M, M), complex)
    for m_, n_, r, s, a, b in product(F2, F2, F2, F2, Mr, Mr):
        T3f[m_, n_, r, s, a, b] = ev(("f", m_, n_), ("f", r, s), ("c", a, b))
    T3a = np.zeros((2, 2) + (M,) * 4, complex)
    for m_, n_, a, b, c, d in product(F2, F2, Mr, Mr, Mr, Mr):
        T3a[m_, n_, a, b, c, d] = ev(("f", m_, n_), ("c", a, b), ("c", c, d))
    return state, (T3f, T3a)
