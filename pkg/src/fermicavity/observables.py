"""Reported quantities: scattering probabilities, N_sc, chi and exact correlators.

Exact expectation values of arbitrary products of bilinears are evaluated by
applying the operators to a sparse occupation-number representation of the
state, so intermediate states may leave the one-fermion-per-ladder basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Quantization, Regime, log_poisson
from .errors import ConfigError
from .fock import (
    Basis,
    SectorEnsemble,
    atom_lowering_operator,
    field_transfer_operator,
)

PLUS, MINUS = 0, 1


@dataclass
class ObservableSeries:
    times: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def rung_probabilities(psi: np.ndarray, basis: Basis) -> np.ndarray:
    """Occupation probability of every (atom, rung), shape (Na, L)."""
    prob = np.abs(psi) ** 2
    L = basis.table.n_rungs
    return np.stack(
        [np.bincount(basis.rungs[:, i], weights=prob, minlength=L) for i in range(basis.table.n_atoms)]
    )


def occupation(psi: np.ndarray, basis: Basis, p: float) -> float:
    """P_p = <c_p^dagger c_p> for a single sector state."""
    probs = rung_probabilities(psi, basis)
    return float(sum(probs[i, r] for i, r in basis.table.locate(p)))


def ensemble_occupation(ens: SectorEnsemble, p: float) -> float:
    return sum(w * occupation(sv.amplitudes, sv.basis, p) for w, sv in ens.components)


def n_scattered(psi: np.ndarray, basis: Basis) -> float:
    """N_sc = sum_k P_{k+q}: atoms found on the upper Bragg rung."""
    if basis.table.regime is not Regime.BRAGG:
        raise ConfigError("N_sc is defined for Bragg bases only")
    return float(rung_probabilities(psi, basis)[:, 1].sum())


class ChiOperators:
    """Sparse A = a_q^+ a_-q, B = sum_k c^+_{k-q} c_{k+q} and AB on one sector."""

    def __init__(self, basis: Basis):
        if basis.quantization is not Quantization.RUNNING:
            raise ConfigError("chi is undefined for standing-wave quantization")
        self.A = field_transfer_operator(basis).matrix
        self.B = atom_lowering_operator(basis).matrix
        self.AB = (self.A @ self.B).tocsr()

    def moments(self, psi: np.ndarray) -> np.ndarray:
        return np.array([np.vdot(psi, M @ psi) for M in (self.AB, self.A, self.B)])


def chi_from_moments(ab: complex, a: complex, b: complex) -> complex:
    return ab - a * b


def cross_correlation_chi(psi: np.ndarray, basis: Basis) -> complex:
    """chi = sum_k <a_q^+ a_-q c^+_{k-q} c_{k+q}> - <a_q^+ a_-q><c^+_{k-q} c_{k+q}>."""
    return chi_from_moments(*ChiOperators(basis).moments(psi))


def ensemble_chi(ens: SectorEnsemble) -> complex:
    total = np.zeros(3, dtype=complex)
    for w, sv in ens.components:
        total += w * ChiOperators(sv.basis).moments(sv.amplitudes)
    return chi_from_moments(*total)


# --- generic products of bilinears -------------------------------------------


@dataclass
class OccupationState:
    """Sparse amplitudes over (photon numbers, fermion bitmask) pairs."""

    photons: np.ndarray
    occupation: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def from_vector(cls, psi: np.ndarray, basis: Basis) -> "OccupationState":
        return cls(basis.photons.copy(), basis.occupation.copy(), np.asarray(psi, dtype=complex).copy())

    def _keep(self, mask, amplitudes=None):
        amps = self.amplitudes if amplitudes is None else amplitudes
        return OccupationState(self.photons[mask].copy(), self.occupation[mask].copy(), amps[mask].copy())


def apply_fermion_bilinear(st: OccupationState, dst: int, src: int) -> OccupationState:
    """c^dagger_dst c_src with canonical-order signs."""
    one = np.uint64(1)
    bs, bd = one << np.uint64(src), one << np.uint64(dst)
    occ = st.occupation
    if dst == src:
        return st._keep((occ & bs) != 0)
    mask = ((occ & bs) != 0) & ((occ & bd) == 0)
    out = st._keep(mask)
    lo, hi = sorted((dst, src))
    between = np.uint64(((1 << hi) - 1) ^ ((1 << (lo + 1)) - 1))
    parity = np.bitwise_count(out.occupation & between) & 1
    out.amplitudes *= 1.0 - 2.0 * parity
    out.occupation = (out.occupation & ~bs) | bd
    return out


def apply_boson_bilinear(st: OccupationState, dst: int, src: int) -> OccupationState:
    """a^dagger_dst a_src on the photon occupations."""
    n_src = st.photons[:, src]
    out = st._keep(n_src > 0)
    out.amplitudes *= np.sqrt(out.photons[:, src])
    out.photons[:, src] -= 1
    out.amplitudes *= np.sqrt(out.photons[:, dst] + 1.0)
    out.photons[:, dst] += 1
    return out


def apply_product(psi: np.ndarray, basis: Basis, ops: Sequence[tuple[str, int, int]]) -> np.ndarray:
    """O_1 O_2 ... O_n |psi> projected back onto ``basis``.

    Each op is ``("f", alpha, beta)`` for a^dagger_alpha a_beta (photon mode
    indices) or ``("c", a, b)`` for c^dagger_a c_b (canonical positions),
    written left to right.  Components outside the basis are dropped, which
    is exact for overlaps with any vector inside it.
    """
    st = OccupationState.from_vector(psi, basis)
    n = basis.table.n_modes
    for kind, dst, src in reversed(ops):
        if kind == "f":
            st = apply_boson_bilinear(st, dst, src)
        elif kind == "c":
            if not (0 <= dst < n and 0 <= src < n):
                raise IndexError("fermionic mode index off the ladders")
            st = apply_fermion_bilinear(st, dst, src)
        else:
            raise ValueError(f"unknown operator kind {kind!r}")
    out = np.zeros(basis.dim, dtype=complex)
    for ph, occ, amp in zip(st.photons, st.occupation, st.amplitudes):
        s = basis.index_map.get((tuple(int(k) for k in ph), int(occ)))
        if s is not None:
            out[s] += amp
    return out


def adjoint_ops(ops: Sequence[tuple[str, int, int]]) -> list[tuple[str, int, int]]:
    return [(kind, src, dst) for kind, dst, src in reversed(ops)]


def expect_product(psi: np.ndarray, basis: Basis, ops: Sequence[tuple[str, int, int]]) -> complex:
    """<psi| O_1 O_2 ... O_n |psi>, see :func:`apply_product`."""
    return complex(np.vdot(psi, apply_product(psi, basis, ops)))


def ensemble_expect(ens: SectorEnsemble, ops) -> complex:
    return sum(w * expect_product(sv.amplitudes, sv.basis, ops) for w, sv in ens.components)


def kf_position(basis: Basis) -> int:
    """Canonical position of the initially occupied mode with the largest momentum."""
    t = basis.table
    atom = int(np.argmax(t.base_momenta))
    return int(t.position[atom, t.initial_rung])


def third_order_ops(which: str, kf: int) -> list[tuple[str, int, int]]:
    if which == "ffa":
        return [("f", MINUS, PLUS), ("f", PLUS, MINUS), ("c", kf, kf)]
    if which == "faa":
        return [("f", PLUS, PLUS), ("c", kf, kf), ("c", kf, kf)]
    raise ValueError("which must be 'ffa' or 'faa'")


def third_order_exact(psi: np.ndarray, basis: Basis, which: str, kf: int | None = None) -> complex:
    """<a_-q^+ a_q a_q^+ a_-q n_kF> ('ffa') or <a_q^+ a_q n_kF n_kF> ('faa')."""
    kf = kf_position(basis) if kf is None else kf
    return expect_product(psi, basis, third_order_ops(which, kf))


def factorized_third_order(first: dict, second: dict, which: str) -> complex:
    """Value the pair factorization assigns from exact lower moments.

    ``first`` holds <O1>, <O2>, <O3>; ``second`` holds <O1 O2>, <O1 O3>,
    <O2 O3> for the ordered triple O1 O2 O3 of the chosen correlator.
    Products of two operators of the same species keep their order.
    """
    o1, o2, o3 = first["1"], first["2"], first["3"]
    if which == "ffa":
        return o1 * second["23"] + second["12"] * o3 + second["13"] * o2 - 2 * o1 * o2 * o3
    return o2 * second["13"] + second["23"] * o1 + second["12"] * o3 - 2 * o1 * o2 * o3


def factorization_components(psi: np.ndarray, basis: Basis, which: str, kf: int | None = None):
    kf = kf_position(basis) if kf is None else kf
    ops = third_order_ops(which, kf)
    first = {str(i + 1): expect_product(psi, basis, [op]) for i, op in enumerate(ops)}
    second = {
        f"{i + 1}{j + 1}": expect_product(psi, basis, [ops[i], ops[j]])
        for i in range(3)
        for j in range(i + 1, 3)
    }
    return first, second


def poisson_average(per_n: dict[int, np.ndarray], mean: float, epsilon: float = 1e-8) -> np.ndarray:
    """sum_N e^-nbar nbar^N / N! result_N, renormalized over the retained N."""
    ns = sorted(per_n)
    logw = np.array([log_poisson(n, mean) for n in ns])
    w = np.exp(logw)
    if 1.0 - w.sum() > epsilon:
        raise ConfigError(
            f"photon numbers {ns[0]}..{ns[-1]} cover only {w.sum():.10f} of the Poisson mass"
        )
    w = w / w.sum()
    return sum(wi * np.asarray(per_n[n]) for wi, n in zip(w, ns))


def channel_label(p: float) -> str:
    p = 0.0 if abs(p) < 1e-12 else p
    return f"P_p{p:+.6g}"

