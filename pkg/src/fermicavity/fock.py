"""Mixed fermion-photon occupation-number bases and sparse Hamiltonians.

Each atom lives on its own momentum ladder ``p_i + 2 m q``; since kF < q the
ladders never intersect and a basis state carries exactly one fermion per
ladder.  Fermionic modes are ordered canonically by (momentum, atom) and a
basis state is the product of creation operators in that order acting on
the vacuum, which fixes every anticommutation sign.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .config import Q, FieldKind, FieldSpec, Quantization, Regime, SimulationConfig
from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Thin wrapper around a CSR matrix that remembers Hermiticity."""

    matrix: sp.csr_matrix
    hermitian: bool = False

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            return SparseOperator((self.matrix @ other.matrix).tocsr())
        return self.matrix @ other

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def adjoint(self) -> "SparseOperator":
        return SparseOperator(self.matrix.conj().T.tocsr(), self.hermitian)

    def hermiticity_error(self) -> float:
        """max |A - A^dagger| relative to max |A|."""
        diff = self.matrix - self.matrix.conj().T
        scale = abs(self.matrix).max() if self.matrix.nnz else 1.0
        return float(abs(diff).max() / scale) if diff.nnz else 0.0

    def commutator(self, other: "SparseOperator") -> "SparseOperator":
        a, b = self.matrix, other.matrix
        return SparseOperator((a @ b - b @ a).tocsr())

    def expect(self, psi: np.ndarray) -> complex:
        return complex(np.vdot(psi, self.matrix @ psi))


class Mode(NamedTuple):
    position: int
    atom: int
    rung: int
    momentum: float


@dataclass(frozen=True, eq=False)
class ModeTable:
    """Momentum ladders of all atoms plus the photon-mode labels.

    ``rungs`` are the ladder offsets m (momentum p_i + 2 m q);
    ``position[i, r]`` is the canonical index of atom i's rung r.
    """

    regime: Regime
    base_momenta: np.ndarray
    rungs: np.ndarray
    momenta: np.ndarray
    position: np.ndarray
    initial_rung: int
    photon_modes: tuple[str, ...]

    @property
    def n_atoms(self) -> int:
        return len(self.base_momenta)

    @property
    def n_rungs(self) -> int:
        return len(self.rungs)

    @property
    def n_modes(self) -> int:
        return self.momenta.size

    @property
    def modes(self) -> list[Mode]:
        out = [None] * self.n_modes
        for i in range(self.n_atoms):
            for r in range(self.n_rungs):
                pos = int(self.position[i, r])
                out[pos] = Mode(pos, i, r, float(self.momenta[i, r]))
        return out

    def locate(self, p: float, atol: float = 1e-9) -> list[tuple[int, int]]:
        """All (atom, rung) pairs whose momentum equals ``p``."""
        hits = np.argwhere(np.abs(self.momenta - p) < atol)
        if len(hits) == 0:
            raise KeyError(f"momentum {p} is not on any ladder")
        return [(int(i), int(r)) for i, r in hits]

    def distinct_momenta(self) -> np.ndarray:
        return np.unique(np.round(self.momenta, 12))

    def hop_pairs(self) -> list[tuple[int, int]]:
        """Canonical positions (lower, upper) of every pair coupled by a 2q kick."""
        return [
            (int(self.position[i, r - 1]), int(self.position[i, r]))
            for i in range(self.n_atoms)
            for r in range(1, self.n_rungs)
        ]


def fermi_sea(Na: int, kF: float) -> np.ndarray:
    """Evenly spaced momenta on [-kF, kF]; a single atom sits at 0."""
    if Na == 1:
        return np.zeros(1)
    return np.linspace(-kF, kF, Na)


def build_mode_table(config: SimulationConfig) -> ModeTable:
    if config.Na < 1:
        raise ConfigError("Na must be at least 1")
    if config.kF >= Q:
        raise ConfigError("kF must be smaller than q")
    ks = fermi_sea(config.Na, config.kF)
    if config.regime is Regime.RAMAN_NATH:
        if config.nd < 1:
            raise ConfigError("Raman-Nath ladders need nd >= 1")
        rungs = np.arange(-config.nd, config.nd + 1)
        base, initial = ks, config.nd
    else:
        rungs = np.array([0, 1])
        base, initial = ks - Q, 0
    momenta = base[:, None] + 2.0 * Q * rungs[None, :]
    atom = np.repeat(np.arange(config.Na), len(rungs)).reshape(momenta.shape)
    order = np.lexsort((atom.ravel(), momenta.ravel()))
    position = np.empty(momenta.size, dtype=np.int64)
    position[order] = np.arange(momenta.size)
    if momenta.size > 63:
        raise ConfigError("at most 63 fermionic modes are supported")
    photon_modes = ("+q", "-q") if config.quantization is Quantization.RUNNING else ("sw",)
    return ModeTable(
        regime=config.regime,
        base_momenta=base,
        rungs=rungs,
        momenta=momenta,
        position=position.reshape(momenta.shape),
        initial_rung=initial,
        photon_modes=photon_modes,
    )


@dataclass(frozen=True)
class BasisState:
    photons: tuple[int, ...]
    occupation: int


def fermionic_bilinear(
    state: BasisState, k_dst: int, k_src: int, n_modes: int = 64
) -> tuple[int, BasisState] | None:
    """Apply c^dagger_{k_dst} c_{k_src} to a basis state.

    Returns ``None`` when the result vanishes, otherwise the sign picked up
    from the occupied modes strictly between the two positions and the new
    state.
    """
    for k in (k_dst, k_src):
        if not 0 <= k < n_modes:
            raise IndexError(f"unknown mode index {k}")
    occ = state.occupation
    if not (occ >> k_src) & 1:
        return None
    if k_dst == k_src:
        return 1, state
    if (occ >> k_dst) & 1:
        return None
    lo, hi = sorted((k_dst, k_src))
    between = ((1 << hi) - 1) ^ ((1 << (lo + 1)) - 1)
    sign = -1 if bin(occ & between).count("1") % 2 else 1
    occ = (occ & ~(1 << k_src)) | (1 << k_dst)
    return sign, BasisState(state.photons, occ)


@dataclass(frozen=True, eq=False)
class Basis:
    """Complete product basis of one photon-number sector.

    ``rungs[s, i]`` is the rung index of atom i in state s and
    ``photons[s]`` the photon occupations (``(n_q, n_-q)`` or ``(n,)``).
    Index = photon_index * L**Na + base-L code of the rung word.
    """

    table: ModeTable
    quantization: Quantization
    sector: int
    photons: np.ndarray
    rungs: np.ndarray
    occupation: np.ndarray
    index_map: dict

    @property
    def dim(self) -> int:
        return len(self.rungs)

    @property
    def stride(self) -> np.ndarray:
        L, Na = self.table.n_rungs, self.table.n_atoms
        return L ** np.arange(Na - 1, -1, -1)

    def state(self, s: int) -> BasisState:
        return BasisState(tuple(int(n) for n in self.photons[s]), int(self.occupation[s]))

    def index(self, state: BasisState) -> int:
        return self.index_map[(state.photons, state.occupation)]

    def momenta(self) -> np.ndarray:
        """Momentum of every atom in every basis state, shape (dim, Na)."""
        return self.table.momenta[np.arange(self.table.n_atoms)[None, :], self.rungs]


def photon_configurations(quantization: Quantization, sector: int) -> np.ndarray:
    if quantization is Quantization.RUNNING:
        n = np.arange(sector + 1)
        return np.stack([n, sector - n], axis=1)
    return np.array([[sector]])


def enumerate_basis(table: ModeTable, quantization: Quantization, sector: int) -> Basis:
    if sector < 0:
        raise ConfigError("photon sector must be non-negative")
    L, Na = table.n_rungs, table.n_atoms
    words = np.indices((L,) * Na).reshape(Na, -1).T
    photon_part = photon_configurations(quantization, sector)
    photons = np.repeat(photon_part, len(words), axis=0)
    rungs = np.tile(words, (len(photon_part), 1))
    bits = np.left_shift(np.uint64(1), table.position[np.arange(Na)[None, :], rungs].astype(np.uint64))
    occupation = np.bitwise_or.reduce(bits, axis=1)
    index_map = {
        (tuple(int(n) for n in ph), int(occ)): s
        for s, (ph, occ) in enumerate(zip(photons, occupation))
    }
    return Basis(table, quantization, sector, photons, rungs, occupation, index_map)


def basis_dimension(table: ModeTable, quantization: Quantization, sector: int) -> int:
    """Closed-form dimension: (2 nd + 1)^Na (N_p + 1) or 2^Na (N_p + 1)."""
    photon_states = sector + 1 if quantization is Quantization.RUNNING else 1
    return table.n_rungs ** table.n_atoms * photon_states


def atom_lowering_operator(basis: Basis) -> SparseOperator:
    """B = sum_k c^dagger_{k-q} c_{k+q}: every ladder hop by -2q, with signs."""
    table = basis.table
    Na = table.n_atoms
    stride = basis.stride
    occupied_pos = table.position[np.arange(Na)[None, :], basis.rungs]
    rows, cols, vals = [], [], []
    for i in range(Na):
        for r in range(1, table.n_rungs):
            src = np.flatnonzero(basis.rungs[:, i] == r)
            lo, hi = table.position[i, r - 1], table.position[i, r]
            others = np.delete(occupied_pos[src], i, axis=1)
            crossings = np.count_nonzero((others > lo) & (others < hi), axis=1)
            rows.append(src - stride[i])
            cols.append(src)
            vals.append(np.where(crossings % 2, -1.0, 1.0))
    return _assemble(basis.dim, rows, cols, vals)


def field_transfer_operator(basis: Basis) -> SparseOperator:
    """A = a_q^dagger a_{-q} inside a running-wave sector."""
    if basis.quantization is not Quantization.RUNNING:
        raise ConfigError("photon transfer needs running-wave modes")
    block = basis.table.n_rungs ** basis.table.n_atoms
    src = np.flatnonzero(basis.photons[:, 1] >= 1)
    nq, nm = basis.photons[src, 0], basis.photons[src, 1]
    return _assemble(basis.dim, [src + block], [src], [np.sqrt((nq + 1.0) * nm)])


def _assemble(dim, rows, cols, vals) -> SparseOperator:
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    m = sp.csr_matrix((vals.astype(complex), (rows, cols)), shape=(dim, dim))
    return SparseOperator(m)


def kinetic_diagonal(basis: Basis, config: SimulationConfig) -> np.ndarray:
    return config.kinetic(basis.momenta()).sum(axis=1)


def _check(basis: Basis, config: SimulationConfig, quantization: Quantization):
    if config.quantization is not quantization or basis.quantization is not quantization:
        raise ConfigError(
            f"basis/config mismatch: expected {quantization.value}-wave basis and config"
        )
    if basis.table.n_atoms != config.Na:
        raise ConfigError("basis atom number does not match config")


def build_hamiltonian_rw(basis: Basis, config: SimulationConfig) -> SparseOperator:
    """Running-wave Hamiltonian in one total-photon sector.

    H = sum_k E_k n_k + g (a_q^+ a_-q sum_k c^+_{k-q} c_{k+q} + h.c.), the
    constant omega (N_tot + 1) dropped.
    """
    _check(basis, config, Quantization.RUNNING)
    coupling = (field_transfer_operator(basis) @ atom_lowering_operator(basis)).matrix
    m = sp.diags(kinetic_diagonal(basis, config).astype(complex)) + config.g * (
        coupling + coupling.conj().T
    )
    return SparseOperator(m.tocsr(), hermitian=True)


def build_hamiltonian_sw(basis: Basis, config: SimulationConfig) -> SparseOperator:
    """Standing-wave Hamiltonian at fixed photon number N: hops carry g N / 2."""
    _check(basis, config, Quantization.STANDING)
    lower = atom_lowering_operator(basis).matrix
    strength = config.g * basis.sector / 2.0
    m = sp.diags(kinetic_diagonal(basis, config).astype(complex)) + strength * (
        lower + lower.conj().T
    )
    return SparseOperator(m.tocsr(), hermitian=True)


def build_hamiltonian(basis: Basis, config: SimulationConfig) -> SparseOperator:
    if config.quantization is Quantization.RUNNING:
        return build_hamiltonian_rw(basis, config)
    return build_hamiltonian_sw(basis, config)


def conserved_operators(config: SimulationConfig, basis: Basis) -> dict[str, SparseOperator]:
    """Diagonal operators that commute with the sector Hamiltonian.

    Integer-valued pieces are kept exact so commutators vanish identically.
    """
    ph = basis.photons.astype(float)
    out = {}
    if config.quantization is Quantization.STANDING:
        out["N"] = ph[:, 0]
    else:
        out["N_tot"] = ph.sum(axis=1)
        m_total = basis.table.rungs[basis.rungs].sum(axis=1)
        momentum = basis.table.base_momenta.sum() + (2.0 * m_total + ph[:, 0] - ph[:, 1]) * Q
        out["P"] = momentum
        if config.regime is Regime.BRAGG:
            out["Jz+Sz"] = 0.5 * (ph[:, 0] - ph[:, 1]) + (basis.rungs.sum(axis=1) - 0.5 * config.Na)
    return {
        name: SparseOperator(sp.diags(d.astype(complex)).tocsr(), hermitian=True)
        for name, d in out.items()
    }


@dataclass(frozen=True, eq=False)
class StateVector:
    basis: Basis
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass(frozen=True, eq=False)
class SectorEnsemble:
    """Photon-number sectors with Poisson (or unit) weights.

    Cross-sector coherences are never stored: every observable used here
    commutes with the total photon number.
    """

    components: tuple[tuple[float, StateVector], ...]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    @property
    def sectors(self) -> list[int]:
        return [sv.basis.sector for _, sv in self.components]


def _sector_amplitudes(alphas: np.ndarray, sector: int) -> np.ndarray:
    """alpha_q^n alpha_-q^(N-n) / sqrt(n! (N-n)!), normalized over n."""
    n = np.arange(sector + 1)
    logs = np.zeros(sector + 1)
    phase = np.zeros(sector + 1)
    for power, alpha in ((n, alphas[0]), (sector - n, alphas[1])):
        if abs(alpha) == 0.0:
            logs = np.where(power == 0, logs, -np.inf)
        else:
            logs = np.where(np.isfinite(logs), logs + power * log(abs(alpha)), logs)
            phase = phase + power * np.angle(alpha)
    logs = logs - 0.5 * np.array([lgamma(k + 1) + lgamma(sector - k + 1) for k in n])
    amp = np.exp(logs - logs[np.isfinite(logs)].max()) * np.exp(1j * phase)
    return amp / np.linalg.norm(amp)


def initial_state(table: ModeTable, field: FieldSpec, quantization: Quantization) -> SectorEnsemble:
    """Filled Fermi sea on the base momenta times the initial field state."""
    sectors, weights = field.sector_weights()
    word = np.full(table.n_atoms, table.initial_rung)
    L, Na = table.n_rungs, table.n_atoms
    code = int(word @ (L ** np.arange(Na - 1, -1, -1)))
    block = L**Na
    components = []
    for sector, w in zip(sectors, weights):
        basis = enumerate_basis(table, quantization, int(sector))
        psi = np.zeros(basis.dim, dtype=complex)
        if quantization is Quantization.STANDING:
            psi[code] = 1.0
        elif field.kind is FieldKind.FOCK:
            psi[int(field.photons[0]) * block + code] = 1.0
        else:
            psi[np.arange(sector + 1) * block + code] = _sector_amplitudes(field.alphas, int(sector))
        components.append((float(w), StateVector(basis, psi)))
    return SectorEnsemble(tuple(components))
