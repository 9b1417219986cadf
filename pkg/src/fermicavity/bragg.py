"""Two-state Bragg models.

Each atom is a pseudo-spin (k - q down, k + q up) detuned by
dw_k = E_{k+q} - E_{k-q} = (k/q) E2q.  Two running-wave modes become an
angular momentum (Schwinger) with j = N/2, m = (n_q - n_-q)/2 and
J^+ = a_q^+ a_-q.  This module holds the exact Schwinger evolution, the
closed-form standing-wave solution, collapse/revival time estimates and
the semiclassical Bloch-vector model.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import sqrt

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .config import Q, FieldKind, FieldSpec, Quantization, Regime, SimulationConfig
from .errors import ConfigError, IncompatibleSolverError, NumericalError
from .fock import SparseOperator, _sector_amplitudes
from .observables import ObservableSeries, channel_label, poisson_average
from .propagator import eigendecompose, label_blocks, spectral_projection

COHERENT_MODES = ("projected", "fock_average")


@dataclass(frozen=True)
class BraggConfig:
    Na: int
    kF: float
    E2q: float
    g: float
    field: FieldSpec
    quantization: Quantization = Quantization.RUNNING

    def __post_init__(self):
        if self.Na < 1:
            raise ConfigError("Na must be at least 1")
        if not 0.0 <= self.kF < Q:
            raise ConfigError("kF must satisfy 0 <= kF < q")
        if self.E2q < 0:
            raise ConfigError("E2q must be non-negative")

    @classmethod
    def from_simulation(cls, config: SimulationConfig) -> "BraggConfig":
        return cls(config.Na, config.kF, config.E2q, config.g, config.field, config.quantization)

    @property
    def k(self) -> np.ndarray:
        """Centre momenta k_i of the resonant pairs (k_i - q, k_i + q)."""
        return np.zeros(1) if self.Na == 1 else np.linspace(-self.kF, self.kF, self.Na)

    @property
    def detunings(self) -> np.ndarray:
        return self.k / Q * self.E2q


@dataclass(frozen=True)
class SchwingerSector:
    photons: int

    @property
    def j(self) -> float:
        return self.photons / 2

    @property
    def m(self) -> np.ndarray:
        return np.arange(self.photons + 1) - self.j

    @property
    def dim(self) -> int:
        return self.photons + 1


def j_plus_element(j: float, m: float) -> float:
    """<j, m+1| J^+ |j, m>."""
    if abs(m) > j + 1e-12:
        raise ConfigError(f"|m| = {abs(m)} exceeds j = {j}")
    return sqrt(max((j + m + 1) * (j - m), 0.0))


def t_decay(j: float, g: float = 1.0) -> float:
    """Collapse estimate from the spread of the two dominant Rabi frequencies."""
    if j < 1:
        raise ConfigError("the collapse estimate needs j >= 1")
    return 2 * np.pi / g / (sqrt((j + 1) * j) - sqrt(2 * j))


def t_revival(j: float, g: float = 1.0) -> float:
    """Time for Rabi frequencies of neighbouring m to dephase by 2 pi."""
    if j < 1:
        raise ConfigError("the revival estimate needs j >= 1")
    return 2 * np.pi / g / (sqrt((j + 1) * j) - sqrt((j + 2) * (j - 1)))


def _spin_words(Na: int) -> np.ndarray:
    """Bit i of word s (atom 0 most significant) is 1 when atom i is up."""
    s = np.arange(2**Na)
    return (s[:, None] >> np.arange(Na - 1, -1, -1)[None, :]) & 1


def build_bragg_hamiltonian_rw(cfg: BraggConfig, photons: int) -> SparseOperator:
    """sum_i dw_i S^z_i + g sum_i (J^+ S^-_i + J^- S^+_i) on |j, m> x spins.

    Index = (n_q) * 2**Na + spin word, with n_q = m + j.
    """
    Na = cfg.Na
    sector = SchwingerSector(photons)
    words = _spin_words(Na)
    nw = len(words)
    dim = sector.dim * nw
    diag = np.tile((words - 0.5) @ cfg.detunings, sector.dim)
    rows, cols, vals = [], [], []
    for mu, m in enumerate(sector.m[:-1]):
        element = j_plus_element(sector.j, m)
        for i in range(Na):
            up = np.flatnonzero(words[:, i] == 1)
            # J^+ S^-_i: photon pair shifts m -> m + 1 while atom i drops
            src = mu * nw + up
            dst = (mu + 1) * nw + up - (1 << (Na - 1 - i))
            rows.append(dst)
            cols.append(src)
            vals.append(np.full(len(up), cfg.g * element))
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.csr_matrix((vals.astype(complex), (rows, cols)), shape=(dim, dim))
    H = sp.diags(diag.astype(complex)) + off + off.conj().T
    return SparseOperator(H.tocsr(), hermitian=True)


def schwinger_conserved(cfg: BraggConfig, photons: int) -> dict[str, SparseOperator]:
    """J^2 and J^z + sum_i S^z_i on one Schwinger sector."""
    sector = SchwingerSector(photons)
    words = _spin_words(cfg.Na)
    m = np.repeat(sector.m, len(words))
    sz = np.tile((words - 0.5).sum(axis=1), sector.dim)
    j2 = np.full(len(m), sector.j * (sector.j + 1))
    return {
        name: SparseOperator(sp.diags(d.astype(complex)).tocsr(), hermitian=True)
        for name, d in (("J2", j2), ("Jz+Sz", m + sz))
    }


def build_bragg_hamiltonian_sw(cfg: BraggConfig, photons: float) -> list[np.ndarray]:
    """Independent 2x2 blocks dw_k S^z + (g N / 2)(S^+ + S^-), basis (down, up)."""
    c = 0.5 * cfg.g * photons
    return [np.array([[-0.5 * d, c], [c, 0.5 * d]], dtype=complex) for d in cfg.detunings]


def analytic_sw_fock_P(k, N, g, t, E2q):
    """Closed-form up-state probability of an atom on the k pair.

    P = (gN/2)^2 / ((dw/2)^2 + (gN/2)^2) sin^2(sqrt((dw/2)^2 + (gN/2)^2) t)
    with dw = (k/q) E2q.
    """
    if np.any(np.asarray(N) < 0):
        raise ConfigError("photon number must be non-negative")
    half_dw = 0.5 * np.asarray(k) / Q * E2q
    c = 0.5 * g * np.asarray(N, dtype=float)
    rabi2 = half_dw**2 + c**2
    with np.errstate(invalid="ignore", divide="ignore"):
        amp = np.where(rabi2 > 0, c**2 / np.where(rabi2 > 0, rabi2, 1.0), 0.0)
    return amp * np.sin(np.sqrt(rabi2) * np.asarray(t)) ** 2


# --- exact Bragg runs -------------------------------------------------------


def _initial_components(cfg: BraggConfig, mode: str) -> list[tuple[int, list[tuple[float, np.ndarray]]]]:
    """Per photon sector: (N, [(weight, initial vector), ...]), atoms all down."""
    if mode not in COHERENT_MODES:
        raise ConfigError(f"coherent mode must be one of {COHERENT_MODES}")
    field = cfg.field
    sectors, weights = field.sector_weights()
    nw = 2**cfg.Na
    out = []
    for N, w in zip(sectors, weights):
        N = int(N)
        dim = (N + 1) * nw
        if field.kind is FieldKind.FOCK:
            psi = np.zeros(dim, complex)
            psi[int(field.photons[0]) * nw] = 1.0
            out.append((N, [(float(w), psi)]))
            continue
        amps = _sector_amplitudes(field.alphas, N)
        if mode == "projected":
            psi = np.zeros(dim, complex)
            psi[np.arange(N + 1) * nw] = amps
            out.append((N, [(float(w), psi)]))
            continue
        parts = []
        for nq, a in enumerate(amps):
            if w * abs(a) ** 2 < 1e-16:
                continue
            psi = np.zeros(dim, complex)
            psi[nq * nw] = 1.0
            parts.append((float(w) * abs(a) ** 2, psi))
        out.append((N, parts))
    return out


def _series(times, k, up) -> ObservableSeries:
    """Channels P at k_i - q and k_i + q plus N_sc from per-atom up probabilities."""
    series = ObservableSeries(np.asarray(times))
    for lower, label_k in ((True, -Q), (False, Q)):
        for p in np.unique(np.round(k + label_k, 12)):
            mask = np.abs(k + label_k - p) < 1e-9
            val = (1.0 - up[:, mask]) if lower else up[:, mask]
            series.channels[channel_label(p)] = val.sum(axis=1)
    series.channels["N_sc"] = up.sum(axis=1)
    return series


@dataclass
class BraggResult:
    series: ObservableSeries
    up: np.ndarray
    drifts: dict[str, float]


def run_bragg_exact(
    cfg: BraggConfig,
    times,
    tol: float = 1e-10,
    coherent_mode: str = "projected",
    threads: int = 1,
) -> BraggResult:
    """Exact pseudo-spin evolution.

    Running waves use the Schwinger basis, sector by sector.  A standing
    wave decouples the atoms, so each evolves under its own 2x2 block at
    every retained photon number.
    """
    times = np.asarray(times, dtype=float)
    if cfg.quantization is Quantization.STANDING:
        return _run_sw_blocks(cfg, times)
    words = _spin_words(cfg.Na).astype(float)
    nw = len(words)
    sectors = _initial_components(cfg, coherent_mode)

    def one(item):
        N, parts = item
        H = build_bragg_hamiltonian_rw(cfg, N)
        cons = schwinger_conserved(cfg, N)
        labels = cons["Jz+Sz"].matrix.diagonal().real
        diag = {name: op.matrix.diagonal().real for name, op in cons.items()}
        out = []
        for w, psi in parts:
            states = evolve_by_blocks(H, labels, psi, times)
            prob = np.abs(states) ** 2
            obs = {
                "up": prob.reshape(len(times), N + 1, nw).sum(axis=1) @ words,
                "energy": np.einsum("ti,ti->t", states.conj(), (H.matrix @ states.T).T).real,
            }
            for name, d in diag.items():
                obs[name] = prob @ d
            out.append((w, obs))
        return out

    if threads > 1 and len(sectors) > 1:
        with ThreadPoolExecutor(threads) as pool:
            grouped = list(pool.map(one, sectors))
    else:
        grouped = [one(c) for c in sectors]
    results = [r for group in grouped for r in group]
    up = np.zeros((len(times), cfg.Na))
    drifts: dict[str, float] = {}
    total = sum(w for w, _ in results)
    for w, obs in results:
        up += w * obs["up"]
        for name in ("energy", "J2", "Jz+Sz"):
            v = obs[name]
            drifts[name] = max(drifts.get(name, 0.0), float(np.abs(v - v[0]).max() / max(1.0, abs(v[0]))))
    up /= total
    return BraggResult(_series(times, cfg.k, up), up, drifts)


def evolve_by_blocks(H: SparseOperator, labels: np.ndarray, psi0: np.ndarray, times) -> np.ndarray:
    """exp(-iHt) psi0 for every t, shape (T, dim).

    ``labels`` are eigenvalues of an operator commuting with H; each block
    of equal label is diagonalized densely on its own.
    """
    times = np.asarray(times, dtype=float)
    out = np.zeros((len(times), H.dim), dtype=complex)
    for idx in label_blocks(H, labels):
        if not np.any(psi0[idx]):
            continue
        w, V = scipy.linalg.eigh(H.matrix[idx][:, idx].toarray())
        c = V.conj().T @ psi0[idx]
        out[:, idx] = (np.exp(-1j * np.outer(times, w)) * c) @ V.T
    return out


def _run_sw_blocks(cfg: BraggConfig, times) -> BraggResult:
    sectors, _ = cfg.field.sector_weights()
    per_n = {}
    for N in sectors:
        up = np.zeros((len(times), cfg.Na))
        for i, h in enumerate(build_bragg_hamiltonian_sw(cfg, float(N))):
            w, V = np.linalg.eigh(h)
            c = V.conj().T @ np.array([1.0, 0.0])
            amps = (V[None, :, :] * (c * np.exp(-1j * np.outer(times, w)))[:, None, :]).sum(axis=2)
            up[:, i] = np.abs(amps[:, 1]) ** 2
        per_n[int(N)] = up
    if cfg.field.kind is FieldKind.FOCK:
        up = per_n[int(sectors[0])]
    else:
        up = poisson_average(per_n, cfg.field.total_mean, cfg.field.truncation_epsilon)
    return BraggResult(_series(times, cfg.k, up), up, {})


def run_bragg_analytic(cfg: BraggConfig, times) -> BraggResult:
    """Standing-wave result from the closed form; cost is linear in Na."""
    if cfg.quantization is not Quantization.STANDING:
        raise IncompatibleSolverError("the analytic Bragg solution needs a standing wave")
    times = np.asarray(times, dtype=float)
    sectors, _ = cfg.field.sector_weights()
    per_n = {int(N): analytic_sw_fock_P(cfg.k[None, :], N, cfg.g, times[:, None], cfg.E2q) for N in sectors}
    if cfg.field.kind is FieldKind.FOCK:
        up = per_n[int(sectors[0])]
    else:
        up = poisson_average(per_n, cfg.field.total_mean, cfg.field.truncation_epsilon)
    return BraggResult(_series(times, cfg.k, up), up, {})


def bragg_spectrum(cfg: BraggConfig, photons: int | None = None):
    """Eigenfrequencies of the Schwinger Hamiltonian and the Fock initial
    state's weights on them."""
    if cfg.quantization is not Quantization.RUNNING or cfg.field.kind is not FieldKind.FOCK:
        raise IncompatibleSolverError("the spectrum solver needs a running-wave Fock field")
    N = int(cfg.field.total_mean) if photons is None else photons
    H = build_bragg_hamiltonian_rw(cfg, N)
    psi = np.zeros(H.dim, complex)
    psi[int(cfg.field.photons[0]) * 2**cfg.Na] = 1.0
    return spectral_projection(eigendecompose(H), psi)


# --- semiclassical Bloch vectors --------------------------------------------


@dataclass
class BlochState:
    S: np.ndarray  # (Na, 3)
    J: np.ndarray  # (3,)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.S.ravel(), self.J])

    @classmethod
    def unpack(cls, y: np.ndarray, Na: int) -> "BlochState":
        return cls(y[: 3 * Na].reshape(Na, 3), y[3 * Na:])


def bloch_initial(cfg: BraggConfig) -> BlochState:
    """Atoms down; J from the field's mean Schwinger components."""
    if cfg.quantization is not Quantization.RUNNING:
        raise IncompatibleSolverError("the Bloch model describes running-wave fields")
    S = np.tile([0.0, 0.0, -0.5], (cfg.Na, 1))
    n = np.array(cfg.field.photons)
    if cfg.field.kind is FieldKind.FOCK:
        J = np.array([0.0, 0.0, 0.5 * (n[0] - n[1])])
    else:
        a = cfg.field.alphas
        jp = np.conj(a[0]) * a[1]
        J = np.array([jp.real, jp.imag, 0.5 * (n[0] - n[1])])
    return BlochState(S, J)


def bloch_rhs(state: BlochState, cfg: BraggConfig) -> BlochState:
    """Factorized Heisenberg equations of the Schwinger Hamiltonian.

    g (J^+ S^- + J^- S^+) = 2 g (J^x S^x + J^y S^y), hence the factor 2.
    """
    S, J = state.S, state.J
    omega = np.zeros_like(S)
    omega[:, 0] = 2 * cfg.g * J[0]
    omega[:, 1] = 2 * cfg.g * J[1]
    omega[:, 2] = cfg.detunings
    total = S.sum(axis=0)
    field_axis = 2 * cfg.g * np.array([total[0], total[1], 0.0])
    return BlochState(np.cross(omega, S), np.cross(field_axis, J))


@dataclass
class BlochTrajectory:
    times: np.ndarray
    S: np.ndarray  # (T, Na, 3)
    J: np.ndarray  # (T, 3)
    k: np.ndarray

    @property
    def series(self) -> ObservableSeries:
        return _series(self.times, self.k, self.S[:, :, 2] + 0.5)

    def invariant_drift(self) -> dict[str, float]:
        s_len = np.linalg.norm(self.S, axis=2)
        j_len = np.linalg.norm(self.J, axis=1)
        jz = self.J[:, 2] + self.S[:, :, 2].sum(axis=1)
        return {
            "|S|": float(np.abs(s_len - s_len[0]).max()),
            "|J|": float(np.abs(j_len - j_len[0]).max()),
            "Jz+Sz": float(np.abs(jz - jz[0]).max()),
        }


def integrate_bloch(cfg: BraggConfig, times, tol: float = 1e-10, state0: BlochState | None = None) -> BlochTrajectory:
    times = np.asarray(times, dtype=float)
    s0 = state0 or bloch_initial(cfg)
    Na = cfg.Na
    sol = solve_ivp(
        lambda _t, y: bloch_rhs(BlochState.unpack(y, Na), cfg).pack(),
        (times[0], times[-1]),
        s0.pack(),
        method="DOP853",
        t_eval=times,
        rtol=tol,
        atol=tol * 1e-2,
    )
    if not sol.success:
        raise NumericalError(f"Bloch integration failed: {sol.message}")
    y = sol.y.T
    return BlochTrajectory(times, y[:, : 3 * Na].reshape(-1, Na, 3), y[:, 3 * Na:], cfg.k)


# --- collapse and revival measurement ----------------------------------------


@dataclass
class Envelope:
    times: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @property
    def amplitude(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)


def _extrema(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of local maxima and minima; an end point counts when it is
    one-sidedly extremal."""
    d = np.diff(y)
    imax = np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0)) + 1
    imin = np.flatnonzero((d[:-1] < 0) & (d[1:] >= 0)) + 1
    if len(d):
        if d[0] < 0:
            imax = np.r_[0, imax]
        elif d[0] > 0:
            imin = np.r_[0, imin]
    return imax, imin


def envelope(times, y) -> Envelope:
    """Upper and lower envelopes interpolated linearly through the local
    extrema, held constant beyond the outermost ones."""
    times, y = np.asarray(times, dtype=float), np.asarray(y, dtype=float)
    imax, imin = _extrema(y)
    if len(imax) == 0 or len(imin) == 0:
        return Envelope(times, y.copy(), y.copy())
    upper = np.interp(times, times[imax], y[imax])
    lower = np.interp(times, times[imin], y[imin])
    return Envelope(times, upper, lower)


@dataclass
class CollapseRevival:
    initial_amplitude: float
    collapse_time: float | None
    revival_time: float | None
    revival_peak_time: float | None


def measure_collapse_revival(times, y) -> CollapseRevival:
    """Collapse is the first time the envelope amplitude drops below 1/e of
    its value at the first maximum.  Revival is the first later recovery
    above one half of it; the peak is the amplitude maximum before the
    envelope next falls below 1/e."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    imax, _ = _extrema(y)
    imax = imax[imax > 0]
    if len(imax) == 0:
        return CollapseRevival(0.0, None, None, None)
    env = envelope(times, y)
    amp = env.amplitude
    i0 = int(imax[0])
    a0 = float(amp[i0])
    below = np.flatnonzero(amp[i0:] < a0 / np.e) + i0
    if a0 <= 0.0 or len(below) == 0:
        return CollapseRevival(a0, None, None, None)
    ic = int(below[0])
    above = np.flatnonzero(amp[ic:] >= 0.5 * a0) + ic
    if len(above) == 0:
        return CollapseRevival(a0, float(times[ic]), None, None)
    ir = int(above[0])
    lobe_end = np.flatnonzero(amp[ir:] < a0 / np.e)
    stop = ir + (int(lobe_end[0]) if len(lobe_end) else len(amp) - ir)
    ipk = ir + int(np.argmax(amp[ir:stop]))
    return CollapseRevival(a0, float(times[ic]), float(times[ir]), float(times[ipk]))


def envelope_recovery(times, y, t_star: float) -> float:
    """Upper envelope at ``t_star`` relative to the first maximum, both
    measured from the initial value."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    imax, _ = _extrema(y)
    imax = imax[imax > 0]
    if len(imax) == 0:
        raise ConfigError("signal has no maximum")
    env = envelope(times, y)
    first = y[imax[0]] - y[0]
    return float((np.interp(t_star, times, env.upper) - y[0]) / first)


def bragg_config_for(config: SimulationConfig) -> BraggConfig:
    if config.regime is not Regime.BRAGG:
        raise IncompatibleSolverError("Bragg solvers need regime = bragg")
    return BraggConfig.from_simulation(config)
