"""Time evolution and spectral analysis of sparse Hermitian Hamiltonians."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.sparse.linalg import expm_multiply

from .errors import ConfigError, NumericalError
from .fock import SparseOperator

log = logging.getLogger(__name__)

DENSE_LIMIT = 1500
EIG_CAP = 5000
BAND_GAP_RATIO = 5.0


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[np.ndarray] | None
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    max_norm_drift: float = 0.0


@dataclass
class SpectrumProjection:
    frequencies: np.ndarray
    weights: np.ndarray


@dataclass
class Band:
    center: float
    width: float
    weight: float
    members: np.ndarray


@dataclass
class BandAnalysis:
    bands: list[Band]
    inverse_revival_frequency: float | None
    dephasing_width: float
    cluster_gap: float

    @property
    def revival_time(self) -> float | None:
        f = self.inverse_revival_frequency
        if f is None or f == 0.0:
            return None
        return 2 * np.pi / f


def norm_estimate(H: SparseOperator, iterations: int = 20) -> float:
    """Largest |eigenvalue| by power iteration from a fixed start vector."""
    if H.dim == 0:
        return 0.0
    v = np.linspace(1.0, 2.0, H.dim).astype(complex)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        w = H @ v
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est


def eigendecompose(H: SparseOperator, cap: int = EIG_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Dense Hermitian eigendecomposition; returns (frequencies, eigvecs)."""
    if H.dim > cap:
        raise ConfigError(f"dimension {H.dim} exceeds the eigendecomposition cap {cap}")
    dense = H.dense()
    w, V = np.linalg.eigh(dense)
    scale = max(np.abs(w).max(initial=0.0), 1.0)
    residual = np.abs(dense @ V - V * w).max(initial=0.0)
    if residual > 1e-9 * scale:
        raise NumericalError(f"eigendecomposition residual {residual:.2e} too large")
    return w, V


def label_blocks(H: SparseOperator, labels: np.ndarray, resolution: float = 0.5) -> list[np.ndarray]:
    """Index sets of equal ``labels``, the eigenvalues of a diagonal operator commuting with H.

    Labels are compared on a grid of ``resolution``; any matrix element of
    H joining two different blocks raises.
    """
    keys = np.round(np.asarray(labels, dtype=float) / resolution).astype(np.int64)
    coo = H.matrix.tocoo()
    if np.any(keys[coo.row] != keys[coo.col]):
        raise ConfigError("labels do not commute with the Hamiltonian")
    order = np.argsort(keys, kind="stable")
    cuts = np.flatnonzero(np.diff(keys[order])) + 1
    return np.split(order, cuts)


def propagate(
    H: SparseOperator,
    psi0: np.ndarray,
    times,
    tol: float = 1e-10,
    observables: Mapping[str, Callable[[np.ndarray], object]] | None = None,
    keep_states: bool = True,
    method: str = "auto",
    eig: tuple[np.ndarray, np.ndarray] | None = None,
    blocks: list[np.ndarray] | None = None,
) -> Trajectory:
    """Evolve ``psi0`` under exp(-iHt) and sample it at ``times``.

    ``method`` is ``"eig"`` (dense eigendecomposition), ``"krylov"``
    (scipy's truncated-Taylor action of the exponential between successive
    samples), ``"blocks"`` (eig on each index set of ``blocks``, see
    ``label_blocks``) or ``"auto"``, which prefers blocks when given and
    otherwise picks eig below ``DENSE_LIMIT``.  The
    norm is never renormalized; a drift above 100 * tol raises.
    """
    times = np.asarray(times, dtype=float)
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (H.dim,):
        raise ConfigError("state and Hamiltonian dimensions differ")
    if not 1e-12 <= tol <= 1e-6:
        raise ConfigError("tol must lie in [1e-12, 1e-6]")
    if np.any(np.diff(times) < 0):
        raise ConfigError("times must be non-decreasing")
    if method == "auto" and blocks is not None:
        method = "blocks"
    if method == "auto":
        method = "eig" if H.dim <= DENSE_LIMIT or eig is not None else "krylov"
    n0 = np.linalg.norm(psi0)
    obs = {name: [] for name in observables or {}}
    states = [] if keep_states else None
    drift = 0.0

    def record(k, psi):
        nonlocal drift
        drift = max(drift, abs(np.linalg.norm(psi) - n0))
        if drift > 100 * tol:
            raise NumericalError(f"norm drift {drift:.2e} at t={times[k]:.6g}")
        for name, fn in (observables or {}).items():
            obs[name].append(fn(psi))
        if keep_states:
            states.append(psi)

    if method == "eig":
        w, V = eig if eig is not None else eigendecompose(H)
        coeff = V.conj().T @ psi0
        for k, t in enumerate(times):
            record(k, V @ (coeff * np.exp(-1j * w * t)))
    elif method == "blocks":
        parts = []
        for idx in blocks:
            c = psi0[idx]
            if np.any(c):
                w, V = eigendecompose(SparseOperator(H.matrix[idx][:, idx], hermitian=True))
                parts.append((idx, w, V, V.conj().T @ c))
        for k, t in enumerate(times):
            psi = np.zeros(H.dim, dtype=complex)
            for idx, w, V, coeff in parts:
                psi[idx] = V @ (coeff * np.exp(-1j * w * t))
            record(k, psi)
    elif method == "krylov":
        A = -1j * H.matrix.tocsc()
        psi = psi0.copy()
        t_prev = 0.0
        for k, t in enumerate(times):
            if t != t_prev:
                psi = expm_multiply(A * (t - t_prev), psi)
                t_prev = t
            record(k, psi)
    else:
        raise ConfigError(f"unknown propagation method {method!r}")
    return Trajectory(times, states, {k: np.asarray(v) for k, v in obs.items()}, drift)


def spectral_projection(eig: tuple[np.ndarray, np.ndarray], psi0: np.ndarray) -> SpectrumProjection:
    w, V = eig
    if V.shape[0] != len(psi0):
        raise ConfigError("state and eigenvector dimensions differ")
    weights = np.abs(V.conj().T @ psi0) ** 2
    return SpectrumProjection(w, weights / weights.sum())


def _default_cluster_gap(freqs: np.ndarray) -> float:
    """Split point between intra-band and inter-band spacings.

    Sorted level gaps are scanned from the largest down; the first jump by a
    factor of at least ``BAND_GAP_RATIO`` separates the two populations.
    Without such a jump every frequency is its own band.
    """
    gaps = np.sort(np.diff(freqs))
    gaps = gaps[gaps > 0]
    if len(gaps) < 2:
        return 0.0
    ratios = gaps[1:] / gaps[:-1]
    jumps = np.flatnonzero(ratios >= BAND_GAP_RATIO)
    if len(jumps) == 0:
        return 0.0
    k = int(jumps[-1])
    return float(np.sqrt(gaps[k] * gaps[k + 1]))


def band_analysis(
    proj: SpectrumProjection,
    weight_threshold: float = 1e-3,
    cluster_gap: float | None = None,
) -> BandAnalysis:
    """Group weight-bearing eigenfrequencies into bands.

    The inverse revival frequency is the smallest non-zero variation between
    adjacent band separations: the beat that rephases the Pendelloesung
    oscillations.  It is 0 for evenly spaced bands and ``None`` with fewer
    than three bands.
    """
    keep = proj.weights >= weight_threshold
    if not np.any(keep):
        raise ConfigError("no eigenstate carries weight above the threshold")
    order = np.argsort(proj.frequencies[keep])
    freqs = proj.frequencies[keep][order]
    weights = proj.weights[keep][order]
    gap = _default_cluster_gap(freqs) if cluster_gap is None else cluster_gap
    splits = np.flatnonzero(np.diff(freqs) > gap) + 1
    bands = []
    for idx in np.split(np.arange(len(freqs)), splits):
        w = weights[idx]
        center = float(np.average(freqs[idx], weights=w))
        width = float(np.sqrt(np.average((freqs[idx] - center) ** 2, weights=w)))
        bands.append(Band(center, width, float(w.sum()), freqs[idx]))
    total = sum(b.weight for b in bands)
    dephasing = sum(b.weight * b.width for b in bands) / total
    inverse = None
    if len(bands) >= 3:
        centers = np.array([b.center for b in bands])
        separations = np.diff(centers)
        variation = np.abs(np.diff(separations))
        significant = variation[variation > 1e-9 * np.abs(separations).max()]
        inverse = float(significant.min()) if len(significant) else 0.0
    return BandAnalysis(bands, inverse, float(dephasing), float(gap))
