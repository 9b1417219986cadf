"""Simulation parameters and cavity field specifications.

Internal units: hbar = 1, photon momentum q = 1.  All energies (``g``,
``E2q``) share one unit and times are measured in its inverse, so with the
default ``g = 1`` times are in units of 1/g and momenta in units of q.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import lgamma, log

import numpy as np
from scipy import stats

from .errors import ConfigError

Q = 1.0


class Regime(enum.Enum):
    RAMAN_NATH = "raman-nath"
    BRAGG = "bragg"


class Quantization(enum.Enum):
    RUNNING = "running"
    STANDING = "standing"


class FieldKind(enum.Enum):
    FOCK = "fock"
    COHERENT = "coherent"


@dataclass(frozen=True)
class FieldSpec:
    """Initial state of the cavity field.

    ``photons`` holds the photon numbers (Fock) or the mean photon numbers
    (coherent) of each mode: two entries ``(q, -q)`` for running waves, a
    single entry for a standing wave.
    """

    kind: FieldKind
    photons: tuple[float, ...]
    phases: tuple[float, ...] = ()
    truncation_epsilon: float = 1e-8

    def __post_init__(self):
        photons = tuple(float(n) for n in self.photons)
        object.__setattr__(self, "photons", photons)
        if len(photons) not in (1, 2):
            raise ConfigError("field needs one (standing) or two (running) photon numbers")
        if any(n < 0 for n in photons):
            raise ConfigError("photon numbers must be non-negative")
        if self.kind is FieldKind.FOCK and any(n != int(n) for n in photons):
            raise ConfigError("Fock photon numbers must be integers")
        phases = tuple(float(p) for p in self.phases) or (0.0,) * len(photons)
        if len(phases) != len(photons):
            raise ConfigError("one phase per field mode is required")
        object.__setattr__(self, "phases", phases)
        if not 0.0 < self.truncation_epsilon <= 1e-4:
            raise ConfigError("truncation_epsilon must lie in (0, 1e-4]")

    @classmethod
    def fock(cls, *numbers: int) -> "FieldSpec":
        return cls(FieldKind.FOCK, tuple(numbers))

    @classmethod
    def coherent(cls, *means: float, phases=(), truncation_epsilon: float = 1e-8) -> "FieldSpec":
        return cls(FieldKind.COHERENT, tuple(means), tuple(phases), truncation_epsilon)

    @property
    def n_modes(self) -> int:
        return len(self.photons)

    @property
    def total_mean(self) -> float:
        return float(sum(self.photons))

    @property
    def alphas(self) -> np.ndarray:
        """Coherent amplitudes ``sqrt(nbar) * exp(i phase)`` per mode."""
        return np.sqrt(np.array(self.photons)) * np.exp(1j * np.array(self.phases))

    def sector_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Total photon numbers carried by the state and their probabilities.

        Fock states occupy a single sector.  Coherent states keep the
        shortest contiguous window of the Poisson distribution whose
        discarded tail mass is at most ``truncation_epsilon``; the retained
        weights are renormalized.
        """
        if self.kind is FieldKind.FOCK:
            return np.array([int(self.total_mean)]), np.array([1.0])
        return poisson_window(self.total_mean, self.truncation_epsilon)


def poisson_window(mean: float, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    if mean == 0.0:
        return np.array([0]), np.array([1.0])
    top = int(mean + 20.0 * np.sqrt(mean) + 40)
    n = np.arange(top + 1)
    pmf = stats.poisson.pmf(n, mean)
    lo = hi = int(np.argmax(pmf))
    mass = pmf[lo]
    # grow towards the heavier neighbour: minimal window for a unimodal pmf
    while mass < 1.0 - epsilon:
        left = pmf[lo - 1] if lo > 0 else -1.0
        right = pmf[hi + 1] if hi < top else -1.0
        if left < 0 and right < 0:
            raise ConfigError("photon-number truncation cannot reach the requested epsilon")
        if right >= left:
            hi += 1
            mass += right
        else:
            lo -= 1
            mass += left
    kept = n[lo:hi + 1]
    weights = pmf[lo:hi + 1]
    return kept, weights / weights.sum()


def log_poisson(n: int, mean: float) -> float:
    if mean == 0.0:
        return 0.0 if n == 0 else -np.inf
    return -mean + n * log(mean) - lgamma(n + 1)


@dataclass(frozen=True)
class SimulationConfig:
    """Physical and numerical parameters of one simulation."""

    field: FieldSpec
    regime: Regime = Regime.RAMAN_NATH
    quantization: Quantization = Quantization.RUNNING
    g: float = 1.0
    E2q: float = 1.0
    kF: float = 0.1
    Na: int = 2
    nd: int = 2
    t_grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 10.0, 201))

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        object.__setattr__(self, "t_grid", t)
        if self.Na < 1:
            raise ConfigError("Na must be at least 1")
        if not 0.0 <= self.kF < Q:
            raise ConfigError("kF must satisfy 0 <= kF < q")
        if self.E2q < 0:
            raise ConfigError("E2q must be non-negative")
        if self.regime is Regime.RAMAN_NATH and self.nd < 1:
            raise ConfigError("Raman-Nath runs need nd >= 1")
        if t.ndim != 1 or t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigError("t_grid must start at 0 and increase strictly")
        expected = 2 if self.quantization is Quantization.RUNNING else 1
        if self.field.n_modes != expected:
            raise ConfigError(
                f"{self.quantization.value}-wave quantization needs {expected} field mode(s)"
            )

    @property
    def mass(self) -> float:
        """Atomic mass from E2q = 2 q^2 / M (infinite when E2q = 0)."""
        return np.inf if self.E2q == 0 else 2.0 * Q**2 / self.E2q

    def kinetic(self, p):
        """E_k = k^2 / 2M = (k/q)^2 E2q / 4."""
        return (np.asarray(p) / Q) ** 2 * self.E2q / 4.0

    def replace(self, **changes) -> "SimulationConfig":
        from dataclasses import replace

        return replace(self, **changes)
