"""
Synthetic transmitter fingerprints.

A DeviceProfile stands in for one physical transmitter. `apply_rff` applies,
in this fixed order, IQ imbalance, DC offset, odd-order PA compression, the
turn-on envelope, and the carrier rotation (residual CFO plus the settling
phase drift of the semi-steady region). A tiny per-symbol complex gain jitter
keeps the steady-state symbols close but not bit-identical.
"""
import logging
from dataclasses import dataclass, asdict, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DataError
from .phy import ComplexWaveform, Origin, PhyConfig

logger = logging.getLogger(__name__)

SEMI_STEADY_SYMBOLS = 2


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    iq_gain_imbalance_db: float = 0.0
    iq_phase_imbalance_rad: float = 0.0
    dc_offset_i: float = 0.0
    dc_offset_q: float = 0.0
    residual_cfo_hz: float = 0.0
    pa_gain_a1: float = 1.0
    pa_nonlin_a3: float = 0.0
    transient_tau_samples: float = 0.0
    transient_phase_drift_rad: float = 0.0
    steady_jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.transient_tau_samples < 0:
            raise DataError("transient_tau_samples must be nonnegative")
        if self.steady_jitter_sigma < 0:
            raise DataError("steady_jitter_sigma must be nonnegative")

    def parameter_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAMETER_NAMES], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceProfile":
        return cls(**data)


PARAMETER_NAMES = tuple(f.name for f in fields(DeviceProfile) if f.name != "device_id")


def identity_profile(device_id: str = "identity") -> DeviceProfile:
    return DeviceProfile(device_id=device_id)


DEFAULT_RANGES: Dict[str, Tuple[float, float]] = {
    "iq_gain_imbalance_db": (-1.0, 1.0),
    "iq_phase_imbalance_rad": (-0.1, 0.1),
    "dc_offset_i": (-0.05, 0.05),
    "dc_offset_q": (-0.05, 0.05),
    "residual_cfo_hz": (-5000.0, 5000.0),
    "pa_gain_a1": (0.9, 1.1),
    "pa_nonlin_a3": (-0.15, -0.02),
    "transient_tau_samples": (5.0, 30.0),
    "transient_phase_drift_rad": (1.0, 2.0),
    "steady_jitter_sigma": (0.0002, 0.001),
}


@dataclass
class PopulationSpec:
    n_devices: int = 8
    seed: int = 0
    ranges: Optional[Dict[str, Tuple[float, float]]] = None

    def __post_init__(self):
        merged = dict(DEFAULT_RANGES)
        for name, bounds in (self.ranges or {}).items():
            if name not in DEFAULT_RANGES:
                raise DataError(f"unknown impairment parameter {name!r}")
            low, high = (float(b) for b in bounds)
            if high < low:
                raise DataError(f"range for {name} has max < min")
            merged[name] = (low, high)
        self.ranges = merged

    def to_dict(self) -> dict:
        return {
            "n_devices": self.n_devices,
            "seed": self.seed,
            "ranges": {k: [float(v[0]), float(v[1])] for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PopulationSpec":
        return cls(**data)


def sample_population(spec: PopulationSpec) -> List[DeviceProfile]:
    """Draw `n_devices` distinct profiles, deterministically from `spec.seed`."""
    if spec.n_devices < 2:
        raise DataError(f"a population needs at least 2 devices, got {spec.n_devices}")
    if all(low == high for low, high in spec.ranges.values()):
        raise DataError("every parameter range is degenerate (min == max)")

    rng = np.random.default_rng(spec.seed)
    profiles = []
    for k in range(spec.n_devices):
        values = {name: float(rng.uniform(*spec.ranges[name])) for name in PARAMETER_NAMES}
        profiles.append(DeviceProfile(device_id=f"dev{k:02d}", **values))

    vectors = np.stack([p.parameter_vector() for p in profiles])
    for a in range(len(vectors)):
        for b in range(a + 1, len(vectors)):
            if np.array_equal(vectors[a], vectors[b]):
                raise DataError(f"sampled profiles {a} and {b} are identical; widen the ranges")
    logger.debug("sampled %d device profiles (seed %d)", spec.n_devices, spec.seed)
    return profiles


def _iq_imbalance(x: np.ndarray, gain_db: float, phase_rad: float) -> np.ndarray:
    if gain_db == 0.0 and phase_rad == 0.0:
        return x
    a = 10.0 ** (gain_db / 40.0)
    i, q = x.real, x.imag
    i_out = a * i
    q_out = (q * np.cos(phase_rad) - i * np.sin(phase_rad)) / a
    return i_out + 1j * q_out


def _power_amplifier(x: np.ndarray, a1: float, a3: float) -> np.ndarray:
    if a3 == 0.0:
        return a1 * x if a1 != 1.0 else x
    return a1 * x + a3 * x * np.abs(x) ** 2


def _settling(n: int, samples_per_symbol: int, tau: float, drift: float) -> Tuple[np.ndarray, np.ndarray]:
    t = np.arange(n, dtype=np.float64)
    envelope = 1.0 - np.exp(-t / tau) if tau > 0 else np.ones(n)
    span = SEMI_STEADY_SYMBOLS * samples_per_symbol
    phase = drift * np.clip(1.0 - t / span, 0.0, None) ** 2
    return envelope, phase


def apply_rff(
    profile: DeviceProfile,
    w: ComplexWaveform,
    rng: Optional[np.random.Generator] = None,
    phy: PhyConfig = PhyConfig(),
) -> ComplexWaveform:
    """
    Apply the device fingerprint RFF(.) to an ideal preamble.

    `rng` drives only the steady jitter and may be omitted when
    `steady_jitter_sigma` is zero.
    """
    if len(w) != phy.preamble_length:
        raise DataError(f"expected a {phy.preamble_length}-sample preamble, got {len(w)}")
    if 2 * phy.samples_per_symbol <= profile.transient_tau_samples:
        raise DataError("transient_tau_samples must stay inside the semi-steady region")

    x = _iq_imbalance(w.samples, profile.iq_gain_imbalance_db, profile.iq_phase_imbalance_rad)
    if profile.dc_offset_i or profile.dc_offset_q:
        x = x + (profile.dc_offset_i + 1j * profile.dc_offset_q)
    x = _power_amplifier(x, profile.pa_gain_a1, profile.pa_nonlin_a3)

    n = x.size
    envelope, drift = _settling(n, phy.samples_per_symbol, profile.transient_tau_samples,
                                profile.transient_phase_drift_rad)
    if profile.transient_tau_samples > 0:
        x = envelope * x
    t = np.arange(n) / w.sample_rate_hz
    phase = 2.0 * np.pi * profile.residual_cfo_hz * t + drift
    if np.any(phase):
        x = x * np.exp(1j * phase)

    if profile.steady_jitter_sigma > 0:
        if rng is None:
            raise DataError("an RNG is required when steady_jitter_sigma > 0")
        n_symbols = n // phy.samples_per_symbol
        noise = rng.standard_normal((n_symbols, 2))
        gains = 1.0 + profile.steady_jitter_sigma * (noise[:, 0] + 1j * noise[:, 1])
        x = x * np.repeat(gains, phy.samples_per_symbol)

    return ComplexWaveform(x, w.sample_rate_hz, Origin.IMPAIRED)


def symbol_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2 distance ||a - b e^{j phi}|| / ||a|| at the best-aligning phase."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    inner = np.vdot(b, a)
    rotation = inner / abs(inner) if abs(inner) > 0 else 1.0
    return float(np.linalg.norm(a - b * rotation) / np.linalg.norm(a))


def symbol_distances(w: ComplexWaveform, samples_per_symbol: int) -> np.ndarray:
    """Pairwise symbol_distance matrix over the symbols of a preamble."""
    symbols = w.samples.reshape(-1, samples_per_symbol)
    k = symbols.shape[0]
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                out[i, j] = symbol_distance(symbols[i], symbols[j])
    return out
