"""
Corruption module H(.): additive white Gaussian noise at a target SNR.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError
from .phy import ComplexWaveform, Origin

INFINITE_SNR_DB = math.inf


@dataclass(frozen=True)
class SnrGrid:
    points_db: tuple = field(default_factory=lambda: tuple(float(x) for x in range(-10, 31, 5)))

    def __post_init__(self):
        points = tuple(float(p) for p in self.points_db)
        if not points:
            raise DataError("SNR grid is empty")
        if any(b <= a for a, b in zip(points, points[1:])):
            raise DataError(f"SNR grid must be strictly increasing: {points}")
        object.__setattr__(self, "points_db", points)

    def __iter__(self):
        return iter(self.points_db)

    def __len__(self) -> int:
        return len(self.points_db)

    def index(self, snr_db: float) -> int:
        return self.points_db.index(float(snr_db))

    @classmethod
    def from_range(cls, start: float, stop: float, step: float) -> "SnrGrid":
        if step <= 0:
            raise DataError("SNR grid step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return cls(tuple(start + k * step for k in range(count)))

    @classmethod
    def parse(cls, text: str) -> "SnrGrid":
        """Parse "start:stop:step" or a comma separated list."""
        text = text.strip()
        try:
            if ":" in text:
                start, stop, step = (float(p) for p in text.split(":"))
                return cls.from_range(start, stop, step)
            return cls(tuple(float(p) for p in text.split(",") if p.strip()))
        except ValueError as e:
            raise DataError(f"cannot parse SNR grid {text!r}: {e}") from e

    def to_list(self) -> List[float]:
        return list(self.points_db)


def noise_variance(signal_power: float, snr_db: float) -> float:
    """Total complex noise variance for a signal power and SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return signal_power / 10.0 ** (snr_db / 10.0)


def awgn(
    w: ComplexWaveform,
    snr_db: float,
    rng: np.random.Generator,
    reference_power: Optional[float] = None,
) -> ComplexWaveform:
    """
    Add circularly symmetric complex Gaussian noise.

    The noise variance is P / 10^(snr/10), split equally over I and Q. P is the
    waveform's own power unless `reference_power` names the preamble power of
    a guard-padded frame. `snr_db = inf` returns the input unchanged.
    """
    power = w.power() if reference_power is None else float(reference_power)
    variance = noise_variance(power, snr_db)
    if variance == 0.0:
        return w.with_samples(w.samples.copy(), Origin.CORRUPTED)
    sigma = math.sqrt(variance / 2.0)
    noise = rng.standard_normal(len(w)) + 1j * rng.standard_normal(len(w))
    return w.with_samples(w.samples + sigma * noise, Origin.CORRUPTED)


def measure_snr(clean: ComplexWaveform, noisy: ComplexWaveform) -> float:
    """10 log10(P_signal / P_noise), with the noise taken sample-wise."""
    if len(clean) != len(noisy):
        raise DataError(f"length mismatch: {len(clean)} vs {len(noisy)}")
    noise_power = float(np.mean(np.abs(noisy.samples - clean.samples) ** 2))
    if noise_power == 0.0:
        return INFINITE_SNR_DB
    return 10.0 * math.log10(clean.power() / noise_power)


def concatenate(waveforms: Sequence[ComplexWaveform]) -> ComplexWaveform:
    if not waveforms:
        raise DataError("nothing to concatenate")
    rate = waveforms[0].sample_rate_hz
    return ComplexWaveform(np.concatenate([w.samples for w in waveforms]), rate, waveforms[0].origin)
