"""
Ideal IEEE 802.15.4 (2.4 GHz) preamble synthesis.

DSSS spreading of 4-bit symbols into 32-chip PN sequences, then OQPSK with
half-sine chip shaping: even chips drive I, odd chips drive Q, every chip is a
half-sine pulse spanning two chip periods and Q lags I by one chip period.
"""
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Dict, Iterable, List

import numpy as np

from .errors import DataError

CHIPS_PER_SYMBOL = 32
PULSES_PER_SYMBOL = CHIPS_PER_SYMBOL // 2
PREAMBLE_SYMBOL = 0x0

# Chips c0..c31 of symbol 0; symbols 1-7 are 4-chip cyclic shifts of it and
# symbols 8-15 repeat 0-7 with the odd-indexed chips inverted.
_SYMBOL0_CHIPS = "11011001110000110101001000101110"


def _build_chip_table() -> Dict[int, tuple]:
    base = [int(c) for c in _SYMBOL0_CHIPS]
    table = {}
    for symbol in range(8):
        shift = 4 * symbol
        table[symbol] = tuple(base[-shift:] + base[:-shift]) if shift else tuple(base)
    for symbol in range(8, 16):
        chips = list(table[symbol - 8])
        for k in range(1, CHIPS_PER_SYMBOL, 2):
            chips[k] ^= 1
        table[symbol] = tuple(chips)
    return table


_CHIP_TABLE = _build_chip_table()


class Origin(str, Enum):
    IDEAL = "ideal"
    IMPAIRED = "impaired"
    CORRUPTED = "corrupted"


@dataclass(frozen=True)
class ChipSequence:
    chips: tuple

    def __post_init__(self):
        if len(self.chips) != CHIPS_PER_SYMBOL:
            raise DataError(f"chip sequence must hold {CHIPS_PER_SYMBOL} chips, got {len(self.chips)}")
        if any(c not in (0, 1) for c in self.chips):
            raise DataError("chip values must be 0 or 1")

    def __len__(self) -> int:
        return len(self.chips)

    def bipolar(self) -> np.ndarray:
        return 2.0 * np.asarray(self.chips, dtype=np.float64) - 1.0


@dataclass
class ComplexWaveform:
    """Complex baseband samples at a stated sample rate."""
    samples: np.ndarray
    sample_rate_hz: float
    origin: Origin = Origin.IDEAL

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("waveform must be a non-empty 1-D sample vector")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.origin = Origin(self.origin)

    def __len__(self) -> int:
        return self.samples.size

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def with_samples(self, samples: np.ndarray, origin: Origin = None) -> "ComplexWaveform":
        return ComplexWaveform(samples, self.sample_rate_hz, origin or self.origin)


@dataclass(frozen=True)
class PhyConfig:
    samples_per_symbol: int = 160
    symbols_in_preamble: int = 8
    chip_rate_hz: float = 2.0e6

    def __post_init__(self):
        if self.samples_per_symbol <= 0 or self.samples_per_symbol % PULSES_PER_SYMBOL:
            raise DataError(
                f"samples_per_symbol must be a positive multiple of {PULSES_PER_SYMBOL}, "
                f"got {self.samples_per_symbol}"
            )
        if self.symbols_in_preamble <= 0:
            raise DataError("symbols_in_preamble must be positive")
        if not self.chip_rate_hz > 0:
            raise DataError("chip_rate_hz must be positive")

    @property
    def samples_per_pulse(self) -> int:
        return self.samples_per_symbol // PULSES_PER_SYMBOL

    @property
    def sample_rate_hz(self) -> float:
        return self.chip_rate_hz * self.samples_per_symbol / CHIPS_PER_SYMBOL

    @property
    def symbol_rate_hz(self) -> float:
        return self.chip_rate_hz / CHIPS_PER_SYMBOL

    @property
    def preamble_length(self) -> int:
        return self.samples_per_symbol * self.symbols_in_preamble

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PhyConfig":
        return cls(**data)


def chips_for_symbol(symbol: int) -> ChipSequence:
    """Return the 802.15.4 32-chip PN sequence (c0 first) for a 4-bit symbol."""
    if not isinstance(symbol, (int, np.integer)) or not 0 <= symbol <= 15:
        raise DataError(f"symbol must be in 0..15, got {symbol!r}")
    return ChipSequence(_CHIP_TABLE[int(symbol)])


def symbols_to_chips(symbols: Iterable[int]) -> np.ndarray:
    return np.concatenate([chips_for_symbol(s).bipolar() for s in symbols])


def half_sine_pulse(samples_per_pulse: int) -> np.ndarray:
    n = np.arange(samples_per_pulse)
    return np.sin(np.pi * n / samples_per_pulse)


def _shape_branch(amplitudes: np.ndarray, n_samples: int, pulse_len: int, offset: float) -> np.ndarray:
    # Pulse m occupies [m*P + offset, (m+1)*P + offset); evaluated analytically
    # so a half-pulse offset works for odd pulse lengths too.
    u = (np.arange(n_samples) - offset) / pulse_len
    m = np.floor(u).astype(int)
    frac = u - m
    valid = (m >= 0) & (m < amplitudes.size)
    out = np.zeros(n_samples)
    out[valid] = amplitudes[m[valid]] * np.sin(np.pi * frac[valid])
    return out


def modulate_preamble(cfg: PhyConfig = PhyConfig()) -> ComplexWaveform:
    """
    Modulate the all-zero preamble.

    The Q branch is delayed by one chip period and truncated at the end, so the
    first half-chip has no Q energy. The scale is fitted on symbols 2..N, where
    the envelope is constant (|s| = 1), and not on the whole preamble: the
    missing Q half-chip leaves the full preamble at 1277/1280 of unit power
    at 160 samples per symbol.
    """
    chips = symbols_to_chips([PREAMBLE_SYMBOL] * cfg.symbols_in_preamble)
    n = cfg.preamble_length
    pulse = cfg.samples_per_pulse
    i_branch = _shape_branch(chips[0::2], n, pulse, 0.0)
    q_branch = _shape_branch(chips[1::2], n, pulse, pulse / 2.0)
    samples = i_branch + 1j * q_branch

    steady = samples[cfg.samples_per_symbol:] if cfg.symbols_in_preamble > 1 else samples
    samples = samples / np.sqrt(np.mean(np.abs(steady) ** 2))
    return ComplexWaveform(samples, cfg.sample_rate_hz, Origin.IDEAL)


def split_symbols(w: ComplexWaveform, samples_per_symbol: int) -> List[np.ndarray]:
    if len(w) % samples_per_symbol:
        raise DataError(f"waveform length {len(w)} is not a multiple of {samples_per_symbol}")
    return list(w.samples.reshape(-1, samples_per_symbol))
