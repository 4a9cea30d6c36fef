"""
Preprocessing chain Pre(.) and the tensors fed to the network.

synchronize -> extract_symbols -> (select | stack | partial stack) -> min-max
normalisation. Symbol indices are 0-based throughout: the semi-steady portion
is symbols [0, 2) and the steady-state portion is [2, 8).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Union

import numpy as np
from scipy import signal

from .errors import DataError, SyncError
from .phy import ComplexWaveform, PhyConfig

logger = logging.getLogger(__name__)

DEFAULT_SYNC_THRESHOLD = 0.15
STEADY_START = 2


class Layout(str, Enum):
    ONE_SYM = "one_sym"
    TWO_SYM = "two_sym"
    THREE_SYM = "three_sym"
    SIX_SYM = "six_sym"
    EIGHT_SYM = "eight_sym"

    @property
    def n_symbols(self) -> int:
        return {"one_sym": 1, "two_sym": 2, "three_sym": 3, "six_sym": 6, "eight_sym": 8}[self.value]

    def length(self, samples_per_symbol: int = 160) -> int:
        return self.n_symbols * samples_per_symbol

    @classmethod
    def for_symbol_count(cls, n: int) -> "Layout":
        for layout in cls:
            if layout.n_symbols == n:
                return layout
        raise DataError(f"no layout holds {n} symbols")


@dataclass
class PreambleTensor:
    """Real L x 2 matrix: column 0 is I, column 1 is Q."""
    data: np.ndarray
    layout: Layout
    samples_per_symbol: int = 160

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.layout = Layout(self.layout)
        expected = (self.layout.length(self.samples_per_symbol), 2)
        if self.data.shape != expected:
            raise DataError(f"{self.layout.value} tensor must be {expected}, got {self.data.shape}")

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NormStats:
    min_vec: np.ndarray
    max_vec: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return ~(self.max_vec > self.min_vec)

    @property
    def shape(self) -> tuple:
        return self.min_vec.shape

    def to_array(self) -> np.ndarray:
        return np.stack([self.min_vec, self.max_vec])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "NormStats":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim < 1 or arr.shape[0] != 2:
            raise DataError(f"norm stats array must stack (min, max), got shape {arr.shape}")
        return cls(arr[0], arr[1])


@dataclass
class SampleTuple:
    z: PreambleTensor
    z_hat: PreambleTensor
    y: np.ndarray
    snr_db: float

    def __post_init__(self):
        if self.z.layout != self.z_hat.layout:
            raise DataError("z and z_hat must share a layout")
        y = np.asarray(self.y)
        if y.ndim != 1 or np.count_nonzero(y) != 1 or y.sum() != 1:
            raise DataError("y must be one-hot")


@dataclass
class SyncResult:
    waveform: ComplexWaveform
    offset: int
    cfo_hz: float
    phase_rad: float
    metric: float


def pad_guard(w: ComplexWaveform, delay: int, guard: int) -> ComplexWaveform:
    """Embed `w` in `guard` zeros: `delay` before it, the rest after."""
    if not 0 <= delay <= guard:
        raise DataError(f"delay {delay} outside [0, {guard}]")
    samples = np.concatenate([np.zeros(delay, complex), w.samples, np.zeros(guard - delay, complex)])
    return w.with_samples(samples)


def _timing_metric(r: np.ndarray, template: np.ndarray, samples_per_symbol: int) -> np.ndarray:
    n = template.size
    lags = r.size - n + 1
    total = np.zeros(lags)
    for k in range(n // samples_per_symbol):
        piece = template[k * samples_per_symbol:(k + 1) * samples_per_symbol]
        corr = signal.correlate(r, piece, mode="valid")
        start = k * samples_per_symbol
        total += np.abs(corr[start:start + lags])
    energy = np.concatenate([[0.0], np.cumsum(np.abs(r) ** 2)])
    window = np.sqrt(np.maximum(energy[n:] - energy[:-n], 0.0))
    norm = np.linalg.norm(template) * window
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norm > 0, total / norm, 0.0)


def synchronize(
    w: ComplexWaveform,
    template: ComplexWaveform,
    samples_per_symbol: int = 160,
    threshold: float = DEFAULT_SYNC_THRESHOLD,
) -> SyncResult:
    """
    Locate, frequency-correct and phase-correct one preamble.

    Timing: argmax over lags of the non-coherent sum of per-symbol
    correlations with the template, normalised to [0, 1]. CFO: phase of the
    one-symbol-lag autocorrelation over the steady symbols. Phase: argument of
    the correlation with the template after CFO removal.
    """
    r = w.samples
    t = template.samples
    n = t.size
    n_symbols = n // samples_per_symbol
    if n % samples_per_symbol or n_symbols < STEADY_START + 2:
        raise DataError(f"template of {n} samples does not hold enough whole symbols")
    if r.size < n:
        raise DataError(f"input of {r.size} samples is shorter than the {n}-sample template")

    metric = _timing_metric(r, t, samples_per_symbol)
    offset = int(np.argmax(metric))
    peak = float(metric[offset])
    if not peak >= threshold:
        raise SyncError(peak, threshold)

    aligned = r[offset:offset + n].copy()
    lo = STEADY_START * samples_per_symbol
    hi = (n_symbols - 1) * samples_per_symbol
    lag_corr = np.vdot(aligned[lo:hi], aligned[lo + samples_per_symbol:hi + samples_per_symbol])
    cfo_hz = float(np.angle(lag_corr) * w.sample_rate_hz / (2.0 * np.pi * samples_per_symbol))
    aligned *= np.exp(-2j * np.pi * cfo_hz * np.arange(n) / w.sample_rate_hz)

    phase = float(np.angle(np.vdot(t, aligned)))
    aligned *= np.exp(-1j * phase)
    logger.debug("sync: offset=%d cfo=%.1f Hz phase=%.3f rad metric=%.3f", offset, cfo_hz, phase, peak)
    return SyncResult(
        waveform=ComplexWaveform(aligned, w.sample_rate_hz, w.origin),
        offset=offset,
        cfo_hz=cfo_hz,
        phase_rad=phase,
        metric=peak,
    )


def extract_symbols(w: ComplexWaveform, samples_per_symbol: int = 160, n_symbols: int = 8) -> List[PreambleTensor]:
    if len(w) != samples_per_symbol * n_symbols:
        raise DataError(f"expected {samples_per_symbol * n_symbols} samples, got {len(w)}")
    iq = np.stack([w.samples.real, w.samples.imag], axis=-1)
    return [
        PreambleTensor(iq[k * samples_per_symbol:(k + 1) * samples_per_symbol], Layout.ONE_SYM, samples_per_symbol)
        for k in range(n_symbols)
    ]


def preprocess(
    w: ComplexWaveform,
    template: ComplexWaveform,
    phy: PhyConfig = PhyConfig(),
    threshold: float = DEFAULT_SYNC_THRESHOLD,
) -> np.ndarray:
    """Pre(.): synchronise and cut into a (symbols, samples_per_symbol, 2) array."""
    synced = synchronize(w, template, phy.samples_per_symbol, threshold)
    segments = extract_symbols(synced.waveform, phy.samples_per_symbol, phy.symbols_in_preamble)
    return np.stack([s.data for s in segments])


def layout_array(symbols: np.ndarray, layout: Union[Layout, str]) -> np.ndarray:
    """
    Build a layout from a (..., 8, S, 2) symbol array; returns (..., L, 2).
    """
    layout = Layout(layout)
    symbols = np.asarray(symbols, dtype=np.float64)
    if symbols.ndim < 3 or symbols.shape[-3] != 8 or symbols.shape[-1] != 2:
        raise DataError(f"expected (..., 8, S, 2) symbols, got {symbols.shape}")
    if layout is Layout.ONE_SYM:
        parts = [symbols[..., STEADY_START:, :, :].mean(axis=-3, keepdims=True)]
    elif layout is Layout.TWO_SYM:
        parts = [symbols[..., :STEADY_START, :, :]]
    elif layout is Layout.SIX_SYM:
        parts = [symbols[..., STEADY_START:, :, :]]
    elif layout is Layout.EIGHT_SYM:
        parts = [symbols]
    else:
        parts = [symbols[..., :STEADY_START, :, :],
                 symbols[..., STEADY_START:, :, :].mean(axis=-3, keepdims=True)]
    stacked = np.concatenate(parts, axis=-3)
    return stacked.reshape(stacked.shape[:-3] + (-1, 2))


def _segments_array(symbols: Sequence[PreambleTensor]) -> np.ndarray:
    if not symbols:
        raise DataError("no symbols given")
    shapes = {s.data.shape for s in symbols}
    if len(shapes) != 1:
        raise DataError(f"segments differ in shape: {sorted(shapes)}")
    return np.stack([s.data for s in symbols])


def partial_stack(symbols: Sequence[PreambleTensor]) -> PreambleTensor:
    """[s1, s2, mean(s3..s8)] -> three-symbol tensor."""
    arr = _segments_array(symbols)
    if arr.shape[0] != 8:
        raise DataError(f"partial stacking needs 8 segments, got {arr.shape[0]}")
    spc = arr.shape[1]
    return PreambleTensor(layout_array(arr, Layout.THREE_SYM), Layout.THREE_SYM, spc)


def stack_all(symbols: Sequence[PreambleTensor], k_first: int = STEADY_START) -> PreambleTensor:
    """Element-wise mean of symbols[k_first:] as a one-symbol tensor."""
    arr = _segments_array(symbols)
    chosen = arr[k_first:]
    if chosen.shape[0] == 0:
        raise DataError(f"nothing to stack from index {k_first}")
    return PreambleTensor(chosen.mean(axis=0), Layout.ONE_SYM, arr.shape[1])


def select_symbols(symbols: Sequence[PreambleTensor], indices: Union[range, slice, Sequence[int]]) -> PreambleTensor:
    """Concatenate the chosen symbols in order."""
    arr = _segments_array(symbols)
    if isinstance(indices, slice):
        indices = range(*indices.indices(arr.shape[0]))
    indices = list(indices)
    if not indices:
        raise DataError("empty symbol selection")
    chosen = arr[indices]
    layout = Layout.for_symbol_count(len(indices))
    return PreambleTensor(chosen.reshape(-1, 2), layout, arr.shape[1])


def build_layout(symbols: Sequence[PreambleTensor], layout: Union[Layout, str]) -> PreambleTensor:
    arr = _segments_array(symbols)
    if arr.shape[0] != 8:
        raise DataError(f"layouts are built from 8 segments, got {arr.shape[0]}")
    layout = Layout(layout)
    return PreambleTensor(layout_array(arr, layout), layout, arr.shape[1])


def _as_batch(tensors) -> np.ndarray:
    if isinstance(tensors, PreambleTensor):
        return tensors.data[None]
    if isinstance(tensors, np.ndarray):
        return tensors if tensors.ndim == 3 else tensors[None]
    return np.stack([t.data if isinstance(t, PreambleTensor) else np.asarray(t) for t in tensors])


def fit_norm(train_tensors) -> NormStats:
    """Per-dimension min and max over the training split."""
    batch = _as_batch(train_tensors)
    if batch.shape[0] == 0:
        raise DataError("cannot fit normalisation on an empty split")
    stats = NormStats(batch.min(axis=0), batch.max(axis=0))
    n_constant = int(stats.constant.sum())
    if n_constant:
        logger.warning("%d constant dimension(s) map to 0 after normalisation", n_constant)
    return stats


def apply_norm(t, stats: NormStats):
    """(x - min) / (max - min), clipped to [0, 1]; constant dimensions map to 0."""
    if isinstance(t, PreambleTensor):
        return PreambleTensor(apply_norm(t.data, stats), t.layout, t.samples_per_symbol)
    x = np.asarray(t, dtype=np.float64)
    if x.shape[-2:] != stats.shape:
        raise DataError(f"tensor shape {x.shape[-2:]} does not match norm stats {stats.shape}")
    span = stats.max_vec - stats.min_vec
    constant = stats.constant
    safe = np.where(constant, 1.0, span)
    z = np.where(constant, 0.0, (x - stats.min_vec) / safe)
    return np.clip(z, 0.0, 1.0)
