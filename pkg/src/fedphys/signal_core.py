"""Numerical signal-processing primitives for pulse waveforms.

Everything here is a pure function of its inputs: detrending, zero-phase
Butterworth bandpass filtering, spectral heart-rate estimation, SNR and the
scalar agreement metrics used when scoring heart-rate estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, signal, sparse

# SNR template: +/- half-width around the fundamental and second harmonic,
# measured against the rest of the physiological band.
SNR_TEMPLATE_HALFWIDTH_BPM = 6.0
SNR_BAND_BPM = (30.0, 240.0)

# Spectral resolution target for heart-rate peak picking.
MAX_BIN_WIDTH_BPM = 0.5


class SignalError(ValueError):
    """Raised when a trace or parameter violates an operation's precondition."""


@dataclass(frozen=True)
class PpgTrace:
    """A uniformly sampled waveform.

    Parameters
    ----------
    samples : np.ndarray
        1-D array of finite values.
    fs : float
        Sampling rate in Hz.
    """

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise SignalError("trace must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise SignalError("trace contains non-finite samples")
        if not (self.fs > 0 and math.isfinite(self.fs)):
            raise SignalError(f"sampling rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    def with_samples(self, samples: np.ndarray) -> "PpgTrace":
        return PpgTrace(samples, self.fs)


@dataclass(frozen=True)
class PowerSpectrum:
    freqs: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        if self.freqs.shape != self.power.shape:
            raise SignalError("freqs and power must have equal length")

    def peak_frequency(self, lo: float = -math.inf, hi: float = math.inf) -> float:
        mask = (self.freqs >= lo) & (self.freqs <= hi)
        if not mask.any():
            raise SignalError("HR band outside Nyquist")
        idx = np.flatnonzero(mask)
        return float(self.freqs[idx[np.argmax(self.power[idx])]])


@dataclass(frozen=True)
class BandpassSpec:
    fs: float
    low_hz: float = 0.75
    high_hz: float = 2.5
    order: int = 2

    def validate(self) -> None:
        if not (0 < self.low_hz < self.high_hz < self.fs / 2):
            raise SignalError(
                f"invalid band edges: need 0 < {self.low_hz} < {self.high_hz} < {self.fs / 2}"
            )
        if self.order < 1:
            raise SignalError(f"filter order must be >= 1, got {self.order}")


def _as_trace(trace) -> PpgTrace:
    if not isinstance(trace, PpgTrace):
        raise TypeError(f"expected PpgTrace, got {type(trace).__name__}")
    return trace


# ---------------------------------------------------------------------------
# Integration and detrending
# ---------------------------------------------------------------------------


def cumulative_sum(trace: PpgTrace) -> PpgTrace:
    """Running sum, turning a derivative trace back into a waveform."""
    trace = _as_trace(trace)
    return trace.with_samples(np.cumsum(trace.samples))


def _smoothness_system(n: int, lam: float) -> np.ndarray:
    """Upper banded storage of ``I + lam**2 * D2.T @ D2`` for ``solveh_banded``."""
    ones = np.ones(n)
    d2 = sparse.diags([ones[:-2], -2 * ones[:-2], ones[:-2]], [0, 1, 2], shape=(n - 2, n))
    a = (sparse.identity(n) + lam**2 * (d2.T @ d2)).todia()
    ab = np.zeros((3, n))
    for offset in (0, 1, 2):
        diag = a.diagonal(offset)
        ab[2 - offset, offset:] = diag
    return ab


def trend(trace: PpgTrace, lam: float) -> PpgTrace:
    """Smoothness-priors trend estimate ``(I + lam^2 D2'D2)^-1 z``."""
    trace = _as_trace(trace)
    n = len(trace)
    if n < 3:
        raise SignalError("trace too short to detrend")
    if lam < 0:
        raise SignalError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return trace.with_samples(trace.samples.copy())
    ab = _smoothness_system(n, float(lam))
    return trace.with_samples(linalg.solveh_banded(ab, trace.samples))


def detrend(trace: PpgTrace, lam: float = 10.0) -> PpgTrace:
    """Remove the low-frequency trend, returning the stationary component.

    Uses the smoothness-priors formulation: the trend solves the banded SPD
    system ``(I + lam^2 D2'D2) x = z`` and the result is ``z - x``.
    """
    smooth = trend(trace, lam)
    return trace.with_samples(trace.samples - smooth.samples)


# ---------------------------------------------------------------------------
# Butterworth bandpass
# ---------------------------------------------------------------------------


def design_bandpass(spec: BandpassSpec) -> tuple[np.ndarray, np.ndarray]:
    """Digital Butterworth bandpass coefficients ``(b, a)``.

    Analog lowpass prototype poles are mapped to a bandpass around the
    prewarped geometric centre, then to the z-plane by the bilinear
    transform. The resulting filter has order ``2 * spec.order``.
    """
    spec.validate()
    n = spec.order
    fs2 = 2.0 * spec.fs
    w1 = fs2 * math.tan(math.pi * spec.low_hz / spec.fs)
    w2 = fs2 * math.tan(math.pi * spec.high_hz / spec.fs)
    bw = w2 - w1
    w0 = math.sqrt(w1 * w2)

    k = np.arange(1, n + 1)
    proto = np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))

    # s -> (s^2 + w0^2) / (bw s): each prototype pole splits into a pair
    half = proto * bw / 2.0
    root = np.sqrt(half**2 - w0**2)
    poles_a = np.concatenate([half + root, half - root])
    zeros_a = np.zeros(n, dtype=complex)
    gain_a = bw**n

    poles_d = (fs2 + poles_a) / (fs2 - poles_a)
    # n zeros at s=0 land on z=1; the n zeros at infinity land on z=-1
    zeros_d = np.concatenate([(fs2 + zeros_a) / (fs2 - zeros_a), -np.ones(n)])
    gain_d = gain_a * np.real(np.prod(fs2 - zeros_a) / np.prod(fs2 - poles_a))

    b = gain_d * np.real(np.poly(zeros_d))
    a = np.real(np.poly(poles_d))
    return b, a


def butterworth_bandpass(trace: PpgTrace, spec: BandpassSpec | None = None) -> PpgTrace:
    """Zero-phase (forward-backward) Butterworth bandpass of ``trace``."""
    trace = _as_trace(trace)
    if spec is None:
        spec = BandpassSpec(fs=trace.fs)
    if not math.isclose(spec.fs, trace.fs):
        raise SignalError(f"filter designed for fs={spec.fs}, trace has fs={trace.fs}")
    b, a = design_bandpass(spec)
    padlen = min(3 * (len(a) - 1), len(trace) - 1)
    y = signal.filtfilt(b, a, trace.samples, padtype="odd", padlen=padlen)
    return trace.with_samples(y)


# ---------------------------------------------------------------------------
# Spectra, heart rate and SNR
# ---------------------------------------------------------------------------


def hr_pad_length(n: int, fs: float) -> int:
    """Smallest power of two >= ``n`` with bin width <= MAX_BIN_WIDTH_BPM."""
    need = max(n, math.ceil(60.0 * fs / MAX_BIN_WIDTH_BPM))
    return 1 << (need - 1).bit_length()


def power_spectrum(trace: PpgTrace, pad_to: int, taper: np.ndarray | None = None) -> PowerSpectrum:
    """Mean-removed, zero-padded periodogram over ``[0, fs/2]``."""
    trace = _as_trace(trace)
    n = len(trace)
    if pad_to < n:
        raise SignalError(f"pad_to={pad_to} shorter than trace length {n}")
    x = trace.samples - trace.samples.mean()
    if taper is not None:
        x = x * taper
    spec = np.fft.rfft(x, n=pad_to)
    power = spec.real**2 + spec.imag**2
    freqs = np.arange(power.shape[0]) * (trace.fs / pad_to)
    return PowerSpectrum(freqs, power)


def estimate_hr(trace: PpgTrace, hr_min_bpm: float = 40.0, hr_max_bpm: float = 150.0) -> float:
    """Heart rate in beats/min from the spectral peak inside the HR band."""
    trace = _as_trace(trace)
    if not (0 < hr_min_bpm < hr_max_bpm):
        raise SignalError(f"need 0 < hr_min < hr_max, got {hr_min_bpm}, {hr_max_bpm}")
    if trace.duration < 2.0:
        raise SignalError(f"trace is {trace.duration:.2f} s long, need at least 2 s")
    ps = power_spectrum(trace, hr_pad_length(len(trace), trace.fs))
    return 60.0 * ps.peak_frequency(hr_min_bpm / 60.0, hr_max_bpm / 60.0)


def snr_taper(n: int, fs: float, halfwidth_bpm: float = SNR_TEMPLATE_HALFWIDTH_BPM) -> np.ndarray:
    """Slepian taper whose concentration band matches the SNR template."""
    nw = halfwidth_bpm / 60.0 / fs * n
    nw = min(max(nw, 0.5), (n - 1) / 2.0)
    return signal.windows.dpss(n, nw)


def snr_db(
    trace: PpgTrace,
    hr_bpm: float,
    halfwidth_bpm: float = SNR_TEMPLATE_HALFWIDTH_BPM,
    band_bpm: tuple[float, float] = SNR_BAND_BPM,
) -> float:
    """Pulse SNR in dB against a template at the fundamental and 2nd harmonic.

    Returns ``math.inf`` for a degenerate spectrum with no power outside
    the template (see :func:`is_degenerate_snr`).
    """
    trace = _as_trace(trace)
    if not (40.0 < hr_bpm < 150.0):
        raise SignalError(f"hr_bpm must lie in (40, 150), got {hr_bpm}")
    n = len(trace)
    ps = power_spectrum(trace, hr_pad_length(n, trace.fs), taper=snr_taper(n, trace.fs, halfwidth_bpm))
    f_bpm = ps.freqs * 60.0
    band = (f_bpm >= band_bpm[0]) & (f_bpm <= band_bpm[1])
    template = (np.abs(f_bpm - hr_bpm) <= halfwidth_bpm) | (np.abs(f_bpm - 2 * hr_bpm) <= halfwidth_bpm)
    p_in = float(ps.power[band & template].sum())
    p_out = float(ps.power[band & ~template].sum())
    if p_out == 0.0:
        return math.inf
    if p_in == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_in / p_out)


def is_degenerate_snr(value: float) -> bool:
    return math.isinf(value)


# ---------------------------------------------------------------------------
# Agreement metrics
# ---------------------------------------------------------------------------


def _paired(pred: Sequence[float], truth: Sequence[float], min_len: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise SignalError(f"length mismatch: {p.size} predictions vs {t.size} references")
    if p.size < min_len:
        raise SignalError(f"need at least {min_len} pairs, got {p.size}")
    return p, t


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _paired(pred, truth, 1)
    return float(np.mean(np.abs(p - t)))


def pearson(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _paired(pred, truth, 2)
    dp = p - p.mean()
    dt = t - t.mean()
    sp = math.sqrt(float(dp @ dp))
    st = math.sqrt(float(dt @ dt))
    if sp == 0.0 or st == 0.0:
        raise SignalError("undefined correlation: constant input")
    r = float(dp @ dt) / (sp * st)
    return min(1.0, max(-1.0, r))
