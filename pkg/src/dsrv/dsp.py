"""Trimming, augmentation and the Bark-band spectrogram front-end."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .dataio import SAMPLE_RATE, Waveform

N_FFT = 2048
HOP = 512
N_BANDS = 128
N_FRAMES = 128
DB_FLOOR = -100.0
F_MIN = 20.0


# ---------------------------------------------------------------------------
# Trimming

def trim_silence(w: Waveform, threshold_db: float = -60.0, window_ms: float = 10.0) -> Waveform:
    """Drop leading and trailing windows quieter than ``threshold_db`` below the loudest window."""
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    x = w.samples
    win = max(1, int(round(window_ms * 1e-3 * w.sample_rate)))
    n_win = int(np.ceil(len(x) / win))
    if n_win == 0:
        return Waveform(x[:0], w.sample_rate)
    padded = np.zeros(n_win * win)
    padded[:len(x)] = x
    rms = np.sqrt(np.mean(padded.reshape(n_win, win) ** 2, axis=1))
    peak = rms.max()
    if peak <= 0:
        return Waveform(x[:0], w.sample_rate)
    loud = np.nonzero(rms >= peak * 10.0 ** (threshold_db / 20.0))[0]
    start, stop = loud[0] * win, min(len(x), (loud[-1] + 1) * win)
    return Waveform(x[start:stop], w.sample_rate)


# ---------------------------------------------------------------------------
# Phase vocoder augmentation

def _stft(x, n_fft=N_FFT, hop=HOP):
    window = signal.get_window("hann", n_fft)
    x = np.pad(x, n_fft // 2)
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    n_frames = 1 + (len(x) - n_fft) // hop
    frames = sliding_window_view(x, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1).T


def _istft(S, length, n_fft=N_FFT, hop=HOP):
    window = signal.get_window("hann", n_fft)
    frames = np.fft.irfft(S.T, n=n_fft, axis=1) * window
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += window ** 2
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    y = y[n_fft // 2:]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return y[:length]


def time_stretch(x: np.ndarray, rate: float) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate`` > 1 speeds up (output length ~ len/rate)."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    if rate == 1.0:
        return np.array(x, dtype=np.float64, copy=True)
    S = _stft(x)
    n_bins, n_frames = S.shape
    steps = np.arange(0, n_frames, rate)
    advance = np.linspace(0, np.pi * HOP, n_bins)
    S = np.concatenate([S, np.zeros((n_bins, 2), dtype=S.dtype)], axis=1)
    phase = np.angle(S[:, 0])
    out = np.empty((n_bins, len(steps)), dtype=np.complex128)
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        mag = (1.0 - frac) * np.abs(S[:, i]) + frac * np.abs(S[:, i + 1])
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(S[:, i + 1]) - np.angle(S[:, i]) - advance
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase = phase + advance + dphi
    length = int(round(len(x) / rate))
    return _istft(out, length)


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by stretching by the frequency ratio then resampling back to the input length."""
    if semitones == 0:
        return np.array(x, dtype=np.float64, copy=True)
    ratio = 2.0 ** (semitones / 12.0)
    y = time_stretch(x, 1.0 / ratio)
    return signal.resample(y, len(x))


@dataclass(frozen=True)
class AugmentConfig:
    pitch_semitones: tuple[float, float] = (-1.0, 1.0)
    stretch_factor: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        lo, hi = self.pitch_semitones
        if lo > hi:
            raise ValueError("empty pitch interval")
        lo, hi = self.stretch_factor
        if lo > hi or lo <= 0:
            raise ValueError("stretch interval must be nonempty and positive")


DRUM_AUGMENT = AugmentConfig((-1.0, 1.0), (0.7, 1.3))
IMITATION_AUGMENT = AugmentConfig((-1.5, 1.5), (0.8, 1.2))


def augment_config_for(sound_type: str) -> AugmentConfig:
    return DRUM_AUGMENT if sound_type == "drum" else IMITATION_AUGMENT


def augment(w: Waveform, cfg: AugmentConfig, seed: int) -> Waveform:
    """Apply one random pitch shift and one random time stretch in random order."""
    if len(w) == 0:
        raise ValueError("cannot augment an empty waveform")
    rng = np.random.default_rng(seed)
    semis = rng.uniform(*cfg.pitch_semitones)
    rate = rng.uniform(*cfg.stretch_factor)
    pitch_first = rng.random() < 0.5
    x = w.samples
    if pitch_first:
        x = time_stretch(pitch_shift(x, semis), rate)
    else:
        x = pitch_shift(time_stretch(x, rate), semis)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x, w.sample_rate)


# ---------------------------------------------------------------------------
# Bark spectrogram

def bark(f):
    """Zwicker's critical-band rate in Bark."""
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def bark_to_hz(z):
    grid = np.linspace(0.0, 30000.0, 300001)
    return np.interp(z, bark(grid), grid)


def terhardt_weight(f_hz):
    """Terhardt's threshold-in-quiet curve, negated, in dB."""
    f = np.asarray(f_hz, dtype=np.float64) / 1000.0
    return -3.64 * f ** -0.8 + 6.5 * np.exp(-0.6 * (f - 3.3) ** 2) - 1e-3 * f ** 4


@dataclass(frozen=True)
class BarkFilterbank:
    weights: np.ndarray        # (bands, fft bins), rows sum to 1
    centers: np.ndarray        # Hz
    terhardt: np.ndarray       # dB per band


_FILTERBANKS: dict[tuple[int, int], BarkFilterbank] = {}


def bark_filterbank(sample_rate: int = SAMPLE_RATE, n_bands: int = N_BANDS) -> BarkFilterbank:
    key = (sample_rate, n_bands)
    if key in _FILTERBANKS:
        return _FILTERBANKS[key]
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / sample_rate)
    z_points = np.linspace(bark(F_MIN), bark(sample_rate / 2.0), n_bands + 2)
    z_bins = bark(freqs)
    step = z_points[1] - z_points[0]
    weights = np.maximum(0.0, 1.0 - np.abs(z_bins[None, :] - z_points[1:-1, None]) / step)
    centers = bark_to_hz(z_points[1:-1])
    for k in range(n_bands):
        # low bands narrower than one FFT bin fall back to the nearest bin
        if weights[k].sum() == 0.0:
            weights[k, np.argmin(np.abs(freqs - centers[k]))] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    fb = BarkFilterbank(weights, centers, terhardt_weight(centers))
    _FILTERBANKS[key] = fb
    return fb


def power_frames(x: np.ndarray) -> np.ndarray:
    """Hann-windowed power spectra, one row per 2048-sample frame at hop 512."""
    if len(x) < N_FFT:
        x = np.pad(x, (0, N_FFT - len(x)))
    n_frames = 1 + int(np.ceil((len(x) - N_FFT) / HOP))
    need = (n_frames - 1) * HOP + N_FFT
    x = np.pad(x, (0, need - len(x)))
    window = signal.get_window("hann", N_FFT)
    frames = sliding_window_view(x, N_FFT)[::HOP][:n_frames]
    spec = np.fft.rfft(frames * window, axis=1) / window.sum()
    return np.abs(spec) ** 2


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray         # (bands, frames), dB
    band_centers: np.ndarray

    def __post_init__(self):
        if self.values.shape != (N_BANDS, N_FRAMES):
            raise ValueError(f"spectrogram must be {N_BANDS}x{N_FRAMES}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")


def bark_db(w: Waveform) -> np.ndarray:
    """Terhardt-weighted Bark-band dB image with the natural number of frames."""
    fb = bark_filterbank(w.sample_rate)
    band_power = power_frames(w.samples) @ fb.weights.T
    db = 10.0 * np.log10(np.maximum(band_power, 1e-30)) + fb.terhardt[None, :]
    # floor applies to the weighted level so inaudible bands share one value
    return np.maximum(db, DB_FLOOR).T


def bark_spectrogram(w: Waveform) -> Spectrogram:
    fb = bark_filterbank(w.sample_rate)
    db = bark_db(w)
    n = db.shape[1]
    if n > N_FRAMES:
        start = (n - N_FRAMES) // 2
        db = db[:, start:start + N_FRAMES]
    elif n < N_FRAMES:
        db = np.pad(db, ((0, 0), (0, N_FRAMES - n)), constant_values=DB_FLOOR)
    return Spectrogram(np.ascontiguousarray(db), fb.centers)


@dataclass(frozen=True)
class Normalizer:
    """Corpus min-max scaling of dB spectrograms onto [0, 1]."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, images: Iterable[np.ndarray]) -> "Normalizer":
        lo, hi = np.inf, -np.inf
        for img in images:
            lo = min(lo, float(np.min(img)))
            hi = max(hi, float(np.max(img)))
        if not hi > lo:
            raise ValueError("cannot normalize a constant corpus")
        return cls(lo, hi)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(img) - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def preprocess(w: Waveform, threshold_db: float = -60.0) -> Optional[Spectrogram]:
    """Trim then compute the spectrogram; None when nothing survives trimming."""
    t = trim_silence(w, threshold_db)
    if len(t) == 0:
        return None
    return bark_spectrogram(t)


# ---------------------------------------------------------------------------
# Cache files

_CACHE_MAGIC = b"VIMP"
_CACHE_VERSION = 1


def write_spectrogram(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<HII", _CACHE_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_spectrogram(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a spectrogram cache file")
    version, rows, cols = struct.unpack("<HII", data[4:14])
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    values = np.frombuffer(data, dtype="<f4", offset=14)
    if values.size != rows * cols:
        raise ValueError(f"{path}: truncated cache file")
    return values.reshape(rows, cols).astype(np.float64)
