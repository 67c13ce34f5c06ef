"""Hand-crafted 32-dimensional feature set: MFCCs, deltas, envelope, loudness, pitch, centroid."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from .dataio import Waveform
from .dsp import HOP, N_FFT, power_frames

N_MELS = 40
N_MFCC = 12
YIN_THRESHOLD = 0.15
YIN_FMIN = 40.0
YIN_FMAX = 2000.0
LOUDNESS_FLOOR_DB = -120.0

HEURISTIC_NAMES = (
    [f"mfcc_mean_{i}" for i in range(1, N_MFCC + 1)]
    + [f"dmfcc_mean_{i}" for i in range(1, N_MFCC + 1)]
    + ["duration", "deram", "loud_mean", "loud_std", "pitch_mean", "pitch_std", "scent_mean", "scent_std"]
)


@dataclass
class FeatureVector:
    values: np.ndarray
    names: Sequence[str]
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.names = list(self.names)
        if self.values.shape != (len(self.names),):
            raise ValueError(f"{len(self.names)} names for {self.values.shape} values")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values for {self.source_id!r}")

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# MFCC

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular HTK-Mel filters over 0..sr/2, each row summing to 1."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    # flat spectra map to flat band energies
    return fb / fb.sum(axis=1, keepdims=True)


def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    return dct(np.eye(n), type=2, norm="ortho", axis=0)


def mfcc(w: Waveform) -> np.ndarray:
    """Per-frame MFCCs 1..12, shape (frames, 12)."""
    mel = power_frames(w.samples) @ mel_filterbank(w.sample_rate).T
    logmel = np.log(np.maximum(mel, 1e-10))
    return dct(logmel, type=2, norm="ortho", axis=1)[:, 1:N_MFCC + 1]


# ---------------------------------------------------------------------------
# YIN

def _frames(x, size=N_FFT, hop=HOP):
    if len(x) < size:
        x = np.pad(x, (0, size - len(x)))
    n = 1 + int(np.ceil((len(x) - size) / hop))
    x = np.pad(x, (0, (n - 1) * hop + size - len(x)))
    return sliding_window_view(x, size)[::hop][:n]


def yin_pitch(w: Waveform, threshold: float = YIN_THRESHOLD, fmin: float = YIN_FMIN,
              fmax: float = YIN_FMAX) -> np.ndarray:
    """YIN fundamental frequency per frame in Hz; NaN marks unvoiced frames."""
    sr = w.sample_rate
    tau_min = max(2, int(np.floor(sr / fmax)))
    tau_max = int(np.ceil(sr / fmin))
    frames = _frames(w.samples)
    win = N_FFT - tau_max
    if win <= 0:
        raise ValueError("frame too short for the lag range")
    n = frames.shape[0]
    # d(tau) = sum_j (x_j - x_{j+tau})^2 over j < win
    sq = np.cumsum(np.pad(frames ** 2, ((0, 0), (1, 0))), axis=1)
    energy0 = sq[:, win]
    taus = np.arange(tau_max + 1)
    energy_tau = sq[:, taus + win] - sq[:, taus]
    size = 1 << int(np.ceil(np.log2(N_FFT + win)))
    a = np.fft.rfft(frames, size, axis=1)
    b = np.fft.rfft(frames[:, :win], size, axis=1)
    corr = np.fft.irfft(a * np.conj(b), size, axis=1)[:, :tau_max + 1]
    diff = np.maximum(energy0[:, None] + energy_tau - 2.0 * corr, 0.0)
    diff[:, 0] = 0.0

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = diff[:, 1:] * taus[1:] / cum
    cmnd[~np.isfinite(cmnd)] = 1.0

    f0 = np.full(n, np.nan)
    silent = energy0 <= 1e-12 * win
    for i in range(n):
        if silent[i]:
            continue
        row = cmnd[i]
        below = np.nonzero(row[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and row[tau + 1] < row[tau]:
            tau += 1
        shift = 0.0
        if 0 < tau < tau_max:
            y0, y1, y2 = row[tau - 1], row[tau], row[tau + 1]
            denom = y0 - 2.0 * y1 + y2
            if denom > 0:
                shift = 0.5 * (y0 - y2) / denom
        f0[i] = sr / (tau + shift)
    return f0


# ---------------------------------------------------------------------------
# Envelope, loudness, centroid

def rms_envelope(w: Waveform, window_ms: float = 10.0) -> np.ndarray:
    win = max(1, int(round(window_ms * 1e-3 * w.sample_rate)))
    n = int(np.ceil(len(w) / win))
    x = np.zeros(n * win)
    x[:len(w)] = w.samples
    return np.sqrt(np.mean(x.reshape(n, win) ** 2, axis=1))


def deram(w: Waveform, window_ms: float = 10.0) -> float:
    """Mean envelope slope (per second) after the envelope maximum."""
    env = rms_envelope(w, window_ms)
    peak = int(np.argmax(env))
    tail = env[peak:]
    if tail.size < 2:
        return 0.0
    return float(np.mean(np.diff(tail)) / (window_ms * 1e-3))


def loudness_db(w: Waveform) -> np.ndarray:
    rms = np.sqrt(np.mean(_frames(w.samples) ** 2, axis=1))
    return np.maximum(20.0 * np.log10(np.maximum(rms, 1e-300)), LOUDNESS_FLOOR_DB)


def spectral_centroid(w: Waveform) -> np.ndarray:
    """Power-weighted mean frequency per frame; silent frames dropped."""
    power = power_frames(w.samples)
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / w.sample_rate)
    total = power.sum(axis=1)
    keep = total > 0
    return (power[keep] @ freqs) / total[keep]


def _mean_std(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0, 0.0
    return float(x.mean()), float(x.std())


def heuristic_features(w: Waveform, source_id: str = "") -> FeatureVector:
    if len(w) == 0:
        raise ValueError("empty waveform")
    coeffs = mfcc(w)
    deltas = np.diff(coeffs, axis=0)
    d_mean = deltas.mean(axis=0) if len(deltas) else np.zeros(N_MFCC)
    pitch = yin_pitch(w)
    pitch = pitch[np.isfinite(pitch)]
    values = np.concatenate([
        coeffs.mean(axis=0),
        d_mean,
        [w.duration, deram(w)],
        _mean_std(loudness_db(w)),
        _mean_std(pitch),
        _mean_std(spectral_centroid(w)),
    ])
    return FeatureVector(values, HEURISTIC_NAMES, source_id)


# ---------------------------------------------------------------------------
# CSV export

def write_features_csv(path, vectors: Sequence[FeatureVector]) -> None:
    if not vectors:
        raise ValueError("no feature vectors to write")
    names = vectors[0].names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", *names])
        for v in vectors:
            if list(v.names) != list(names):
                raise ValueError("feature vectors disagree on column names")
            writer.writerow([v.source_id, *(repr(float(x)) for x in v.values)])


def read_features_csv(path) -> list[FeatureVector]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "source_id":
            raise ValueError(f"{path}: first column must be source_id")
        names = header[1:]
        return [FeatureVector(np.array([float(x) for x in row[1:]]), names, row[0]) for row in reader]
