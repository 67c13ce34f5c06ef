"""Dataset manifests, WAV ingestion, ratings tables and a synthetic drum corpus."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 44100

SOUND_TYPES = ("drum", "imitation")
DRUM_TYPES = ("kick", "snare", "hh_closed", "hh_open")
SPLITS = ("train", "validation", "evaluation")

MANIFEST_HEADER = ["id", "path", "sound_type", "drum_type", "imitator_id", "reference_id", "split"]
RATINGS_HEADER = ["listener_id", "trial_id", "imitation_id", "reference_id", "rating"]

# Reference layout of the evaluation corpus: 18 drums over the four classes.
VIPS_COUNTS = {"kick": 6, "snare": 6, "hh_closed": 2, "hh_open": 4}


class ValidationError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


class UnsupportedWavError(WavFormatError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class SoundRecord:
    id: str
    path: Path
    sound_type: str
    drum_type: str
    imitator_id: Optional[str] = None
    reference_id: Optional[str] = None


@dataclass
class DatasetManifest:
    records: list[SoundRecord]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {}
        for r in self.records:
            if r.id in self._by_id:
                raise ValidationError(f"duplicate record id {r.id!r}")
            self._by_id[r.id] = r
        for key, value in self.split.items():
            if key not in self._by_id:
                raise ValidationError(f"split refers to unknown record {key!r}")
            if value not in SPLITS:
                raise ValidationError(f"unknown split {value!r} for record {key!r}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, record_id: str) -> SoundRecord:
        return self._by_id[record_id]

    def __contains__(self, record_id) -> bool:
        return record_id in self._by_id

    def subset(self, split: str) -> list[SoundRecord]:
        return [r for r in self.records if self.split.get(r.id) == split]

    def drums(self, split: Optional[str] = None) -> list[SoundRecord]:
        recs = self.records if split is None else self.subset(split)
        return [r for r in recs if r.sound_type == "drum"]

    def imitations(self, split: Optional[str] = None) -> list[SoundRecord]:
        recs = self.records if split is None else self.subset(split)
        return [r for r in recs if r.sound_type == "imitation"]


@dataclass(frozen=True)
class Rating:
    listener_id: str
    trial_id: str
    imitation_id: str
    reference_id: str
    rating: float


@dataclass
class RatingsTable:
    rows: list[Rating]

    def __post_init__(self):
        trial_imitation: dict[tuple[str, str], str] = {}
        for i, row in enumerate(self.rows):
            if not np.isfinite(row.rating):
                raise ValidationError(f"row {i}: rating is not finite")
            key = (row.listener_id, row.trial_id)
            prev = trial_imitation.setdefault(key, row.imitation_id)
            if prev != row.imitation_id:
                raise ValidationError(
                    f"row {i}: trial {row.trial_id!r} of listener {row.listener_id!r} "
                    f"already holds imitation {prev!r}, got {row.imitation_id!r}"
                )

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def listeners(self) -> list[str]:
        return sorted({r.listener_id for r in self.rows})

    def filter_listeners(self, keep: Iterable[str]) -> "RatingsTable":
        keep = set(keep)
        return RatingsTable([r for r in self.rows if r.listener_id in keep])


# ---------------------------------------------------------------------------
# WAV

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _wav_format(path: Path) -> tuple[int, int, int]:
    """Return (format_tag, channels, bits_per_sample) from the fmt chunk."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        if chunk_id == b"fmt ":
            if size < 16 or pos + 8 + 16 > len(data):
                raise WavFormatError(f"{path}: truncated fmt chunk")
            tag, channels, _, _, _, bits = struct.unpack("<HHIIHH", data[pos + 8:pos + 24])
            if tag == _WAVE_FORMAT_EXTENSIBLE and size >= 40:
                tag = struct.unpack("<H", data[pos + 32:pos + 34])[0]
            return tag, channels, bits
        pos += 8 + size + (size & 1)
    raise WavFormatError(f"{path}: missing fmt chunk")


def read_wav(path, target_rate: Optional[int] = SAMPLE_RATE) -> Waveform:
    """Read a PCM or float WAV file as a mono waveform in [-1, 1].

    Multichannel audio is averaged to mono. The signal is resampled to
    ``target_rate`` unless that is None.
    """
    path = Path(path)
    tag, channels, bits = _wav_format(path)
    if tag == _WAVE_FORMAT_PCM:
        if bits not in (8, 16, 24, 32):
            raise UnsupportedWavError(f"{path}: unsupported PCM bit depth {bits}")
    elif tag == _WAVE_FORMAT_FLOAT:
        if bits not in (32, 64):
            raise UnsupportedWavError(f"{path}: unsupported float bit depth {bits}")
    else:
        raise UnsupportedWavError(f"{path}: unsupported WAV encoding tag {tag:#x}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise UnsupportedWavError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    w = Waveform(x, int(rate))
    if target_rate is not None and w.sample_rate != target_rate:
        w = resample(w, target_rate)
    return w


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as 16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), w.sample_rate, pcm)


def resample(w: Waveform, rate: int) -> Waveform:
    from fractions import Fraction

    ratio = Fraction(rate, w.sample_rate).limit_denominator(1000)
    y = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, rate)


# ---------------------------------------------------------------------------
# Manifest

def _opt(value: str) -> Optional[str]:
    value = value.strip()
    return value or None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    records: list[SoundRecord] = []
    split: dict[str, str] = {}
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_HEADER:
            raise ValidationError(
                f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            def fail(msg):
                raise ValidationError(f"{path}:{lineno} ({row.get('id')!r}): {msg}")

            rid = row["id"].strip()
            if not rid:
                fail("empty id")
            if rid in seen:
                fail(f"duplicate id, first seen on line {seen[rid]}")
            seen[rid] = lineno
            if row["sound_type"] not in SOUND_TYPES:
                fail(f"unknown sound_type {row['sound_type']!r}")
            if row["drum_type"] not in DRUM_TYPES:
                fail(f"unknown drum_type {row['drum_type']!r}")
            imitator = _opt(row["imitator_id"] or "")
            if row["sound_type"] == "imitation" and imitator is None:
                fail("imitation without imitator_id")
            sp = _opt(row["split"] or "")
            if sp is not None:
                if sp not in SPLITS:
                    fail(f"unknown split {sp!r}")
                split[rid] = sp
            p = Path(row["path"])
            if not p.is_absolute():
                p = base / p
            records.append(
                SoundRecord(rid, p, row["sound_type"], row["drum_type"], imitator,
                            _opt(row["reference_id"] or ""))
            )
    by_id = {r.id: r for r in records}
    for r in records:
        if r.reference_id is None:
            continue
        ref = by_id.get(r.reference_id)
        if ref is None:
            raise ValidationError(f"{path}:{seen[r.id]} ({r.id!r}): dangling reference_id {r.reference_id!r}")
        if ref.sound_type != "drum" or ref.drum_type != r.drum_type:
            raise ValidationError(
                f"{path}:{seen[r.id]} ({r.id!r}): reference {ref.id!r} must be a {r.drum_type} drum"
            )
    return DatasetManifest(records, split)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            p = Path(r.path)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            writer.writerow([r.id, p.as_posix(), r.sound_type, r.drum_type, r.imitator_id or "",
                             r.reference_id or "", manifest.split.get(r.id, "")])


# ---------------------------------------------------------------------------
# Ratings

def load_ratings(path) -> RatingsTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != RATINGS_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(RATINGS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                value = float(row["rating"])
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: non-numeric rating {row['rating']!r}") from None
            if not np.isfinite(value):
                raise ValidationError(f"{path}:{lineno}: rating is not finite")
            rows.append(Rating(row["listener_id"], row["trial_id"], row["imitation_id"],
                               row["reference_id"], value))
    try:
        return RatingsTable(rows)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_ratings(table: RatingsTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RATINGS_HEADER)
        for r in table.rows:
            writer.writerow([r.listener_id, r.trial_id, r.imitation_id, r.reference_id, repr(r.rating)])


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 6
    imitators: int = 14
    seed: int = 0
    classes: int = 4
    # Per-class drum counts; overrides n_per_class when given.
    counts: Optional[Mapping[str, int]] = None
    # "evaluation" marks every record for evaluation; "train" splits records
    # into train/validation by reference.
    mode: str = "evaluation"
    validation_fraction: float = 0.2

    def drum_counts(self) -> dict[str, int]:
        if self.classes != 4:
            raise ValueError("the synthetic generator has exactly 4 drum classes")
        if self.counts is not None:
            return {k: int(self.counts.get(k, 0)) for k in DRUM_TYPES}
        return {k: self.n_per_class for k in DRUM_TYPES}


def _t60_env(t, t60):
    return np.exp(-6.907755 * t / t60)


def _highpass_noise(rng, n, cutoff, sr):
    sos = signal.butter(4, cutoff, btype="highpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _draw_drum_params(rng, drum_type):
    if drum_type == "kick":
        return {"t60": rng.uniform(0.2, 0.7), "sweep_tau": rng.uniform(0.015, 0.08),
                "click": rng.uniform(0.0, 0.3), "dur": 0.8}
    if drum_type == "snare":
        return {"tone_t60": rng.uniform(0.08, 0.3), "noise_t60": rng.uniform(0.12, 0.45),
                "noise_level": rng.uniform(0.3, 1.0), "noise_cut": rng.uniform(1000, 3000), "dur": 0.6}
    if drum_type == "hh_closed":
        return {"t60": rng.uniform(0.03, 0.075), "cutoff": rng.uniform(5000, 9000), "dur": 0.15}
    if drum_type == "hh_open":
        return {"t60": rng.uniform(0.32, 0.7), "cutoff": rng.uniform(4000, 8000), "dur": 0.8}
    raise ValueError(drum_type)


def _render(drum_type, p, rng, detune=1.0, sr=SAMPLE_RATE):
    n = int(p["dur"] * sr)
    t = np.arange(n) / sr
    if drum_type == "kick":
        freq = (50.0 + 70.0 * np.exp(-t / p["sweep_tau"])) * detune
        phase = 2 * np.pi * np.cumsum(freq) / sr
        x = np.sin(phase) * _t60_env(t, p["t60"])
        x += p["click"] * rng.standard_normal(n) * _t60_env(t, 0.01)
    elif drum_type == "snare":
        tone = np.sin(2 * np.pi * 180.0 * detune * t) * _t60_env(t, p["tone_t60"])
        noise = _highpass_noise(rng, n, p["noise_cut"] * detune, sr)
        noise /= np.max(np.abs(noise)) + 1e-12
        x = tone + p["noise_level"] * noise * _t60_env(t, p["noise_t60"])
    else:
        noise = _highpass_noise(rng, n, min(p["cutoff"] * detune, 0.45 * sr), sr)
        x = noise * _t60_env(t, p["t60"])
    return x


def _formant_filter(x, formants, sr=SAMPLE_RATE):
    y = 0.4 * x
    for f0, q in formants:
        b, a = signal.iirpeak(f0, q, fs=sr)
        y = y + signal.lfilter(b, a, x)
    return y


def _peak_normalize(x, peak=0.8):
    return x * (peak / (np.max(np.abs(x)) + 1e-12))


def synth_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a deterministic synthetic corpus of drums and their imitations.

    Every drum gets one imitation per imitator. An imitation re-renders the
    drum's recipe parameters with fresh noise, the imitator's detune (within
    one semitone) and the imitator's formant filter.
    """
    counts = spec.drum_counts()
    if min(counts.values()) < 1:
        raise ValueError("every class needs at least one drum")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(spec.seed)
    imitator_rng = np.random.default_rng(root.spawn(1)[0])
    imitators = []
    for k in range(spec.imitators):
        formants = [(imitator_rng.uniform(300, 900), imitator_rng.uniform(2, 6)),
                    (imitator_rng.uniform(1000, 2600), imitator_rng.uniform(3, 8))]
        detune = 2.0 ** (imitator_rng.uniform(-1.0, 1.0) / 12.0)
        imitators.append((f"imi{k + 1:02d}", formants, detune))

    records: list[SoundRecord] = []
    split: dict[str, str] = {}
    split_rng = np.random.default_rng(root.spawn(2)[1])
    index = 0
    for drum_type in DRUM_TYPES:
        for j in range(counts[drum_type]):
            ref_id = f"{drum_type}_{j + 1:02d}"
            rng = np.random.default_rng([spec.seed, index, 0])
            params = _draw_drum_params(rng, drum_type)
            x = _peak_normalize(_render(drum_type, params, rng))
            path = audio_dir / f"{ref_id}.wav"
            write_wav(path, Waveform(x))
            records.append(SoundRecord(ref_id, path, "drum", drum_type))
            if spec.mode == "evaluation":
                part = "evaluation"
            else:
                part = "validation" if split_rng.random() < spec.validation_fraction else "train"
            split[ref_id] = part
            for k, (imi_id, formants, detune) in enumerate(imitators):
                irng = np.random.default_rng([spec.seed, index, k + 1])
                y = _render(drum_type, params, irng, detune=detune)
                y = _peak_normalize(_formant_filter(y, formants))
                rid = f"{ref_id}__{imi_id}"
                ipath = audio_dir / f"{rid}.wav"
                write_wav(ipath, Waveform(y))
                records.append(SoundRecord(rid, ipath, "imitation", drum_type, imi_id, ref_id))
                split[rid] = part
            index += 1
    manifest = DatasetManifest(records, split)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def vips_spec(seed: int = 0, imitators: int = 14) -> SynthSpec:
    """Synthetic spec with the 18-reference evaluation layout."""
    return SynthSpec(imitators=imitators, seed=seed, counts=VIPS_COUNTS, mode="evaluation")


def load_waveforms(records: Sequence[SoundRecord]) -> dict[str, Waveform]:
    return {r.id: read_wav(r.path) for r in records}
