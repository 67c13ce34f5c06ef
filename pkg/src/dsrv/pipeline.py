"""End-to-end glue: spectrogram caching, training sets, embedding, reports."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import cae, dsp, evalmetrics as em, heurfeat
from .dataio import (DatasetManifest, Rating, RatingsTable, SoundRecord, Waveform, read_wav,
                     write_manifest, write_wav)

log = logging.getLogger(__name__)

CACHE_ENV = "DSRV_CACHE"


def default_jobs() -> int:
    return os.cpu_count() or 1


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# ---------------------------------------------------------------------------
# Spectrograms

def sound_spectrogram(path) -> np.ndarray:
    """Trimmed, 128x128 dB spectrogram of one file (silent files give the floor image)."""
    spec = dsp.preprocess(read_wav(path))
    if spec is None:
        return np.full((dsp.N_BANDS, dsp.N_FRAMES), dsp.DB_FLOOR)
    return spec.values


def cache_dir(explicit=None) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else None


def spectrograms(records: Sequence[SoundRecord], cache=None, jobs: int = 1) -> dict[str, np.ndarray]:
    cache = cache_dir(cache)
    out: dict[str, np.ndarray] = {}
    todo = []
    for r in records:
        f = cache / f"{r.id}.vimp" if cache else None
        if f is not None and f.exists():
            out[r.id] = dsp.read_spectrogram(f)
        else:
            todo.append(r)
    for r, img in zip(todo, _map(sound_spectrogram, [r.path for r in todo], jobs)):
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
            dsp.write_spectrogram(cache / f"{r.id}.vimp", img)
            # round-trip through float32 so cached and fresh runs agree
            img = dsp.read_spectrogram(cache / f"{r.id}.vimp")
        out[r.id] = img
    return out


def preprocess_manifest(manifest: DatasetManifest, out_dir, augment_fold: int = 0,
                        seed: int = 0, jobs: int = 1) -> DatasetManifest:
    """Trim every sound, optionally make ``augment_fold`` augmented copies of train/validation
    sounds, and cache spectrograms under ``out_dir/spectrograms``."""
    out_dir = Path(out_dir)
    audio = out_dir / "audio"
    audio.mkdir(parents=True, exist_ok=True)
    records, split = [], {}
    jobs_in = []
    for k, rec in enumerate(manifest.records):
        part = manifest.split.get(rec.id)
        if augment_fold and part in ("train", "validation"):
            for a in range(augment_fold):
                jobs_in.append((rec, f"{rec.id}__aug{a}", audio, [seed, k, a], True))
        else:
            jobs_in.append((rec, rec.id, audio, None, False))
    made = _map(_preprocess_one, jobs_in, jobs)
    for (rec, new_id, _, _, _), path in zip(jobs_in, made):
        new = SoundRecord(new_id, path, rec.sound_type, rec.drum_type, rec.imitator_id, rec.reference_id)
        records.append(new)
        if rec.id in manifest.split:
            split[new_id] = manifest.split[rec.id]
    # augmented imitations keep pointing at the original reference ids only if present
    ids = {r.id for r in records}
    records = [r if r.reference_id is None or r.reference_id in ids
               else SoundRecord(r.id, r.path, r.sound_type, r.drum_type, r.imitator_id, None)
               for r in records]
    result = DatasetManifest(records, split)
    write_manifest(result, out_dir / "manifest.csv")
    spectrograms(result.records, out_dir / "spectrograms", jobs)
    return result


def _preprocess_one(args):
    rec, new_id, audio, seed, do_augment = args
    w = dsp.trim_silence(read_wav(rec.path))
    if do_augment and len(w):
        w = dsp.augment(w, dsp.augment_config_for(rec.sound_type), int(np.random.SeedSequence(seed).generate_state(1)[0]))
    path = Path(audio) / f"{new_id}.wav"
    write_wav(path, w if len(w) else Waveform(np.zeros(1)))
    return path


# ---------------------------------------------------------------------------
# Features

def _heuristic_one(args):
    rid, path = args
    w = dsp.trim_silence(read_wav(path))
    if len(w) == 0:
        w = Waveform(np.zeros(1))
    return heurfeat.heuristic_features(w, rid)


def heuristic_vectors(records: Sequence[SoundRecord], jobs: int = 1) -> list[heurfeat.FeatureVector]:
    return _map(_heuristic_one, [(r.id, r.path) for r in records], jobs)


def labels_for(records: Sequence[SoundRecord], conditioning: str,
               sound_type: Optional[str] = None, drum_type: Optional[str] = None) -> Optional[np.ndarray]:
    if cae.CONDITIONINGS[conditioning] == 0:
        return None
    return np.stack([cae.condition_label(conditioning, sound_type or r.sound_type, drum_type or r.drum_type)
                     for r in records])


def training_data(manifest: DatasetManifest, conditioning: str, cache=None,
                  jobs: int = 1) -> tuple[cae.TrainingData, dsp.Normalizer]:
    train = manifest.subset("train")
    val = manifest.subset("validation")
    if not train or not val:
        raise ValueError("manifest needs nonempty train and validation splits")
    images = spectrograms(train + val, cache, jobs)
    norm = dsp.Normalizer.fit(images[r.id] for r in train)
    tx = np.stack([norm(images[r.id]) for r in train])
    vx = np.stack([norm(images[r.id]) for r in val])
    return cae.TrainingData(tx, vx, labels_for(train, conditioning), labels_for(val, conditioning)), norm


def embed_records(trained: cae.TrainedModel, records: Sequence[SoundRecord], cache=None,
                  jobs: int = 1, **label_overrides) -> list[heurfeat.FeatureVector]:
    images = spectrograms(records, cache, jobs)
    labels = labels_for(records, trained.config.conditioning, **label_overrides)
    return cae.embed_batch(trained, [images[r.id] for r in records],
                           None if labels is None else list(labels), [r.id for r in records])


# ---------------------------------------------------------------------------
# Reports

@dataclass
class MetricReport:
    mrr: list[float]
    mss: list[float]
    accuracy: list[float] = field(default_factory=list)
    aic: list[float] = field(default_factory=list)
    mss_summed: list[float] = field(default_factory=list)
    per_imitator_mrr: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for name in ("mrr", "mss", "accuracy", "aic"):
            vals = getattr(self, name)
            if len(vals) >= 2:
                agg = em.aggregate_runs(vals)
                out[name] = {"mean": agg.mean, "ci95": agg.ci95}
            elif len(vals) == 1:
                out[name] = {"mean": vals[0], "ci95": None}
            else:
                out[name] = None
        return out

    def to_json(self) -> dict:
        agg = self.aggregate()
        return {
            "mrr": agg["mrr"]["mean"],
            "mss": agg["mss"]["mean"],
            "accuracy": None if agg["accuracy"] is None else agg["accuracy"]["mean"],
            "aic": None if agg["aic"] is None else agg["aic"]["mean"],
            "per_seed": {"mrr": self.mrr, "mss": self.mss, "accuracy": self.accuracy, "aic": self.aic,
                         "mss_summed": self.mss_summed},
            "aggregate": agg,
            "per_imitator_mrr": self.per_imitator_mrr,
            "notes": self.notes,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def evaluate(sets: Sequence[em.EmbeddingSet], ratings: Optional[RatingsTable] = None,
             n_perm: int = em.DEFAULT_PERMUTATIONS, n_runs: int = 5, seed: int = 0,
             within_class: bool = False) -> MetricReport:
    report = MetricReport([], [])
    for emb in sets:
        m = em.mrr(emb, within_class=within_class)
        report.mrr.append(m.overall)
        report.per_imitator_mrr.append({k: 100.0 * v for k, v in m.per_imitator.items()})
        s = em.mss(emb, n_runs=n_runs, n_perm=n_perm, seed=seed)
        report.mss.append(s.mss)
        report.mss_summed.append(s.summed_mss)
        if ratings is not None:
            report.accuracy.append(em.slope_accuracy(emb, ratings).accuracy)
            report.aic.append(em.lmm_for_embeddings(emb, ratings).aic)
    if ratings is None:
        report.notes.append("perception metrics skipped: no ratings given")
    return report


# ---------------------------------------------------------------------------
# Synthetic ratings

def simulate_ratings(manifest: DatasetManifest, score: Callable[[str, str], float],
                     listeners: int = 10, trials: int = 10, duplicates: int = 2,
                     noise: float = 0.0, seed: int = 0,
                     listener_sd: float = 0.0, imitator_sd: float = 0.0) -> RatingsTable:
    """Listener pages of one imitation rated against its within-category references.

    Each listener sees ``trials`` distinct imitations plus ``duplicates``
    repeated pages. The rating is ``score(imitation, reference)`` plus random
    listener and imitator offsets and Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    pairs = em.within_class_pairs(manifest)
    by_imitation: dict[str, list[str]] = {}
    for imi, ref in pairs:
        by_imitation.setdefault(imi, []).append(ref)
    imitations = sorted(by_imitation)
    imitator_ids = sorted({manifest[i].imitator_id for i in imitations})
    imitator_shift = dict(zip(imitator_ids, rng.normal(0.0, imitator_sd, len(imitator_ids))))
    rows = []
    for li in range(listeners):
        lid = f"L{li + 1:03d}"
        shift = rng.normal(0.0, listener_sd)
        chosen = list(rng.choice(len(imitations), size=min(trials, len(imitations)), replace=False))
        chosen += list(rng.choice(chosen, size=min(duplicates, len(chosen)), replace=False))
        for t, k in enumerate(chosen):
            imi = imitations[k]
            for ref in by_imitation[imi]:
                value = score(imi, ref) + shift + imitator_shift[manifest[imi].imitator_id]
                rows.append(Rating(lid, f"T{t + 1:02d}", imi, ref, float(value + rng.normal(0.0, noise))))
    return RatingsTable(rows)
