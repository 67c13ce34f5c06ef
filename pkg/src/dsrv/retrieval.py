"""Drum-sample index and Euclidean nearest-neighbour queries."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import DRUM_TYPES
from .evalmetrics import EmbeddingSet, euclidean, standardization

_MAGIC = b"VIMPIDX"
_VERSION = 1


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: list[str]
    drum_types: list[str]
    vectors: np.ndarray         # standardized, constant dims zeroed
    mean: np.ndarray
    sd: np.ndarray              # inf marks dimensions dropped from the distance

    def __len__(self):
        return len(self.ids)

    def transform(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != self.mean.shape:
            raise ValueError(f"query has {q.shape[-1]} dims, index has {self.mean.shape[0]}")
        return (q - self.mean) / self.sd


def build_index(emb: EmbeddingSet, stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> EmbeddingIndex:
    """Index the drum sounds of ``emb``.

    Standardization uses the drums' own statistics unless ``stats`` gives a
    (mean, sd) pair; zero-variance dimensions are dropped.
    """
    ids = emb.drum_ids()
    if not ids:
        raise ValueError("no drum embeddings to index")
    x = emb.rows(ids)
    mean, sd = standardization(x) if stats is None else stats
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.where(np.asarray(sd, dtype=np.float64) > 0, sd, np.inf)
    return EmbeddingIndex(ids, [emb.records[i].drum_type for i in ids], (x - mean) / sd, mean, sd)


def query(idx: EmbeddingIndex, q: np.ndarray, k: int, class_filter: Optional[str] = None) -> list[tuple[str, float]]:
    """The ``k`` nearest drums as (id, distance), ascending, ties by id."""
    if k <= 0:
        return []
    qs = idx.transform(q)
    keep = np.arange(len(idx))
    if class_filter is not None:
        if class_filter not in DRUM_TYPES:
            raise ValueError(f"unknown drum type {class_filter!r}")
        keep = np.array([i for i in keep if idx.drum_types[i] == class_filter], dtype=np.intp)
        if keep.size == 0:
            return []
    d = euclidean(qs[None, :], idx.vectors[keep])[0]
    ids = np.array([idx.ids[i] for i in keep])
    order = np.lexsort((ids, d))[:k]
    return [(str(ids[i]), float(d[i])) for i in order]


def rank_of(idx: EmbeddingIndex, q: np.ndarray, target: str, class_filter: Optional[str] = None) -> int:
    ranking = query(idx, q, len(idx), class_filter)
    return 1 + [sid for sid, _ in ranking].index(target)


def save_index(path, idx: EmbeddingIndex) -> None:
    d = idx.mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<HII", _VERSION, d, len(idx)))
        fh.write(idx.mean.astype("<f8").tobytes())
        fh.write(idx.sd.astype("<f8").tobytes())
        for sid, dt, vec in zip(idx.ids, idx.drum_types, idx.vectors):
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", DRUM_TYPES.index(dt)))
            fh.write(vec.astype("<f8").tobytes())


def load_index(path) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    if data[:7] != _MAGIC:
        raise ValueError(f"{path}: not an index file")
    version, d, n = struct.unpack("<HII", data[7:17])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    pos = 17
    mean = np.frombuffer(data, "<f8", d, pos).copy()
    pos += 8 * d
    sd = np.frombuffer(data, "<f8", d, pos).copy()
    pos += 8 * d
    ids, types, vecs = [], [], []
    for _ in range(n):
        (ln,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        ids.append(data[pos:pos + ln].decode("utf-8"))
        pos += ln
        types.append(DRUM_TYPES[data[pos]])
        pos += 1
        vecs.append(np.frombuffer(data, "<f8", d, pos).copy())
        pos += 8 * d
    return EmbeddingIndex(ids, types, np.array(vecs).reshape(n, d), mean, sd)


def mrr_via_index(emb: EmbeddingSet, idx: EmbeddingIndex, ids: Optional[Sequence[str]] = None) -> dict[str, int]:
    """Rank of each imitation's reference when querying ``idx``."""
    ranks = {}
    for sid in ids or emb.ids:
        rec = emb.records[sid]
        if rec.sound_type == "imitation" and rec.reference_id in idx.ids:
            ranks[sid] = rank_of(idx, emb.vector(sid), rec.reference_id)
    return ranks
