"""Acoustic and perceptual similarity metrics for evaluating embeddings.

Acoustic metrics compare the embedding space of the reference drums with
that of their imitations (mean reciprocal rank, Mantel significance).
Perceptual metrics relate embedding distances to listener ratings (slope
confidence-interval accuracy, mixed-model AIC).
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize, stats
from scipy.sparse.linalg import splu

from .dataio import DatasetManifest, RatingsTable, SoundRecord
from .heurfeat import FeatureVector

log = logging.getLogger(__name__)

P_SIGNIFICANT = 0.05
DEFAULT_PERMUTATIONS = 999


class DegenerateError(ValueError):
    pass


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Embedding sets

@dataclass
class EmbeddingSet:
    ids: list[str]
    values: np.ndarray          # (sounds, features)
    names: list[str]
    records: dict[str, SoundRecord]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.ids), len(self.names)):
            raise ValueError("embedding matrix does not match ids and names")
        missing = [i for i in self.ids if i not in self.records]
        if missing:
            raise ValueError(f"ids not in manifest: {missing[:5]}")
        self._row = {sid: k for k, sid in enumerate(self.ids)}

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], manifest: DatasetManifest) -> "EmbeddingSet":
        if not vectors:
            raise ValueError("no vectors")
        names = list(vectors[0].names)
        if any(len(v) != len(names) for v in vectors):
            raise ValueError("vectors differ in length")
        ids = [v.source_id for v in vectors]
        recs = {i: manifest[i] for i in ids if i in manifest}
        return cls(ids, np.stack([v.values for v in vectors]), names, recs)

    def __len__(self):
        return len(self.ids)

    def vector(self, sound_id: str) -> np.ndarray:
        return self.values[self._row[sound_id]]

    def rows(self, sound_ids: Sequence[str]) -> np.ndarray:
        return self.values[[self._row[s] for s in sound_ids]]

    def standardized(self) -> "EmbeddingSet":
        """Z-score every feature over all sounds; constant features become 0."""
        mean, sd = standardization(self.values)
        return EmbeddingSet(self.ids, (self.values - mean) / sd, self.names, self.records)

    def stats(self):
        return standardization(self.values)

    @property
    def references(self) -> list[str]:
        """Drum ids referenced by imitations, sorted."""
        refs = {self.records[i].reference_id for i in self.ids
                if self.records[i].sound_type == "imitation" and self.records[i].reference_id}
        return sorted(r for r in refs if r in self._row)

    def drum_ids(self) -> list[str]:
        return sorted(i for i in self.ids if self.records[i].sound_type == "drum")

    def imitators(self) -> list[str]:
        return sorted({self.records[i].imitator_id for i in self.ids
                       if self.records[i].sound_type == "imitation"})


def standardization(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    return mean, np.where(sd > 0, sd, np.inf)


def euclidean(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, shape (queries, candidates)."""
    diff = np.asarray(queries)[:, None, :] - np.asarray(candidates)[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


# ---------------------------------------------------------------------------
# Mean reciprocal rank

@dataclass
class MRRResult:
    per_imitator: dict[str, float]
    overall: float              # percent
    ranks: dict[str, int] = field(default_factory=dict)


def reference_ranks(emb: EmbeddingSet, within_class: bool = False) -> dict[str, int]:
    """Rank of the true reference for every imitation, ties broken by id."""
    refs = emb.drum_ids()
    ref_x = emb.rows(refs)
    ref_pos = {r: k for k, r in enumerate(refs)}
    ranks = {}
    for sid in emb.ids:
        rec = emb.records[sid]
        if rec.sound_type != "imitation":
            continue
        if rec.reference_id is None or rec.reference_id not in ref_pos:
            log.warning("imitation %s has no usable reference_id; excluded", sid)
            continue
        d = euclidean(emb.vector(sid)[None, :], ref_x)[0]
        cand = np.ones(len(refs), dtype=bool)
        if within_class:
            cand = np.array([emb.records[r].drum_type == rec.drum_type for r in refs])
        t = ref_pos[rec.reference_id]
        closer = np.sum(cand & (d < d[t]))
        # refs are id-sorted, so lower positions win ties
        tied = np.sum(cand[:t] & (d[:t] == d[t]))
        ranks[sid] = int(1 + closer + tied)
    return ranks


def mrr(emb: EmbeddingSet, within_class: bool = False, standardize: bool = True) -> MRRResult:
    if standardize:
        emb = emb.standardized()
    ranks = reference_ranks(emb, within_class)
    by_imitator: dict[str, list[float]] = {}
    for sid, rank in ranks.items():
        by_imitator.setdefault(emb.records[sid].imitator_id, []).append(1.0 / rank)
    per = {k: float(np.mean(v)) for k, v in sorted(by_imitator.items())}
    overall = 100.0 * float(np.mean(list(per.values()))) if per else float("nan")
    return MRRResult(per, overall, ranks)


def mrr_from_ranks(ranks: Sequence[int]) -> float:
    return 100.0 * float(np.mean([1.0 / r for r in ranks]))


def random_mrr(n_refs: int = 18, n_imitators: int = 14, dim: int = 32, resamples: int = 1000,
               seed: int = 0) -> tuple[float, float]:
    """Mean and sd of overall MRR (percent) for standard-normal embeddings."""
    rng = np.random.default_rng(seed)
    scores = np.empty(resamples)
    for k in range(resamples):
        refs = rng.standard_normal((n_refs, dim))
        imis = rng.standard_normal((n_imitators, n_refs, dim))
        d = np.sqrt(((imis[:, :, None, :] - refs[None, None, :, :]) ** 2).sum(-1))
        true = d[:, np.arange(n_refs), np.arange(n_refs)]
        lower = np.arange(n_refs)[None, :] < np.arange(n_refs)[:, None]
        rank = 1 + (d < true[..., None]).sum(-1) + ((d == true[..., None]) & lower[None]).sum(-1)
        scores[k] = 100.0 * np.mean(1.0 / rank)
    return float(scores.mean()), float(scores.std(ddof=1))


# ---------------------------------------------------------------------------
# Mantel test

@dataclass(frozen=True)
class MantelResult:
    r: float
    p: float
    n_perm: int
    exhaustive: bool = False


def _upper(d):
    i, j = np.triu_indices(d.shape[0], 1)
    return d[i, j]


def _check_distance_matrix(d, name):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"{name} must be square")
    if d.shape[0] < 3:
        raise ValueError(f"{name} needs at least 3 objects")
    if not np.allclose(d, d.T) or np.any(np.diag(d) != 0):
        raise ValueError(f"{name} must be symmetric with zero diagonal")
    return d


def mantel_test(d1, d2, n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                exhaustive: Optional[bool] = None) -> MantelResult:
    """One-sided Pearson Mantel test permuting the objects of ``d2``.

    All n! permutations are enumerated when n! <= n_perm (or when forced),
    giving p = #{r_perm >= r} / n!. Otherwise p = (1 + #{r_perm >= r}) / (n_perm + 1).
    """
    d1 = _check_distance_matrix(d1, "d1")
    d2 = _check_distance_matrix(d2, "d2")
    n = d1.shape[0]
    if d2.shape[0] != n:
        raise ValueError("distance matrices differ in size")
    x = _upper(d1)
    x = x - x.mean()
    y = _upper(d2)
    if x.std() == 0 or y.std() == 0:
        return MantelResult(float("nan"), 1.0, n_perm, False)
    x_norm = np.sqrt(x @ x)
    iu, ju = np.triu_indices(n, 1)

    def correlations(perms):
        yp = d2[perms[:, iu], perms[:, ju]]
        yp = yp - yp.mean(axis=1, keepdims=True)
        return (yp @ x) / (np.sqrt(np.sum(yp * yp, axis=1)) * x_norm)

    r = float(correlations(np.arange(n)[None, :])[0])
    tol = 1e-12 * max(1.0, abs(r))
    if exhaustive is None:
        exhaustive = math.factorial(n) <= n_perm
    if exhaustive:
        total = math.factorial(n)
        hits = 0
        perm_iter = itertools.permutations(range(n))
        while True:
            chunk = np.array(list(itertools.islice(perm_iter, 20000)), dtype=np.intp)
            if chunk.size == 0:
                break
            hits += int(np.sum(correlations(chunk) >= r - tol))
        return MantelResult(r, hits / total, total - 1, True)
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_perm, n)), axis=1)
    hits = int(np.sum(correlations(perms) >= r - tol))
    return MantelResult(r, (1 + hits) / (n_perm + 1), n_perm, False)


def squared_difference_matrix(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (v[:, None] - v[None, :]) ** 2


def imitation_matrix(emb: EmbeddingSet) -> tuple[list[str], dict[str, list[str]]]:
    """Reference order and, per imitator, the imitation id of each reference.

    Imitators missing any reference are skipped with a warning.
    """
    refs = emb.references
    table: dict[str, dict[str, str]] = {}
    for sid in emb.ids:
        rec = emb.records[sid]
        if rec.sound_type == "imitation" and rec.reference_id in refs:
            table.setdefault(rec.imitator_id, {})[rec.reference_id] = sid
    complete = {}
    for imitator in sorted(table):
        row = table[imitator]
        if len(row) != len(refs):
            log.warning("imitator %s lacks imitations for %d references; skipped",
                        imitator, len(refs) - len(row))
            continue
        complete[imitator] = [row[r] for r in refs]
    return refs, complete


@dataclass
class MSSResult:
    features: list[str]
    imitators: list[str]
    pvals: np.ndarray           # (features, imitators), run-averaged
    mss: float                  # percent of significant (feature, imitator) cells
    summed_pvals: np.ndarray    # (features,), imitator-summed distance matrices
    summed_mss: float


def mss(emb: EmbeddingSet, n_runs: int = 5, n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
        standardize: bool = True) -> MSSResult:
    """Mantel significance of every feature, per imitator and with imitators summed."""
    if standardize:
        emb = emb.standardized()
    refs, by_imitator = imitation_matrix(emb)
    if len(refs) < 3 or not by_imitator:
        raise ValueError("need at least 3 references and one complete imitator")
    imitators = list(by_imitator)
    ref_x = emb.rows(refs)
    imi_x = {k: emb.rows(v) for k, v in by_imitator.items()}
    n_feat = ref_x.shape[1]
    pvals = np.zeros((n_feat, len(imitators)))
    summed = np.zeros(n_feat)
    for f in range(n_feat):
        d_ref = squared_difference_matrix(ref_x[:, f])
        d_sum = np.zeros_like(d_ref)
        for j, imitator in enumerate(imitators):
            d_imi = squared_difference_matrix(imi_x[imitator][:, f])
            d_sum += d_imi
            runs = [mantel_test(d_ref, d_imi, n_perm, seed=_cell_seed(seed, run, f, j)).p
                    for run in range(n_runs)]
            pvals[f, j] = np.mean(runs)
        summed[f] = np.mean([mantel_test(d_ref, d_sum, n_perm, seed=_cell_seed(seed, run, f, -1)).p
                             for run in range(n_runs)])
    return MSSResult(
        list(emb.names), imitators, pvals,
        100.0 * float(np.mean(pvals < P_SIGNIFICANT)),
        summed, 100.0 * float(np.mean(summed < P_SIGNIFICANT)),
    )


def _cell_seed(seed, run, feature, imitator):
    return [seed, run, feature, imitator + 1]


# ---------------------------------------------------------------------------
# Listener reliability

def reliable_listeners(ratings: RatingsTable, min_rho: float = 0.5) -> list[str]:
    """Listeners whose ratings of some duplicated trial correlate at rho >= ``min_rho``."""
    pages: dict[str, dict[str, dict[str, dict[str, float]]]] = {}
    for r in ratings:
        pages.setdefault(r.listener_id, {}).setdefault(r.imitation_id, {}).setdefault(
            r.trial_id, {})[r.reference_id] = r.rating
    keep = []
    for listener in sorted(pages):
        best = -np.inf
        for trials in pages[listener].values():
            for a, b in itertools.combinations(sorted(trials), 2):
                common = sorted(set(trials[a]) & set(trials[b]))
                if len(common) < 2:
                    continue
                rho = stats.spearmanr([trials[a][k] for k in common], [trials[b][k] for k in common])[0]
                if np.isfinite(rho):
                    best = max(best, rho)
        if best >= min_rho:
            keep.append(listener)
    return keep


# ---------------------------------------------------------------------------
# Distance pairs, OLS slopes

RATING_CATEGORY = {"kick": "kick", "snare": "snare", "hh_closed": "hihat", "hh_open": "hihat"}


def within_class_pairs(manifest: DatasetManifest) -> list[tuple[str, str]]:
    """(imitation, reference) pairs where the reference shares the imitation's rating category.

    Closed and open hi-hats share one category, as listeners compared each
    imitation against every hi-hat.
    """
    refs = sorted(r.id for r in manifest.drums())
    pairs = []
    for rec in manifest.imitations():
        if rec.reference_id is None:
            continue
        cat = RATING_CATEGORY[rec.drum_type]
        for ref in refs:
            if RATING_CATEGORY[manifest[ref].drum_type] == cat:
                pairs.append((rec.id, ref))
    return pairs


def pair_distances(emb: EmbeddingSet, pairs, standardize: bool = True) -> dict[tuple[str, str], float]:
    if standardize:
        emb = emb.standardized()
    out = {}
    for a, b in pairs:
        diff = emb.vector(a) - emb.vector(b)
        out[(a, b)] = float(np.sqrt(np.sum(diff * diff)))
    return out


@dataclass(frozen=True)
class SlopeCI:
    slope: float
    lower95: float
    upper95: float
    intercept: float = 0.0


def ols_slope_ci(x, y, level: float = 0.95) -> SlopeCI:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need at least 3 paired observations")
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0:
        raise DegenerateError("distance has zero variance")
    slope = (xc @ (y - y.mean())) / sxx
    intercept = y.mean() - slope * x.mean()
    resid = y - intercept - slope * x
    se = math.sqrt(max(resid @ resid, 0.0) / (n - 2) / sxx)
    half = stats.t.ppf(0.5 + level / 2.0, n - 2) * se
    return SlopeCI(float(slope), float(slope - half), float(slope + half), float(intercept))


@dataclass
class AccuracyResult:
    accuracy: float             # percent
    slopes: dict[str, SlopeCI]
    n_pairs: int
    n_rows: int


def slope_accuracy(emb: EmbeddingSet, ratings: RatingsTable, standardize: bool = True) -> AccuracyResult:
    """Percent of imitated sounds whose rating~distance slope has a negative upper 95% bound."""
    if standardize:
        emb = emb.standardized()
    groups: dict[str, tuple[list[float], list[float]]] = {}
    cache: dict[tuple[str, str], float] = {}
    for row in ratings:
        key = (row.imitation_id, row.reference_id)
        if key not in cache:
            cache[key] = pair_distances(emb, [key], standardize=False)[key]
        target = emb.records[row.imitation_id].reference_id
        xs, ys = groups.setdefault(target, ([], []))
        xs.append(cache[key])
        ys.append(row.rating)
    slopes = {}
    for sound in sorted(groups):
        xs, ys = groups[sound]
        if len(xs) < 3:
            log.warning("sound %s has %d rated pairs; excluded", sound, len(xs))
            continue
        slopes[sound] = ols_slope_ci(xs, ys)
    if not slopes:
        raise ValueError("no sound has enough ratings")
    acc = 100.0 * float(np.mean([s.upper95 < 0 for s in slopes.values()]))
    return AccuracyResult(acc, slopes, len(cache), len(ratings))


# ---------------------------------------------------------------------------
# Linear mixed model

@dataclass
class LmmFit:
    fixed_effects: dict[str, float]
    variance_components: dict[str, float]
    loglik: float
    aic: float
    k: int
    theta: np.ndarray
    n_iter: int


def aic(loglik: float, k: int) -> float:
    return 2.0 * k - 2.0 * loglik


def aic_significantly_better(aic_a: float, aic_b: float, margin: float = 10.0) -> bool:
    """True when model a beats model b by more than ``margin`` AIC units."""
    return aic_b - aic_a > margin


def _indicator(codes: np.ndarray, n_levels: int) -> sp.csc_matrix:
    n = len(codes)
    return sp.csc_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, n_levels))


def _codes(labels):
    levels, codes = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    return codes, list(levels)


def fixed_design(distance, sound) -> tuple[np.ndarray, list[str]]:
    """Treatment-coded design for ``distance * sound``."""
    distance = np.asarray(distance, dtype=np.float64)
    codes, levels = _codes(sound)
    cols = [np.ones_like(distance), distance]
    names = ["(Intercept)", "distance"]
    for k, lev in enumerate(levels[1:], start=1):
        cols.append((codes == k).astype(np.float64))
        names.append(f"sound[{lev}]")
    for k, lev in enumerate(levels[1:], start=1):
        cols.append(distance * (codes == k))
        names.append(f"distance:sound[{lev}]")
    return np.column_stack(cols), names


class MixedModel:
    """Gaussian LMM with independent random intercepts, fitted by maximum likelihood.

    The deviance is profiled over the relative standard deviations theta of
    each random-effect term (one theta per term, relative to the residual sd).
    """

    def __init__(self, y, X, groups: Mapping[str, Sequence], fixed_names=None):
        self.y = np.asarray(y, dtype=np.float64)
        self.X = np.asarray(X, dtype=np.float64)
        self.n, self.p = self.X.shape
        self.fixed_names = list(fixed_names or [f"x{i}" for i in range(self.p)])
        self.terms = list(groups)
        blocks, self.sizes = [], []
        for name in self.terms:
            codes, levels = _codes(groups[name])
            if len(levels) < 2:
                raise ValueError(f"random effect {name!r} needs at least 2 levels")
            blocks.append(_indicator(codes, len(levels)))
            self.sizes.append(len(levels))
        self.Z = sp.hstack(blocks).tocsc()
        self.ZtZ = (self.Z.T @ self.Z).tocsc()
        self.ZtX = np.asarray(self.Z.T @ self.X)
        self.Zty = np.asarray(self.Z.T @ self.y).ravel()
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.q = self.Z.shape[1]

    def _lambda(self, theta):
        return np.repeat(np.abs(np.asarray(theta, dtype=np.float64)), self.sizes)

    def solve(self, theta):
        """Penalised least squares at ``theta``: (beta, u, penalised RSS, log det)."""
        lam = self._lambda(theta)
        L = sp.diags(lam)
        A = (L @ self.ZtZ @ L + sp.identity(self.q)).tocsc()
        # symmetric ordering without pivoting: the LU of an SPD matrix is its Cholesky in disguise
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options={"SymmetricMode": True})
        logdet = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
        LZtX = lam[:, None] * self.ZtX
        LZty = lam * self.Zty
        AinvX = lu.solve(LZtX)
        Ainvy = lu.solve(LZty)
        S = self.XtX - LZtX.T @ AinvX
        beta = np.linalg.solve(S, self.Xty - LZtX.T @ Ainvy)
        u = Ainvy - AinvX @ beta
        resid = self.y - self.X @ beta - self.Z @ (lam * u)
        pwrss = float(resid @ resid + u @ u)
        return beta, u, pwrss, logdet

    def deviance(self, theta) -> float:
        _, _, pwrss, logdet = self.solve(theta)
        n = self.n
        return logdet + n * (1.0 + math.log(2.0 * math.pi * pwrss / n))

    def fit(self, max_iter: int = 2000, rtol: float = 1e-8, theta0=None) -> LmmFit:
        theta0 = np.ones(len(self.terms)) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        f0 = self.deviance(theta0)
        res = optimize.minimize(
            self.deviance, theta0, method="Nelder-Mead",
            options={"maxiter": max_iter, "xatol": rtol, "fatol": rtol * max(1.0, abs(f0)),
                     "adaptive": False},
        )
        if not res.success:
            raise FitError(f"simplex did not converge after {res.nit} iterations: {res.message} "
                           f"(theta={res.x}, deviance={res.fun})")
        theta = np.abs(res.x)
        # the boundary theta=0 is never reached exactly by the simplex
        for i in range(len(theta)):
            trial = theta.copy()
            trial[i] = 0.0
            if self.deviance(trial) <= self.deviance(theta):
                theta = trial
        beta, _, pwrss, _ = self.solve(theta)
        dev = self.deviance(theta)
        sigma2 = pwrss / self.n
        loglik = -0.5 * dev
        k = self.p + len(self.terms) + 1
        return LmmFit(
            dict(zip(self.fixed_names, map(float, beta))),
            {**{t: float(th ** 2 * sigma2) for t, th in zip(self.terms, theta)}, "residual": float(sigma2)},
            float(loglik), aic(loglik, k), k, theta, int(res.nit),
        )


def ols_loglik(y, X) -> float:
    y = np.asarray(y, dtype=np.float64)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ beta) ** 2))
    n = len(y)
    return -0.5 * n * (1.0 + math.log(2.0 * math.pi * rss / n))


def fit_lmm(ratings: RatingsTable, distances: Mapping[tuple[str, str], float],
            sounds: Mapping[str, str], imitators: Mapping[str, str], **kwargs) -> LmmFit:
    """Fit rating ~ distance * sound + (1|listener/trial) + (1|imitator).

    ``sounds`` maps an imitation id to its drum-sound factor level and
    ``imitators`` maps it to the imitator who produced it.
    """
    rows = list(ratings)
    try:
        d = [distances[(r.imitation_id, r.reference_id)] for r in rows]
        snd = [sounds[r.imitation_id] for r in rows]
        imi = [imitators[r.imitation_id] for r in rows]
    except KeyError as exc:
        raise ValueError(f"unresolvable rating row: {exc}") from None
    X, names = fixed_design(d, snd)
    groups = {
        "listener": [r.listener_id for r in rows],
        "trial:listener": [f"{r.listener_id}\x1f{r.trial_id}" for r in rows],
        "imitator": imi,
    }
    return MixedModel([r.rating for r in rows], X, groups, names).fit(**kwargs)


def lmm_for_embeddings(emb: EmbeddingSet, ratings: RatingsTable, standardize: bool = True) -> LmmFit:
    pairs = sorted({(r.imitation_id, r.reference_id) for r in ratings})
    dist = pair_distances(emb, pairs, standardize)
    targets = {r.imitation_id: emb.records[r.imitation_id].reference_id for r in ratings}
    imitators = {r.imitation_id: emb.records[r.imitation_id].imitator_id for r in ratings}
    return fit_lmm(ratings, dist, targets, imitators)


# ---------------------------------------------------------------------------
# Aggregation

@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci95: float


def aggregate_runs(values: Sequence[float]) -> Aggregate:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("aggregation needs at least 2 runs")
    return Aggregate(float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v))))
