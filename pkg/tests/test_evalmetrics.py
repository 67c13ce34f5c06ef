import math

import numpy as np
import pytest

from dsrv import evalmetrics as em
from dsrv.dataio import DatasetManifest, Rating, RatingsTable, SoundRecord
from dsrv.heurfeat import FeatureVector


def toy_manifest(n_refs=4, imitators=2, classes=("kick", "snare")):
    recs = []
    for j in range(n_refs):
        dt = classes[j % len(classes)]
        recs.append(SoundRecord(f"d{j}", f"d{j}.wav", "drum", dt))
        for k in range(imitators):
            recs.append(SoundRecord(f"d{j}_i{k}", "i.wav", "imitation", dt, f"imi{k}", f"d{j}"))
    return DatasetManifest(recs, {})


def embedding(manifest, fn, dim=3):
    names = [f"f{i}" for i in range(dim)]
    return em.EmbeddingSet.from_vectors([FeatureVector(fn(r), names, r.id) for r in manifest.records], manifest)


def distance_matrix(points):
    return em.euclidean(points, points)


# ---------------------------------------------------------------------------
# MRR

def test_perfect_retrieval_is_100():
    m = toy_manifest()
    ref_pos = {f"d{j}": np.eye(3)[j % 3] * (j + 1) for j in range(4)}
    emb = embedding(m, lambda r: ref_pos[r.id if r.sound_type == "drum" else r.reference_id])
    assert em.mrr(emb, standardize=False).overall == 100.0


def test_mrr_from_given_ranks():
    assert em.mrr_from_ranks([1, 2, 4]) == pytest.approx(58.333333, abs=1e-4)


def test_mrr_ranks_with_ties_by_id():
    m = toy_manifest(n_refs=3, imitators=1)
    # every sound sits at the origin: all distances tie, the id order decides
    emb = embedding(m, lambda r: np.zeros(3))
    ranks = em.reference_ranks(emb)
    assert ranks == {"d0_i0": 1, "d1_i0": 2, "d2_i0": 3}
    res = em.mrr(emb)
    assert res.per_imitator["imi0"] == pytest.approx((1 + 1 / 2 + 1 / 3) / 3)


def test_mrr_within_class_flag():
    m = toy_manifest(n_refs=4, imitators=1)
    pos = {"d0": [0, 0, 0], "d1": [1, 0, 0], "d2": [2, 0, 0], "d3": [3, 0, 0]}
    # each imitation sits on the next reference along the line
    emb = embedding(m, lambda r: np.array(pos[r.id] if r.sound_type == "drum" else
                                          [int(r.reference_id[1]) + 1, 0, 0], float))
    everything = em.reference_ranks(emb)
    within = em.reference_ranks(emb, within_class=True)
    assert everything["d0_i0"] == 2 and within["d0_i0"] == 1       # d1 is a snare
    assert everything["d1_i0"] == 2 and within["d1_i0"] == 1       # d3 ties with d1, id order wins


def test_mrr_isometry_invariance():
    m = toy_manifest(n_refs=6, imitators=3)
    rng = np.random.default_rng(0)
    base = {r.id: rng.normal(size=3) for r in m.records}
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = em.mrr(embedding(m, lambda r: base[r.id]), standardize=False)
    b = em.mrr(embedding(m, lambda r: q @ base[r.id] + 5.0), standardize=False)
    assert a.ranks == b.ranks


def test_mrr_skips_imitation_without_reference(caplog):
    recs = [SoundRecord("d0", "a", "drum", "kick"), SoundRecord("d1", "b", "drum", "kick"),
            SoundRecord("x", "c", "imitation", "kick", "imi0", None),
            SoundRecord("y", "d", "imitation", "kick", "imi0", "d0")]
    m = DatasetManifest(recs, {})
    emb = embedding(m, lambda r: np.arange(3.0) * (r.id == "d1"))
    assert list(em.reference_ranks(emb)) == ["y"]
    assert "x" in caplog.text


def test_random_baseline_expectation():
    mean, sd = em.random_mrr(resamples=300, seed=1)
    harmonic = sum(1 / k for k in range(1, 19)) / 18
    assert mean == pytest.approx(100 * harmonic, abs=1.0)
    assert 0 < sd < 3


# ---------------------------------------------------------------------------
# Mantel

def generic(n, seed):
    return distance_matrix(np.random.default_rng(seed).normal(size=(n, 2)))


def test_mantel_exhaustive_n3():
    d = generic(3, 0)
    res = em.mantel_test(d, d)
    assert res.exhaustive and res.r == pytest.approx(1.0)
    assert res.p == pytest.approx(1 / 6)


def test_mantel_affine_invariance():
    d = generic(8, 1)
    e = generic(8, 2)
    a = em.mantel_test(d, e, 199, seed=4)
    b = em.mantel_test(d, 3.0 * e + 2.0 * (1 - np.eye(8)), 199, seed=4)
    assert a.r == pytest.approx(b.r) and a.p == b.p


def test_mantel_brute_force_n5():
    d1, d2 = generic(5, 3), generic(5, 4)
    res = em.mantel_test(d1, d2, exhaustive=True)
    import itertools
    iu = np.triu_indices(5, 1)
    r0 = np.corrcoef(d1[iu], d2[iu])[0, 1]
    rs = [np.corrcoef(d1[iu], d2[np.ix_(p, p)][iu])[0, 1] for p in itertools.permutations(range(5))]
    assert res.r == pytest.approx(r0)
    assert res.p == pytest.approx(np.mean(np.array(rs) >= r0 - 1e-12))


def test_mantel_sampled_agrees_with_exhaustive():
    d1, d2 = generic(6, 5), generic(6, 6)
    d2 = d2 + 0.8 * d1
    exact = em.mantel_test(d1, d2, exhaustive=True).p
    sampled = em.mantel_test(d1, d2, n_perm=4999, seed=0, exhaustive=False).p
    assert abs(exact - sampled) < 0.02


def test_mantel_p_floor_and_degenerate():
    d = generic(10, 7)
    res = em.mantel_test(d, d, 99, seed=0)
    assert res.p >= 1 / 100 and res.p == pytest.approx(1 / 100)
    flat = 1 - np.eye(10)
    deg = em.mantel_test(d, flat)
    assert math.isnan(deg.r) and deg.p == 1.0


def test_mantel_input_checks():
    with pytest.raises(ValueError):
        em.mantel_test(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        em.mantel_test(generic(4, 0), generic(5, 0))
    asym = generic(4, 0)
    asym[0, 1] += 1
    with pytest.raises(ValueError):
        em.mantel_test(asym, generic(4, 1))


def vips_like(n_refs=18, imitators=3):
    recs = []
    for j in range(n_refs):
        recs.append(SoundRecord(f"d{j:02d}", "a", "drum", "kick"))
        for k in range(imitators):
            recs.append(SoundRecord(f"d{j:02d}_i{k}", "a", "imitation", "kick", f"imi{k}", f"d{j:02d}"))
    return DatasetManifest(recs, {})


def test_mss_identical_features_is_100():
    m = vips_like()
    rng = np.random.default_rng(0)
    ref = {f"d{j:02d}": rng.normal(size=4) for j in range(18)}
    emb = embedding(m, lambda r: ref[r.id if r.sound_type == "drum" else r.reference_id], dim=4)
    res = em.mss(emb, n_runs=2, n_perm=99)
    assert res.mss == 100.0
    assert np.allclose(res.pvals, 1 / 100)
    assert res.summed_mss == 100.0
    assert res.pvals.shape == (4, 3)


def test_mss_noise_near_test_size():
    m = vips_like(imitators=10)
    rng = np.random.default_rng(1)
    vals = {r.id: rng.normal(size=8) for r in m.records}
    res = em.mss(embedding(m, lambda r: vals[r.id], dim=8), n_runs=1, n_perm=199)
    assert res.mss < 15.0


def test_mss_skips_incomplete_imitator(caplog):
    m = vips_like(n_refs=5, imitators=2)
    recs = [r for r in m.records if r.id != "d03_i1"]
    m2 = DatasetManifest(recs, {})
    rng = np.random.default_rng(2)
    emb = embedding(m2, lambda r: rng.normal(size=2), dim=2)
    res = em.mss(emb, n_runs=1, n_perm=99)
    assert res.imitators == ["imi0"]
    assert "imi1" in caplog.text


def test_squared_difference_matrix():
    d = em.squared_difference_matrix([0.0, 1.0, 3.0])
    np.testing.assert_array_equal(d, [[0, 1, 9], [1, 0, 4], [9, 4, 0]])


# ---------------------------------------------------------------------------
# Reliability

def duplicate_table(rho_by_listener, refs=6):
    rows = []
    base = np.arange(refs, dtype=float)
    for lid, rho in rho_by_listener.items():
        # second page is a fixed reshuffle chosen to give the wanted Spearman rho
        second = {1.0: base, 0.0: np.array([2, 5, 0, 3, 1, 4.0]), -1.0: base[::-1]}[rho]
        for t, vals in (("T1", base), ("T2", second)):
            for j in range(refs):
                rows.append(Rating(lid, t, "imiA", f"r{j}", float(vals[j])))
        for j in range(refs):
            rows.append(Rating(lid, "T3", "imiB", f"r{j}", float(j)))
    return RatingsTable(rows)


def test_reliability_filter():
    from scipy.stats import spearmanr
    assert abs(spearmanr(np.arange(6), [2, 5, 0, 3, 1, 4])[0]) < 0.5
    table = duplicate_table({"L1": 1.0, "L2": 0.0, "L3": -1.0})
    assert em.reliable_listeners(table) == ["L1"]
    assert em.reliable_listeners(table, min_rho=-1.0) == ["L1", "L2", "L3"]


def test_reliability_uses_best_duplicate():
    rows = list(duplicate_table({"L1": -1.0}))
    for j in range(6):
        rows.append(Rating("L1", "T4", "imiB", f"r{j}", float(j) * 2))
    assert em.reliable_listeners(RatingsTable(rows)) == ["L1"]


# ---------------------------------------------------------------------------
# Slopes and accuracy

def test_ols_slope_closed_form():
    s = em.ols_slope_ci([0, 1, 2, 3], [0, 1, 1, 3])
    assert s.slope == pytest.approx(0.9)
    from scipy import stats
    res = stats.linregress([0, 1, 2, 3], [0, 1, 1, 3])
    half = stats.t.ppf(0.975, 2) * res.stderr
    assert s.upper95 == pytest.approx(res.slope + half)
    assert s.lower95 == pytest.approx(res.slope - half)


def test_ols_exact_line_and_negative_slope():
    s = em.ols_slope_ci([0, 1, 2, 3, 4], [1, 3, 5, 7, 9])
    assert s.slope == pytest.approx(2.0) and s.upper95 == pytest.approx(s.lower95)
    x = np.linspace(0, 1, 20)
    y = -2 * x + 1e-3 * np.random.default_rng(0).normal(size=20)
    assert em.ols_slope_ci(x, y).upper95 < 0


def test_ols_degenerate():
    with pytest.raises(em.DegenerateError):
        em.ols_slope_ci([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        em.ols_slope_ci([1, 2], [1, 2])


def test_within_class_pairs_merge_hihats():
    recs = [SoundRecord("c", "a", "drum", "hh_closed"), SoundRecord("o", "a", "drum", "hh_open"),
            SoundRecord("k", "a", "drum", "kick"),
            SoundRecord("c_i", "a", "imitation", "hh_closed", "imi0", "c"),
            SoundRecord("k_i", "a", "imitation", "kick", "imi0", "k")]
    pairs = em.within_class_pairs(DatasetManifest(recs, {}))
    assert sorted(pairs) == [("c_i", "c"), ("c_i", "o"), ("k_i", "k")]


def test_aic_identity_and_margin():
    assert em.aic(-100.0, 5) == 210.0
    assert em.aic_significantly_better(100.0, 111.0)
    assert not em.aic_significantly_better(100.0, 110.0)


def test_fixed_design_treatment_coding():
    X, names = em.fixed_design([1.0, 2.0, 3.0], ["a", "b", "c"])
    assert names == ["(Intercept)", "distance", "sound[b]", "sound[c]", "distance:sound[b]", "distance:sound[c]"]
    np.testing.assert_array_equal(X[2], [1, 3, 0, 1, 0, 3])


# ---------------------------------------------------------------------------
# Mixed model

def dense_deviance(y, X, Z_blocks, theta):
    """-2 log-likelihood at the profiled optimum of beta and sigma for fixed theta."""
    n = len(y)
    V = np.eye(n)
    for Zb, th in zip(Z_blocks, theta):
        V = V + th ** 2 * Zb @ Zb.T
    Vi = np.linalg.inv(V)
    beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    r = y - X @ beta
    sigma2 = r @ Vi @ r / n
    _, logdet = np.linalg.slogdet(V)
    return n * math.log(2 * math.pi * sigma2) + logdet + n


def indicator(codes):
    Z = np.zeros((len(codes), codes.max() + 1))
    Z[np.arange(len(codes)), codes] = 1
    return Z


def test_deviance_matches_dense_formula():
    rng = np.random.default_rng(0)
    n = 60
    g1 = rng.integers(0, 5, n)
    g2 = rng.integers(0, 4, n)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 0.5] + rng.normal(size=5)[g1] + rng.normal(size=n)
    model = em.MixedModel(y, X, {"a": g1, "b": g2})
    for theta in ([0.0, 0.0], [0.7, 0.2], [1.5, 2.0]):
        assert model.deviance(theta) == pytest.approx(dense_deviance(y, X, [indicator(g1), indicator(g2)], theta),
                                                      rel=1e-10)


def test_single_intercept_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(3)
    groups = np.repeat(np.arange(12), 8)
    x = rng.normal(size=len(groups))
    y = 2.0 + 0.5 * x + rng.normal(0, 1.5, 12)[groups] + rng.normal(size=len(groups))
    X = np.column_stack([np.ones_like(x), x])
    fit = em.MixedModel(y, X, {"g": groups}).fit()
    ref = sm.MixedLM(y, X, groups).fit(reml=False)
    assert fit.loglik == pytest.approx(ref.llf, abs=1e-4)
    np.testing.assert_allclose(list(fit.fixed_effects.values()), ref.fe_params, atol=1e-4)
    assert fit.variance_components["g"] == pytest.approx(float(np.asarray(ref.cov_re)[0, 0]), rel=1e-3)


def test_k_and_aic_convention():
    rng = np.random.default_rng(1)
    g = np.repeat(np.arange(6), 5)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    fit = em.MixedModel(rng.normal(size=30), X, {"a": g, "b": g % 3, "c": g % 2}).fit()
    assert fit.k == 2 + 3 + 1
    assert fit.aic == 2 * fit.k - 2 * fit.loglik
    assert all(v >= 0 for v in fit.variance_components.values())


def test_lmm_single_level_rejected():
    with pytest.raises(ValueError):
        em.MixedModel(np.zeros(4), np.ones((4, 1)), {"a": [0, 0, 0, 0]})


def test_lmm_nonconvergence_raises():
    rng = np.random.default_rng(2)
    g = np.repeat(np.arange(10), 4)
    model = em.MixedModel(rng.normal(size=40) + rng.normal(size=10)[g], np.ones((40, 1)),
                          {"a": g, "b": g % 5, "c": np.arange(40) % 7})
    with pytest.raises(em.FitError, match="iterations"):
        model.fit(max_iter=3)


def test_plain_noise_loglik_at_least_ols():
    rng = np.random.default_rng(4)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [0.3, -1.0] + rng.normal(size=n)
    fit = em.MixedModel(y, X, {"a": np.arange(n) % 10, "b": np.arange(n) % 7}).fit()
    assert fit.loglik >= em.ols_loglik(y, X) - 1e-9


# ---------------------------------------------------------------------------
# Aggregation

def test_aggregate_runs():
    a = em.aggregate_runs([1, 1, 1, 1, 1])
    assert (a.mean, a.ci95) == (1.0, 0.0)
    b = em.aggregate_runs([0, 2])
    assert b.mean == 1.0 and b.ci95 == pytest.approx(1.96)
    with pytest.raises(ValueError):
        em.aggregate_runs([3.0])


def test_embedding_set_checks():
    m = toy_manifest(n_refs=2, imitators=1)
    with pytest.raises(ValueError):
        em.EmbeddingSet(["d0"], np.zeros((1, 2)), ["a"], {r.id: r for r in m.records})
    with pytest.raises(ValueError):
        em.EmbeddingSet(["ghost"], np.zeros((1, 1)), ["a"], {})
    emb = embedding(m, lambda r: np.array([1.0, float(len(r.id)), 3.0]))
    z = emb.standardized()
    assert np.all(z.values[:, 0] == 0) and np.all(z.values[:, 2] == 0)
    assert z.values[:, 1].std() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Benchmark-scale perception checks

def _neg_distance(emb):
    z = emb.standardized()
    return lambda a, b: -float(np.linalg.norm(z.vector(a) - z.vector(b)))


def test_vips_pair_and_regression_counts(vips, heuristic_set):
    from dsrv.pipeline import simulate_ratings
    assert len(em.within_class_pairs(vips)) == 1512
    ratings = simulate_ratings(vips, _neg_distance(heuristic_set), listeners=20, noise=0.5, seed=0)
    acc = em.slope_accuracy(heuristic_set, ratings)
    assert len(acc.slopes) == 18
    assert acc.accuracy == 100.0


def test_null_ratings_accuracy_near_test_size(vips, heuristic_set):
    from dsrv.pipeline import simulate_ratings
    accs = [em.slope_accuracy(heuristic_set, simulate_ratings(vips, lambda a, b: 0.0, listeners=20,
                                                              noise=1.0, seed=s)).accuracy
            for s in range(20)]
    assert np.mean(accs) < 8.0


def test_planted_listener_variance_recovered(vips, heuristic_set):
    from dsrv.pipeline import simulate_ratings
    ratings = simulate_ratings(vips, _neg_distance(heuristic_set), listeners=50, noise=1.0, seed=1,
                               listener_sd=2.0)
    fit = em.lmm_for_embeddings(heuristic_set, ratings)
    vc = fit.variance_components
    # 50 listeners: the sampling sd of the variance estimate is about 0.8
    assert vc["listener"] == pytest.approx(4.0, abs=1.6)
    assert vc["residual"] == pytest.approx(1.0, rel=0.1)
    assert vc["trial:listener"] < 0.1 and vc["imitator"] < 0.1
    assert fit.fixed_effects["distance"] == pytest.approx(-1.0, abs=0.1)
