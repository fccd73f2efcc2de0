import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_balance, brute_entropy_keep, softmax_rows
from sifl.errors import InsufficientPointsError, InvalidConfigError, TargetTooLargeError
from sifl.nn import embed, forward, init_model, preset
from sifl.pruning import (
    EntropyPruneConfig,
    KMeansBalanceConfig,
    KMeansModel,
    balance_select,
    confidence_score,
    entropy_prune,
    kmeans_balance,
    kmeans_fit,
    nearest_centroid_distance,
    nearest_distances,
    prune_pipeline,
)

# --- k-means --------------------------------------------------------------------------


def test_k_equals_s_zero_distance(rng):
    x = rng.standard_normal((9, 3))
    km = kmeans_fit(x, 9, seed=1)
    assert nearest_distances(km, x).sum() == 0


def test_two_blobs(rng):
    a = rng.standard_normal((100, 2)) * 0.3 + [5, 5]
    b = rng.standard_normal((100, 2)) * 0.3 + [-5, 0]
    km = kmeans_fit(np.vstack([a, b]), 2, seed=3)
    got = sorted(map(tuple, km.centroids))
    want = sorted([tuple(a.mean(0)), tuple(b.mean(0))])
    for g, w in zip(got, want):
        assert np.linalg.norm(np.subtract(g, w)) < 0.1


def test_single_cluster_is_mean(rng):
    x = rng.standard_normal((50, 4))
    np.testing.assert_allclose(kmeans_fit(x, 1).centroids[0], x.mean(0), atol=1e-6)


def test_insufficient_points(rng):
    with pytest.raises(InsufficientPointsError):
        kmeans_fit(rng.standard_normal((3, 2)), 4)


def test_kmeans_deterministic_and_order_free(rng):
    x = rng.standard_normal((80, 5))
    a = kmeans_fit(x, 6, seed=4)
    b = kmeans_fit(x, 6, seed=4)
    c = kmeans_fit(x[rng.permutation(80)], 6, seed=4)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.centroids, c.centroids)


def test_kmeans_handles_duplicates():
    x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    km = kmeans_fit(x, 3, seed=0)
    assert np.all(np.isfinite(km.centroids))
    assert nearest_distances(km, x).max() == 0


def test_nearest_distance_examples():
    km = KMeansModel(np.array([[0.0, 0.0], [10.0, 0.0]]), 0)
    assert nearest_centroid_distance(km, [4, 3]) == 5.0
    assert nearest_centroid_distance(km, [10, 0]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_nearest_distance_matches_scan(seed):
    rng = np.random.default_rng(seed)
    k, e = int(rng.integers(1, 8)), int(rng.integers(1, 5))
    km = KMeansModel(rng.standard_normal((k, e)), 0)
    z = rng.standard_normal(e)
    scan = min(math.sqrt(sum((zi - ci) ** 2 for zi, ci in zip(z, c))) for c in km.centroids)
    assert abs(nearest_centroid_distance(km, z) - scan) < 1e-12


# --- balancing -------------------------------------------------------------------------


def test_zero_factor_is_global_ordering(rng):
    labels = rng.integers(0, 3, 20)
    dist = rng.random(20)
    got = balance_select(labels, dist, 7, 0.0, "hard")
    assert list(got) == sorted(np.argsort(-dist, kind="stable")[:7])


def test_twelve_patch_example():
    labels = np.repeat([0, 1, 2], 4)
    dist = np.array([0.1, 0.9, 0.5, 0.7, 2.0, 1.0, 3.0, 0.0, 0.2, 0.4, 0.3, 0.8])
    got = balance_select(labels, dist, 6, 1.0, "hard")
    assert list(got) == [1, 3, 4, 6, 9, 11]
    assert list(got) == brute_balance(labels, dist, 6, 1.0, "hard")


def test_full_target_returns_everything(rng):
    labels = rng.integers(0, 3, 10)
    for h in ("easy", "hard", "mixed"):
        assert list(balance_select(labels, rng.random(10), 10, 0.5, h)) == list(range(10))


def test_target_too_large(rng):
    with pytest.raises(TargetTooLargeError):
        balance_select([0, 1], [0.1, 0.2], 3, 1.0, "easy")


balance_cases = st.integers(0, 2**31).map(np.random.default_rng)


@settings(max_examples=150, deadline=None)
@given(
    balance_cases,
    st.sampled_from(["easy", "hard", "mixed"]),
    st.sampled_from([0.0, 0.1, 0.5, 0.75, 1.0]),
)
def test_balance_matches_bruteforce(rng, heuristic, factor):
    n = int(rng.integers(1, 65))
    labels = rng.integers(0, int(rng.integers(1, 5)), n)
    # coarse distances provoke ties
    dist = rng.integers(0, 6, n) / 4.0
    s = int(rng.integers(1, n + 1))
    got = balance_select(labels, dist, s, factor, heuristic)
    assert list(got) == brute_balance(labels, dist, s, factor, heuristic)
    assert len(set(got.tolist())) == s


@settings(max_examples=100, deadline=None)
@given(balance_cases, st.sampled_from(["easy", "hard"]))
def test_lower_bound_and_order_properties(rng, heuristic):
    n = int(rng.integers(4, 65))
    labels = rng.integers(0, 4, n)
    dist = rng.random(n)
    s = int(rng.integers(1, n + 1))
    got = set(balance_select(labels, dist, s, 1.0, heuristic).tolist())
    classes = np.unique(labels)
    lb = math.floor(s / len(classes))
    for c in classes:
        members = np.flatnonzero(labels == c)
        sel = [i for i in members if i in got]
        assert len(sel) >= min(lb, len(members))
        if 0 < len(sel) == lb < len(members):
            rest = [i for i in members if i not in got]
            if heuristic == "easy":
                assert max(dist[sel]) <= min(dist[rest])
            else:
                assert min(dist[sel]) >= max(dist[rest])


def _tiny_pool(seed, n=24, classes=3):
    rng = np.random.default_rng(seed)
    model = init_model(preset("small", (3, 8, 8), classes), seed)
    return rng.random((n, 3, 8, 8)).astype(np.float32), model


def test_kmeans_balance_end_to_end_matches_oracle():
    for seed in range(10):
        x, model = _tiny_pool(seed)
        cfg = KMeansBalanceConfig(k=4, target_size=10, heuristic=["easy", "hard", "mixed"][seed % 3], seed=seed)
        got, report, km = kmeans_balance(x, model, cfg)
        z = embed(model, x)
        labels = forward(model, x).argmax(1)
        dist = [min(math.dist(zi, c) for c in km.centroids) for zi in z]
        assert list(got) == brute_balance(labels, dist, 10, 1.0, cfg.heuristic)
        assert report.selected == sorted(got.tolist())
        assert sum(report.class_counts.values()) == 10


# --- confidence / entropy ---------------------------------------------------------------


def test_uniform_logits_confidence():
    assert np.allclose(confidence_score(None, logits=np.zeros((3, 5))), 0.2)


def test_two_class_confidence():
    c = confidence_score(None, logits=np.array([[10.0, -10.0]]))[0]
    assert abs(c - 1 / (1 + math.exp(-20))) < 1e-15


def test_confidence_matches_script(rng):
    logits = rng.standard_normal((20, 6)) * 4
    np.testing.assert_allclose(confidence_score(None, logits=logits), softmax_rows(logits).max(1), atol=1e-7)
    np.testing.assert_array_equal(confidence_score(None, logits=logits, mode="logit"), logits.max(1))


def test_confidence_from_model():
    x, model = _tiny_pool(1)
    c = confidence_score(model, x)
    assert c.shape == (24,) and np.all((c > 0) & (c <= 1))


def test_entropy_zero_removal():
    kept, _ = entropy_prune([5, 3, 9], [0.2, 0.9, 0.5], EntropyPruneConfig(0))
    assert list(kept) == [5, 3, 9]


def test_entropy_top_example():
    kept, rep = entropy_prune([0, 1, 2, 3], [0.9, 0.5, 0.7, 0.3], EntropyPruneConfig(50, "top"))
    assert list(kept) == [1, 3]
    assert rep.stages[0]["output"] == 2


def test_entropy_rejects_full_removal():
    with pytest.raises(InvalidConfigError):
        EntropyPruneConfig(100)


@settings(max_examples=150, deadline=None)
@given(balance_cases, st.sampled_from(["top", "bottom"]), st.sampled_from([0, 10, 33.3, 50, 90, 99.5]))
def test_entropy_matches_sort_oracle(rng, heuristic, e):
    n = int(rng.integers(1, 65))
    idx = rng.permutation(200)[:n]
    scores = rng.integers(0, 5, n) / 4.0
    kept, _ = entropy_prune(idx, scores, EntropyPruneConfig(e, heuristic))
    assert list(kept) == brute_entropy_keep(list(idx), list(scores), e, heuristic)
    assert len(kept) == n - math.floor(e * n / 100 + 1e-9)


def test_entropy_random_is_seeded(rng):
    idx = np.arange(40)
    s = rng.random(40)
    a, _ = entropy_prune(idx, s, EntropyPruneConfig(75, "random", seed=3))
    b, _ = entropy_prune(idx, s, EntropyPruneConfig(75, "random", seed=3))
    c, _ = entropy_prune(idx, s, EntropyPruneConfig(75, "random", seed=4))
    assert list(a) == list(b) and len(a) == 10 and list(a) != list(c)


# --- pipeline ----------------------------------------------------------------------------


def test_pipeline_disabled_is_prefix():
    x, model = _tiny_pool(2)
    got, rep, _ = prune_pipeline(x, model, None, None)
    assert list(got) == list(range(24))
    got, _, _ = prune_pipeline(x, model, None, None, target=5)
    assert list(got) == [0, 1, 2, 3, 4]


def test_pipeline_kmeans_only_equals_stage():
    x, model = _tiny_pool(3)
    cfg = KMeansBalanceConfig(k=4, target_size=9, seed=1)
    got, _, _ = prune_pipeline(x, model, cfg, None)
    alone, _, _ = kmeans_balance(x, model, cfg)
    assert list(got) == list(alone)


def test_pipeline_composition_matches_oracles():
    x, model = _tiny_pool(4, n=64, classes=4)
    kcfg = KMeansBalanceConfig(k=4, target_size=40, heuristic="hard", seed=2)
    ecfg = EntropyPruneConfig(75, "top")
    got, rep, km = prune_pipeline(x, model, kcfg, ecfg)
    z = embed(model, x)
    logits = forward(model, x)
    dist = [min(math.dist(zi, c) for c in km.centroids) for zi in z]
    stage1 = brute_balance(logits.argmax(1), dist, 40, 1.0, "hard")
    conf = softmax_rows(logits[stage1]).max(1)
    expect = brute_entropy_keep(stage1, list(conf), 75, "top")
    assert list(got) == sorted(expect)
    assert [s["output"] for s in rep.stages] == [40, 10]
    assert sum(rep.class_counts.values()) == 10
    json.loads(rep.to_json())
    assert rep.indices_wire().splitlines() == [str(i) for i in got]


def test_pipeline_is_permutation_equivariant():
    x, model = _tiny_pool(5, n=48)
    kcfg = KMeansBalanceConfig(k=4, target_size=20, seed=0)
    ecfg = EntropyPruneConfig(50, "top")
    perm = np.random.default_rng(0).permutation(48)
    a, _, _ = prune_pipeline(x, model, kcfg, ecfg)
    b, _, _ = prune_pipeline(x[perm], model, kcfg, ecfg)
    assert {x[i].tobytes() for i in a} == {x[perm][i].tobytes() for i in b}


def test_pipeline_depends_on_model():
    x, model = _tiny_pool(6, n=48)
    other = init_model(model.arch, 1234)
    kcfg = KMeansBalanceConfig(k=4, target_size=20, seed=0)
    ecfg = EntropyPruneConfig(50, "top")
    a, _, _ = prune_pipeline(x, model, kcfg, ecfg)
    b, _, _ = prune_pipeline(x, other, kcfg, ecfg)
    assert list(a) != list(b)
