"""Tests for corpus embedding, k-means, TF-IDF labeling and the hierarchy."""

import math

import numpy as np
import pytest

from metaprompt.clustering import (
    Corpus,
    CrossModalHierarchicalClustering,
    Pair,
    build_hierarchy,
    cluster_domains,
    cluster_topics,
    domain_purity,
    embed_texts,
    kmeans,
    pick_topic_words,
    tfidf_scores,
    topic_purity,
)
from metaprompt.encoders import FrozenEncoders
from metaprompt.episodes import GeneratorSpec, generate_corpus
from metaprompt.errors import ContractError


def tiny_corpus(texts, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    vocab_size = max((max(t) for t in texts if t), default=0) + 1
    pairs = tuple(
        Pair(text=tuple(t), patch_features=rng.normal(size=(2, dim))) for t in texts
    )
    return Corpus(
        pairs=pairs,
        vocabulary=tuple(f"w{i}" for i in range(vocab_size)),
        embed_dim=dim,
        word_seed=7,
    )


def default_corpus(seed=0):
    spec = GeneratorSpec(seed=seed)
    return generate_corpus(spec, FrozenEncoders.create(spec.embed_dim, seed=("enc", seed)))


# ---------------------------------------------------------------------------
# embed_texts


def test_identical_texts_embed_identically():
    corpus = tiny_corpus([[0, 1, 2], [0, 1, 2], [3, 3, 3], [1, 2, 0]])
    emb = embed_texts(corpus, target_dim=2)
    assert np.allclose(emb[0], emb[1])
    assert np.allclose(emb[0], emb[3])  # bag of words, order immaterial
    assert not np.allclose(emb[0], emb[2])


def test_full_rank_projection_preserves_distances():
    corpus = tiny_corpus([[i, (i + 1) % 5, (2 * i) % 5] for i in range(12)], dim=4)
    emb = embed_texts(corpus, target_dim=4)
    table = corpus.embedding_table()
    raw = np.stack([table[list(p.text)].mean(axis=0) for p in corpus.pairs])
    for i in range(len(corpus)):
        for j in range(i + 1, len(corpus)):
            d_raw = np.linalg.norm(raw[i] - raw[j])
            d_emb = np.linalg.norm(emb[i] - emb[j])
            assert abs(d_raw - d_emb) < 1e-9


def test_embed_requires_enough_rows():
    corpus = tiny_corpus([[0, 1], [1, 0]])
    with pytest.raises(ContractError):
        embed_texts(corpus, target_dim=3)


def test_planted_topics_separate_in_embedding_space():
    corpus = default_corpus()
    emb = embed_texts(corpus, target_dim=8)
    topics = np.array([p.truth_topic for p in corpus.pairs])
    centroids = np.stack([emb[topics == t].mean(axis=0) for t in range(5)])
    within = np.mean(
        [np.linalg.norm(e - centroids[t]) for e, t in zip(emb, topics)]
    )
    between = min(
        np.linalg.norm(centroids[i] - centroids[j])
        for i in range(5)
        for j in range(i + 1, 5)
    )
    assert between > within


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_single_cluster():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    res = kmeans(pts, 1, seed=0)
    assert set(res.labels) == {0}
    assert np.allclose(res.centers[0], pts.mean(axis=0))


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(3)
    spread = 0.1
    a = rng.normal(0.0, spread, size=(40, 4))
    b = rng.normal(0.0, spread, size=(40, 4)) + 10 * spread * 12
    pts = np.vstack([a, b])
    truth = np.array([0] * 40 + [1] * 40)
    res = kmeans(pts, 2, seed=5)
    # brute-force label matching over both permutations
    direct = np.mean(res.labels == truth)
    flipped = np.mean(res.labels == 1 - truth)
    assert max(direct, flipped) == 1.0


def test_kmeans_objective_nonincreasing():
    pts = np.random.default_rng(9).normal(size=(60, 5))
    res = kmeans(pts, 4, seed=1)
    hist = res.inertia_history
    assert all(hist[i + 1] <= hist[i] + 1e-9 for i in range(len(hist) - 1))


def test_kmeans_too_many_clusters():
    with pytest.raises(ContractError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_kmeans_deterministic():
    pts = np.random.default_rng(11).normal(size=(50, 4))
    r1 = kmeans(pts, 3, seed=42)
    r2 = kmeans(pts, 3, seed=42)
    assert np.array_equal(r1.labels, r2.labels)
    assert np.array_equal(r1.centers, r2.centers)


# ---------------------------------------------------------------------------
# TF-IDF


def naive_tfidf(cluster_texts, word):
    """Independent oracle: direct counting per the scoring definition."""
    n_clusters = len(cluster_texts)
    containing = sum(1 for words in cluster_texts if word in words)
    out = []
    for words in cluster_texts:
        tf = words.count(word) / len(words)
        out.append(tf * math.log(n_clusters / (containing + 1)))
    return out


def test_tfidf_hand_example():
    # three clusters with texts "apple apple pear" / "pear pear" / "plum"
    corpus = tiny_corpus([[0, 0, 1], [1, 1], [2]])
    scores = tfidf_scores([(0,), (1,), (2,)], corpus)
    expected = (2 / 3) * math.log(3 / 2)
    assert scores[0][0] == pytest.approx(expected, abs=1e-12)


def test_tfidf_single_cluster_negative_idf():
    corpus = tiny_corpus([[0, 1, 0]])
    scores = tfidf_scores([(0,)], corpus)
    assert all(v < 0 for v in scores[0].values())
    assert scores[0][0] == pytest.approx((2 / 3) * math.log(1 / 2), abs=1e-12)


def test_word_in_every_cluster_scores_negative():
    corpus = tiny_corpus([[0, 1], [0, 2], [0, 3]])
    scores = tfidf_scores([(0,), (1,), (2,)], corpus)
    for table in scores:
        assert table[0] < 0


def test_tfidf_matches_naive_counting_on_random_corpora():
    rng = np.random.default_rng(17)
    for trial in range(25):
        n_pairs = int(rng.integers(3, 10))
        vocab = int(rng.integers(2, 8))
        texts = [
            [int(w) for w in rng.integers(0, vocab, size=rng.integers(1, 7))]
            for _ in range(n_pairs)
        ]
        corpus = tiny_corpus(texts)
        n_clusters = int(rng.integers(1, n_pairs + 1))
        labels = rng.integers(0, n_clusters, size=n_pairs)
        labels[rng.permutation(n_pairs)[:n_clusters]] = np.arange(n_clusters)
        clusters = [tuple(np.flatnonzero(labels == c)) for c in range(n_clusters)]
        cluster_texts = [
            [w for m in members for w in corpus.pairs[m].text] for members in clusters
        ]
        scores = tfidf_scores(clusters, corpus)
        for w in range(vocab):
            expected = naive_tfidf(cluster_texts, w)
            for ci, words in enumerate(cluster_texts):
                if w in words:
                    assert scores[ci][w] == pytest.approx(expected[ci], abs=1e-12)
                else:
                    assert w not in scores[ci]


def test_pick_topic_words_singleton_and_ties():
    assert pick_topic_words([{4: 0.5}]) == [4]
    assert pick_topic_words([{7: 0.5, 2: 0.5}]) == [2]
    assert pick_topic_words([{7: 0.6, 2: 0.5}]) == [7]


def test_pick_topic_words_attains_maximum():
    corpus = default_corpus()
    members = cluster_topics(embed_texts(corpus, 8), 5, seed=3)
    scores = tfidf_scores(members, corpus)
    for word, table in zip(pick_topic_words(scores), scores):
        assert table[word] == max(table.values())


def test_topic_words_are_signature_words_on_planted_corpora():
    # each planted topic's caption mass concentrates on its signature words,
    # so the per-cluster argmax should recover one of them almost always
    spec = GeneratorSpec()
    hits = total = 0
    for seed in range(5):
        corpus = default_corpus(seed=seed)
        h = build_hierarchy(corpus, 5, 3, seed=seed)
        for cluster in h.clusters:
            total += 1
            truths = [corpus.pairs[m].truth_topic for m in cluster.members]
            majority = max(set(truths), key=truths.count)
            if cluster.topic_word in spec.signature_ids(majority):
                hits += 1
    assert hits / total >= 0.9


# ---------------------------------------------------------------------------
# domains


def test_domain_cluster_single_domain():
    corpus = default_corpus()
    members = list(range(10))
    labels = cluster_domains(members, corpus, 1, seed=0)
    assert labels == [0] * 10


def test_domain_cluster_partition_contract():
    corpus = default_corpus()
    members = [i for i, p in enumerate(corpus.pairs) if p.truth_topic == 0]
    labels = cluster_domains(members, corpus, 3, seed=1)
    assert len(labels) == len(members)
    assert set(labels) <= {0, 1, 2}


def test_domain_cluster_recovers_planted_domains():
    # strongly separated: offsets 10x the noise scale
    spec = GeneratorSpec(
        n_topics=1, n_domains=2, pairs_per_topic=60, domain_offset_scale=10.0, seed=4
    )
    corpus = generate_corpus(spec)
    members = list(range(len(corpus)))
    labels = np.array(cluster_domains(members, corpus, 2, seed=2))
    truth = np.array([p.truth_domain for p in corpus.pairs])
    purity = max(np.mean(labels == truth), np.mean(labels == 1 - truth))
    assert purity >= 0.95


def test_domain_cluster_too_many_groups():
    corpus = default_corpus()
    with pytest.raises(ContractError):
        cluster_domains([0, 1], corpus, 3, seed=0)


# ---------------------------------------------------------------------------
# full pipeline


def test_build_hierarchy_degenerate():
    spec = GeneratorSpec(n_topics=1, n_domains=1, pairs_per_topic=20, seed=5)
    corpus = generate_corpus(spec)
    h = build_hierarchy(corpus, k_topics=1, n_domains=1, seed=0)
    assert h.n_clusters == 1
    assert set(h.clusters[0].members) == set(range(20))
    assert set(h.clusters[0].domain_labels) == {0}


def test_build_hierarchy_partition_invariants():
    corpus = default_corpus()
    h = build_hierarchy(corpus, 5, 3, seed=9)
    assert h.covered_pairs() == set(range(len(corpus)))
    for c in h.clusters:
        groups = [c.domain_members(u) for u in range(3)]
        flat = [m for g in groups for m in g]
        assert sorted(flat) == sorted(c.members)


def test_build_hierarchy_deterministic():
    corpus = default_corpus()
    assert build_hierarchy(corpus, 5, 3, seed=13) == build_hierarchy(corpus, 5, 3, seed=13)


def test_build_hierarchy_recovers_planted_structure():
    corpus = default_corpus(seed=1)
    h = build_hierarchy(corpus, 5, 3, seed=1)
    assert topic_purity(h, corpus) >= 0.9
    assert domain_purity(h, corpus) >= 0.9


def test_estimator_front_end():
    corpus = default_corpus()
    est = CrossModalHierarchicalClustering(k_topics=5, n_domains=3, random_state=3)
    labels = est.fit_predict(corpus)
    assert labels.shape == (len(corpus),)
    assert set(labels) == set(range(5))
    assert len(est.topic_words_) == 5
    assert est.get_params()["k_topics"] == 5
    clone_params = CrossModalHierarchicalClustering(**est.get_params()).get_params()
    assert clone_params == est.get_params()
