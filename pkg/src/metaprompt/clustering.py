"""Two-stage clustering of image-text pairs: semantic topics, then domains.

Pairs are first grouped by their text (mean word embedding, principal
component projection, k-means), each group is labeled with the word that
maximizes a cluster-wise TF-IDF score over the group's concatenated text,
and finally each group is partitioned by k-means on its pooled image patch
features into visual domains. The resulting :class:`Hierarchy` drives
episode sampling.

Everything here is a deterministic pure function of (inputs, seed); the
k-means implementation converges on stable assignments with a fixed
iteration cap so reruns are byte-identical.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .encoders import word_embedding_table
from .errors import ContractError, ShapeError
from .seeding import SeedPath, child_rng

Array = np.ndarray

KMEANS_MAX_ITER = 100


# ---------------------------------------------------------------------------
# corpus types


@dataclass(frozen=True)
class Pair:
    """One image-text pair; truth labels are present for generated corpora."""

    text: tuple[int, ...]
    patch_features: Array  # (P, dim)
    truth_topic: int | None = None
    truth_domain: int | None = None


@dataclass(frozen=True)
class Corpus:
    """A list of pairs plus the word list and embedding-table coordinates."""

    pairs: tuple[Pair, ...]
    vocabulary: tuple[str, ...]
    embed_dim: int
    word_seed: int

    def __post_init__(self):
        for i, pair in enumerate(self.pairs):
            if any(not 0 <= w < len(self.vocabulary) for w in pair.text):
                raise ContractError(f"pair {i} references a word id outside the vocabulary")
            if pair.patch_features.shape[1] != self.embed_dim:
                raise ShapeError(
                    f"pair {i} patch dim {pair.patch_features.shape[1]} != {self.embed_dim}"
                )

    def __len__(self) -> int:
        return len(self.pairs)

    def embedding_table(self) -> Array:
        return word_embedding_table(len(self.vocabulary), self.embed_dim, self.word_seed)

    def pooled_patches(self, indices: Iterable[int] | None = None) -> Array:
        """Mean patch feature per pair, rows aligned with ``indices``."""
        idx = range(len(self.pairs)) if indices is None else indices
        return np.stack([self.pairs[i].patch_features.mean(axis=0) for i in idx], axis=0)

    def has_truth(self) -> bool:
        return all(p.truth_topic is not None and p.truth_domain is not None for p in self.pairs)


# ---------------------------------------------------------------------------
# hierarchy types


@dataclass(frozen=True)
class TopicCluster:
    """Members of one semantic topic with its label word and domain split."""

    members: tuple[int, ...]
    topic_word: int
    topic_score: float
    domain_labels: tuple[int, ...]  # parallel to members

    def __post_init__(self):
        if not self.members:
            raise ContractError("topic cluster must have at least one member")
        if len(self.domain_labels) != len(self.members):
            raise ContractError("one domain label required per member")

    def domain_members(self, domain: int) -> tuple[int, ...]:
        return tuple(m for m, d in zip(self.members, self.domain_labels) if d == domain)


@dataclass(frozen=True)
class Hierarchy:
    """Topic clusters, each partitioned into ``n_domains`` visual domains."""

    clusters: tuple[TopicCluster, ...]
    n_domains: int

    def __post_init__(self):
        seen: set[int] = set()
        for c in self.clusters:
            overlap = seen.intersection(c.members)
            if overlap:
                raise ContractError(f"clusters overlap on pair ids {sorted(overlap)[:5]}")
            seen.update(c.members)
            if any(not 0 <= d < self.n_domains for d in c.domain_labels):
                raise ContractError("domain label outside [0, n_domains)")

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def topic_words(self) -> tuple[int, ...]:
        return tuple(c.topic_word for c in self.clusters)

    def covered_pairs(self) -> set[int]:
        out: set[int] = set()
        for c in self.clusters:
            out.update(c.members)
        return out

    def drop_members(self, excluded: set[int]) -> "Hierarchy":
        """Copy with the given pair ids removed (for hold-out protocols)."""
        kept = []
        for c in self.clusters:
            pairs = [(m, d) for m, d in zip(c.members, c.domain_labels) if m not in excluded]
            if not pairs:
                continue
            members, domains = zip(*pairs)
            kept.append(replace(c, members=members, domain_labels=domains))
        return Hierarchy(clusters=tuple(kept), n_domains=self.n_domains)


# ---------------------------------------------------------------------------
# text embedding and reduction


def embed_texts(corpus: Corpus, target_dim: int) -> Array:
    """Mean word embedding per pair, projected onto principal components.

    The projection is fitted on the corpus itself. At ``target_dim ==
    embed_dim`` it is a pure rotation, so distances are preserved exactly.
    """
    n = len(corpus)
    if n == 0:
        raise ContractError("embed_texts: empty corpus")
    if target_dim < 1 or target_dim > corpus.embed_dim:
        raise ContractError(
            f"embed_texts: target_dim must be in [1, {corpus.embed_dim}], got {target_dim}"
        )
    if n < target_dim:
        raise ContractError(
            f"embed_texts: corpus of {n} pairs cannot support a {target_dim}-dim projection"
        )
    table = corpus.embedding_table()
    rows = []
    for i, pair in enumerate(corpus.pairs):
        if not pair.text:
            raise ContractError(f"embed_texts: pair {i} has empty text")
        rows.append(table[list(pair.text)].mean(axis=0))
    x = np.stack(rows, axis=0)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    components = vt[:target_dim]
    # deterministic sign convention: largest-magnitude coefficient positive
    for row in components:
        lead = row[np.argmax(np.abs(row))]
        if lead < 0:
            row *= -1.0
    return centered @ components.T


# ---------------------------------------------------------------------------
# k-means


@dataclass(frozen=True)
class KMeansResult:
    labels: Array  # (n,) int
    centers: Array  # (k, dim)
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...]


def _plus_plus_init(points: Array, k: int, rng: np.random.Generator) -> Array:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = points[idx]
        closest = np.minimum(closest, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def kmeans(
    points: Array,
    k: int,
    seed: SeedPath,
    max_iter: int = KMEANS_MAX_ITER,
    n_init: int = 10,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and best-of-``n_init`` restarts.

    Each restart converges when the assignment stops changing (capped at
    ``max_iter``); the run with the lowest final inertia wins, ties going to
    the earliest restart. Empty clusters are re-seeded with the point
    farthest from its current center, chosen deterministically, so results
    depend only on (points, k, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans: points must be 2-d, got {points.shape}")
    n = points.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"kmeans: k must be in [1, {n}], got {k}")
    if n_init < 1:
        raise ContractError(f"kmeans: n_init must be >= 1, got {n_init}")

    best: KMeansResult | None = None
    for restart in range(n_init):
        run = _kmeans_once(points, k, (seed, "init", restart), max_iter)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _kmeans_once(points: Array, k: int, seed: SeedPath, max_iter: int) -> KMeansResult:
    n = points.shape[0]
    rng = child_rng(seed, "kmeans")
    centers = _plus_plus_init(points, k, rng)
    labels = np.full(n, -1, dtype=int)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dist, axis=1)
        for j in range(k):
            mask = new_labels == j
            if np.any(mask):
                centers[j] = points[mask].mean(axis=0)
            else:
                assigned = dist[np.arange(n), new_labels]
                far = int(np.argmax(assigned))
                centers[j] = points[far]
                new_labels[far] = j
        history.append(float(np.sum((points - centers[new_labels]) ** 2)))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = history[-1]
    return KMeansResult(labels, centers, inertia, n_iter, tuple(history))


def cluster_topics(embeddings: Array, k: int, seed: SeedPath) -> list[tuple[int, ...]]:
    """k-means over reduced text embeddings; one member tuple per cluster."""
    result = kmeans(embeddings, k, seed)
    return [
        tuple(int(i) for i in np.flatnonzero(result.labels == j)) for j in range(k)
    ]


# ---------------------------------------------------------------------------
# cluster-wise TF-IDF


def tfidf_scores(
    clusters: Sequence[Sequence[int]], corpus: Corpus
) -> list[dict[int, float]]:
    """Importance of each word to each cluster.

    Treats a cluster's concatenated texts as one document: the score for
    word ``w`` in cluster ``l`` is ``(N_wl / N_l) * ln(L / (L_w + 1))``
    with ``N_wl`` occurrences of ``w`` in the cluster, ``N_l`` total words
    in the cluster, ``L`` the cluster count and ``L_w`` the number of
    clusters containing ``w``. Only words that occur in a cluster get an
    entry there.
    """
    counts: list[Counter] = []
    for ci, members in enumerate(clusters):
        c = Counter()
        for m in members:
            c.update(corpus.pairs[m].text)
        if not c:
            raise ContractError(f"tfidf_scores: cluster {ci} has no text")
        counts.append(c)
    n_clusters = len(clusters)
    clusters_with_word = Counter()
    for c in counts:
        clusters_with_word.update(c.keys())
    scores: list[dict[int, float]] = []
    for c in counts:
        total = sum(c.values())
        scores.append(
            {
                w: (n / total) * math.log(n_clusters / (clusters_with_word[w] + 1))
                for w, n in c.items()
            }
        )
    return scores


def pick_topic_words(scores: Sequence[dict[int, float]]) -> list[int]:
    """Argmax word per cluster; exact ties go to the smaller word id."""
    picked = []
    for i, table in enumerate(scores):
        if not table:
            raise ContractError(f"pick_topic_words: cluster {i} has no scored words")
        picked.append(min(table, key=lambda w: (-table[w], w)))
    return picked


# ---------------------------------------------------------------------------
# visual domains and the full pipeline


def cluster_domains(
    members: Sequence[int], corpus: Corpus, n_domains: int, seed: SeedPath
) -> list[int]:
    """k-means over mean-pooled patch features of the given pairs."""
    if n_domains < 1 or n_domains > len(members):
        raise ContractError(
            f"cluster_domains: need 1 <= n_domains <= {len(members)}, got {n_domains}"
        )
    pooled = corpus.pooled_patches(members)
    return [int(v) for v in kmeans(pooled, n_domains, seed).labels]


def build_hierarchy(
    corpus: Corpus,
    k_topics: int,
    n_domains: int,
    seed: SeedPath,
    target_dim: int | None = None,
) -> Hierarchy:
    """Full pipeline: embed, topic-cluster, label topics, split domains."""
    if target_dim is None:
        target_dim = min(corpus.embed_dim, 8)
    embeddings = embed_texts(corpus, target_dim)
    members_per_cluster = cluster_topics(embeddings, k_topics, (seed, "topics"))
    scores = tfidf_scores(members_per_cluster, corpus)
    words = pick_topic_words(scores)
    clusters = []
    for idx, members in enumerate(members_per_cluster):
        domains = cluster_domains(members, corpus, n_domains, (seed, "domains", idx))
        clusters.append(
            TopicCluster(
                members=tuple(members),
                topic_word=words[idx],
                topic_score=scores[idx][words[idx]],
                domain_labels=tuple(domains),
            )
        )
    hierarchy = Hierarchy(clusters=tuple(clusters), n_domains=n_domains)
    if hierarchy.covered_pairs() != set(range(len(corpus))):
        raise ContractError("hierarchy does not cover the corpus")  # pragma: no cover
    return hierarchy


# ---------------------------------------------------------------------------
# agreement with generator truth


def topic_purity(hierarchy: Hierarchy, corpus: Corpus) -> float:
    """Fraction of pairs in the majority truth topic of their cluster."""
    agree = 0
    total = 0
    for c in hierarchy.clusters:
        truth = Counter(corpus.pairs[m].truth_topic for m in c.members)
        agree += truth.most_common(1)[0][1]
        total += len(c.members)
    return agree / total


def domain_purity(hierarchy: Hierarchy, corpus: Corpus) -> float:
    """Within-cluster domain agreement with the generator's truth domains."""
    agree = 0
    total = 0
    for c in hierarchy.clusters:
        for u in range(hierarchy.n_domains):
            group = c.domain_members(u)
            if not group:
                continue
            truth = Counter(corpus.pairs[m].truth_domain for m in group)
            agree += truth.most_common(1)[0][1]
            total += len(group)
    return agree / total


# ---------------------------------------------------------------------------
# estimator front end


class CrossModalHierarchicalClustering(BaseEstimator):
    """Estimator wrapper over :func:`build_hierarchy`.

    Parameters mirror the pipeline; after ``fit(corpus)`` the fitted
    structure is exposed sklearn-style: ``hierarchy_``, per-pair topic
    ``labels_``, per-pair ``domain_labels_`` and ``topic_words_``.
    """

    def __init__(self, k_topics=5, n_domains=3, target_dim=8, random_state=0):
        self.k_topics = k_topics
        self.n_domains = n_domains
        self.target_dim = target_dim
        self.random_state = random_state

    def fit(self, X: Corpus, y=None):
        hierarchy = build_hierarchy(
            X, self.k_topics, self.n_domains, self.random_state, self.target_dim
        )
        labels = np.full(len(X), -1, dtype=int)
        domains = np.full(len(X), -1, dtype=int)
        for ci, cluster in enumerate(hierarchy.clusters):
            for m, d in zip(cluster.members, cluster.domain_labels):
                labels[m] = ci
                domains[m] = d
        self.hierarchy_ = hierarchy
        self.labels_ = labels
        self.domain_labels_ = domains
        self.topic_words_ = [X.vocabulary[w] for w in hierarchy.topic_words()]
        return self

    def fit_predict(self, X: Corpus, y=None) -> np.ndarray:
        return self.fit(X).labels_
