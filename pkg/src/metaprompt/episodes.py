"""Synthetic corpus generation and meta-training episode sampling.

The generator plants ``n_topics`` image prototypes with guaranteed pairwise
separation, splits each topic into ``n_domains`` by adding a fixed offset
per domain, and writes short texts dominated by per-topic signature words.
Truth labels ride along so clustering quality is checkable.

When the frozen encoders are supplied, each topic's prototype direction is
anchored to the pullback of its first signature word's embedding through
the two encoder maps. That plays the role of contrastive pre-training: an
image of topic ``l`` lands near the text feature of word ``l``, so
classification by class name works out of the box and prompt learning has
signal to refine. ``prototype_alignment`` mixes in a random component to
keep zero-shot accuracy off the ceiling.

Episodes are K-way few-shot tasks over topic clusters. In ``domain_shift``
mode every class's support samples come from one randomly chosen domain
while query samples are drawn from the whole cluster, simulating a
train/test distribution shift inside each episode; ``uniform`` mode drops
the restriction (the ablation). Task ``t`` of a stream depends only on
(seed, t), so streams are reproducible and positions can be regenerated
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .clustering import Corpus, Hierarchy, Pair
from .encoders import FrozenEncoders, Sample, word_embedding_table
from .errors import ConfigError, ContractError, SamplingError
from .seeding import SeedPath, child_rng

DEFAULT_WORD_SEED = 1009

DOMAIN_SHIFT = "domain_shift"
UNIFORM = "uniform"
SHIFT_MODES = (DOMAIN_SHIFT, UNIFORM)


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic world; defaults are the package defaults."""

    n_topics: int = 5
    n_domains: int = 3
    pairs_per_topic: int = 120
    embed_dim: int = 16
    patches: int = 4
    vocab_size: int = 60
    signature_words_per_topic: int = 3
    common_words: int = 10
    text_length: int = 16
    topic_separation: float = 10.0
    domain_offset_scale: float = 5.0
    noise_scale: float = 1.0
    signature_mass: float = 0.8
    prototype_alignment: float = 0.7
    domain_confusion: float = 0.7
    seed: int = 0
    word_seed: int = DEFAULT_WORD_SEED

    def validate(self) -> None:
        counts = {
            "n_topics": self.n_topics,
            "n_domains": self.n_domains,
            "pairs_per_topic": self.pairs_per_topic,
            "embed_dim": self.embed_dim,
            "patches": self.patches,
            "vocab_size": self.vocab_size,
            "signature_words_per_topic": self.signature_words_per_topic,
            "text_length": self.text_length,
        }
        for name, v in counts.items():
            if v < 1:
                raise ConfigError(f"generator: {name} must be >= 1, got {v}")
        if self.common_words < 0:
            raise ConfigError("generator: common_words must be >= 0")
        reserved = self.n_topics * self.signature_words_per_topic + self.common_words
        if reserved > self.vocab_size:
            raise ConfigError(
                f"generator: {self.n_topics} topics x {self.signature_words_per_topic} "
                f"signature words + {self.common_words} common words exceed "
                f"vocab_size {self.vocab_size}"
            )
        if self.pairs_per_topic < self.n_domains:
            raise ConfigError("generator: pairs_per_topic must be >= n_domains")
        if self.topic_separation <= 0 or self.noise_scale <= 0 or self.domain_offset_scale <= 0:
            raise ConfigError("generator: separation, noise and offset scales must be > 0")
        if not 0.6 <= self.signature_mass <= 1.0:
            raise ConfigError("generator: signature_mass must be in [0.6, 1.0]")
        if not 0.0 < self.prototype_alignment <= 1.0:
            raise ConfigError("generator: prototype_alignment must be in (0, 1]")
        if not 0.0 <= self.domain_confusion <= 1.0:
            raise ConfigError("generator: domain_confusion must be in [0, 1]")

    def signature_ids(self, topic: int) -> list[int]:
        s = self.signature_words_per_topic
        return list(range(topic * s, (topic + 1) * s))

    def common_ids(self) -> list[int]:
        base = self.n_topics * self.signature_words_per_topic
        return list(range(base, base + self.common_words))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def topic_prototypes(spec: GeneratorSpec, encoders: FrozenEncoders | None) -> np.ndarray:
    """Planted image prototypes, minimum pairwise distance exactly
    ``topic_separation * noise_scale`` (larger for stray near-parallel draws)."""
    table = word_embedding_table(spec.vocab_size, spec.embed_dim, spec.word_seed)
    rng = child_rng(spec.seed, "prototypes")
    dirs = []
    for topic in range(spec.n_topics):
        anchor = table[spec.signature_ids(topic)[0]]
        if encoders is not None:
            anchor = encoders.image_map.T @ (encoders.text_map @ anchor)
        mix = spec.prototype_alignment * _unit(anchor)
        residual = math.sqrt(max(0.0, 1.0 - spec.prototype_alignment**2))
        mix = mix + residual * _unit(rng.normal(size=spec.embed_dim))
        dirs.append(_unit(mix))
    dirs = np.stack(dirs, axis=0)
    required = spec.topic_separation * spec.noise_scale
    if spec.n_topics == 1:
        return dirs * required
    gaps = [
        float(np.linalg.norm(dirs[i] - dirs[j]))
        for i in range(spec.n_topics)
        for j in range(i + 1, spec.n_topics)
    ]
    return dirs * (required / min(gaps))


def domain_offsets(spec: GeneratorSpec, encoders: FrozenEncoders | None) -> np.ndarray:
    """Per-(topic, domain) additive offsets of norm ``domain_offset_scale``.

    ``domain_confusion`` is the mixing weight of a component pointing along
    a *different* topic's signature-word direction (pulled back through the
    encoders like the prototypes). A domain therefore carries a spurious
    visual correlation with a wrong class, which single-domain support sets
    transmit into raw adaptation gradients; the remainder of the offset is
    an arbitrary random direction.
    """
    table = word_embedding_table(spec.vocab_size, spec.embed_dim, spec.word_seed)
    rng = child_rng(spec.seed, "offsets")
    out = np.zeros((spec.n_topics, spec.n_domains, spec.embed_dim))
    for topic in range(spec.n_topics):
        other_words = [
            w
            for other in range(spec.n_topics)
            if other != topic
            for w in spec.signature_ids(other)
        ]
        confuser_dirs: list[np.ndarray] = []
        if other_words and spec.domain_confusion > 0.0:
            # one wrong-class word per domain, distinct within the topic so
            # its domains stay separated from each other
            take = rng.choice(
                len(other_words),
                size=min(spec.n_domains, len(other_words)),
                replace=False,
            )
            for i in take:
                vec = table[other_words[int(i)]]
                if encoders is not None:
                    vec = encoders.image_map.T @ (encoders.text_map @ vec)
                confuser_dirs.append(_unit(vec))
        for domain in range(spec.n_domains):
            direction = _unit(rng.normal(size=spec.embed_dim))
            if confuser_dirs:
                direction = _unit(
                    spec.domain_confusion * confuser_dirs[domain % len(confuser_dirs)]
                    + (1.0 - spec.domain_confusion) * direction
                )
            out[topic, domain] = spec.domain_offset_scale * direction
    return out


def generate_corpus(spec: GeneratorSpec, encoders: FrozenEncoders | None = None) -> Corpus:
    """Deterministic planted corpus with truth topic/domain labels."""
    spec.validate()
    if encoders is not None and encoders.dim != spec.embed_dim:
        raise ConfigError(
            f"generator: encoders have dim {encoders.dim}, spec says {spec.embed_dim}"
        )
    prototypes = topic_prototypes(spec, encoders)
    offsets = domain_offsets(spec, encoders)
    rng_noise = child_rng(spec.seed, "patches")
    rng_text = child_rng(spec.seed, "texts")
    common = spec.common_ids()

    pairs: list[Pair] = []
    for topic in range(spec.n_topics):
        signatures = spec.signature_ids(topic)
        for j in range(spec.pairs_per_topic):
            domain = j % spec.n_domains
            center = prototypes[topic] + offsets[topic, domain]
            patches = center + spec.noise_scale * rng_noise.normal(
                size=(spec.patches, spec.embed_dim)
            )
            words = []
            for _ in range(spec.text_length):
                if common and rng_text.random() >= spec.signature_mass:
                    words.append(common[rng_text.integers(len(common))])
                else:
                    words.append(signatures[rng_text.integers(len(signatures))])
            pairs.append(
                Pair(
                    text=tuple(words),
                    patch_features=patches,
                    truth_topic=topic,
                    truth_domain=domain,
                )
            )
    vocabulary = tuple(f"w{i:03d}" for i in range(spec.vocab_size))
    return Corpus(
        pairs=tuple(pairs),
        vocabulary=vocabulary,
        embed_dim=spec.embed_dim,
        word_seed=spec.word_seed,
    )


# ---------------------------------------------------------------------------
# episode sampling


@dataclass(frozen=True)
class EpisodeConfig:
    k_way: int = 2
    n_support: int = 16
    n_query: int = 15
    shift_mode: str = DOMAIN_SHIFT

    def validate(self) -> None:
        if self.k_way < 1 or self.n_support < 1 or self.n_query < 1:
            raise ConfigError("episodes: k_way, n_support and n_query must be >= 1")
        if self.shift_mode not in SHIFT_MODES:
            raise ConfigError(f"episodes: shift_mode must be one of {SHIFT_MODES}")


@dataclass(frozen=True)
class MetaTask:
    """One K-way episode over topic clusters.

    ``support_domain[k]`` is the single domain class ``k``'s support was
    drawn from (-1 in uniform mode where no restriction applies). Samples
    carry the class index as label and their hierarchy domain as tag.
    """

    cluster_ids: tuple[int, ...]
    word_ids: tuple[int, ...]
    class_names: tuple[str, ...]
    support: tuple[Sample, ...]
    query: tuple[Sample, ...]
    support_domain: tuple[int, ...]
    support_pair_ids: tuple[int, ...]
    query_pair_ids: tuple[int, ...]

    def __post_init__(self):
        k = len(self.cluster_ids)
        if len(set(self.word_ids)) != k:
            raise ContractError("task classes must have distinct topic words")
        if set(self.support_pair_ids) & set(self.query_pair_ids):
            raise ContractError("support and query share pair ids")
        for group in (self.support, self.query):
            for s in group:
                if not 0 <= s.label < k:
                    raise ContractError(f"sample label {s.label} outside task classes")

    @property
    def k_way(self) -> int:
        return len(self.cluster_ids)


def _eligible_domains(cluster, n_domains: int, n_support: int) -> list[int]:
    return [
        u for u in range(n_domains) if len(cluster.domain_members(u)) >= n_support
    ]


def _cluster_eligible(cluster, n_domains: int, cfg: EpisodeConfig) -> bool:
    if len(cluster.members) < cfg.n_support + cfg.n_query:
        return False
    if cfg.shift_mode == UNIFORM:
        return True
    return bool(_eligible_domains(cluster, n_domains, cfg.n_support))


def sample_task(
    hierarchy: Hierarchy,
    corpus: Corpus,
    cfg: EpisodeConfig,
    seed: SeedPath,
    allowed_clusters: Sequence[int] | None = None,
) -> MetaTask:
    """Draw one episode; a pure function of (hierarchy, corpus, cfg, seed)."""
    cfg.validate()
    candidates = (
        list(range(hierarchy.n_clusters)) if allowed_clusters is None else list(allowed_clusters)
    )
    eligible = [
        ci
        for ci in candidates
        if _cluster_eligible(hierarchy.clusters[ci], hierarchy.n_domains, cfg)
    ]
    rejected = sorted(set(candidates) - set(eligible))
    rng_classes = child_rng(seed, "classes")
    order = [eligible[i] for i in rng_classes.permutation(len(eligible))]
    chosen: list[int] = []
    used_words: set[int] = set()
    for ci in order:
        word = hierarchy.clusters[ci].topic_word
        if word in used_words:
            continue
        chosen.append(ci)
        used_words.add(word)
        if len(chosen) == cfg.k_way:
            break
    if len(chosen) < cfg.k_way:
        detail = f"; clusters {rejected} cannot host {cfg.n_support}+{cfg.n_query} samples" if rejected else ""
        raise SamplingError(
            f"cannot sample {cfg.k_way} classes with distinct topic words from "
            f"{len(eligible)} eligible clusters{detail}"
        )

    support: list[Sample] = []
    query: list[Sample] = []
    support_ids: list[int] = []
    query_ids: list[int] = []
    support_domains: list[int] = []
    for k, ci in enumerate(chosen):
        cluster = hierarchy.clusters[ci]
        domain_of = dict(zip(cluster.members, cluster.domain_labels))
        if cfg.shift_mode == DOMAIN_SHIFT:
            options = _eligible_domains(cluster, hierarchy.n_domains, cfg.n_support)
            rng_domain = child_rng(seed, "domain", k)
            picked_domain = options[int(rng_domain.integers(len(options)))]
            pool = list(cluster.domain_members(picked_domain))
        else:
            picked_domain = -1
            pool = list(cluster.members)
        rng_support = child_rng(seed, "support", k)
        take = rng_support.choice(len(pool), size=cfg.n_support, replace=False)
        class_support = [pool[int(i)] for i in take]
        taken = set(class_support)
        remaining = [m for m in cluster.members if m not in taken]
        if len(remaining) < cfg.n_query:
            raise SamplingError(
                f"cluster {ci} has only {len(remaining)} pairs left for {cfg.n_query} queries"
            )
        rng_query = child_rng(seed, "query", k)
        take_q = rng_query.choice(len(remaining), size=cfg.n_query, replace=False)
        class_query = [remaining[int(i)] for i in take_q]

        support_domains.append(picked_domain)
        for m in class_support:
            support.append(
                Sample(corpus.pairs[m].patch_features, label=k, domain_tag=domain_of[m])
            )
            support_ids.append(m)
        for m in class_query:
            query.append(
                Sample(corpus.pairs[m].patch_features, label=k, domain_tag=domain_of[m])
            )
            query_ids.append(m)

    word_ids = tuple(hierarchy.clusters[ci].topic_word for ci in chosen)
    return MetaTask(
        cluster_ids=tuple(chosen),
        word_ids=word_ids,
        class_names=tuple(corpus.vocabulary[w] for w in word_ids),
        support=tuple(support),
        query=tuple(query),
        support_domain=tuple(support_domains),
        support_pair_ids=tuple(support_ids),
        query_pair_ids=tuple(query_ids),
    )


def task_stream(
    hierarchy: Hierarchy,
    corpus: Corpus,
    cfg: EpisodeConfig,
    seed: SeedPath,
    count: int,
    allowed_clusters: Sequence[int] | None = None,
) -> Iterator[MetaTask]:
    """Reproducible episode sequence; task ``t`` depends only on (seed, t)."""
    if count < 0:
        raise ContractError("task_stream: count must be >= 0")
    for t in range(count):
        yield sample_task(hierarchy, corpus, cfg, (seed, "task", t), allowed_clusters)
