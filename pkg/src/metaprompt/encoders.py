"""A frozen synthetic bi-encoder with learnable soft prompts.

This is a desk-scale stand-in for a contrastively pre-trained image-text
model: both encoders mean-pool their token sequence, apply a fixed seeded
orthogonal map, and L2-normalize, so features live on the unit sphere and
classification reduces to temperature-scaled cosine softmax. The encoder
maps and the class-word embeddings are constants on the autodiff tape; only
the prompt vectors are registered as parameters, so gradients flow to the
prompts and nowhere else.

Text side: the token sequence for class ``i`` is the learnable prompt
columns followed by the class word embedding. Image side: learnable visual
prompt columns are prepended to the sample's patch features. With
mean-pooling the ordering is immaterial, but it is preserved so a future
order-sensitive encoder slots in without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, ShapeError
from .seeding import SeedPath, child_rng

Array = np.ndarray

DEFAULT_TAU = 0.07
DEFAULT_WORD_SEED = 1009

# Columns of a zero-width block are meaningless; treat anything smaller than
# this pre-normalization norm as a degenerate embedding.
_DEGENERATE_NORM = 1e-12


def word_embedding_table(vocab_size: int, dim: int, seed: SeedPath = DEFAULT_WORD_SEED) -> Array:
    """Fixed seeded word embeddings, one row per word id, roughly unit norm."""
    if vocab_size < 1 or dim < 1:
        raise ContractError("word_embedding_table: vocab_size and dim must be >= 1")
    rng = child_rng(seed, "word-embeddings")
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim))


def _orthogonal(rng: np.random.Generator, dim: int) -> Array:
    a = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class FrozenEncoders:
    """Fixed text/image maps and softmax temperature; never trained."""

    text_map: Array
    image_map: Array
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        for name, m in (("text_map", self.text_map), ("image_map", self.image_map)):
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"{name} must be square, got {m.shape}")
            if m.shape != self.text_map.shape:
                raise ShapeError("text_map and image_map dimensions differ")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")

    @property
    def dim(self) -> int:
        return self.text_map.shape[0]

    @classmethod
    def create(cls, dim: int, seed: SeedPath, tau: float = DEFAULT_TAU) -> "FrozenEncoders":
        """Seeded orthogonal initialization of both maps."""
        return cls(
            text_map=_orthogonal(child_rng(seed, "text-map"), dim),
            image_map=_orthogonal(child_rng(seed, "image-map"), dim),
            tau=tau,
        )


@dataclass(frozen=True)
class ClassVocabulary:
    """Class id -> (name, word embedding); ids are dense from 0."""

    names: tuple[str, ...]
    embeddings: Array  # (n_classes, dim)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.names) != self.embeddings.shape[0]:
            raise ShapeError(
                f"vocabulary needs one embedding row per name: "
                f"{len(self.names)} names, embeddings {self.embeddings.shape}"
            )
        if len(self.names) == 0:
            raise ContractError("vocabulary must not be empty")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def embedding(self, class_id: int) -> Array:
        if not 0 <= class_id < len(self.names):
            raise KeyError(f"unknown class id {class_id} (have {len(self.names)} classes)")
        return self.embeddings[class_id]

    @classmethod
    def from_word_ids(
        cls, word_ids: Sequence[int], words: Sequence[str], table: Array
    ) -> "ClassVocabulary":
        """Vocabulary whose class names are corpus words, embedded via ``table``."""
        ids = list(word_ids)
        return cls(
            names=tuple(words[i] for i in ids),
            embeddings=np.stack([table[i] for i in ids], axis=0),
        )


@dataclass(frozen=True)
class PromptState:
    """Learnable prompt vectors: textual (d, M) and visual (d, M_v) columns."""

    textual: Array
    visual: Array

    def __post_init__(self):
        for name, block in (("textual", self.textual), ("visual", self.visual)):
            if block.ndim != 2:
                raise ShapeError(f"{name} prompts must be a (dim, count) matrix, got {block.shape}")
            if not np.all(np.isfinite(block)):
                raise ContractError(f"{name} prompts contain non-finite values")
        if self.textual.shape[0] != self.visual.shape[0]:
            raise ShapeError(
                f"prompt blocks disagree on dim: {self.textual.shape} vs {self.visual.shape}"
            )
        if self.n_text + self.n_visual < 1:
            raise ContractError("need at least one prompt vector across both blocks")

    @property
    def dim(self) -> int:
        return self.textual.shape[0]

    @property
    def n_text(self) -> int:
        return self.textual.shape[1]

    @property
    def n_visual(self) -> int:
        return self.visual.shape[1]

    @classmethod
    def init_random(
        cls, dim: int, n_text: int, n_visual: int, seed: SeedPath, std: float = 0.02
    ) -> "PromptState":
        rng = child_rng(seed, "prompt-init")
        return cls(
            textual=rng.normal(0.0, std, size=(dim, n_text)),
            visual=rng.normal(0.0, std, size=(dim, n_visual)),
        )


@dataclass(frozen=True)
class Sample:
    """One image: P patch feature vectors plus its label and domain tag."""

    patch_features: Array  # (P, dim)
    label: int
    domain_tag: int = 0

    def __post_init__(self):
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] < 1:
            raise ShapeError(
                f"patch_features must be (P >= 1, dim), got {self.patch_features.shape}"
            )


# ---------------------------------------------------------------------------
# graph construction

# Prompts enter loss graphs as named blocks; "textual"/"visual" keys, each a
# (d, count) node. A PromptState is promoted to fresh parameter leaves.
PromptNodes = Mapping[str, Node]
Prompts = Union[PromptState, PromptNodes]


def prompt_leaves(prompts: PromptState) -> dict[str, Node]:
    """Fresh parameter leaves for each non-empty prompt block."""
    leaves: dict[str, Node] = {}
    if prompts.n_text:
        leaves["textual"] = ad.parameter(prompts.textual, name="textual")
    if prompts.n_visual:
        leaves["visual"] = ad.parameter(prompts.visual, name="visual")
    return leaves


def prompts_from_nodes(nodes: PromptNodes, dim: int) -> PromptState:
    """Collapse prompt nodes back to a plain value object."""
    empty = np.zeros((dim, 0))
    textual = nodes["textual"].value if "textual" in nodes else empty
    visual = nodes["visual"].value if "visual" in nodes else empty
    return PromptState(textual=np.array(textual), visual=np.array(visual))


def _as_prompt_nodes(prompts: Prompts) -> PromptNodes:
    if isinstance(prompts, PromptState):
        return prompt_leaves(prompts)
    return prompts


def normalize_columns(z: Node) -> Node:
    """L2-normalize each column; rejects degenerate (near-zero) columns."""
    norms = ad.sqrt(ad.sum_rows(ad.mul(z, z)))
    if np.any(norms.value < _DEGENERATE_NORM):
        raise ContractError("degenerate embedding: zero vector before normalization")
    return ad.div(z, ad.replicate(norms, z.shape))


def build_prompt(prompts: Prompts, vocab: ClassVocabulary, class_id: int) -> list[Node]:
    """Token sequence for one class: prompt columns then the class embedding."""
    nodes = _as_prompt_nodes(prompts)
    tokens: list[Node] = []
    if "textual" in nodes:
        block = nodes["textual"]
        tokens.extend(ad.slice_cols(block, j, j + 1) for j in range(block.shape[1]))
    tokens.append(ad.constant(vocab.embedding(class_id).reshape(-1, 1), name="class-word"))
    return tokens


def encode_text(tokens: Sequence[Node], encoders: FrozenEncoders) -> Node:
    """Mean-pool a token sequence, apply the text map, L2-normalize."""
    if not tokens:
        raise ContractError("encode_text: empty token sequence")
    total = tokens[0]
    for tok in tokens[1:]:
        total = ad.add(total, tok)
    pooled = ad.scale(total, 1.0 / len(tokens))
    return normalize_columns(ad.matmul(ad.constant(encoders.text_map), pooled))


def encode_image(sample: Sample, prompts: Prompts, encoders: FrozenEncoders) -> Node:
    """Mean-pool visual prompts plus patches, apply the image map, normalize."""
    return image_features([sample], prompts, encoders)


def text_features(prompts: Prompts, vocab: ClassVocabulary, encoders: FrozenEncoders) -> Node:
    """Unit text feature per class, as columns of a (d, n_classes) node.

    Column ``i`` equals ``encode_text(build_prompt(..., i))``: pooling the
    M prompt columns with the class word is the same as adding the summed
    prompt block to each class embedding and dividing by M + 1.
    """
    nodes = _as_prompt_nodes(prompts)
    class_mat = ad.constant(vocab.embeddings.T, name="class-words")
    if "textual" in nodes:
        block = nodes["textual"]
        summed = ad.replicate(ad.sum_cols(block), (block.shape[0], len(vocab)))
        pooled = ad.scale(ad.add(summed, class_mat), 1.0 / (block.shape[1] + 1))
    else:
        pooled = class_mat
    return normalize_columns(ad.matmul(ad.constant(encoders.text_map), pooled))


def image_features(samples: Sequence[Sample], prompts: Prompts, encoders: FrozenEncoders) -> Node:
    """Unit image feature per sample, as columns of a (d, n_samples) node."""
    if not samples:
        raise ContractError("image_features: empty sample list")
    nodes = _as_prompt_nodes(prompts)
    dim = encoders.dim
    patch_sums = np.stack([s.patch_features.sum(axis=0) for s in samples], axis=1)
    if patch_sums.shape[0] != dim:
        raise ShapeError(
            f"patch features have dim {patch_sums.shape[0]}, encoders expect {dim}"
        )
    counts = np.array([s.patch_features.shape[0] for s in samples], dtype=np.float64)
    if "visual" in nodes:
        block = nodes["visual"]
        counts = counts + block.shape[1]
        inv = ad.constant(np.tile(1.0 / counts, (dim, 1)))
        summed = ad.add(ad.replicate(ad.sum_cols(block), patch_sums.shape), ad.constant(patch_sums))
        pooled = ad.mul(summed, inv)
    else:
        pooled = ad.constant(patch_sums / counts)
    return normalize_columns(ad.matmul(ad.constant(encoders.image_map), pooled))


def softmax_columns(logits: Node) -> Node:
    """Column-wise softmax. The max-shift is a detached constant, which is
    exact: softmax is invariant to adding a constant to a column."""
    shift = ad.constant(np.max(logits.value, axis=0, keepdims=True))
    z = ad.sub(logits, ad.replicate(shift, logits.shape))
    e = ad.exp(z)
    return ad.div(e, ad.replicate(ad.sum_rows(e), e.shape))


def class_logits(
    samples: Sequence[Sample],
    prompts: Prompts,
    vocab: ClassVocabulary,
    encoders: FrozenEncoders,
) -> Node:
    """Cosine similarities / tau, classes by rows, samples by columns."""
    nodes = _as_prompt_nodes(prompts)
    t_feats = text_features(nodes, vocab, encoders)
    i_feats = image_features(samples, nodes, encoders)
    return ad.scale(ad.matmul(ad.transpose(t_feats), i_feats), 1.0 / encoders.tau)


def class_probs(
    sample: Sample,
    prompts: Prompts,
    vocab: ClassVocabulary,
    encoders: FrozenEncoders,
) -> Node:
    """Class probability column for one sample; positive, sums to one."""
    return softmax_columns(class_logits([sample], prompts, vocab, encoders))


def cross_entropy(
    samples: Sequence[Sample],
    prompts: Prompts,
    vocab: ClassVocabulary,
    encoders: FrozenEncoders,
) -> Node:
    """Mean negative log-probability of the labels over the batch."""
    if not samples:
        raise ContractError("cross_entropy: empty batch")
    n_classes = len(vocab)
    for i, s in enumerate(samples):
        if not 0 <= s.label < n_classes:
            raise ContractError(
                f"cross_entropy: sample {i} has label {s.label}, vocabulary has {n_classes}"
            )
    logits = class_logits(samples, prompts, vocab, encoders)
    shift = ad.constant(np.max(logits.value, axis=0, keepdims=True))
    z = ad.sub(logits, ad.replicate(shift, logits.shape))
    log_norm = ad.log(ad.sum_rows(ad.exp(z)))
    onehot = np.zeros(logits.shape)
    for col, s in enumerate(samples):
        onehot[s.label, col] = 1.0
    picked = ad.sum_rows(ad.mul(ad.constant(onehot), z))
    return ad.mean(ad.sub(log_norm, picked))


def predict_labels(
    samples: Sequence[Sample],
    prompts: PromptState,
    vocab: ClassVocabulary,
    encoders: FrozenEncoders,
) -> np.ndarray:
    """Argmax class per sample (forward values only, no gradients kept)."""
    logits = class_logits(samples, prompt_leaves(prompts), vocab, encoders)
    return np.argmax(logits.value, axis=0)


def accuracy(
    samples: Sequence[Sample],
    prompts: PromptState,
    vocab: ClassVocabulary,
    encoders: FrozenEncoders,
) -> float:
    """Fraction of samples whose argmax class matches their label."""
    if not samples:
        raise ContractError("accuracy: empty sample list")
    predicted = predict_labels(samples, prompts, vocab, encoders)
    labels = np.array([s.label for s in samples])
    return float(np.mean(predicted == labels))
