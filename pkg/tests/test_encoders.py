"""Tests for the frozen bi-encoder and prompt-conditioned losses."""

import numpy as np
import pytest

from metaprompt import autodiff as ad
from metaprompt import encoders as enc
from metaprompt.errors import ContractError, ShapeError
from metaprompt.gradcheck import central_difference, relative_error


def make_vocab(n_classes=3, dim=8, seed=0):
    table = enc.word_embedding_table(vocab_size=10, dim=dim, seed=seed)
    return enc.ClassVocabulary.from_word_ids(
        range(n_classes), [f"w{i}" for i in range(10)], table
    )


def make_sample(dim=8, patches=4, label=0, seed=1, domain=0):
    rng = np.random.default_rng(seed)
    return enc.Sample(rng.normal(size=(patches, dim)), label=label, domain_tag=domain)


def make_prompts(dim=8, n_text=2, n_visual=2, seed=2):
    return enc.PromptState.init_random(dim, n_text, n_visual, seed=seed, std=0.5)


def identity_encoders(dim=8, tau=1.0):
    return enc.FrozenEncoders(np.eye(dim), np.eye(dim), tau=tau)


def test_build_prompt_empty_prompt_is_class_embedding_alone():
    vocab = make_vocab()
    prompts = enc.PromptState(np.zeros((8, 0)), np.ones((8, 2)))
    seq = enc.build_prompt(prompts, vocab, 1)
    assert len(seq) == 1
    assert np.allclose(seq[0].value.reshape(-1), vocab.embedding(1))


def test_build_prompt_four_tokens_class_last():
    vocab = make_vocab()
    prompts = make_prompts(n_text=4, n_visual=0)
    seq = enc.build_prompt(prompts, vocab, 2)
    assert len(seq) == 5
    assert np.allclose(seq[-1].value.reshape(-1), vocab.embedding(2))
    for j in range(4):
        assert np.allclose(seq[j].value.reshape(-1), prompts.textual[:, j])


def test_build_prompt_distinct_classes_differ_only_in_last_token():
    vocab = make_vocab()
    prompts = make_prompts(n_text=3, n_visual=0)
    s0 = enc.build_prompt(prompts, vocab, 0)
    s1 = enc.build_prompt(prompts, vocab, 1)
    for a, b in zip(s0[:-1], s1[:-1]):
        assert np.array_equal(a.value, b.value)
    assert not np.array_equal(s0[-1].value, s1[-1].value)


def test_build_prompt_unknown_class():
    vocab = make_vocab()
    with pytest.raises(KeyError):
        enc.build_prompt(make_prompts(), vocab, 99)


def test_encode_text_unit_norm_and_pool_idempotence():
    encs = enc.FrozenEncoders.create(8, seed=3)
    v = np.random.default_rng(0).normal(size=(8, 1))
    single = enc.encode_text([ad.constant(v)], encs)
    repeated = enc.encode_text([ad.constant(v)] * 4, encs)
    assert abs(np.linalg.norm(single.value) - 1.0) < 1e-9
    assert np.allclose(single.value, repeated.value)


def test_encode_text_hand_case_identity_map():
    encs = identity_encoders(dim=2)
    t = np.array([[1.0], [0.0]])
    c = np.array([[0.0], [1.0]])
    out = enc.encode_text([ad.constant(t), ad.constant(c)], encs)
    expected = np.array([[0.5], [0.5]]) / np.linalg.norm([0.5, 0.5])
    assert np.allclose(out.value, expected)


def test_encode_text_degenerate_embedding():
    encs = identity_encoders(dim=2)
    z = np.zeros((2, 1))
    with pytest.raises(ContractError):
        enc.encode_text([ad.constant(z)], encs)


def test_encode_image_pools_prompts_with_patches():
    dim = 6
    encs = identity_encoders(dim)
    patches = np.ones((2, dim))
    sample = enc.Sample(patches, label=0)
    prompts = enc.PromptState(np.zeros((dim, 1)), 3.0 * np.ones((dim, 2)))
    out = enc.encode_image(sample, prompts, encs)
    # mean over [v, v, p, p] = (3 + 3 + 1 + 1) / 4 = 2 per axis, normalized
    expected = np.full((dim, 1), 2.0)
    expected /= np.linalg.norm(expected)
    assert np.allclose(out.value, expected)
    assert abs(np.linalg.norm(out.value) - 1.0) < 1e-9


def test_encode_image_without_visual_prompts_uses_patches_only():
    dim = 4
    encs = identity_encoders(dim)
    patches = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    sample = enc.Sample(patches, label=0)
    prompts = enc.PromptState(np.ones((dim, 1)), np.zeros((dim, 0)))
    out = enc.encode_image(sample, prompts, encs)
    expected = np.array([[0.5], [0.5], [0.0], [0.0]])
    expected /= np.linalg.norm(expected)
    assert np.allclose(out.value, expected)


def test_class_probs_uniform_when_text_features_identical():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=5)
    table = enc.word_embedding_table(10, dim)
    vocab = enc.ClassVocabulary.from_word_ids([3, 3, 3, 3], ["w"] * 10, table)
    probs = enc.class_probs(make_sample(dim), make_prompts(dim), vocab, encs)
    assert np.allclose(probs.value, 0.25, atol=1e-12)


def test_scalar_softmax_logistic_case():
    logits = ad.constant(np.array([[0.8], [0.2]]))
    probs = enc.softmax_columns(logits)
    sigma = 1.0 / (1.0 + np.exp(-0.6))
    assert probs.value[0, 0] == pytest.approx(sigma, abs=1e-12)
    assert probs.value[1, 0] == pytest.approx(1 - sigma, abs=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 3))
    base = enc.softmax_columns(ad.constant(logits)).value
    shifted = enc.softmax_columns(ad.constant(logits + 12.3)).value
    assert np.max(np.abs(base - shifted)) < 1e-12


def test_large_temperature_flattens_distribution():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=5, tau=1e6)
    vocab = make_vocab(4, dim)
    probs = enc.class_probs(make_sample(dim), make_prompts(dim), vocab, encs)
    assert np.max(np.abs(probs.value - 0.25)) < 1e-5


def test_probability_invariants_random():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=6)
    vocab = make_vocab(5, dim)
    for seed in range(10):
        probs = enc.class_probs(
            make_sample(dim, seed=seed), make_prompts(dim, seed=seed), vocab, encs
        ).value
        assert np.all(probs > 0) and np.all(probs < 1)
        assert abs(probs.sum() - 1.0) < 1e-9


def test_cosine_similarity_bounds():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=7, tau=1.0)
    vocab = make_vocab(5, dim)
    for seed in range(10):
        sims = enc.class_logits(
            [make_sample(dim, seed=seed)], make_prompts(dim, seed=seed), vocab, encs
        ).value
        assert np.all(sims >= -1.0 - 1e-12) and np.all(sims <= 1.0 + 1e-12)


def test_cross_entropy_uniform_is_log_j():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=5)
    table = enc.word_embedding_table(10, dim)
    vocab = enc.ClassVocabulary.from_word_ids([3, 3, 3], ["w"] * 10, table)
    batch = [make_sample(dim, label=i % 3, seed=i) for i in range(6)]
    loss = enc.cross_entropy(batch, make_prompts(dim), vocab, encs)
    assert loss.item() == pytest.approx(np.log(3), abs=1e-12)


def test_cross_entropy_matches_per_sample_probs():
    dim = 8
    encs = enc.FrozenEncoders.create(dim, seed=9)
    vocab = make_vocab(4, dim)
    prompts = make_prompts(dim, seed=3)
    batch = [make_sample(dim, label=i % 4, seed=10 + i) for i in range(5)]
    loss = enc.cross_entropy(batch, prompts, vocab, encs).item()
    expected = -np.mean(
        [np.log(enc.class_probs(s, prompts, vocab, encs).value[s.label, 0]) for s in batch]
    )
    assert loss == pytest.approx(expected, abs=1e-12)


def test_confident_correct_prediction_has_tiny_loss():
    p = 1.0 - 1e-12
    assert -np.log(p) == pytest.approx(1e-12, rel=1e-3)


def test_cross_entropy_empty_batch():
    encs = enc.FrozenEncoders.create(8, seed=5)
    with pytest.raises(ContractError):
        enc.cross_entropy([], make_prompts(), make_vocab(), encs)


def test_cross_entropy_gradient_matches_finite_differences():
    dim = 6
    encs = enc.FrozenEncoders.create(dim, seed=11)
    vocab = make_vocab(3, dim)
    prompts = make_prompts(dim, n_text=2, n_visual=2, seed=12)
    batch = [make_sample(dim, patches=3, label=i % 3, seed=20 + i) for i in range(4)]

    leaves = enc.prompt_leaves(prompts)
    loss = enc.cross_entropy(batch, leaves, vocab, encs)
    analytic = ad.grad(loss, [leaves["textual"], leaves["visual"]])

    def forward(arrays):
        state = enc.PromptState(textual=arrays[0], visual=arrays[1])
        return enc.cross_entropy(batch, state, vocab, encs).item()

    numeric = central_difference(forward, [prompts.textual, prompts.visual])
    for a, n in zip(analytic, numeric):
        assert relative_error(a.value, n) < 1e-6


def test_frozen_maps_reject_gradients_and_prompts_receive_them():
    dim = 6
    encs = enc.FrozenEncoders.create(dim, seed=13)
    vocab = make_vocab(3, dim)
    prompts = make_prompts(dim, seed=14)
    batch = [make_sample(dim, label=i % 3, seed=30 + i) for i in range(3)]

    leaves = enc.prompt_leaves(prompts)
    loss = enc.cross_entropy(batch, leaves, vocab, encs)
    grads = ad.grad(loss, list(leaves.values()))
    assert any(np.linalg.norm(g.value) > 0 for g in grads)

    frozen = ad.constant(encs.text_map)
    with pytest.raises(ContractError):
        ad.grad(loss, [frozen])


def test_image_feature_dim_mismatch():
    encs = enc.FrozenEncoders.create(8, seed=5)
    bad = enc.Sample(np.zeros((2, 5)), label=0)
    with pytest.raises(ShapeError):
        enc.image_features([bad], make_prompts(8), encs)


def test_accuracy_counts_argmax_matches():
    dim = 8
    encs = identity_encoders(dim, tau=0.1)
    table = np.eye(8)[:4] * 5
    vocab = enc.ClassVocabulary(("a", "b", "c", "d"), table)
    prompts = enc.PromptState(np.zeros((dim, 1)), np.zeros((dim, 0)))
    samples = [
        enc.Sample(np.tile(table[i], (2, 1)), label=i) for i in range(4)
    ]
    assert enc.accuracy(samples, prompts, vocab, encs) == 1.0
