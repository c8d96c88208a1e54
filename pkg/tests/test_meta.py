"""Tests for the regulator, inner/outer loops and diagnostics."""

import numpy as np
import pytest

from metaprompt import autodiff as ad
from metaprompt.clustering import build_hierarchy
from metaprompt.encoders import FrozenEncoders, PromptState, prompt_leaves
from metaprompt.episodes import EpisodeConfig, GeneratorSpec, generate_corpus, sample_task
from metaprompt.errors import ConfigError, ContractError, DivergenceError, ShapeError
from metaprompt.gradcheck import maml_quadratic_check, run_bilevel_suite, tiny_episode
from metaprompt.meta import (
    EpisodeModel,
    HyperParams,
    MetaState,
    RegulatorParams,
    adapt_at_test,
    adapt_nodes,
    gradient_alignment,
    inner_adapt,
    meta_gradients,
    meta_train,
    outer_step,
    regulate,
    regulate_values,
    taylor_residual,
)


def small_world(seed=0, n_topics=5, n_domains=3):
    spec = GeneratorSpec(seed=seed, n_topics=n_topics, n_domains=n_domains, pairs_per_topic=60)
    encoders = FrozenEncoders.create(spec.embed_dim, ("enc", seed))
    corpus = generate_corpus(spec, encoders)
    hierarchy = build_hierarchy(corpus, n_topics, n_domains, seed=seed)
    model = EpisodeModel.from_corpus(corpus, ("enc", seed), tau=0.07)
    return corpus, hierarchy, model


# ---------------------------------------------------------------------------
# regulator


def test_zero_phi_cancels_any_gradient():
    d = 5
    phi = RegulatorParams(
        w_gamma=np.zeros((d, d)),
        b_gamma=np.zeros((d, 1)),
        w_beta=np.zeros((d, d)),
        b_beta=np.zeros((d, 1)),
    )
    g = np.random.default_rng(0).normal(size=(d, 3))
    assert np.array_equal(regulate_values(phi, g), np.zeros((d, 3)))


def test_passthrough_scales_by_gamma0():
    d = 6
    phi = RegulatorParams.passthrough(d, gamma0=0.99)
    g = np.random.default_rng(1).normal(size=(d, 4)) * 3
    out = regulate_values(phi, g)
    assert np.max(np.abs(out - 0.99 * g)) <= 1e-12


def test_modulation_strictly_inside_unit_interval():
    d = 4
    rng = np.random.default_rng(2)
    phi = RegulatorParams.init_for_training(d, seed=3, w_std=2.0)
    g = ad.constant(rng.normal(size=(d, 3)) * 50)
    pnodes = {k: ad.constant(v) for k, v in {
        "w_gamma": phi.w_gamma, "b_gamma": phi.b_gamma,
        "w_beta": phi.w_beta, "b_beta": phi.b_beta,
    }.items()}
    dim, cols = d, 3
    gamma = ad.tanh(ad.add(ad.matmul(pnodes["w_gamma"], g), ad.replicate(pnodes["b_gamma"], (dim, cols))))
    beta = ad.tanh(ad.add(ad.matmul(pnodes["w_beta"], g), ad.replicate(pnodes["b_beta"], (dim, cols))))
    for block in (gamma.value, beta.value):
        assert np.all(block > -1.0) and np.all(block < 1.0)


def test_regulate_shape_check():
    phi = RegulatorParams.passthrough(4)
    with pytest.raises(ShapeError):
        regulate(phi, ad.constant(np.zeros((5, 2))))


# ---------------------------------------------------------------------------
# inner adaptation


def quadratic_loss(center):
    def loss(nodes):
        diff = ad.sub(nodes["x"], ad.constant(center))
        return ad.scale(ad.sum_all(ad.mul(diff, diff)), 0.5)

    return loss


def test_zero_alpha_keeps_parameters():
    x0 = np.array([[1.0], [2.0]])
    adapted = adapt_nodes(
        {"x": ad.parameter(x0)},
        RegulatorParams.passthrough(2),
        quadratic_loss(np.zeros((2, 1))),
        alpha=0.0,
        steps=3,
    )
    assert np.array_equal(adapted["x"].value, x0)


def test_single_step_quadratic_closed_form():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 1))
    a = rng.normal(size=(4, 1))
    alpha = 0.3
    adapted = adapt_nodes(
        {"x": ad.parameter(x0)},
        RegulatorParams.passthrough(4, gamma0=0.99),
        quadratic_loss(a),
        alpha=alpha,
        steps=1,
    )
    expected = x0 - alpha * 0.99 * (x0 - a)
    assert np.max(np.abs(adapted["x"].value - expected)) < 1e-10


def test_repeated_steps_descend_support_loss():
    corpus, hierarchy, model = small_world()
    cfg = EpisodeConfig(k_way=2, n_support=8, n_query=8)
    wins = 0
    trials = 40
    for seed in range(trials):
        task = sample_task(hierarchy, corpus, cfg, seed=seed)
        theta = PromptState.init_random(model.dim, 2, 2, seed=("t", seed), std=0.02)
        phi = RegulatorParams.init_for_training(model.dim, seed=("p", seed))
        loss_fn = model.support_loss(task)
        before = loss_fn(prompt_leaves(theta)).item()
        adapted = inner_adapt(
            theta, phi, task.support, task.word_ids, model, alpha=0.05, steps=2
        )
        after = loss_fn(prompt_leaves(adapted)).item()
        if after < before:
            wins += 1
    assert wins >= 0.95 * trials


def test_inner_adapt_empty_support():
    _, _, model = small_world()
    theta = PromptState.init_random(model.dim, 2, 0, seed=0)
    with pytest.raises(ContractError):
        inner_adapt(theta, None, [], (0, 1), model, alpha=0.1, steps=1)


def test_identity_regulator_is_plain_gradient_descent():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(3, 1))
    a = rng.normal(size=(3, 1))
    adapted = adapt_nodes(
        {"x": ad.parameter(x0)}, None, quadratic_loss(a), alpha=0.2, steps=1
    )
    assert np.allclose(adapted["x"].value, x0 - 0.2 * (x0 - a))


# ---------------------------------------------------------------------------
# outer loop exactness


def test_meta_gradients_match_finite_differences():
    report = run_bilevel_suite(seed=0, n_seeds=6)
    assert report.max_rel_error <= 1e-4, report.summary_lines()


def test_meta_gradients_multi_step_inner_loop():
    from metaprompt.gradcheck import _bilevel_objective, relative_error

    model, tasks, theta, phi = tiny_episode(("multi", 0), n_text=2, n_visual=1)
    hyper = HyperParams(alpha=0.08, inner_steps=3)
    analytic = meta_gradients(theta, phi, tasks, model, hyper)
    objective = _bilevel_objective(model, tasks, hyper)
    theta_arrays = {"textual": theta.textual, "visual": theta.visual}
    phi_arrays = {name: getattr(phi, name) for name in analytic.phi}
    step = 1e-5
    for block, base in theta_arrays.items():
        numeric = np.zeros_like(base)
        for j in range(base.size):
            hi = dict(theta_arrays)
            hi[block] = base.copy()
            hi[block].reshape(-1)[j] += step
            lo = dict(theta_arrays)
            lo[block] = base.copy()
            lo[block].reshape(-1)[j] -= step
            numeric.reshape(-1)[j] = (objective(hi, phi_arrays) - objective(lo, phi_arrays)) / (
                2 * step
            )
        assert relative_error(analytic.theta[block], numeric) <= 1e-4


def test_maml_oracle_on_quadratics():
    for seed in range(5):
        assert maml_quadratic_check(seed) <= 1e-8


def test_zero_rates_freeze_state():
    model, tasks, theta, phi = tiny_episode(("freeze", 1))
    hyper = HyperParams(alpha=0.1, lambda1=0.0, lambda2=0.0)
    state = MetaState(theta=theta, phi=phi)
    new = outer_step(state, tasks, model, hyper)
    assert new.step == 1
    assert np.array_equal(new.theta.textual, theta.textual)
    assert np.array_equal(new.phi.w_gamma, phi.w_gamma)
    assert len(new.trace) == 1


def test_first_order_matches_exact_as_alpha_shrinks():
    model, tasks, theta, phi = tiny_episode(("fo", 2))
    exact = meta_gradients(theta, phi, tasks, model, HyperParams(alpha=1e-4))
    fo = meta_gradients(
        theta, phi, tasks, model, HyperParams(alpha=1e-4, first_order=True)
    )
    g_exact = np.concatenate([v.ravel() for v in exact.theta.values()])
    g_fo = np.concatenate([v.ravel() for v in fo.theta.values()])
    rel = np.linalg.norm(g_exact - g_fo) / np.linalg.norm(g_exact)
    assert rel <= 1e-2

    exact_big = meta_gradients(theta, phi, tasks, model, HyperParams(alpha=0.2))
    fo_big = meta_gradients(
        theta, phi, tasks, model, HyperParams(alpha=0.2, first_order=True)
    )
    gb_exact = np.concatenate([v.ravel() for v in exact_big.theta.values()])
    gb_fo = np.concatenate([v.ravel() for v in fo_big.theta.values()])
    rel_big = np.linalg.norm(gb_exact - gb_fo) / np.linalg.norm(gb_exact)
    assert rel_big > rel


def test_first_order_keeps_regulator_path():
    model, tasks, theta, phi = tiny_episode(("fo-phi", 3))
    fo = meta_gradients(theta, phi, tasks, model, HyperParams(alpha=0.1, first_order=True))
    assert any(np.linalg.norm(v) > 0 for v in fo.phi.values())


# ---------------------------------------------------------------------------
# full training loop


def test_meta_train_zero_tasks_returns_initial_state():
    corpus, hierarchy, model = small_world()
    state = meta_train(
        hierarchy,
        corpus,
        model,
        HyperParams(total_tasks=0),
        EpisodeConfig(k_way=2, n_support=8, n_query=8),
        n_text=2,
        n_visual=2,
        seed=0,
    )
    assert state.step == 0
    assert state.trace == ()


def test_meta_train_reduces_query_loss():
    corpus, hierarchy, model = small_world()
    state = meta_train(
        hierarchy,
        corpus,
        model,
        HyperParams(total_tasks=120, meta_batch=4),
        EpisodeConfig(k_way=2, n_support=8, n_query=8),
        n_text=2,
        n_visual=2,
        seed=1,
    )
    losses = [r.mean_query_loss for r in state.trace]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_meta_train_deterministic():
    corpus, hierarchy, model = small_world()
    kwargs = dict(
        hyper=HyperParams(total_tasks=24, meta_batch=4),
        episode_cfg=EpisodeConfig(k_way=2, n_support=6, n_query=6),
        n_text=2,
        n_visual=2,
        seed=7,
    )
    a = meta_train(hierarchy, corpus, model, kwargs["hyper"], kwargs["episode_cfg"],
                   n_text=2, n_visual=2, seed=7)
    b = meta_train(hierarchy, corpus, model, kwargs["hyper"], kwargs["episode_cfg"],
                   n_text=2, n_visual=2, seed=7)
    assert np.array_equal(a.theta.textual, b.theta.textual)
    assert np.array_equal(a.theta.visual, b.theta.visual)
    assert np.array_equal(a.phi.w_gamma, b.phi.w_gamma)


def test_meta_train_divergence_names_step():
    # all features are normalized, so big steps alone cannot overflow; a
    # corrupt corpus entry is what the guard protects against
    from dataclasses import replace

    corpus, hierarchy, model = small_world()
    pairs = list(corpus.pairs)
    pairs[0] = replace(pairs[0], patch_features=np.full_like(pairs[0].patch_features, 1e308))
    corrupted = replace(corpus, pairs=tuple(pairs))
    with pytest.raises(DivergenceError) as err:
        meta_train(
            hierarchy,
            corrupted,
            model,
            HyperParams(total_tasks=40, meta_batch=4),
            EpisodeConfig(k_way=2, n_support=6, n_query=6),
            n_text=2,
            n_visual=2,
            seed=2,
        )
    assert err.value.step is not None
    assert str(err.value.step) in str(err.value)


def test_hyper_validation():
    with pytest.raises(ConfigError):
        HyperParams(alpha=-1.0).validate()
    with pytest.raises(ConfigError):
        HyperParams(inner_steps=0).validate()
    with pytest.raises(ConfigError):
        HyperParams(gamma0=1.5).validate()


# ---------------------------------------------------------------------------
# test-time adaptation


def test_adapt_at_test_zero_steps():
    corpus, hierarchy, model = small_world()
    theta = PromptState.init_random(model.dim, 2, 2, seed=3)
    phi = RegulatorParams.passthrough(model.dim)
    task = sample_task(hierarchy, corpus, EpisodeConfig(), seed=0)
    out = adapt_at_test(theta, phi, task.support, task.word_ids, model, alpha=0.1, steps=0)
    assert out is theta


def test_adapt_at_test_zero_phi_is_noop():
    corpus, hierarchy, model = small_world()
    d = model.dim
    theta = PromptState.init_random(d, 2, 2, seed=4)
    phi = RegulatorParams(
        w_gamma=np.zeros((d, d)),
        b_gamma=np.zeros((d, 1)),
        w_beta=np.zeros((d, d)),
        b_beta=np.zeros((d, 1)),
    )
    task = sample_task(hierarchy, corpus, EpisodeConfig(), seed=1)
    out = adapt_at_test(theta, phi, task.support, task.word_ids, model, alpha=0.5, steps=3)
    assert np.array_equal(out.textual, theta.textual)
    assert np.array_equal(out.visual, theta.visual)


# ---------------------------------------------------------------------------
# diagnostics


def test_alignment_self_similarity_and_orthogonality():
    corpus, hierarchy, model = small_world()
    task = sample_task(hierarchy, corpus, EpisodeConfig(), seed=2)
    theta = PromptState.init_random(model.dim, 2, 2, seed=5, std=0.05)
    phi = RegulatorParams.passthrough(model.dim)

    align = gradient_alignment(theta, phi, task, model)
    assert -1.0 <= align.value <= 1.0 and not align.degenerate

    # direct construction: regulated support gradient vs itself and an
    # orthogonal vector
    g = np.random.default_rng(0).normal(size=(4, 3))
    r = regulate_values(RegulatorParams.passthrough(4), g)
    self_cos = np.sum(r * r) / (np.linalg.norm(r) * np.linalg.norm(r))
    assert self_cos == pytest.approx(1.0, abs=1e-12)
    q = np.zeros_like(r)
    q[0, 0], q[1, 0] = r[1, 0], -r[0, 0]
    q[:, 1:] = 0.0
    r_probe = np.zeros_like(r)
    r_probe[0, 0], r_probe[1, 0] = r[0, 0], r[1, 0]
    cos = np.sum(r_probe * q)
    assert abs(cos) <= 1e-12


def test_alignment_degenerate_flag():
    corpus, hierarchy, model = small_world()
    task = sample_task(hierarchy, corpus, EpisodeConfig(), seed=3)
    theta = PromptState.init_random(model.dim, 2, 2, seed=6)
    d = model.dim
    zero_phi = RegulatorParams(
        w_gamma=np.zeros((d, d)),
        b_gamma=np.zeros((d, 1)),
        w_beta=np.zeros((d, d)),
        b_beta=np.zeros((d, 1)),
    )
    align = gradient_alignment(theta, zero_phi, task, model)
    assert align.value == 0.0 and align.degenerate


def test_taylor_residual_zero_alpha():
    corpus, hierarchy, model = small_world()
    task = sample_task(hierarchy, corpus, EpisodeConfig(), seed=4)
    theta = PromptState.init_random(model.dim, 2, 2, seed=7)
    phi = RegulatorParams.passthrough(model.dim)
    assert taylor_residual(theta, phi, task, model, alpha=0.0) <= 1e-12


def test_taylor_residual_exact_for_linear_loss():
    # a linear surrogate: L(x) = <c, x>; the first-order expansion is exact
    rng = np.random.default_rng(8)
    d = 4
    c1 = rng.normal(size=(d, 2))
    c2 = rng.normal(size=(d, 2))

    def linear(c):
        def fn(nodes):
            return ad.sum_all(ad.mul(nodes["x"], ad.constant(c)))

        return fn

    x0 = rng.normal(size=(d, 2))
    phi = RegulatorParams.passthrough(d)
    alpha = 0.7

    x = ad.parameter(x0, name="x")
    support_fn, query_fn = linear(c1), linear(c2)
    (gs,) = ad.grad(support_fn({"x": x}), [x])
    regulated = regulate_values(phi, gs.value)
    before = query_fn({"x": ad.parameter(x0)}).item()
    adapted = adapt_nodes({"x": ad.parameter(x0)}, phi, support_fn, alpha=alpha, steps=1)
    after = query_fn({"x": adapted["x"]}).item()
    (gq,) = ad.grad(query_fn({"x": ad.parameter(x0)}), [ad.parameter(x0)])
    predicted = before - alpha * float(np.sum(regulated * c2))
    assert abs(after - predicted) <= 1e-10


def test_taylor_residual_scales_quadratically():
    # tau = 0.5 keeps alpha = 1e-2 inside the quadratic regime; at sharper
    # temperatures the same property needs proportionally smaller alpha
    corpus, hierarchy, _ = small_world()
    model = EpisodeModel.from_corpus(corpus, ("enc", 0), tau=0.5)
    theta = PromptState.init_random(model.dim, 2, 2, seed=9, std=0.02)
    phi = RegulatorParams.init_for_training(model.dim, seed=10)
    big, small = [], []
    for seed in range(30):
        task = sample_task(hierarchy, corpus, EpisodeConfig(n_support=8, n_query=8), seed=seed)
        big.append(taylor_residual(theta, phi, task, model, alpha=1e-2))
        small.append(taylor_residual(theta, phi, task, model, alpha=5e-3))
    ratio = np.mean(big) / np.mean(small)
    assert 3.5 <= ratio <= 4.5
