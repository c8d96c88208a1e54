"""Bi-level meta-learning of prompt initialization and a gradient regulator.

The learner maintains two parameter groups: the soft-prompt initialization
(``PromptState``) and a gradient regulating function (``RegulatorParams``)
that modulates raw inner-loop gradients. Regulation is an affine
transformation of the gradient matrix ``g`` (prompt blocks concatenated
column-wise):

    gamma = tanh(W_g g + b_g 1^T),  beta = tanh(W_b g + b_b 1^T)
    regulated = gamma * g + beta

Inner loop: a few regulated gradient-descent steps on a task's support set.
Outer loop: plain gradient descent on the summed query losses of the
adapted prompts, differentiated exactly through the inner updates (second
order) unless ``first_order`` is set, in which case the inner gradient is
treated as a constant with respect to the prompts while the regulator's
parameter path is kept.

Diagnostics: ``gradient_alignment`` is the normalized inner product between
the regulated support gradient and the query gradient, the quantity the
outer objective implicitly increases; ``taylor_residual`` measures the gap
between the true post-adaptation query loss and its first-order expansion,
which shrinks as O(alpha^2).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Node
from .clustering import Corpus, Hierarchy, build_hierarchy
from .encoders import (
    ClassVocabulary,
    FrozenEncoders,
    PromptState,
    Sample,
    accuracy,
    cross_entropy,
    predict_labels,
    prompt_leaves,
    prompts_from_nodes,
)
from .episodes import EpisodeConfig, MetaTask, task_stream
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    NumericError,
    ShapeError,
)
from .seeding import SeedPath, child_rng

Array = np.ndarray

# Maps prompt block names to their graph nodes; a loss function consumes the
# current blocks and returns a scalar node.
LossFn = Callable[[Mapping[str, Node]], Node]

DEGENERATE_NORM = 1e-12


# ---------------------------------------------------------------------------
# regulator


@dataclass(frozen=True)
class RegulatorParams:
    """Affine gradient-modulation parameters, all tied to the embed dim."""

    w_gamma: Array  # (d, d)
    b_gamma: Array  # (d, 1)
    w_beta: Array  # (d, d)
    b_beta: Array  # (d, 1)

    def __post_init__(self):
        d = self.w_gamma.shape[0]
        expected = {"w_gamma": (d, d), "b_gamma": (d, 1), "w_beta": (d, d), "b_beta": (d, 1)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"regulator {name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"regulator {name} contains non-finite values")

    @property
    def dim(self) -> int:
        return self.w_gamma.shape[0]

    @classmethod
    def passthrough(cls, dim: int, gamma0: float = 0.99) -> "RegulatorParams":
        """Exact pass-through: regulate(g) == gamma0 * g for any g."""
        if not 0.0 < gamma0 < 1.0:
            raise ContractError(f"gamma0 must be in (0, 1), got {gamma0}")
        return cls(
            w_gamma=np.zeros((dim, dim)),
            b_gamma=np.full((dim, 1), np.arctanh(gamma0)),
            w_beta=np.zeros((dim, dim)),
            b_beta=np.zeros((dim, 1)),
        )

    @classmethod
    def init_for_training(
        cls, dim: int, seed: SeedPath, gamma0: float = 0.99, w_std: float = 1e-3
    ) -> "RegulatorParams":
        """Near-pass-through start: tiny random W so learning can break
        symmetry, biases as in :meth:`passthrough`."""
        base = cls.passthrough(dim, gamma0)
        rng = child_rng(seed, "regulator-init")
        return replace(
            base,
            w_gamma=rng.normal(0.0, w_std, size=(dim, dim)),
            w_beta=rng.normal(0.0, w_std, size=(dim, dim)),
        )


PHI_BLOCKS = ("w_gamma", "b_gamma", "w_beta", "b_beta")


def regulator_leaves(phi: RegulatorParams) -> dict[str, Node]:
    return {name: ad.parameter(getattr(phi, name), name=name) for name in PHI_BLOCKS}


def regulator_from_nodes(nodes: Mapping[str, Node]) -> RegulatorParams:
    return RegulatorParams(**{name: np.array(nodes[name].value) for name in PHI_BLOCKS})


def regulate(phi: RegulatorParams | Mapping[str, Node], g: Node) -> Node:
    """Modulate a gradient matrix; differentiable in both g and phi."""
    nodes = regulator_leaves(phi) if isinstance(phi, RegulatorParams) else phi
    dim = nodes["w_gamma"].shape[0]
    if g.value.ndim != 2 or g.shape[0] != dim:
        raise ShapeError(f"regulate: gradient must be ({dim}, m), got {g.shape}")
    cols = g.shape[1]
    gamma = ad.tanh(ad.add(ad.matmul(nodes["w_gamma"], g), ad.replicate(nodes["b_gamma"], (dim, cols))))
    beta = ad.tanh(ad.add(ad.matmul(nodes["w_beta"], g), ad.replicate(nodes["b_beta"], (dim, cols))))
    return ad.add(ad.mul(gamma, g), beta)


# ---------------------------------------------------------------------------
# hyperparameters and state


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.1
    lambda1: float = 0.05
    lambda2: float = 2.0
    inner_steps: int = 1
    meta_batch: int = 4
    total_tasks: int = 400
    first_order: bool = False
    regulator_enabled: bool = True
    gamma0: float = 0.99

    def validate(self) -> None:
        for name in ("alpha", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"hyper: {name} must be finite and >= 0, got {v}")
        if self.inner_steps < 1:
            raise ConfigError("hyper: inner_steps must be >= 1")
        if self.meta_batch < 1:
            raise ConfigError("hyper: meta_batch must be >= 1")
        if self.total_tasks < 0:
            raise ConfigError("hyper: total_tasks must be >= 0")
        if not 0.0 < self.gamma0 < 1.0:
            raise ConfigError("hyper: gamma0 must be in (0, 1)")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    mean_query_loss: float
    mean_alignment: float
    wall_time: float


@dataclass(frozen=True)
class MetaState:
    theta: PromptState
    phi: RegulatorParams
    step: int = 0
    trace: tuple[TraceRecord, ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# frozen episode model: encoders + word embeddings + loss builders


@dataclass(frozen=True)
class EpisodeModel:
    """Everything frozen that a task loss needs."""

    encoders: FrozenEncoders
    word_table: Array
    words: tuple[str, ...]

    @classmethod
    def from_corpus(
        cls, corpus: Corpus, encoder_seed: SeedPath, tau: float
    ) -> "EpisodeModel":
        return cls(
            encoders=FrozenEncoders.create(corpus.embed_dim, encoder_seed, tau=tau),
            word_table=corpus.embedding_table(),
            words=corpus.vocabulary,
        )

    @property
    def dim(self) -> int:
        return self.encoders.dim

    def vocab(self, word_ids: Sequence[int]) -> ClassVocabulary:
        return ClassVocabulary.from_word_ids(word_ids, self.words, self.word_table)

    def loss_fn(self, samples: Sequence[Sample], word_ids: Sequence[int]) -> LossFn:
        vocab = self.vocab(word_ids)
        return lambda nodes: cross_entropy(samples, nodes, vocab, self.encoders)

    def support_loss(self, task: MetaTask) -> LossFn:
        return self.loss_fn(task.support, task.word_ids)

    def query_loss(self, task: MetaTask) -> LossFn:
        return self.loss_fn(task.query, task.word_ids)


# ---------------------------------------------------------------------------
# inner loop


def adapt_nodes(
    theta: Mapping[str, Node],
    phi: Mapping[str, Node] | RegulatorParams | None,
    loss_fn: LossFn,
    *,
    alpha: float,
    steps: int,
    create_graph: bool = False,
    first_order: bool = False,
) -> dict[str, Node]:
    """Run ``steps`` regulated gradient-descent updates on ``loss_fn``.

    ``phi=None`` disables regulation (the raw-gradient update). With
    ``create_graph`` the returned blocks stay differentiable w.r.t. the
    input blocks and the regulator parameters; ``first_order`` detaches the
    inner gradient from the prompt path but keeps the regulator path, the
    standard first-order approximation.

    Blocks are concatenated column-wise in dict order for regulation, so
    one regulator serves any combination of prompt blocks.
    """
    if steps < 0:
        raise ContractError("adapt_nodes: steps must be >= 0")
    if isinstance(phi, RegulatorParams):
        phi = regulator_leaves(phi)
    cur = dict(theta)
    keys = list(cur)
    for _ in range(steps):
        loss = loss_fn(cur)
        grads = ad.grad(
            loss, [cur[k] for k in keys], create_graph=create_graph and not first_order
        )
        if phi is not None:
            joined = ad.concat_cols(*grads)
            regulated = regulate(phi, joined)
            blocks = []
            offset = 0
            for g in grads:
                blocks.append(ad.slice_cols(regulated, offset, offset + g.shape[1]))
                offset += g.shape[1]
        else:
            blocks = grads
        cur = {k: ad.sub(cur[k], ad.scale(b, alpha)) for k, b in zip(keys, blocks)}
    return cur


def inner_adapt(
    theta: PromptState,
    phi: RegulatorParams | None,
    support: Sequence[Sample],
    word_ids: Sequence[int],
    model: EpisodeModel,
    *,
    alpha: float,
    steps: int,
    regulator_enabled: bool = True,
) -> PromptState:
    """Adapt prompts on a support set and return the new values."""
    if not support:
        raise ContractError("inner_adapt: empty support set")
    leaves = prompt_leaves(theta)
    adapted = adapt_nodes(
        leaves,
        phi if regulator_enabled else None,
        model.loss_fn(support, word_ids),
        alpha=alpha,
        steps=steps,
    )
    return prompts_from_nodes(adapted, theta.dim)


def adapt_at_test(
    theta: PromptState,
    phi: RegulatorParams | None,
    fewshot: Sequence[Sample],
    word_ids: Sequence[int],
    model: EpisodeModel,
    *,
    alpha: float,
    steps: int,
    regulator_enabled: bool = True,
) -> PromptState:
    """Deploy the learned initialization: adapt on few shots, regulator frozen.

    ``steps=0`` returns the initialization unchanged.
    """
    if steps == 0:
        return theta
    return inner_adapt(
        theta,
        phi,
        fewshot,
        word_ids,
        model,
        alpha=alpha,
        steps=steps,
        regulator_enabled=regulator_enabled,
    )


# ---------------------------------------------------------------------------
# outer loop


@dataclass(frozen=True)
class MetaGradients:
    query_losses: tuple[float, ...]
    theta: dict[str, Array]
    phi: dict[str, Array]


def meta_gradients(
    theta: PromptState,
    phi: RegulatorParams,
    tasks: Sequence[MetaTask],
    model: EpisodeModel,
    hyper: HyperParams,
) -> MetaGradients:
    """Exact gradients of the summed post-adaptation query loss.

    Adapts on each task's support set with the graph kept, evaluates the
    query loss at the adapted prompts, sums over the batch, and
    differentiates w.r.t. both the prompt initialization and the regulator
    parameters (through the inner update and the regulation itself).
    """
    if not tasks:
        raise ContractError("meta_gradients: empty task batch")
    theta_nodes = prompt_leaves(theta)
    phi_nodes = regulator_leaves(phi)
    losses: list[Node] = []
    for task in tasks:
        adapted = adapt_nodes(
            theta_nodes,
            phi_nodes if hyper.regulator_enabled else None,
            model.support_loss(task),
            alpha=hyper.alpha,
            steps=hyper.inner_steps,
            create_graph=True,
            first_order=hyper.first_order,
        )
        losses.append(model.query_loss(task)(adapted))
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    targets = list(theta_nodes.values()) + list(phi_nodes.values())
    grads = ad.grad(total, targets)
    theta_grads = {k: np.array(g.value) for k, g in zip(theta_nodes, grads)}
    phi_grads = {
        k: np.array(g.value) for k, g in zip(phi_nodes, grads[len(theta_nodes) :])
    }
    return MetaGradients(
        query_losses=tuple(l.item() for l in losses),
        theta=theta_grads,
        phi=phi_grads,
    )


def outer_step(
    state: MetaState,
    tasks: Sequence[MetaTask],
    model: EpisodeModel,
    hyper: HyperParams,
) -> MetaState:
    """One meta-update: plain gradient descent on theta and phi."""
    started = time.perf_counter()
    grads = meta_gradients(state.theta, state.phi, tasks, model, hyper)

    alignments = [
        gradient_alignment(
            state.theta,
            state.phi,
            task,
            model,
            regulator_enabled=hyper.regulator_enabled,
        ).value
        for task in tasks
    ]

    new_theta = PromptState(
        textual=state.theta.textual - hyper.lambda1 * grads.theta.get("textual", 0.0),
        visual=state.theta.visual - hyper.lambda1 * grads.theta.get("visual", 0.0),
    )
    new_phi = RegulatorParams(
        **{
            name: getattr(state.phi, name) - hyper.lambda2 * grads.phi[name]
            for name in PHI_BLOCKS
        }
    )
    record = TraceRecord(
        step=state.step + 1,
        mean_query_loss=float(np.mean(grads.query_losses)),
        mean_alignment=float(np.mean(alignments)),
        wall_time=time.perf_counter() - started,
    )
    return MetaState(
        theta=new_theta,
        phi=new_phi,
        step=state.step + 1,
        trace=state.trace + (record,),
    )


def meta_train(
    hierarchy: Hierarchy,
    corpus: Corpus,
    model: EpisodeModel,
    hyper: HyperParams,
    episode_cfg: EpisodeConfig,
    *,
    n_text: int,
    n_visual: int,
    seed: SeedPath,
    allowed_clusters: Sequence[int] | None = None,
    initial: MetaState | None = None,
    on_batch: Callable[[MetaState], None] | None = None,
) -> MetaState:
    """Full meta-training loop over ``total_tasks`` episodes in batches.

    Prompts start from a seeded small Gaussian, the regulator from its
    near-pass-through initialization. Task ``t`` of the stream depends only
    on (seed, t). A non-finite loss aborts with the offending step number.
    """
    hyper.validate()
    episode_cfg.validate()
    if initial is not None:
        state = initial
    else:
        theta0 = PromptState.init_random(
            model.dim, n_text, n_visual, seed=(seed, "theta"), std=0.02
        )
        phi0 = RegulatorParams.init_for_training(
            model.dim, seed=(seed, "phi"), gamma0=hyper.gamma0
        )
        state = MetaState(theta=theta0, phi=phi0)

    stream = task_stream(
        hierarchy,
        corpus,
        episode_cfg,
        (seed, "tasks"),
        count=hyper.total_tasks,
        allowed_clusters=allowed_clusters,
    )
    batch: list[MetaTask] = []
    for task in stream:
        batch.append(task)
        if len(batch) < hyper.meta_batch:
            continue
        try:
            state = outer_step(state, batch, model, hyper)
        except NumericError as err:
            raise DivergenceError(
                f"non-finite loss at outer step {state.step + 1}: {err}",
                step=state.step + 1,
            ) from err
        batch = []
        if on_batch is not None:
            on_batch(state)
    return state


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class AlignmentResult:
    value: float
    degenerate: bool


def _flat_gradients(
    theta: PromptState, loss_fn: LossFn
) -> tuple[Array, list[tuple[str, tuple[int, int]]]]:
    leaves = prompt_leaves(theta)
    keys = list(leaves)
    grads = ad.grad(loss_fn(leaves), [leaves[k] for k in keys])
    mat = np.concatenate([g.value for g in grads], axis=1)
    layout = [(k, leaves[k].shape) for k in keys]
    return mat, layout


def regulate_values(phi: RegulatorParams, g: Array) -> Array:
    """Regulator output for a raw gradient matrix, values only."""
    return regulate(phi, ad.constant(g)).value


def gradient_alignment(
    theta: PromptState,
    phi: RegulatorParams,
    task: MetaTask,
    model: EpisodeModel,
    *,
    regulator_enabled: bool = True,
) -> AlignmentResult:
    """Cosine between the regulated support gradient and the query gradient.

    Both gradients are taken at the current prompts and flattened across
    blocks. Returns value 0 flagged degenerate when either norm vanishes.
    """
    g_support, _ = _flat_gradients(theta, model.support_loss(task))
    g_query, _ = _flat_gradients(theta, model.query_loss(task))
    regulated = regulate_values(phi, g_support) if regulator_enabled else g_support
    num = float(np.sum(regulated * g_query))
    n_r = float(np.linalg.norm(regulated))
    n_q = float(np.linalg.norm(g_query))
    if n_r < DEGENERATE_NORM or n_q < DEGENERATE_NORM:
        return AlignmentResult(value=0.0, degenerate=True)
    return AlignmentResult(value=num / (n_r * n_q), degenerate=False)


def taylor_residual(
    theta: PromptState,
    phi: RegulatorParams,
    task: MetaTask,
    model: EpisodeModel,
    alpha: float,
    *,
    regulator_enabled: bool = True,
) -> float:
    """|query loss after one regulated step - its first-order prediction|.

    The prediction expands the query loss around the current prompts:
    L(theta') ~= L(theta) - alpha * <regulated support grad, query grad>.
    Exact for linear losses; O(alpha^2) otherwise.
    """
    query_fn = model.query_loss(task)
    loss_before = query_fn(prompt_leaves(theta)).item()
    g_support, _ = _flat_gradients(theta, model.support_loss(task))
    g_query, _ = _flat_gradients(theta, query_fn)
    regulated = regulate_values(phi, g_support) if regulator_enabled else g_support

    adapted = inner_adapt(
        theta,
        phi,
        task.support,
        task.word_ids,
        model,
        alpha=alpha,
        steps=1,
        regulator_enabled=regulator_enabled,
    )
    loss_after = query_fn(prompt_leaves(adapted)).item()
    predicted = loss_before - alpha * float(np.sum(regulated * g_query))
    return abs(loss_after - predicted)


# ---------------------------------------------------------------------------
# estimator front end


MODE_PROMPTS = {"text": (4, 0), "visual": (0, 4), "joint": (2, 2)}


class MetaPromptLearner(BaseEstimator):
    """Estimator wrapper over :func:`meta_train`.

    ``fit(corpus)`` clusters the corpus (unless a hierarchy is supplied),
    meta-trains the prompt initialization and regulator, and exposes
    ``theta_``, ``phi_`` and the training ``trace_``. ``adapt`` runs
    test-time adaptation on a few shots and binds the resulting prompts and
    vocabulary for ``predict``/``score``.
    """

    def __init__(
        self,
        mode: str = "joint",
        alpha: float = 0.1,
        lambda1: float = 0.05,
        lambda2: float = 0.05,
        inner_steps: int = 1,
        meta_batch: int = 4,
        total_tasks: int = 400,
        first_order: bool = False,
        regulator_enabled: bool = True,
        gamma0: float = 0.99,
        k_way: int = 2,
        n_support: int = 16,
        n_query: int = 15,
        shift_mode: str = "domain_shift",
        k_topics: int = 5,
        n_domains: int = 3,
        target_dim: int = 8,
        tau: float = 0.07,
        encoder_seed: int = 0,
        adapt_steps: int = 5,
        random_state: int = 0,
    ):
        self.mode = mode
        self.alpha = alpha
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.inner_steps = inner_steps
        self.meta_batch = meta_batch
        self.total_tasks = total_tasks
        self.first_order = first_order
        self.regulator_enabled = regulator_enabled
        self.gamma0 = gamma0
        self.k_way = k_way
        self.n_support = n_support
        self.n_query = n_query
        self.shift_mode = shift_mode
        self.k_topics = k_topics
        self.n_domains = n_domains
        self.target_dim = target_dim
        self.tau = tau
        self.encoder_seed = encoder_seed
        self.adapt_steps = adapt_steps
        self.random_state = random_state

    def _hyper(self) -> HyperParams:
        return HyperParams(
            alpha=self.alpha,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            inner_steps=self.inner_steps,
            meta_batch=self.meta_batch,
            total_tasks=self.total_tasks,
            first_order=self.first_order,
            regulator_enabled=self.regulator_enabled,
            gamma0=self.gamma0,
        )

    def fit(self, X: Corpus, y=None, hierarchy: Hierarchy | None = None):
        if self.mode not in MODE_PROMPTS:
            raise ConfigError(f"mode must be one of {sorted(MODE_PROMPTS)}, got {self.mode!r}")
        if hierarchy is None:
            hierarchy = build_hierarchy(
                X, self.k_topics, self.n_domains, self.random_state, self.target_dim
            )
        n_text, n_visual = MODE_PROMPTS[self.mode]
        model = EpisodeModel.from_corpus(X, ("encoders", self.encoder_seed), self.tau)
        state = meta_train(
            hierarchy,
            X,
            model,
            self._hyper(),
            EpisodeConfig(
                k_way=self.k_way,
                n_support=self.n_support,
                n_query=self.n_query,
                shift_mode=self.shift_mode,
            ),
            n_text=n_text,
            n_visual=n_visual,
            seed=(self.random_state, "fit"),
        )
        self.hierarchy_ = hierarchy
        self.model_ = model
        self.theta_ = state.theta
        self.phi_ = state.phi
        self.trace_ = state.trace
        self.n_outer_steps_ = state.step
        self.prompts_ = state.theta
        self.vocab_ = None
        return self

    def _require_fitted(self):
        if not hasattr(self, "theta_"):
            raise ContractError("estimator is not fitted; call fit first")

    def adapt(self, shots: Sequence[Sample], word_ids: Sequence[int]) -> PromptState:
        """Test-time adaptation; binds the resulting prompts and vocabulary."""
        self._require_fitted()
        adapted = adapt_at_test(
            self.theta_,
            self.phi_,
            shots,
            word_ids,
            self.model_,
            alpha=self.alpha,
            steps=self.adapt_steps,
            regulator_enabled=self.regulator_enabled,
        )
        self.prompts_ = adapted
        self.vocab_ = self.model_.vocab(word_ids)
        return adapted

    def predict(self, X: Sequence[Sample]) -> np.ndarray:
        self._require_fitted()
        if self.vocab_ is None:
            raise ContractError("no vocabulary bound; call adapt before predict")
        return predict_labels(X, self.prompts_, self.vocab_, self.model_.encoders)

    def score(self, X: Sequence[Sample], y=None) -> float:
        self._require_fitted()
        if self.vocab_ is None:
            raise ContractError("no vocabulary bound; call adapt before score")
        return accuracy(X, self.prompts_, self.vocab_, self.model_.encoders)
