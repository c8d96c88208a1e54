"""Evaluation protocols over the synthetic world.

Three protocols, all seeded and reported per seed with means over seeds:

* base-to-new: topics are split into base and new by a seeded shuffle;
  meta-training sees base topics only; at test the prompts adapt on a few
  base-class shots, then held-out base accuracy and zero-shot new-class
  accuracy (classification over the new topic words, no further tuning)
  are reported together with their harmonic mean;
* cross-domain: one visual domain per topic is held out from training and
  adaptation, and accuracy on the held-out domains is compared with
  accuracy on in-domain held-out samples;
* ablation grid: the full method against no-domain-shift sampling, the
  raw-gradient (no regulator) variant and a plain prompt-pretraining
  baseline, all sharing eval seeds.

A run that diverges is marked failed in its row and excluded from the
means rather than averaged. Reports are deterministic (no wall-clock
content), so identical configs and seeds produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .clustering import Corpus, Hierarchy, build_hierarchy
from .config import ExperimentConfig
from .encoders import (
    FrozenEncoders,
    PromptState,
    Sample,
    accuracy,
    cross_entropy,
    prompt_leaves,
)
from .episodes import generate_corpus
from .errors import ConfigError, ContractError, NumericError
from .meta import (
    EpisodeModel,
    HyperParams,
    MetaState,
    RegulatorParams,
    adapt_at_test,
    meta_train,
)
from .seeding import SeedPath, child_rng

Array = np.ndarray


def harmonic_mean(base: float, new: float) -> float:
    """2bn/(b+n), the generalization trade-off summary; 0 when both vanish."""
    if base < 0 or new < 0:
        raise ContractError("harmonic_mean: accuracies must be nonnegative")
    if base + new <= 0:
        return 0.0
    return 2.0 * base * new / (base + new)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    kind: str
    metrics: tuple[str, ...]
    rows: tuple[dict, ...]  # variant, seed, status, <metrics>
    summary: dict[str, float] = field(default_factory=dict)

    def variants(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def mean(self, metric: str, variant: str | None = None) -> float:
        vals = [
            r.get(metric)
            for r in self.rows
            if r["status"] == "ok" and (variant is None or r["variant"] == variant)
        ]
        vals = [v for v in vals if v is not None]
        if not vals:
            raise ContractError(f"no successful rows for metric {metric!r}")
        return float(np.mean(vals))

    def to_csv_text(self) -> str:
        header = ["variant", "seed", "status", *self.metrics]
        lines = [",".join(header)]
        for r in self.rows:
            cells = [str(r["variant"]), str(r["seed"]), str(r["status"])]
            for m in self.metrics:
                v = r.get(m)
                cells.append("" if v is None else repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(12, *(len(m) + 2 for m in self.metrics))
        head = f"{'variant':<24}{'seed':>6}{'status':>9}" + "".join(
            f"{m:>{width}}" for m in self.metrics
        )
        lines = [f"== {self.kind} ==", head, "-" * len(head)]
        for r in self.rows:
            cells = f"{r['variant']:<24}{r['seed']:>6}{r['status']:>9}"
            for m in self.metrics:
                v = r.get(m)
                cells += f"{'-':>{width}}" if v is None else f"{v:>{width}.4f}"
            lines.append(cells)
        lines.append("-" * len(head))
        for variant in self.variants():
            ok = [r for r in self.rows if r["variant"] == variant and r["status"] == "ok"]
            failed = [r for r in self.rows if r["variant"] == variant and r["status"] != "ok"]
            if ok:
                cells = f"{variant + ' (mean)':<24}{'':>6}{len(ok):>9}"
                for m in self.metrics:
                    cells += f"{self.mean(m, variant):>{width}.4f}"
                lines.append(cells)
            if failed:
                lines.append(f"{variant:<24} {len(failed)} failed run(s) excluded")
        return "\n".join(lines) + "\n"


def _summarize(kind: str, metrics: Sequence[str], rows: Sequence[dict]) -> EvalReport:
    for r in rows:
        for m in metrics:
            v = r.get(m)
            if v is not None and not np.isfinite(v):
                raise ContractError(f"report {kind}: non-finite metric {m}")
    report = EvalReport(kind=kind, metrics=tuple(metrics), rows=tuple(rows))
    summary = {}
    for variant in report.variants():
        ok = [r for r in rows if r["variant"] == variant and r["status"] == "ok"]
        for m in metrics:
            vals = [r[m] for r in ok if r.get(m) is not None]
            if vals:
                summary[f"{variant}/{m}"] = float(np.mean(vals))
        summary[f"{variant}/n_failed"] = float(
            sum(1 for r in rows if r["variant"] == variant and r["status"] != "ok")
        )
    return dataclasses.replace(report, summary=summary)


# ---------------------------------------------------------------------------
# world assembly


@dataclass(frozen=True)
class World:
    corpus: Corpus
    hierarchy: Hierarchy
    model: EpisodeModel


def build_world(
    config: ExperimentConfig,
    corpus: Corpus | None = None,
    hierarchy: Hierarchy | None = None,
) -> World:
    """Corpus, hierarchy and frozen model for a config, generating what is
    not supplied. Encoders derive from the master seed; the corpus content
    additionally depends on the generator's own seed."""
    config.validate()
    encoders = FrozenEncoders.create(
        config.generator.embed_dim, (config.seed, "encoders"), tau=config.model.tau
    )
    if corpus is None:
        corpus = generate_corpus(config.generator, encoders)
    if hierarchy is None:
        hierarchy = build_hierarchy(
            corpus,
            config.clustering.k_topics,
            config.clustering.n_domains,
            (config.seed, "clustering"),
            config.clustering.target_dim,
        )
    model = EpisodeModel(
        encoders=encoders,
        word_table=corpus.embedding_table(),
        words=corpus.vocabulary,
    )
    return World(corpus=corpus, hierarchy=hierarchy, model=model)


# ---------------------------------------------------------------------------
# protocol pieces


def split_base_new(
    hierarchy: Hierarchy, base_fraction: float, seed: SeedPath
) -> tuple[list[int], list[int]]:
    """Seeded shuffle of topics into a base set and a disjoint new set."""
    n = hierarchy.n_clusters
    n_base = int(round(base_fraction * n))
    n_base = min(max(n_base, 1), n - 1)
    if n < 2:
        raise ConfigError("base-to-new split needs at least two topic clusters")
    order = child_rng(seed, "split").permutation(n)
    return sorted(int(c) for c in order[:n_base]), sorted(int(c) for c in order[n_base:])


def cluster_samples(
    hierarchy: Hierarchy,
    corpus: Corpus,
    clusters: Sequence[int],
    exclude: set[int] | None = None,
) -> list[Sample]:
    """All samples of the given clusters, labeled by class index."""
    exclude = exclude or set()
    out: list[Sample] = []
    for k, ci in enumerate(clusters):
        cluster = hierarchy.clusters[ci]
        for m, d in zip(cluster.members, cluster.domain_labels):
            if m not in exclude:
                out.append(Sample(corpus.pairs[m].patch_features, label=k, domain_tag=d))
    return out


def sample_shots(
    hierarchy: Hierarchy,
    corpus: Corpus,
    clusters: Sequence[int],
    shots: int,
    seed: SeedPath,
    single_domain: bool = False,
) -> tuple[list[Sample], set[int], list[int]]:
    """Few-shot adaptation set: ``shots`` per class.

    With ``single_domain`` each class's shots come from one randomly chosen
    visual domain — the test-time counterpart of the domain-specific support
    sets seen in meta-training, i.e. a deliberately biased few-shot set whose
    idiosyncrasies naive adaptation will absorb. Without it shots are uniform
    over the class's members.

    Returns (samples, used pair ids, shot domain per class; -1 if uniform).
    """
    samples: list[Sample] = []
    used: set[int] = set()
    shot_domains: list[int] = []
    for k, ci in enumerate(clusters):
        cluster = hierarchy.clusters[ci]
        domain_of = dict(zip(cluster.members, cluster.domain_labels))
        rng = child_rng(seed, "shots", k)
        if single_domain:
            options = [
                u
                for u in range(hierarchy.n_domains)
                if len(cluster.domain_members(u)) >= shots
            ]
            if not options:
                raise ConfigError(
                    f"cluster {ci} has no domain with {shots} members for shot sampling"
                )
            domain = options[int(rng.integers(len(options)))]
            members = list(cluster.domain_members(domain))
            shot_domains.append(domain)
        else:
            members = list(cluster.members)
            shot_domains.append(-1)
        if len(members) < shots:
            raise ConfigError(
                f"cluster {ci} has {len(members)} members, cannot draw {shots} shots"
            )
        take = rng.choice(len(members), size=shots, replace=False)
        for i in take:
            m = members[int(i)]
            samples.append(
                Sample(corpus.pairs[m].patch_features, label=k, domain_tag=domain_of[m])
            )
            used.add(m)
    return samples, used, shot_domains


def pretrain_prompts(
    world: World,
    clusters: Sequence[int],
    hyper: HyperParams,
    n_text: int,
    n_visual: int,
    seed: SeedPath,
    batch_size: int = 32,
) -> PromptState:
    """Plain classification pretraining of the prompts over clustered data.

    Replaces bi-level meta-learning: the same number of parameter updates
    as the meta loop, each a gradient-descent step (rate ``hyper.alpha``)
    on the cross-entropy of a random member batch labeled by cluster.
    """
    word_ids = [world.hierarchy.clusters[ci].topic_word for ci in clusters]
    vocab = world.model.vocab(word_ids)
    pool: list[tuple[int, int]] = []
    for k, ci in enumerate(clusters):
        pool.extend((m, k) for m in world.hierarchy.clusters[ci].members)
    theta = PromptState.init_random(world.model.dim, n_text, n_visual, (seed, "theta"), std=0.02)
    steps = hyper.total_tasks // hyper.meta_batch
    rng = child_rng(seed, "pretrain-batches")
    for _ in range(steps):
        take = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        batch = [
            Sample(world.corpus.pairs[pool[int(i)][0]].patch_features, label=pool[int(i)][1])
            for i in take
        ]
        leaves = prompt_leaves(theta)
        loss = cross_entropy(batch, leaves, vocab, world.model.encoders)
        grads = ad.grad(loss, list(leaves.values()))
        values = {k: leaves[k].value - hyper.alpha * g.value for k, g in zip(leaves, grads)}
        empty = np.zeros((world.model.dim, 0))
        theta = PromptState(
            textual=values.get("textual", empty), visual=values.get("visual", empty)
        )
    return theta


def train_variant(
    config: ExperimentConfig,
    world: World,
    clusters: Sequence[int],
    seed: SeedPath,
    on_batch: Callable[[MetaState], None] | None = None,
    total_tasks: int | None = None,
) -> tuple[PromptState, RegulatorParams, dict]:
    """Training stage under the config's ablation flags.

    Returns the trained parameters plus a diagnostics summary (tail of the
    training trace; empty for the pretraining baseline, which has none).
    """
    n_text, n_visual = config.model.prompt_counts()
    hyper = dataclasses.replace(
        config.hyper,
        regulator_enabled=config.regulator_active(),
        total_tasks=config.hyper.total_tasks if total_tasks is None else total_tasks,
    )
    if config.prompt_pretrain_baseline:
        theta = pretrain_prompts(world, clusters, hyper, n_text, n_visual, seed)
        phi = RegulatorParams.init_for_training(
            world.model.dim, (seed, "phi"), gamma0=hyper.gamma0
        )
        return theta, phi, {}
    episode_cfg = config.effective_episodes()
    if episode_cfg.k_way > len(clusters):
        raise ConfigError(
            f"{episode_cfg.k_way}-way episodes infeasible with {len(clusters)} clusters"
        )
    state = meta_train(
        world.hierarchy,
        world.corpus,
        world.model,
        hyper,
        episode_cfg,
        n_text=n_text,
        n_visual=n_visual,
        seed=seed,
        allowed_clusters=clusters,
        on_batch=on_batch,
    )
    diag: dict = {}
    if state.trace:
        diag = {
            "final_query_loss": state.trace[-1].mean_query_loss,
            "final_alignment": state.trace[-1].mean_alignment,
        }
    return state.theta, state.phi, diag


def _word_ids(hierarchy: Hierarchy, clusters: Sequence[int]) -> list[int]:
    return [hierarchy.clusters[ci].topic_word for ci in clusters]


def evaluate_base_new(
    config: ExperimentConfig,
    world: World,
    theta: PromptState,
    phi: RegulatorParams,
    base: Sequence[int],
    new: Sequence[int],
    seed: SeedPath,
) -> tuple[float, float]:
    """Adapt on base shots; return (held-out base accuracy, new-class
    zero-shot accuracy with the adapted prompts).

    Both numbers are means over ``eval.shot_draws`` independent shot draws:
    with domain-biased shots a single draw's domain choice dominates the
    variance, and the draws are seed-derived so paired variants see the
    same shot sets.
    """
    base_words = _word_ids(world.hierarchy, base)
    base_vocab = world.model.vocab(base_words)
    new_vocab = world.model.vocab(_word_ids(world.hierarchy, new))
    new_eval = cluster_samples(world.hierarchy, world.corpus, new)
    base_accs = []
    new_accs = []
    for draw in range(config.eval.shot_draws):
        shots, used, _ = sample_shots(
            world.hierarchy,
            world.corpus,
            base,
            config.eval.shots,
            (seed, "draw", draw),
            single_domain=config.eval.shot_domain_bias,
        )
        adapted = adapt_at_test(
            theta,
            phi,
            shots,
            base_words,
            world.model,
            alpha=config.adapt_alpha(),
            steps=config.eval.adapt_steps,
            regulator_enabled=config.regulator_active(),
        )
        base_eval = cluster_samples(world.hierarchy, world.corpus, base, exclude=used)
        base_accs.append(accuracy(base_eval, adapted, base_vocab, world.model.encoders))
        new_accs.append(accuracy(new_eval, adapted, new_vocab, world.model.encoders))
    return float(np.mean(base_accs)), float(np.mean(new_accs))


B2N_METRICS = ("base_acc", "new_acc", "harmonic_mean", "final_query_loss", "final_alignment")


def run_base_to_new(
    config: ExperimentConfig,
    corpus: Corpus | None = None,
    hierarchy: Hierarchy | None = None,
    variant: str = "full",
) -> EvalReport:
    """Base-to-new generalization over the config's evaluation seeds."""
    world = build_world(config, corpus, hierarchy)
    rows = []
    for s in range(config.eval.n_seeds):
        seed = (config.seed, "b2n", s)
        row: dict = {"variant": variant, "seed": s, "status": "ok"}
        try:
            base, new = split_base_new(world.hierarchy, config.eval.base_fraction, seed)
            theta, phi, diag = train_variant(config, world, base, (seed, "train"))
            base_acc, new_acc = evaluate_base_new(
                config, world, theta, phi, base, new, (seed, "test")
            )
            row.update(
                base_acc=base_acc,
                new_acc=new_acc,
                harmonic_mean=harmonic_mean(base_acc, new_acc),
                **diag,
            )
        except NumericError:
            row["status"] = "failed"
        rows.append(row)
    return _summarize("base-to-new", B2N_METRICS, rows)


XDOMAIN_METRICS = ("in_domain_acc", "held_out_acc", "final_query_loss", "final_alignment")


def run_cross_domain(
    config: ExperimentConfig,
    corpus: Corpus | None = None,
    hierarchy: Hierarchy | None = None,
    variant: str = "full",
) -> EvalReport:
    """Hold one domain per topic out of training/adaptation; compare
    accuracy on the held-out domains against in-domain held-out samples."""
    if config.clustering.n_domains < 2:
        raise ConfigError("cross-domain evaluation needs n_domains >= 2")
    world = build_world(config, corpus, hierarchy)
    all_clusters = list(range(world.hierarchy.n_clusters))
    rows = []
    for s in range(config.eval.n_seeds):
        seed = (config.seed, "xdomain", s)
        row: dict = {"variant": variant, "seed": s, "status": "ok"}
        try:
            rng = child_rng(seed, "holdout")
            held: set[int] = set()
            for cluster in world.hierarchy.clusters:
                domain = int(rng.integers(world.hierarchy.n_domains))
                held.update(cluster.domain_members(domain))
            restricted = world.hierarchy.drop_members(held)
            seen_world = World(corpus=world.corpus, hierarchy=restricted, model=world.model)
            theta, phi, diag = train_variant(config, seen_world, all_clusters, (seed, "train"))
            words = _word_ids(restricted, all_clusters)
            vocab = world.model.vocab(words)
            # keep exactly the held-out-domain pairs for the transfer metric
            not_held = world.hierarchy.covered_pairs() - held
            out_eval = cluster_samples(world.hierarchy, world.corpus, all_clusters, exclude=not_held)
            in_accs, out_accs = [], []
            for draw in range(config.eval.shot_draws):
                shots, used, shot_domains = sample_shots(
                    restricted,
                    world.corpus,
                    all_clusters,
                    config.eval.shots,
                    (seed, "test", draw),
                    single_domain=config.eval.shot_domain_bias,
                )
                adapted = adapt_at_test(
                    theta,
                    phi,
                    shots,
                    words,
                    world.model,
                    alpha=config.adapt_alpha(),
                    steps=config.eval.adapt_steps,
                    regulator_enabled=config.regulator_active(),
                )
                # in-domain = held-back samples of the domains the prompts
                # were adapted on (the source distribution of this draw)
                in_eval: list[Sample] = []
                for k, ci in enumerate(all_clusters):
                    cluster = restricted.clusters[ci]
                    if shot_domains[k] >= 0:
                        members = cluster.domain_members(shot_domains[k])
                    else:
                        members = cluster.members
                    domain_of = dict(zip(cluster.members, cluster.domain_labels))
                    in_eval.extend(
                        Sample(
                            world.corpus.pairs[m].patch_features,
                            label=k,
                            domain_tag=domain_of[m],
                        )
                        for m in members
                        if m not in used
                    )
                in_accs.append(accuracy(in_eval, adapted, vocab, world.model.encoders))
                out_accs.append(accuracy(out_eval, adapted, vocab, world.model.encoders))
            row.update(
                in_domain_acc=float(np.mean(in_accs)),
                held_out_acc=float(np.mean(out_accs)),
                **diag,
            )
        except NumericError:
            row["status"] = "failed"
        rows.append(row)
    return _summarize("cross-domain", XDOMAIN_METRICS, rows)


ABLATION_VARIANTS = ("full", "no_domain_shift", "no_regulator", "prompt_pretrain_baseline")


def ablation_config(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    flags = {
        "no_domain_shift": variant == "no_domain_shift",
        "no_regulator": variant == "no_regulator",
        "prompt_pretrain_baseline": variant == "prompt_pretrain_baseline",
    }
    return dataclasses.replace(config, **flags)


def run_ablation_grid(
    config: ExperimentConfig,
    corpus: Corpus | None = None,
    hierarchy: Hierarchy | None = None,
) -> EvalReport:
    """Base-to-new rows for every ablation variant with shared seeds."""
    world = build_world(config, corpus, hierarchy)
    rows: list[dict] = []
    for variant in ABLATION_VARIANTS:
        report = run_base_to_new(
            ablation_config(config, variant), world.corpus, world.hierarchy, variant=variant
        )
        rows.extend(report.rows)
    return _summarize("ablation-grid", B2N_METRICS, rows)


DEGRADATION_METRICS = ("peak_new_acc", "final_new_acc", "degradation")


def tuning_trajectory(
    config: ExperimentConfig,
    world: World,
    theta: PromptState,
    phi: RegulatorParams,
    base: Sequence[int],
    new: Sequence[int],
    seed: SeedPath,
    step_grid: Sequence[int],
) -> list[float]:
    """New-class accuracy along the few-shot tuning trajectory.

    Each grid point re-runs test-time adaptation from the initialization for
    that many steps (mean over the config's shot draws), tracing how
    zero-shot transfer evolves as tuning on the base shots continues.
    """
    words = _word_ids(world.hierarchy, base)
    new_vocab = world.model.vocab(_word_ids(world.hierarchy, new))
    new_eval = cluster_samples(world.hierarchy, world.corpus, new)
    curve = []
    for steps in step_grid:
        accs = []
        for draw in range(config.eval.shot_draws):
            shots, _, _ = sample_shots(
                world.hierarchy,
                world.corpus,
                base,
                config.eval.shots,
                (seed, "draw", draw),
                single_domain=config.eval.shot_domain_bias,
            )
            adapted = adapt_at_test(
                theta,
                phi,
                shots,
                words,
                world.model,
                alpha=config.adapt_alpha(),
                steps=steps,
                regulator_enabled=config.regulator_active(),
            )
            accs.append(accuracy(new_eval, adapted, new_vocab, world.model.encoders))
        curve.append(float(np.mean(accs)))
    return curve


def degradation_step_grid(adapt_steps: int, factor: int, points: int = 13) -> list[int]:
    horizon = max(1, adapt_steps) * factor
    grid = sorted({int(round(x)) for x in np.linspace(0, horizon, points)})
    return grid


def run_degradation_curves(
    config: ExperimentConfig,
    corpus: Corpus | None = None,
    hierarchy: Hierarchy | None = None,
    factor: int = 4,
    variants: Sequence[str] = ("full", "no_regulator"),
) -> EvalReport:
    """Extended-training overfitting probe.

    Each variant trains ``factor`` times past the configured budget on both
    axes: the meta stage consumes ``factor * total_tasks`` episodes, and the
    resulting initialization is then tuned on base shots for ``factor *
    adapt_steps`` steps while new-class accuracy is tracked along the
    tuning trajectory. Degradation is the drop from the trajectory's own
    peak to its final value — raw-gradient tuning keeps absorbing the shot
    set's biases, regulated tuning is trained not to.
    """
    world = build_world(config, corpus, hierarchy)
    grid = degradation_step_grid(config.eval.adapt_steps, factor)
    rows: list[dict] = []
    for variant in variants:
        vconfig = ablation_config(config, variant)
        for s in range(config.eval.n_seeds):
            seed = (config.seed, "degrade", s)
            row: dict = {"variant": variant, "seed": s, "status": "ok"}
            try:
                base, new = split_base_new(world.hierarchy, config.eval.base_fraction, seed)
                theta, phi, _ = train_variant(
                    vconfig,
                    world,
                    base,
                    (seed, "train"),
                    total_tasks=vconfig.hyper.total_tasks * factor,
                )
                curve = tuning_trajectory(
                    vconfig, world, theta, phi, base, new, (seed, "test"), grid
                )
                row.update(
                    peak_new_acc=max(curve),
                    final_new_acc=curve[-1],
                    degradation=max(curve) - curve[-1],
                )
            except NumericError:
                row["status"] = "failed"
            rows.append(row)
    return _summarize("extended-training-degradation", DEGRADATION_METRICS, rows)
