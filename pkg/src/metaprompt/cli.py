"""Command-line pipeline: generate, cluster, train, evaluate, diagnose.

Subcommands write versioned artifacts into an output directory and read
whatever earlier stages left there, regenerating missing inputs from the
config so each command also works standalone. Exit codes: 0 success,
1 configuration problems, 2 numeric divergence, 64 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import serialize
from .clustering import build_hierarchy, domain_purity, topic_purity
from .config import ExperimentConfig, load_config
from .encoders import FrozenEncoders
from .episodes import generate_corpus, task_stream
from .errors import ConfigError, MetapromptError, NumericError
from .evaluation import (
    EvalReport,
    build_world,
    run_ablation_grid,
    run_base_to_new,
    run_cross_domain,
)
from .gradcheck import (
    maml_quadratic_check,
    run_bilevel_suite,
    run_hessian_suite,
    run_op_suite,
)
from .meta import MetaState, gradient_alignment, meta_train, taylor_residual

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 64 on usage problems, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, help="override the master seed")
    sub.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metaprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in [
        ("gen-data", "generate the synthetic image-text corpus"),
        ("cluster", "build the topic/domain hierarchy from the corpus"),
        ("gen-tasks", "materialize a reproducible episode set"),
        ("train", "meta-train prompts and regulator; write checkpoint and trace"),
        ("eval-b2n", "base-to-new generalization evaluation"),
        ("eval-xdomain", "held-out-domain transfer evaluation"),
        ("ablate", "run the ablation grid"),
        ("gradcheck", "finite-difference oracle suite"),
        ("diag", "alignment and expansion-residual traces for a checkpoint"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig() if args.config is None else load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    config.validate()
    return config


def _corpus_path(out: Path) -> Path:
    return out / serialize.CORPUS_FILE


def _load_or_generate_corpus(config: ExperimentConfig, out: Path, save: bool = False):
    path = _corpus_path(out)
    if path.exists():
        return serialize.corpus_from_payload(serialize.load_json(path))
    encoders = FrozenEncoders.create(
        config.generator.embed_dim, (config.seed, "encoders"), tau=config.model.tau
    )
    corpus = generate_corpus(config.generator, encoders)
    if save:
        out.mkdir(parents=True, exist_ok=True)
        serialize.save_json(serialize.corpus_to_payload(corpus), path)
    return corpus


def _load_or_build_hierarchy(config: ExperimentConfig, corpus, out: Path, save: bool = False):
    path = out / serialize.HIERARCHY_FILE
    if path.exists():
        return serialize.hierarchy_from_payload(serialize.load_json(path))
    hierarchy = build_hierarchy(
        corpus,
        config.clustering.k_topics,
        config.clustering.n_domains,
        (config.seed, "clustering"),
        config.clustering.target_dim,
    )
    if save:
        out.mkdir(parents=True, exist_ok=True)
        serialize.save_json(serialize.hierarchy_to_payload(hierarchy), path)
    return hierarchy


def _write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / serialize.REPORT_CSV).write_text(report.to_csv_text())
    (out / serialize.REPORT_TXT).write_text(report.to_text())
    print(report.to_text())
    print(f"report written to {out / serialize.REPORT_CSV} and {out / serialize.REPORT_TXT}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    encoders = FrozenEncoders.create(
        config.generator.embed_dim, (config.seed, "encoders"), tau=config.model.tau
    )
    corpus = generate_corpus(config.generator, encoders)
    serialize.save_json(serialize.corpus_to_payload(corpus), _corpus_path(args.out))
    print(f"wrote {len(corpus)} pairs to {_corpus_path(args.out)}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = build_hierarchy(
        corpus,
        config.clustering.k_topics,
        config.clustering.n_domains,
        (config.seed, "clustering"),
        config.clustering.target_dim,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    serialize.save_json(serialize.hierarchy_to_payload(hierarchy), args.out / serialize.HIERARCHY_FILE)
    words = ", ".join(corpus.vocabulary[w] for w in hierarchy.topic_words())
    print(f"{hierarchy.n_clusters} topic clusters (topic words: {words})")
    if corpus.has_truth():
        print(
            f"topic purity {topic_purity(hierarchy, corpus):.4f}, "
            f"domain purity {domain_purity(hierarchy, corpus):.4f}"
        )
    return EXIT_OK


def cmd_gen_tasks(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    tasks = list(
        task_stream(
            hierarchy,
            corpus,
            config.effective_episodes(),
            (config.seed, "tasks"),
            count=config.hyper.total_tasks,
        )
    )
    serialize.save_json(serialize.tasks_to_payload(tasks), args.out / serialize.TASKS_FILE)
    print(f"wrote {len(tasks)} tasks to {args.out / serialize.TASKS_FILE}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    world = build_world(config, corpus, hierarchy)
    n_text, n_visual = config.model.prompt_counts()
    hyper = dataclasses.replace(config.hyper, regulator_enabled=config.regulator_active())
    state = meta_train(
        world.hierarchy,
        world.corpus,
        world.model,
        hyper,
        config.effective_episodes(),
        n_text=n_text,
        n_visual=n_visual,
        seed=(config.seed, "train"),
    )
    serialize.save_json(
        serialize.checkpoint_to_payload(state, hyper, config.seed),
        args.out / serialize.CHECKPOINT_FILE,
    )
    serialize.write_trace(state.trace, args.out / serialize.TRACE_FILE)
    last = state.trace[-1] if state.trace else None
    tail = f", final query loss {last.mean_query_loss:.4f}" if last else ""
    print(f"trained {state.step} outer steps{tail}")
    print(f"checkpoint: {args.out / serialize.CHECKPOINT_FILE}")
    return EXIT_OK


def cmd_eval_b2n(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    _write_report(run_base_to_new(config, corpus, hierarchy), args.out)
    return EXIT_OK


def cmd_eval_xdomain(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    _write_report(run_cross_domain(config, corpus, hierarchy), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    _write_report(run_ablation_grid(config, corpus, hierarchy), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ops = run_op_suite(seed, n_cases=100)
    hessian = run_hessian_suite(seed, n_cases=10)
    bilevel = run_bilevel_suite(seed, n_seeds=20)
    maml = max(maml_quadratic_check((seed, i)) for i in range(5))
    print("op-gradient suite:      ", *ops.summary_lines()[:1])
    print("hessian symmetry suite: ", *hessian.summary_lines()[:1])
    print("bi-level suite:         ", *bilevel.summary_lines()[:1])
    print(f"quadratic meta-gradient oracle: max abs deviation {maml:.3e}")
    ok = (
        ops.max_rel_error <= 1e-6
        and hessian.max_rel_error <= 1e-8
        and bilevel.max_rel_error <= 1e-4
        and maml <= 1e-8
    )
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_diag(args) -> int:
    config = _load_config(args)
    corpus = _load_or_generate_corpus(config, args.out, save=True)
    hierarchy = _load_or_build_hierarchy(config, corpus, args.out, save=True)
    world = build_world(config, corpus, hierarchy)
    ckpt_path = args.out / serialize.CHECKPOINT_FILE
    if not ckpt_path.exists():
        raise ConfigError(f"no checkpoint at {ckpt_path}; run train first")
    state, hyper, _ = serialize.checkpoint_from_payload(serialize.load_json(ckpt_path))
    lines = ["task,alignment,degenerate,taylor_residual"]
    values = []
    for t, task in enumerate(
        task_stream(hierarchy, corpus, config.effective_episodes(), (config.seed, "diag"), count=50)
    ):
        align = gradient_alignment(
            state.theta, state.phi, task, world.model,
            regulator_enabled=config.regulator_active(),
        )
        residual = taylor_residual(
            state.theta, state.phi, task, world.model, alpha=hyper.alpha,
            regulator_enabled=config.regulator_active(),
        )
        values.append((align.value, residual))
        lines.append(f"{t},{align.value!r},{int(align.degenerate)},{residual!r}")
    (args.out / "diag.csv").write_text("\n".join(lines) + "\n")
    mean_align = float(np.mean([v[0] for v in values]))
    mean_res = float(np.mean([v[1] for v in values]))
    print(f"50 tasks: mean alignment {mean_align:.4f}, mean residual {mean_res:.3e}")
    print(f"wrote {args.out / 'diag.csv'}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "cluster": cmd_cluster,
    "gen-tasks": cmd_gen_tasks,
    "train": cmd_train,
    "eval-b2n": cmd_eval_b2n,
    "eval-xdomain": cmd_eval_xdomain,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "diag": cmd_diag,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = _COMMANDS[args.command]
    try:
        return handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except MetapromptError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
