"""Meta-learned soft prompts with a gradient regulator on a frozen synthetic
bi-encoder, trained over automatically clustered synthetic image-text data.

Layer map:

* :mod:`metaprompt.autodiff` — reverse-mode autodiff with exact higher-order
  gradients over small dense float64 tensors;
* :mod:`metaprompt.encoders` — the frozen bi-encoder, prompt state, and the
  temperature-scaled cosine classification losses;
* :mod:`metaprompt.clustering` — semantic topic clustering with TF-IDF topic
  words, plus per-topic visual domain clustering;
* :mod:`metaprompt.episodes` — synthetic corpus generation and episodic
  few-shot task sampling with domain-shift simulation;
* :mod:`metaprompt.meta` — the bi-level meta-learner and its diagnostics;
* :mod:`metaprompt.evaluation` — base-to-new, cross-domain and ablation
  protocols;
* :mod:`metaprompt.cli` — the ``metaprompt`` command-line pipeline.
"""

from .clustering import (
    Corpus,
    CrossModalHierarchicalClustering,
    Hierarchy,
    Pair,
    TopicCluster,
    build_hierarchy,
)
from .encoders import ClassVocabulary, FrozenEncoders, PromptState, Sample
from .episodes import (
    EpisodeConfig,
    GeneratorSpec,
    MetaTask,
    generate_corpus,
    sample_task,
    task_stream,
)
from .evaluation import harmonic_mean, run_ablation_grid, run_base_to_new, run_cross_domain
from .meta import (
    EpisodeModel,
    HyperParams,
    MetaPromptLearner,
    MetaState,
    RegulatorParams,
    adapt_at_test,
    gradient_alignment,
    inner_adapt,
    meta_train,
    outer_step,
    regulate,
    taylor_residual,
)

__version__ = "0.1.0"

__all__ = [
    "ClassVocabulary",
    "Corpus",
    "CrossModalHierarchicalClustering",
    "EpisodeConfig",
    "EpisodeModel",
    "FrozenEncoders",
    "GeneratorSpec",
    "Hierarchy",
    "HyperParams",
    "MetaPromptLearner",
    "MetaState",
    "MetaTask",
    "Pair",
    "PromptState",
    "RegulatorParams",
    "Sample",
    "TopicCluster",
    "adapt_at_test",
    "build_hierarchy",
    "generate_corpus",
    "gradient_alignment",
    "harmonic_mean",
    "inner_adapt",
    "meta_train",
    "outer_step",
    "regulate",
    "run_ablation_grid",
    "run_base_to_new",
    "run_cross_domain",
    "sample_task",
    "task_stream",
    "taylor_residual",
    "__version__",
]
