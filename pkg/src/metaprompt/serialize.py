"""Versioned on-disk formats for corpora, hierarchies, tasks and checkpoints.

Structured artifacts are JSON with a leading ``version`` field; traces and
reports are CSV. Floats round-trip exactly (shortest-repr encoding), so a
save/load cycle reproduces arrays bit for bit and identical runs produce
byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .clustering import Corpus, Hierarchy, Pair, TopicCluster
from .encoders import PromptState, Sample
from .episodes import MetaTask
from .errors import ConfigError
from .meta import HyperParams, MetaState, RegulatorParams, TraceRecord

FORMAT_VERSION = 1

CORPUS_FILE = "corpus.json"
HIERARCHY_FILE = "hierarchy.json"
TASKS_FILE = "tasks.json"
CHECKPOINT_FILE = "checkpoint.json"
TRACE_FILE = "trace.csv"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"


def _require_kind(payload: dict, kind: str) -> dict:
    if not isinstance(payload, dict):
        raise ConfigError(f"{kind}: expected a JSON object")
    if payload.get("version") != FORMAT_VERSION:
        raise ConfigError(
            f"{kind}: unsupported version {payload.get('version')!r}, expected {FORMAT_VERSION}"
        )
    if payload.get("kind") != kind:
        raise ConfigError(f"expected kind {kind!r}, found {payload.get('kind')!r}")
    return payload


def save_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# corpus


def corpus_to_payload(corpus: Corpus) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "kind": "corpus",
        "embed_dim": corpus.embed_dim,
        "word_seed": corpus.word_seed,
        "vocabulary": list(corpus.vocabulary),
        "pairs": [
            {
                "text": list(p.text),
                "patches": p.patch_features.tolist(),
                "truth_topic": p.truth_topic,
                "truth_domain": p.truth_domain,
            }
            for p in corpus.pairs
        ],
    }


def corpus_from_payload(payload: dict) -> Corpus:
    data = _require_kind(payload, "corpus")
    pairs = tuple(
        Pair(
            text=tuple(p["text"]),
            patch_features=np.array(p["patches"], dtype=np.float64),
            truth_topic=p.get("truth_topic"),
            truth_domain=p.get("truth_domain"),
        )
        for p in data["pairs"]
    )
    return Corpus(
        pairs=pairs,
        vocabulary=tuple(data["vocabulary"]),
        embed_dim=int(data["embed_dim"]),
        word_seed=int(data["word_seed"]),
    )


# ---------------------------------------------------------------------------
# hierarchy


def hierarchy_to_payload(hierarchy: Hierarchy) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "kind": "hierarchy",
        "n_domains": hierarchy.n_domains,
        "clusters": [
            {
                "id": idx,
                "topic_word": c.topic_word,
                "topic_score": c.topic_score,
                "members": list(c.members),
                "domains": list(c.domain_labels),
            }
            for idx, c in enumerate(hierarchy.clusters)
        ],
    }


def hierarchy_from_payload(payload: dict) -> Hierarchy:
    data = _require_kind(payload, "hierarchy")
    clusters = tuple(
        TopicCluster(
            members=tuple(c["members"]),
            topic_word=int(c["topic_word"]),
            topic_score=float(c["topic_score"]),
            domain_labels=tuple(c["domains"]),
        )
        for c in data["clusters"]
    )
    return Hierarchy(clusters=clusters, n_domains=int(data["n_domains"]))


# ---------------------------------------------------------------------------
# task sets


def tasks_to_payload(tasks: Sequence[MetaTask]) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "kind": "tasks",
        "tasks": [
            {
                "cluster_ids": list(t.cluster_ids),
                "word_ids": list(t.word_ids),
                "class_names": list(t.class_names),
                "support_domain": list(t.support_domain),
                "support_pairs": list(t.support_pair_ids),
                "support_labels": [s.label for s in t.support],
                "query_pairs": list(t.query_pair_ids),
                "query_labels": [s.label for s in t.query],
            }
            for t in tasks
        ],
    }


def tasks_from_payload(payload: dict, corpus: Corpus, hierarchy: Hierarchy) -> list[MetaTask]:
    data = _require_kind(payload, "tasks")
    domain_of: dict[int, int] = {}
    for cluster in hierarchy.clusters:
        domain_of.update(zip(cluster.members, cluster.domain_labels))
    out: list[MetaTask] = []
    for t in data["tasks"]:
        support = tuple(
            Sample(corpus.pairs[m].patch_features, label=lab, domain_tag=domain_of[m])
            for m, lab in zip(t["support_pairs"], t["support_labels"])
        )
        query = tuple(
            Sample(corpus.pairs[m].patch_features, label=lab, domain_tag=domain_of[m])
            for m, lab in zip(t["query_pairs"], t["query_labels"])
        )
        out.append(
            MetaTask(
                cluster_ids=tuple(t["cluster_ids"]),
                word_ids=tuple(t["word_ids"]),
                class_names=tuple(t["class_names"]),
                support=support,
                query=query,
                support_domain=tuple(t["support_domain"]),
                support_pair_ids=tuple(t["support_pairs"]),
                query_pair_ids=tuple(t["query_pairs"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# checkpoint


def checkpoint_to_payload(state: MetaState, hyper: HyperParams, seed: int) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "kind": "checkpoint",
        "seed": seed,
        "step": state.step,
        "hyper": dataclasses.asdict(hyper),
        "theta": {
            "textual": state.theta.textual.tolist(),
            "visual": state.theta.visual.tolist(),
        },
        "phi": {
            name: getattr(state.phi, name).tolist()
            for name in ("w_gamma", "b_gamma", "w_beta", "b_beta")
        },
    }


def checkpoint_from_payload(payload: dict) -> tuple[MetaState, HyperParams, int]:
    data = _require_kind(payload, "checkpoint")
    dim = len(data["phi"]["w_gamma"])
    theta = PromptState(
        textual=np.array(data["theta"]["textual"], dtype=np.float64).reshape(dim, -1),
        visual=np.array(data["theta"]["visual"], dtype=np.float64).reshape(dim, -1),
    )
    phi = RegulatorParams(
        **{k: np.array(v, dtype=np.float64) for k, v in data["phi"].items()}
    )
    hyper = HyperParams(**data["hyper"])
    state = MetaState(theta=theta, phi=phi, step=int(data["step"]))
    return state, hyper, int(data["seed"])


# ---------------------------------------------------------------------------
# trace and reports


def write_trace(trace: Sequence[TraceRecord], path: str | Path) -> None:
    lines = ["step,mean_query_loss,mean_alignment,wall_time"]
    for r in trace:
        lines.append(f"{r.step},{r.mean_query_loss!r},{r.mean_alignment!r},{r.wall_time!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> list[TraceRecord]:
    text = Path(path).read_text().strip().splitlines()
    out = []
    for line in text[1:]:
        step, loss, align, wall = line.split(",")
        out.append(
            TraceRecord(
                step=int(step),
                mean_query_loss=float(loss),
                mean_alignment=float(align),
                wall_time=float(wall),
            )
        )
    return out
