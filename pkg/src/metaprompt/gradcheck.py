"""Finite-difference oracles for the autodiff layer and the meta objective.

The checks here are deliberately independent of the reverse-mode code path:
they perturb raw input arrays, re-run the forward computation, and compare
central differences against the analytic gradients. ``run_op_suite`` covers
every exported tensor operation; ``run_bilevel_suite`` differentiates the
full adapt-then-evaluate objective on a tiny episode and is the ground truth
for the second-order machinery. Both are reused by the test suite and the
``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .seeding import child_rng

DEFAULT_STEP = 1e-5
DENOM_FLOOR = 1e-8


def central_difference(
    f: Callable[[Sequence[np.ndarray]], float],
    inputs: Sequence[np.ndarray],
    step: float = DEFAULT_STEP,
) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` w.r.t. each input array."""
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x, dtype=np.float64)
        flat = g.reshape(-1)
        base = x.astype(np.float64).copy()
        for i in range(base.size):
            bumped = [a.copy() for a in inputs]
            bumped[k] = base.copy().reshape(-1)
            bumped[k][i] += step
            bumped[k] = bumped[k].reshape(x.shape)
            hi = f(bumped)
            bumped = [a.copy() for a in inputs]
            bumped[k] = base.copy().reshape(-1)
            bumped[k][i] -= step
            bumped[k] = bumped[k].reshape(x.shape)
            lo = f(bumped)
            flat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-element |a - n| / max(|a|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class CheckResult:
    name: str
    rel_error: float


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.results), default=0.0)

    def worst(self, n: int = 5) -> list[CheckResult]:
        return sorted(self.results, key=lambda r: -r.rel_error)[:n]

    def summary_lines(self) -> list[str]:
        lines = [f"{len(self.results)} checks, max relative error {self.max_rel_error:.3e}"]
        for r in self.worst():
            lines.append(f"  {r.name}: {r.rel_error:.3e}")
        return lines


# ---------------------------------------------------------------------------
# per-op cases

_OpCase = tuple[str, Callable[[np.random.Generator], tuple[list[np.ndarray], Callable]]]


def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, shape, floor=0.3):
    u = rng.uniform(-2.0, 2.0, size=shape)
    return np.sign(u) * (floor + np.abs(u))


def _op_cases(rng: np.random.Generator) -> list[tuple[str, list[np.ndarray], Callable]]:
    """One randomized instance per exported op.

    Each case is (name, inputs, program) where program maps a list of nodes
    to the op output node. Scalarization for the check is done by the caller
    with a random linear functional so arbitrary adjoints are exercised.
    """
    d, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    cases = [
        ("add", [_uniform(rng, (d, m)), _uniform(rng, (d, m))], lambda xs: ad.add(xs[0], xs[1])),
        ("mul", [_uniform(rng, (d, m)), _uniform(rng, (d, m))], lambda xs: ad.mul(xs[0], xs[1])),
        (
            "div",
            [_uniform(rng, (d, m)), _away_from_zero(rng, (d, m))],
            lambda xs: ad.div(xs[0], xs[1]),
        ),
        ("neg", [_uniform(rng, (d, m))], lambda xs: ad.neg(xs[0])),
        ("sub", [_uniform(rng, (d, m)), _uniform(rng, (d, m))], lambda xs: ad.sub(xs[0], xs[1])),
        ("scale", [_uniform(rng, (d, m))], lambda xs: ad.scale(xs[0], 1.7)),
        ("tanh", [_uniform(rng, (d, m))], lambda xs: ad.tanh(xs[0])),
        ("exp", [_uniform(rng, (d, m))], lambda xs: ad.exp(xs[0])),
        ("log", [_uniform(rng, (d, m), 0.4, 2.4)], lambda xs: ad.log(xs[0])),
        ("sqrt", [_uniform(rng, (d, m), 0.4, 2.4)], lambda xs: ad.sqrt(xs[0])),
        (
            "matmul",
            [_uniform(rng, (d, k)), _uniform(rng, (k, m))],
            lambda xs: ad.matmul(xs[0], xs[1]),
        ),
        ("transpose", [_uniform(rng, (d, m))], lambda xs: ad.transpose(xs[0])),
        ("sum_all", [_uniform(rng, (d, m))], lambda xs: ad.sum_all(xs[0])),
        ("sum_cols", [_uniform(rng, (d, m))], lambda xs: ad.sum_cols(xs[0])),
        ("sum_rows", [_uniform(rng, (d, m))], lambda xs: ad.sum_rows(xs[0])),
        ("mean", [_uniform(rng, (d, m))], lambda xs: ad.mean(xs[0])),
        (
            "dot",
            [_uniform(rng, (d,)), _uniform(rng, (d,))],
            lambda xs: ad.dot(xs[0], xs[1]),
        ),
        ("l2_norm", [_away_from_zero(rng, (d,))], lambda xs: ad.l2_norm(xs[0])),
        (
            "replicate_scalar",
            [rng.uniform(-2.0, 2.0, size=())],
            lambda xs: ad.replicate(xs[0], (d, m)),
        ),
        (
            "replicate_col",
            [_uniform(rng, (d, 1))],
            lambda xs: ad.replicate(xs[0], (d, m)),
        ),
        (
            "replicate_row",
            [_uniform(rng, (1, m))],
            lambda xs: ad.replicate(xs[0], (d, m)),
        ),
        (
            "concat_cols",
            [_uniform(rng, (d, m)), _uniform(rng, (d, k))],
            lambda xs: ad.concat_cols(xs[0], xs[1]),
        ),
        (
            "slice_cols",
            [_uniform(rng, (d, m + 2))],
            lambda xs: ad.slice_cols(xs[0], 1, m + 1),
        ),
    ]
    return cases


def run_op_suite(seed: int, n_cases: int = 100, step: float = DEFAULT_STEP) -> SuiteReport:
    """Check every exported op's gradient against central differences.

    Draws randomized instances round-robin over the op list until ``n_cases``
    checks have run. Each instance is scalarized through a random linear
    functional so the backward rule sees a non-trivial adjoint.
    """
    report = SuiteReport()
    case_idx = 0
    while len(report.results) < n_cases:
        rng = child_rng(seed, case_idx)
        cases = _op_cases(rng)
        name, inputs, program = cases[case_idx % len(cases)]
        out_probe = program([ad.constant(x) for x in inputs])
        weights = rng.normal(size=out_probe.shape)

        def forward(arrays: Sequence[np.ndarray]) -> float:
            out = program([ad.constant(a) for a in arrays])
            return float(np.sum(out.value * weights))

        leaves = [ad.parameter(x) for x in inputs]
        out = program(leaves)
        loss = ad.sum_all(ad.mul(out, ad.constant(weights))) if out.shape else ad.scale(out, float(weights))
        analytic = ad.grad(loss, leaves)
        numeric = central_difference(forward, inputs, step=step)
        err = max(
            relative_error(a.value, n) for a, n in zip(analytic, numeric)
        )
        report.results.append(CheckResult(f"{name}[{case_idx}]", err))
        case_idx += 1
    return report


# ---------------------------------------------------------------------------
# Hessian symmetry through double grad


def _test_scalar_field(x: ad.Node, a: np.ndarray, b: np.ndarray) -> ad.Node:
    """Smooth nonquadratic scalar field of a column vector x."""
    ax = ad.matmul(ad.constant(a), x)
    bx = ad.matmul(ad.constant(b), x)
    return ad.add(ad.dot(ad.tanh(ax), bx), ad.sum_all(ad.exp(ad.scale(x, 0.3))))


def hessian_by_double_grad(seed: int, dim: int = 4) -> tuple[np.ndarray, float]:
    """Hessian assembled row by row via grad-of-grad; returns (H, asymmetry)."""
    rng = child_rng(seed, "hessian")
    a = rng.normal(size=(dim, dim))
    b = rng.normal(size=(dim, dim))
    x0 = rng.uniform(-1.0, 1.0, size=(dim, 1))

    x = ad.parameter(x0)
    f = _test_scalar_field(x, a, b)
    (gx,) = ad.grad(f, [x], create_graph=True)
    rows = []
    for i in range(dim):
        e = np.zeros((dim, 1))
        e[i, 0] = 1.0
        gi = ad.dot(gx, ad.constant(e))
        (row,) = ad.grad(gi, [x])
        rows.append(row.value.reshape(-1))
    hessian = np.stack(rows, axis=0)
    asymmetry = float(np.max(np.abs(hessian - hessian.T)))
    return hessian, asymmetry


def run_hessian_suite(seed: int, n_cases: int = 10) -> SuiteReport:
    report = SuiteReport()
    for i in range(n_cases):
        _, asym = hessian_by_double_grad(child_rng(seed, i).integers(0, 2**31))
        report.results.append(CheckResult(f"hessian_symmetry[{i}]", asym))
    return report


# ---------------------------------------------------------------------------
# bi-level objective on a tiny synthetic episode


def tiny_episode(seed: SeedPath, n_text: int = 2, n_visual: int = 0, dim: int = 3):
    """A minimal two-task world: K=2, one support and two query per class."""
    from .encoders import FrozenEncoders, PromptState, Sample, word_embedding_table
    from .episodes import MetaTask
    from .meta import EpisodeModel, RegulatorParams

    rng = child_rng(seed, "tiny")
    encoders = FrozenEncoders.create(dim, (seed, "enc"), tau=0.5)
    table = word_embedding_table(6, dim, (seed, "words"))
    model = EpisodeModel(
        encoders=encoders, word_table=table, words=tuple(f"w{i}" for i in range(6))
    )

    def sample(label: int) -> Sample:
        return Sample(rng.normal(size=(2, dim)), label=label, domain_tag=0)

    pair_counter = iter(range(100))

    def task(word_ids: tuple[int, int]) -> MetaTask:
        support = (sample(0), sample(1))
        query = (sample(0), sample(0), sample(1), sample(1))
        return MetaTask(
            cluster_ids=(0, 1),
            word_ids=word_ids,
            class_names=tuple(model.words[w] for w in word_ids),
            support=support,
            query=query,
            support_domain=(0, 0),
            support_pair_ids=(next(pair_counter), next(pair_counter)),
            query_pair_ids=tuple(next(pair_counter) for _ in range(4)),
        )

    tasks = [task((0, 1)), task((2, 3))]
    theta = PromptState.init_random(dim, n_text, n_visual, (seed, "theta"), std=0.4)
    phi = RegulatorParams.init_for_training(dim, (seed, "phi"), w_std=0.3)
    return model, tasks, theta, phi


def _bilevel_objective(model, tasks, hyper):
    """Sum of post-adaptation query losses as a plain function of arrays."""
    from .encoders import PromptState, prompt_leaves
    from .meta import RegulatorParams, adapt_nodes

    def objective(theta_arrays: dict, phi_arrays: dict) -> float:
        theta = PromptState(
            textual=theta_arrays["textual"], visual=theta_arrays["visual"]
        )
        phi = RegulatorParams(**phi_arrays)
        total = 0.0
        for task in tasks:
            adapted = adapt_nodes(
                prompt_leaves(theta),
                phi if hyper.regulator_enabled else None,
                model.support_loss(task),
                alpha=hyper.alpha,
                steps=hyper.inner_steps,
            )
            total += model.query_loss(task)(adapted).item()
        return total

    return objective


def _central_difference_field(evaluate, base: np.ndarray, step: float) -> np.ndarray:
    numeric = np.zeros_like(base)
    for j in range(base.size):
        hi = base.copy()
        hi.reshape(-1)[j] += step
        lo = base.copy()
        lo.reshape(-1)[j] -= step
        numeric.reshape(-1)[j] = (evaluate(hi) - evaluate(lo)) / (2 * step)
    return numeric


def _best_of_steps_error(analytic: np.ndarray, evaluate, base: np.ndarray, steps) -> float:
    """Per-entry floored relative error, each entry at its better FD step.

    Two regimes need different steps: ordinary entries are truncation
    limited (smaller step better), while entries near the denominator
    floor of 1e-8 are roundoff limited (larger step better). The analytic
    value must agree with central differences at one of the steps.
    """
    numerics = [_central_difference_field(evaluate, base, s) for s in steps]
    denom = np.maximum(np.abs(analytic), DENOM_FLOOR)
    per_step = [np.abs(analytic - n) / denom for n in numerics]
    return float(np.max(np.minimum.reduce(per_step)))


def run_bilevel_suite(
    seed: int, n_seeds: int = 20, steps: tuple[float, ...] = (1e-4, 1e-3)
) -> SuiteReport:
    """Meta-gradients versus central differences of the bi-level objective.

    Every prompt and regulator entry is perturbed on the tiny episode; the
    analytic side comes from the exact second-order path through the inner
    update and the regulator.
    """
    from .meta import HyperParams, meta_gradients

    report = SuiteReport()
    for i in range(n_seeds):
        n_visual = 1 if i % 2 else 0
        model, tasks, theta, phi = tiny_episode((seed, i), n_text=2, n_visual=n_visual)
        hyper = HyperParams(alpha=0.1, inner_steps=1, meta_batch=len(tasks))
        analytic = meta_gradients(theta, phi, tasks, model, hyper)
        objective = _bilevel_objective(model, tasks, hyper)

        theta_arrays = {"textual": theta.textual, "visual": theta.visual}
        phi_arrays = {name: getattr(phi, name) for name in analytic.phi}

        worst = 0.0
        for block, base in theta_arrays.items():
            if base.size == 0:
                continue

            def eval_theta(arr, _block=block):
                bumped = dict(theta_arrays)
                bumped[_block] = arr
                return objective(bumped, phi_arrays)

            worst = max(
                worst, _best_of_steps_error(analytic.theta[block], eval_theta, base, steps)
            )
        for block, base in phi_arrays.items():

            def eval_phi(arr, _block=block):
                bumped = dict(phi_arrays)
                bumped[_block] = arr
                return objective(theta_arrays, bumped)

            worst = max(
                worst, _best_of_steps_error(analytic.phi[block], eval_phi, base, steps)
            )
        report.results.append(CheckResult(f"bilevel[{i}]", worst))
    return report


def maml_quadratic_check(seed: int, dim: int = 4, alpha: float = 0.05) -> float:
    """Meta-gradient on quadratic losses versus the hand-derived formula.

    With the regulator replaced by the identity and one inner step on
    L_s = 0.5 (x-a)' A (x-a), the gradient of L_q = 0.5 (x-b)' B (x-b) at the
    adapted point obeys (I - alpha A) B (x' - b). Returns the max absolute
    deviation.
    """
    from .meta import adapt_nodes

    rng = child_rng(seed, "maml")
    p = rng.normal(size=(dim, dim))
    q = rng.normal(size=(dim, dim))
    a_mat = p.T @ p + np.eye(dim)
    b_mat = q.T @ q + np.eye(dim)
    a_vec = rng.normal(size=(dim, 1))
    b_vec = rng.normal(size=(dim, 1))
    x0 = rng.normal(size=(dim, 1))

    def quadratic(center, mat):
        def loss(nodes):
            diff = ad.sub(nodes["x"], ad.constant(center))
            return ad.scale(ad.sum_all(ad.mul(diff, ad.matmul(ad.constant(mat), diff))), 0.5)

        return loss

    x = ad.parameter(x0, name="x")
    adapted = adapt_nodes(
        {"x": x}, None, quadratic(a_vec, a_mat), alpha=alpha, steps=1, create_graph=True
    )
    (meta_grad,) = ad.grad(quadratic(b_vec, b_mat)(adapted), [x])

    x_adapted = x0 - alpha * a_mat @ (x0 - a_vec)
    expected = (np.eye(dim) - alpha * a_mat) @ b_mat @ (x_adapted - b_vec)
    return float(np.max(np.abs(meta_grad.value - expected)))
