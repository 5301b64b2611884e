"""Desk-scale trend experiments on the generated topic benchmark.

Each arm is a pre-training run with a fixed step budget; arms that share a
seed see the same initial weights and the same batch stream until their
data sources diverge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Vocab, build_vocab
from .expand import SyntheticExpander
from .model import DenseModel
from .retrieval import evaluate
from .synthetic import TopicBenchmark, TopicModelSpec, make_topic_benchmark
from .train import PRESETS, FinetuneConfig, TrainConfig, run_finetune, run_pretraining

log = logging.getLogger(__name__)

ARMS = {
    "baseline": dict(stage1_fraction=None, single_stage_context="coarse"),
    "expanded": dict(stage1_fraction=None, single_stage_context="expanded"),
    "curriculum": dict(stage1_fraction=0.75),
}


@dataclass
class TrendSetup:
    bench: TopicBenchmark
    vocab: Vocab
    expander: SyntheticExpander
    n_queries: int = 3

    def expansions(self, seed: int) -> dict[str, list[str]]:
        return {p.id: self.expander.generate(p, self.n_queries, seed) for p in self.bench.corpus}


def prepare(spec: TopicModelSpec | None = None) -> TrendSetup:
    bench = make_topic_benchmark(spec or TopicModelSpec())
    vocab = build_vocab([p.text for p in bench.corpus])
    return TrendSetup(bench, vocab, SyntheticExpander(bench.corpus))


def zero_shot_mrr(model: DenseModel, setup: TrendSetup, metric: str = "mrr@10") -> float:
    report, _ = evaluate(model, setup.bench.corpus, setup.bench.queries, setup.bench.qrels, [metric], setup.vocab)
    return report.means[metric]


def arm_config(arm: str, seed: int, steps: int | None = None, preset: str = "tiny", **overrides) -> TrainConfig:
    base = dict(PRESETS[preset], seed=seed, **ARMS[arm])
    if steps is not None:
        base["total_steps"] = steps
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ArmResult:
    arm: str
    seed: int
    mrr: float
    seconds: float
    final_losses: dict = field(default_factory=dict)
    model: DenseModel | None = field(default=None, repr=False)


def run_arm(setup: TrendSetup, arm: str, seed: int, steps: int | None = None, preset: str = "tiny",
            keep_model: bool = False, **overrides) -> ArmResult:
    config = arm_config(arm, seed, steps, preset, **overrides)
    expansions = setup.expansions(seed) if arm != "baseline" else None
    model, report = run_pretraining(config, setup.bench.corpus, setup.vocab, expansions)
    tail = {k: float(np.mean(v[-20:])) for k, v in report.losses.items()}
    mrr = zero_shot_mrr(model, setup)
    log.info("%s seed %d: mrr@10 %.4f (%.0fs)", arm, seed, mrr, report.wall_clock)
    return ArmResult(arm, seed, mrr, report.wall_clock, tail, model if keep_model else None)


def finetune_mrr(model: DenseModel, setup: TrendSetup, seed: int, config: FinetuneConfig | None = None) -> float:
    config = replace(config or desk_finetune_config(), seed=seed)
    model, _ = run_finetune(model, setup.bench.corpus, setup.bench.train_triples, setup.vocab, config)
    return zero_shot_mrr(model, setup)


def desk_finetune_config() -> FinetuneConfig:
    # the published 2e-5 assumes a pre-trained BERT; tiny random-width models need more
    return FinetuneConfig(epochs=2, batch_size=16, lr=1e-3, n_negatives=4, max_passage_len=32, max_query_len=16)


def comparison_table(results: list[ArmResult]) -> str:
    arms = list(dict.fromkeys(r.arm for r in results))
    seeds = sorted({r.seed for r in results})
    by = {(r.arm, r.seed): r.mrr for r in results}
    head = f"{'arm':<12}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds) + f"{'mean':>10}"
    lines = [head, "-" * len(head)]
    for arm in arms:
        vals = [by.get((arm, s)) for s in seeds]
        cells = "".join(f"{v:>10.4f}" if v is not None else f"{'-':>10}" for v in vals)
        got = [v for v in vals if v is not None]
        lines.append(f"{arm:<12}{cells}{np.mean(got):>10.4f}")
    return "\n".join(lines)


@dataclass
class ProbeResult:
    dec_losses: list
    first_below: int | None
    threshold: float


def overfit_probe(n_passages: int = 32, steps: int = 1500, threshold: float = 0.1, seed: int = 0,
                  preset: str = "tiny") -> ProbeResult:
    """Bottleneck run on a small frozen passage set; the decoder must learn to read h_cls.

    Every step sees the whole set (batch = set size) with the passage itself as
    the decoder target, so the data never changes between steps.
    """
    bench = make_topic_benchmark(n_passages=n_passages, n_queries=1, n_train_queries=0, seed=seed)
    vocab = build_vocab([p.text for p in bench.corpus])
    config = TrainConfig(**dict(PRESETS[preset], paradigm="bottleneck", stage1_fraction=None,
                                single_stage_context="coarse", total_steps=steps, batch_size=n_passages, seed=seed))
    _, report = run_pretraining(config, bench.corpus, vocab, None, log_every=steps + 1)
    dec = report.losses["dec"]
    first = next((i + 1 for i, v in enumerate(dec) if v < threshold), None)
    return ProbeResult(dec, first, threshold)
