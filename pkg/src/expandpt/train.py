"""Pre-training objectives, the two-stage curriculum and retrieval fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import (
    IGNORE_INDEX,
    DataError,
    Passage,
    SpanTooShort,
    Vocab,
    make_bottleneck_batch,
    make_contrastive_batch,
    sample_coarse_span,
    tokenize,
    tokenize_body,
    unmasked_batch,
)
from .model import DenseModel, EncoderConfig, load_checkpoint, save_checkpoint
from .numcore import AdamWState, LrSchedule, Tensor, adamw_step, cross_entropy_logits, lr_at_step

log = logging.getLogger(__name__)

PARADIGMS = ("bottleneck", "contrastive")


class ConfigError(ValueError):
    pass


# -- losses -------------------------------------------------------------------

def _labels(batch_or_labels) -> np.ndarray:
    return np.asarray(getattr(batch_or_labels, "labels", batch_or_labels))


def loss_mlm(mlm_logits: Tensor, batch_or_labels) -> Tensor:
    """Mean cross-entropy over masked positions only."""
    return cross_entropy_logits(mlm_logits, _labels(batch_or_labels), IGNORE_INDEX)


loss_ext = loss_mlm


def loss_bottleneck_clm(decoder_logits: Tensor, ctx_target_ids) -> Tensor:
    """Mean next-token cross-entropy over ``x_1 .. x_N, [SEP]``."""
    targets = np.asarray(ctx_target_ids)
    if targets.size == 0 or not np.any(targets != IGNORE_INDEX):
        raise ValueError("bottleneck loss needs at least one target token")
    if decoder_logits.shape[:-1] != targets.shape:
        raise ValueError(f"decoder logits {decoder_logits.shape} do not align with targets {targets.shape}")
    return cross_entropy_logits(decoder_logits, targets, IGNORE_INDEX)


def masked_position_logits(encoder, states: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Head logits at masked positions only, with matching targets.

    Cross-entropy over these rows equals :func:`loss_mlm` on the full logits.
    """
    labels = np.asarray(labels)
    b, t = np.nonzero(labels != IGNORE_INDEX)
    if b.size == 0:
        return None, labels[b, t]
    return encoder.mlm_logits(nc.index(states, (b, t), unique=True)), labels[b, t]


def _masked_loss(encoder, states, labels) -> Tensor:
    logits, targets = masked_position_logits(encoder, states, labels)
    if logits is None:
        return cross_entropy_logits(Tensor(np.zeros((0, 1))), np.zeros(0, dtype=np.int64))
    return cross_entropy_logits(logits, targets, IGNORE_INDEX)


def loss_infonce(v_p: Tensor, v_ctx: Tensor, symmetric: bool = False) -> Tensor:
    """In-batch contrastive loss anchored on passages, no temperature."""
    if v_p.shape != v_ctx.shape or v_p.ndim != 2:
        raise ValueError(f"v_p {v_p.shape} and v_ctx {v_ctx.shape} must be aligned 2-D")
    B = v_p.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs B >= 2 rows")
    targets = np.arange(B)
    scores = nc.matmul(v_p, v_ctx.transpose())
    loss = cross_entropy_logits(scores, targets)
    if symmetric:
        loss = (loss + cross_entropy_logits(scores.transpose(), targets)) * 0.5
    return loss


def loss_finetune(q: Tensor, p_pos: Tensor, p_neg: Tensor | None = None, in_batch: bool = True) -> Tensor:
    """-log softmax of q.p+ against explicit negatives and (optionally) in-batch passages.

    ``p_neg`` is (B, k, d) or (B*k, d) with query i owning rows i*k .. i*k+k-1.
    """
    B, d = q.shape
    if p_pos.shape != (B, d):
        raise ValueError("one positive per query required")
    negs = None
    if p_neg is not None and p_neg.data.size:
        negs = p_neg.reshape(-1, d)
    if in_batch:
        cands = p_pos if negs is None else nc.concat([p_pos, negs], axis=0)
        return cross_entropy_logits(nc.matmul(q, cands.transpose()), np.arange(B))
    pos = (q * p_pos).sum(axis=1, keepdims=True)
    if negs is None:
        return cross_entropy_logits(pos, np.zeros(B, dtype=np.int64))
    k = negs.shape[0] // B
    neg_scores = nc.matmul(q.reshape(B, 1, d), negs.reshape(B, k, d).transpose(0, 2, 1)).reshape(B, k)
    return cross_entropy_logits(nc.concat([pos, neg_scores], axis=1), np.zeros(B, dtype=np.int64))


REQUIRED_COMPONENTS = {"bottleneck": ("enc", "dec"), "contrastive": ("enc", "ext", "cl")}


def total_loss(paradigm: str, components: dict):
    """Unweighted sum: enc + dec (bottleneck) or enc + ext + cl (contrastive)."""
    if paradigm not in REQUIRED_COMPONENTS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    missing = [k for k in REQUIRED_COMPONENTS[paradigm] if k not in components]
    if missing:
        raise ValueError(f"missing loss component(s) for {paradigm}: {missing}")
    names = REQUIRED_COMPONENTS[paradigm]
    total = components[names[0]]
    for name in names[1:]:
        total = total + components[name]
    return total


# -- configuration --------------------------------------------------------------

@dataclass
class TrainConfig:
    paradigm: str = "contrastive"
    total_steps: int = 2000
    batch_size: int = 32
    grad_accum: int = 1
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    mask_ratio: float = 0.3
    seed: int = 42
    # curriculum: stage1_fraction in [0, 1]; None means single-stage
    stage1_fraction: float | None = 0.75
    single_stage_context: str = "coarse"
    stage2_lr: float | None = None
    span_min: int = 32
    span_max: int = 96
    symmetric_cl: bool = False
    max_grad_norm: float | None = None
    # model shape
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 128
    n_aux_layers: int = 2
    aux_tap_layer: int | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.stage1_fraction is not None and not 0.0 <= self.stage1_fraction <= 1.0:
            raise ConfigError("stage1_fraction must lie in [0, 1]")
        if self.single_stage_context not in ("coarse", "expanded"):
            raise ConfigError("single_stage_context must be 'coarse' or 'expanded'")
        if self.paradigm == "contrastive" and self.batch_size < 2:
            raise ConfigError("contrastive pre-training needs batch_size >= 2")
        if self.total_steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("total_steps, batch_size and grad_accum must be positive")

    def model_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, n_layers=self.n_layers, n_heads=self.n_heads,
                             d_model=self.d_model, d_ff=self.d_ff, max_seq_len=self.max_seq_len,
                             n_aux_layers=self.n_aux_layers, aux_tap_layer=self.aux_tap_layer,
                             init_std=self.init_std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


# Full-scale numbers as published; kept for documentation, far beyond CPU reach.
FULL_SCALE_PRESETS = {
    "bottleneck": dict(paradigm="bottleneck", peak_lr=3e-4, batch_size=2048, total_steps=80_000,
                       warmup_ratio=0.1, n_layers=12, n_heads=12, d_model=768, d_ff=3072, max_seq_len=512),
    "contrastive": dict(paradigm="contrastive", peak_lr=1e-4, batch_size=2048, total_steps=120_000,
                        warmup_ratio=0.1, n_layers=12, n_heads=12, d_model=768, d_ff=3072, max_seq_len=512),
}

PRESETS = {
    "desk": dict(batch_size=32, grad_accum=4, total_steps=2000, d_model=128, n_layers=4, n_heads=4,
                 d_ff=512, max_seq_len=128, peak_lr=3e-4),
    # small enough for the CPU trend experiments
    "tiny": dict(batch_size=32, grad_accum=1, total_steps=2000, d_model=32, n_layers=2, n_heads=2,
                 d_ff=64, max_seq_len=32, n_aux_layers=1, peak_lr=2e-3, span_min=6, span_max=16),
    "full-bottleneck": FULL_SCALE_PRESETS["bottleneck"],
    "full-contrastive": FULL_SCALE_PRESETS["contrastive"],
}


def read_config_file(path) -> dict:
    """``key = value`` lines; values are JSON literals or bare strings, ``#`` starts a comment."""
    import json

    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def write_config_file(path, config: dict) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(config):
            fh.write(f"{k} = {json.dumps(config[k])}\n")


@dataclass(frozen=True)
class CurriculumPlan:
    stage1_fraction: float
    stage1_context: str      # "coarse-span" | "passage-self"
    stage2_context: str      # "expanded-queries"
    stage1_schedule: LrSchedule
    stage2_lr: float
    total_steps: int

    @property
    def boundary(self) -> int:
        return math.ceil(self.stage1_fraction * self.total_steps)

    def stage_at(self, step: int) -> int:
        return 1 if step <= self.boundary else 2

    def lr_at(self, step: int) -> float:
        if step <= self.boundary or self.boundary == 0:
            return lr_at_step(self.stage1_schedule, step)
        return self.stage2_lr


def make_plan(config: TrainConfig) -> CurriculumPlan:
    sched = LrSchedule("warmup-cosine", config.peak_lr, config.total_steps, config.warmup_ratio)
    coarse = "passage-self" if config.paradigm == "bottleneck" else "coarse-span"
    if config.stage1_fraction is None:
        frac = 1.0 if config.single_stage_context == "coarse" else 0.0
        if frac == 0.0:
            # expansions from the first step, on the ordinary warmup-cosine schedule
            return CurriculumPlan(0.0, coarse, "expanded-queries", sched, config.peak_lr, config.total_steps)
        return CurriculumPlan(1.0, coarse, "expanded-queries", sched, 0.0, config.total_steps)
    frac = config.stage1_fraction
    boundary = math.ceil(frac * config.total_steps)
    stage2_lr = config.stage2_lr if config.stage2_lr is not None else lr_at_step(sched, boundary)
    return CurriculumPlan(frac, coarse, "expanded-queries", sched, stage2_lr, config.total_steps)


# -- data feeding -------------------------------------------------------------

class PretrainData:
    """Token ids for passages and (passage, query) pairs; batches are pure in (seed, step)."""

    def __init__(self, corpus: Sequence[Passage], vocab: Vocab, max_len: int,
                 expansions: dict[str, list[str]] | None = None):
        self.passages = list(corpus)
        self.bodies = [tokenize_body(p.text, vocab)[: max_len - 2] for p in self.passages]
        self.max_len = max_len
        self.expanded: list[list[list[int]]] = []
        self.expanded_rows: list[int] = []
        if expansions:
            index = {p.id: i for i, p in enumerate(self.passages)}
            for pid in sorted(expansions, key=lambda k: index.get(k, -1)):
                if pid not in index:
                    continue
                qs = [tokenize_body(q, vocab)[: max_len - 2] for q in expansions[pid]]
                qs = [q for q in qs if q]
                if qs:
                    self.expanded_rows.append(index[pid])
                    self.expanded.append(qs)
        self.skipped_spans = 0

    @property
    def n_expanded_pairs(self) -> int:
        return sum(len(q) for q in self.expanded)

    def coarse_pairs(self, rng, batch_size: int, mode: str, span_range) -> list[tuple[list[int], list[int]]]:
        order = rng.permutation(len(self.bodies))
        pairs = []
        for i in order:
            try:
                sp = sample_coarse_span(self.bodies[i], span_range, rng, mode=mode)
            except SpanTooShort:
                self.skipped_spans += 1
                continue
            pairs.append((sp.anchor_ids, sp.context_ids))
            if len(pairs) == batch_size:
                return pairs
        raise ConfigError(f"only {len(pairs)} passages are long enough for spans of {span_range}")

    def expanded_pairs(self, rng, batch_size: int) -> list[tuple[list[int], list[int]]]:
        if len(self.expanded_rows) < batch_size:
            raise ConfigError(f"expansions cover {len(self.expanded_rows)} passages, fewer than batch_size {batch_size}")
        picks = rng.choice(len(self.expanded_rows), size=batch_size, replace=False)
        pairs = []
        for j in picks:
            qs = self.expanded[j]
            pairs.append((self.bodies[self.expanded_rows[j]], qs[int(rng.integers(len(qs)))]))
        return pairs


# -- training loop --------------------------------------------------------------

@dataclass
class TrainReport:
    paradigm: str
    losses: dict = field(default_factory=dict)
    lr: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    stage_boundary: int | None = None
    wall_clock: float = 0.0
    skipped_spans: int = 0

    def log_step(self, lr: float, stage: int, comps: dict) -> None:
        self.lr.append(lr)
        self.stage.append(stage)
        for k, v in comps.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite {k} loss at step {len(self.lr)}")
            self.losses.setdefault(k, []).append(v)


def trainable(model: DenseModel, paradigm: str | None) -> dict[str, Tensor]:
    mods = [model.encoder, model.query_encoder]
    if paradigm == "bottleneck":
        mods.append(model.decoder)
    elif paradigm == "contrastive":
        mods.append(model.aux)
    out: dict[str, Tensor] = {}
    for m in mods:
        for k, v in m.params.items():
            out.setdefault(k, v)
    return out


def pretrain_losses(model: DenseModel, config: TrainConfig, pairs, rng) -> dict[str, Tensor]:
    enc = model.encoder
    if config.paradigm == "contrastive":
        batch = make_contrastive_batch(pairs, config.mask_ratio, rng, config.max_seq_len)
        B = batch.passages.batch_size
        width = max(batch.passages.input_ids.shape[1], batch.contexts.input_ids.shape[1])

        def widen(a, fill):
            return np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=fill)

        ids = np.concatenate([widen(batch.passages.input_ids, 0), widen(batch.contexts.input_ids, 0)])
        attn = np.concatenate([widen(batch.passages.attention_mask, 0), widen(batch.contexts.attention_mask, 0)])
        labels = np.concatenate([widen(batch.passages.labels, IGNORE_INDEX), widen(batch.contexts.labels, IGNORE_INDEX)])
        out = enc(ids, attn)
        tapped = out.hidden_states[model.config.aux_tap_layer]
        l_enc = _masked_loss(enc, out.last, labels)
        aux_states = model.aux.hidden(out.h_cls, tapped, attn)
        l_ext = _masked_loss(enc, aux_states, labels)
        l_cl = loss_infonce(out.h_cls[:B], out.h_cls[B:], symmetric=config.symmetric_cl)
        return {"enc": l_enc, "ext": l_ext, "cl": l_cl}
    passages = [p for p, _ in pairs]
    contexts = [c for _, c in pairs]
    batch = make_bottleneck_batch(passages, contexts, config.mask_ratio, rng, config.max_seq_len,
                                  model.config.decoder_max_len)
    out = enc(batch.encoder.input_ids, batch.encoder.attention_mask)
    l_enc = _masked_loss(enc, out.last, batch.encoder.labels)
    logits = model.decoder(out.h_cls, batch.ctx_input_ids, batch.ctx_mask)
    l_dec = loss_bottleneck_clm(logits, batch.ctx_targets)
    return {"enc": l_enc, "dec": l_dec}


def clip_grads(grads: list, max_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale


def _optimizer_tensors(names: list[str], state: AdamWState) -> dict[str, np.ndarray]:
    out = {}
    for n, m, v in zip(names, state.m, state.v):
        out[f"adam.m/{n}"] = m
        out[f"adam.v/{n}"] = v
    return out


def _restore_optimizer(names: list[str], state: AdamWState, extra: dict, step: int) -> None:
    state.m = [extra[f"adam.m/{n}"].copy() for n in names]
    state.v = [extra[f"adam.v/{n}"].copy() for n in names]
    state.step = step


def run_pretraining(config: TrainConfig, corpus: Sequence[Passage], vocab: Vocab,
                    expansions: dict[str, list[str]] | None = None, out_dir=None,
                    resume_from=None, log_every: int = 0) -> tuple[DenseModel, TrainReport]:
    """Train from scratch (or resume) following the configured curriculum.

    Writes ``stage1.ckpt`` at the stage boundary and ``final.ckpt`` at the end
    when ``out_dir`` is given. Batches depend only on ``(seed, step)``.
    """
    plan = make_plan(config)
    boundary = plan.boundary
    needs_expansions = boundary < config.total_steps
    data = PretrainData(corpus, vocab, config.max_seq_len, expansions if needs_expansions else None)
    if needs_expansions and len(data.expanded_rows) < config.batch_size:
        raise ConfigError(f"expansions cover {len(data.expanded_rows)} passages; need at least batch_size={config.batch_size}")

    model = DenseModel(config.model_config(len(vocab)), seed=config.seed)
    named = trainable(model, config.paradigm)
    names = list(named)
    params = list(named.values())
    state = AdamWState.for_params(params, weight_decay=config.weight_decay)
    start = 1
    if resume_from is not None:
        loaded, meta, extra = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(names, state, extra, meta["step"])
        start = meta["step"] + 1

    report = TrainReport(config.paradigm, stage_boundary=boundary if 0 < boundary < config.total_steps else None)
    mode = "self" if plan.stage1_context == "passage-self" else "span"
    span_range = (config.span_min, config.span_max)
    meta = {"train_config": config.to_dict(), "vocab": vocab.body, "plan": {
        "stage1_fraction": plan.stage1_fraction, "boundary": boundary, "stage2_lr": plan.stage2_lr}}
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    for step in range(start, config.total_steps + 1):
        stage = plan.stage_at(step)
        lr = plan.lr_at(step)
        comps_sum: dict[str, float] = {}
        for micro in range(config.grad_accum):
            rng = np.random.default_rng([config.seed, step, micro])
            if stage == 1:
                pairs = data.coarse_pairs(rng, config.batch_size, mode, span_range)
            else:
                pairs = data.expanded_pairs(rng, config.batch_size)
            comps = pretrain_losses(model, config, pairs, rng)
            loss = total_loss(config.paradigm, comps)
            if config.grad_accum > 1:
                loss = loss * (1.0 / config.grad_accum)
            loss.backward()
            for k, v in comps.items():
                comps_sum[k] = comps_sum.get(k, 0.0) + v.item() / config.grad_accum
        grads = [p.grad for p in params]
        if config.max_grad_norm:
            clip_grads(grads, config.max_grad_norm)
        adamw_step(params, grads, state, lr)
        nc.zero_grads(params)
        comps_sum["total"] = sum(comps_sum[k] for k in REQUIRED_COMPONENTS[config.paradigm])
        report.log_step(lr, stage, comps_sum)
        if log_every and step % log_every == 0:
            log.info("step %d stage %d lr %.2e %s", step, stage, lr,
                     " ".join(f"{k}={v:.4f}" for k, v in comps_sum.items()))
        if out_dir is not None and step == boundary and step < config.total_steps:
            log.info("stage boundary reached at step %d", step)
            save_checkpoint(out_dir / "stage1.ckpt", model, {**meta, "step": step, "stage": 1},
                            _optimizer_tensors(names, state))
    report.wall_clock = time.perf_counter() - t0
    report.skipped_spans = data.skipped_spans
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model, {**meta, "step": config.total_steps, "stage": plan.stage_at(config.total_steps)},
                        _optimizer_tensors(names, state))
    return model, report


# -- fine-tuning ----------------------------------------------------------------

@dataclass
class Triple:
    query: str
    positive_id: str
    negative_ids: list[str] = field(default_factory=list)


def read_triples(path) -> list[Triple]:
    import json

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                query = rec["query"]
                pos = rec.get("positive_id")
                negs = rec.get("negative_ids", [])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"triples line {lineno}: {exc}") from None
            if not pos:
                raise DataError(f"triples line {lineno}: query {query!r} has no positive")
            if not isinstance(negs, list):
                raise DataError(f"triples line {lineno}: negative_ids must be a list")
            out.append(Triple(str(query), str(pos), [str(n) for n in negs]))
    return out


def write_triples(path, triples: Sequence[Triple]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps({"query": t.query, "positive_id": t.positive_id, "negative_ids": t.negative_ids}) + "\n")


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 2e-5
    n_negatives: int = 4     # full-scale runs use 15
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    seed: int = 42
    max_query_len: int = 32
    max_passage_len: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneReport:
    losses: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)


def run_finetune(model: DenseModel, corpus: Sequence[Passage], triples: Sequence[Triple], vocab: Vocab,
                 config: FinetuneConfig) -> tuple[DenseModel, FinetuneReport]:
    """Optimise the retrieval loss with explicit plus in-batch negatives.

    Explicit negatives are taken from each triple (subsampled to
    ``n_negatives``) and topped up with random corpus passages.
    """
    index = {p.id: i for i, p in enumerate(corpus)}
    for t in triples:
        if t.positive_id not in index:
            raise DataError(f"positive {t.positive_id!r} for query {t.query!r} not in corpus")
    if not triples:
        raise DataError("no fine-tuning triples")
    p_len = min(config.max_passage_len, model.config.max_seq_len)
    q_len = min(config.max_query_len, model.config.max_seq_len)
    p_tok = [tokenize(p.text, vocab, p_len) for p in corpus]
    q_tok = [tokenize(t.query, vocab, q_len) for t in triples]

    named = trainable(model, None)
    params = list(named.values())
    state = AdamWState.for_params(params, weight_decay=config.weight_decay)
    B = min(config.batch_size, len(triples))
    steps_per_epoch = max(1, len(triples) // B)
    total = steps_per_epoch * config.epochs
    sched = LrSchedule("warmup-cosine", config.lr, total, config.warmup_ratio)
    report = FinetuneReport()
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(triples))
        epoch_losses = []
        for s in range(steps_per_epoch):
            step += 1
            rng = np.random.default_rng([config.seed, epoch, s, 1])
            rows = order[s * B:(s + 1) * B]
            pos_rows, neg_rows = [], []
            for r in rows:
                t = triples[r]
                pos = index[t.positive_id]
                pool = [index[n] for n in t.negative_ids if n in index and n != t.positive_id]
                if len(pool) > config.n_negatives:
                    pool = [pool[i] for i in sorted(rng.choice(len(pool), config.n_negatives, replace=False))]
                while len(pool) < config.n_negatives and len(corpus) > 1:
                    cand = int(rng.integers(len(corpus)))
                    if cand != pos:
                        pool.append(cand)
                pos_rows.append(pos)
                neg_rows.extend(pool)
            qb = unmasked_batch([q_tok[r] for r in rows])
            pb = unmasked_batch([p_tok[i] for i in pos_rows + neg_rows])
            vq = model.query_encoder(qb.input_ids, qb.attention_mask).h_cls
            vp = model.encoder(pb.input_ids, pb.attention_mask).h_cls
            nb = len(rows)
            loss = loss_finetune(vq, vp[:nb], vp[nb:] if neg_rows else None)
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, lr_at_step(sched, step))
            nc.zero_grads(params)
            report.losses.append(loss.item())
            epoch_losses.append(loss.item())
        report.epoch_means.append(float(np.mean(epoch_losses)))
    return model, report
