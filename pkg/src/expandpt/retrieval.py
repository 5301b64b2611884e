"""Encoding, exact inner-product search and ranking metrics."""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .data import DataError, Passage, Vocab, tokenize, unmasked_batch
from .model import DenseModel

log = logging.getLogger(__name__)

Qrels = dict  # query_id -> {passage_id: grade}
RunRanking = dict  # query_id -> [(passage_id, score), ...]


@dataclass
class EmbeddingMatrix:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids are not unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DataError(f"vectors {self.vectors.shape} do not match {len(self.ids)} ids")

    def save(self, path, meta: dict | None = None) -> None:
        container.save(path, "embeddings", {**(meta or {}), "ids": self.ids}, {"vectors": self.vectors})

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        kind, meta, tensors = container.load(path)
        if kind != "embeddings":
            raise container.ContainerError(f"{path} holds a {kind!r}, not embeddings")
        return cls(list(meta["ids"]), tensors["vectors"])


# -- encoding -----------------------------------------------------------------

def _encode_batches(encoder, token_rows: Sequence[list[int]], batch_size: int, shards: int) -> np.ndarray:
    """Batches are cut at global multiples of ``batch_size``, so sharding never changes their content."""
    starts = list(range(0, len(token_rows), batch_size))

    def run(start: int) -> np.ndarray:
        b = unmasked_batch(token_rows[start:start + batch_size])
        return encoder.encode(b.input_ids, b.attention_mask)

    if not starts:
        return np.zeros((0, encoder.config.d_model), dtype=np.float32)
    if shards <= 1:
        parts = [run(s) for s in starts]
    else:
        groups = [starts[i::shards] for i in range(shards)]
        with ThreadPoolExecutor(max_workers=shards) as pool:
            done = list(pool.map(lambda g: [(s, run(s)) for s in g], groups))
        by_start = dict(pair for g in done for pair in g)
        parts = [by_start[s] for s in starts]
    return np.concatenate(parts, axis=0)


def encode_corpus(model: DenseModel, passages: Sequence[Passage], vocab: Vocab, batch_size: int = 64,
                  shards: int = 1, max_len: int | None = None) -> EmbeddingMatrix:
    """CLS vectors of the passage tower, row-aligned with ``passages``."""
    max_len = min(max_len or model.config.max_seq_len, model.config.max_seq_len)
    ids = [p.id for p in passages]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate passage ids in corpus")
    rows = [tokenize(p.text, vocab, max_len) for p in passages]
    return EmbeddingMatrix(ids, _encode_batches(model.encoder, rows, batch_size, shards))


def encode_queries(model: DenseModel, queries: Sequence[Passage], vocab: Vocab, batch_size: int = 64,
                   shards: int = 1, max_len: int | None = None) -> EmbeddingMatrix:
    max_len = min(max_len or model.config.max_seq_len, model.config.max_seq_len)
    ids = [q.id for q in queries]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate query ids")
    rows = [tokenize(q.text, vocab, max_len) for q in queries]
    return EmbeddingMatrix(ids, _encode_batches(model.query_encoder, rows, batch_size, shards))


# -- search ---------------------------------------------------------------------

def search_topk(queries: EmbeddingMatrix, passages: EmbeddingMatrix, k: int, block: int = 256) -> RunRanking:
    """Exact top-k by inner product; ties go to the smaller passage id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if queries.vectors.shape[1] != passages.vectors.shape[1]:
        raise ValueError(f"dimension mismatch: queries d={queries.vectors.shape[1]}, passages d={passages.vectors.shape[1]}")
    n = len(passages.ids)
    if k > n:
        warnings.warn(f"k={k} exceeds corpus size {n}; clipping", stacklevel=2)
        k = n
    order = sorted(range(n), key=lambda i: passages.ids[i])
    pids = [passages.ids[i] for i in order]
    P = passages.vectors[order].astype(np.float64)
    Q = queries.vectors.astype(np.float64)
    run: RunRanking = {}
    for b0 in range(0, len(queries.ids), block):
        S = Q[b0:b0 + block] @ P.T
        for r, row in enumerate(S):
            if k < n:
                kth = np.partition(row, n - k)[n - k]
                cand = np.nonzero(row >= kth)[0]
            else:
                cand = np.arange(n)
            top = cand[np.lexsort((cand, -row[cand]))][:k]
            run[queries.ids[b0 + r]] = [(pids[j], float(row[j])) for j in top]
    return run


# -- file formats -------------------------------------------------------------

def read_qrels(path) -> Qrels:
    """TREC qrels: ``qid 0 pid grade`` per line."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"qrels line {lineno}: expected 4 fields, got {len(parts)}")
            qid, _, pid, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise DataError(f"qrels line {lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                raise DataError(f"qrels line {lineno}: negative grade")
            qrels.setdefault(qid, {})[pid] = g
    return qrels


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for pid, g in qrels[qid].items():
                fh.write(f"{qid} 0 {pid} {g}\n")


def write_run(path, run: RunRanking, tag: str = "expandpt") -> None:
    """TREC run: ``qid Q0 pid rank score tag``."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in run.items():
            for rank, (pid, score) in enumerate(ranked, 1):
                fh.write(f"{qid} Q0 {pid} {rank} {score:.9g} {tag}\n")


def read_run(path) -> RunRanking:
    run: RunRanking = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"run line {lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, _ = parts
            run.setdefault(qid, []).append((int(rank), pid, float(score)))
    return {q: [(pid, s) for _, pid, s in sorted(rows)] for q, rows in run.items()}


# -- metrics --------------------------------------------------------------------

def _relevant(judged: dict) -> set:
    return {pid for pid, g in judged.items() if g >= 1}


def reciprocal_rank(ranked, judged: dict, k: int) -> float:
    rel = _relevant(judged)
    for i, (pid, _) in enumerate(ranked[:k], 1):
        if pid in rel:
            return 1.0 / i
    return 0.0


def recall(ranked, judged: dict, k: int) -> float:
    rel = _relevant(judged)
    hit = sum(1 for pid, _ in ranked[:k] if pid in rel)
    return hit / len(rel)


def ndcg(ranked, judged: dict, k: int) -> float:
    dcg = sum((2.0 ** judged.get(pid, 0) - 1.0) / math.log2(i + 1) for i, (pid, _) in enumerate(ranked[:k], 1))
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum((2.0 ** g - 1.0) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


METRIC_FUNCS = {"mrr": reciprocal_rank, "recall": recall, "ndcg": ndcg}
_METRIC_RE = re.compile(r"^(mrr|recall|ndcg)@(\d+)$")


def parse_metric(name: str) -> tuple[str, int]:
    m = _METRIC_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r}; expected mrr@k, recall@k or ndcg@k")
    return m.group(1), int(m.group(2))


@dataclass
class MetricReport:
    means: dict = field(default_factory=dict)
    per_query: dict = field(default_factory=dict)
    n_queries: int = 0
    excluded: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def records(self) -> list[dict]:
        out = [{"metric": m, "mean": v, "n_queries": self.n_queries, "checkpoint": self.checkpoint}
               for m, v in self.means.items()]
        if not out:
            out.append({"n_queries": self.n_queries, "checkpoint": self.checkpoint})
        return out

    def table(self) -> str:
        lines = [f"queries evaluated: {self.n_queries}"]
        for m, v in self.means.items():
            lines.append(f"{m:<12} {v:.4f}")
        for reason, qids in self.excluded.items():
            if qids:
                lines.append(f"excluded ({reason}): {len(qids)}")
        return "\n".join(lines)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for m, pq in self.per_query.items():
                for qid in sorted(pq):
                    fh.write(json.dumps({"metric": m, "query_id": qid, "value": pq[qid]}, sort_keys=True) + "\n")


def evaluate_run(run: RunRanking, qrels: Qrels, metrics: Sequence[str]) -> MetricReport:
    """Mean of each metric over run queries that have at least one relevant passage."""
    parsed = [(m, *parse_metric(m)) for m in metrics]
    no_qrels = sorted(q for q in run if q not in qrels)
    no_positive = sorted(q for q in run if q in qrels and not _relevant(qrels[q]))
    if no_qrels:
        log.warning("%d run queries have no qrels; excluded", len(no_qrels))
    evaluable = [q for q in run if q in qrels and _relevant(qrels[q])]
    report = MetricReport(n_queries=len(evaluable), excluded={"no_qrels": no_qrels, "no_relevant": no_positive})
    for label, kind, k in parsed:
        fn = METRIC_FUNCS[kind]
        pq = {q: fn(run[q], qrels[q], k) for q in evaluable}
        report.per_query[label] = pq
        report.means[label] = math.fsum(pq.values()) / len(pq) if pq else 0.0
    return report


def mrr_at_k(run: RunRanking, qrels: Qrels, k: int = 10) -> float:
    return evaluate_run(run, qrels, [f"mrr@{k}"]).means[f"mrr@{k}"]


def recall_at_k(run: RunRanking, qrels: Qrels, k: int) -> float:
    return evaluate_run(run, qrels, [f"recall@{k}"]).means[f"recall@{k}"]


def ndcg_at_k(run: RunRanking, qrels: Qrels, k: int = 10) -> float:
    return evaluate_run(run, qrels, [f"ndcg@{k}"]).means[f"ndcg@{k}"]


def evaluate(model: DenseModel, corpus: Sequence[Passage], queries: Sequence[Passage], qrels: Qrels,
             metrics: Sequence[str], vocab: Vocab, k: int | None = None, batch_size: int = 64,
             shards: int = 1, checkpoint_id: str | None = None) -> tuple[MetricReport, RunRanking]:
    """Encode, search and score. ``k`` defaults to the largest metric cutoff."""
    cutoffs = [parse_metric(m)[1] for m in metrics]
    depth = k or max(cutoffs + [10])
    P = encode_corpus(model, corpus, vocab, batch_size, shards)
    Q = encode_queries(model, queries, vocab, batch_size, shards)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run = search_topk(Q, P, min(depth, len(corpus)))
    report = evaluate_run(run, qrels, metrics)
    report.checkpoint = checkpoint_id
    return report, run
