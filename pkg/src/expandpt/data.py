"""Corpus ingestion, word-level vocabulary, masking and batch assembly."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[m]"]
SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))
IGNORE_INDEX = -100

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Passage:
    id: str
    text: str


# -- corpus files -------------------------------------------------------------

def parse_record_line(line: str, lineno: int, fields=("id", "text")) -> tuple[str, str]:
    stripped = line.rstrip("\n").rstrip("\r")
    if stripped.lstrip().startswith("{"):
        try:
            rec = json.loads(stripped)
            return str(rec[fields[0]]), str(rec[fields[1]])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from None
    if "\t" not in stripped:
        raise DataError(f"line {lineno}: expected 'id<TAB>text' or a JSON record")
    pid, text = stripped.split("\t", 1)
    return pid, text


def read_corpus(path) -> list[Passage]:
    """Read ``id<TAB>text`` lines or JSON records with ``id``/``text``."""
    passages: list[Passage] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            pid, text = parse_record_line(line, lineno)
            if not pid:
                raise DataError(f"line {lineno}: empty id")
            if not text.strip():
                raise DataError(f"line {lineno}: empty text for id {pid!r}")
            if pid in seen:
                raise DataError(f"line {lineno}: duplicate id {pid!r}")
            seen.add(pid)
            passages.append(Passage(pid, text))
    return passages


def write_corpus(path, passages: Iterable[Passage]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False) + "\n")


# -- vocabulary ---------------------------------------------------------------

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, body: Sequence[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS) + list(body)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def body(self) -> list[str]:
        return self.itos[len(SPECIAL_TOKENS):]

    def dumps(self) -> bytes:
        return "".join(t + "\n" for t in self.body).encode("utf-8")

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                tok = line.rstrip("\n")
                if not tok or any(c.isspace() for c in tok):
                    raise DataError(f"vocab line {lineno}: invalid token {tok!r}")
                if tok in SPECIAL_TOKENS:
                    raise DataError(f"vocab line {lineno}: special token {tok!r} listed in body")
                tokens.append(tok)
        return cls(tokens)


def build_vocab(texts: Iterable[str], max_size: int = 30000, min_freq: int = 1) -> Vocab:
    """Frequency-ranked word vocabulary; ties broken lexicographically."""
    counts: Counter[str] = Counter()
    n = 0
    for text in texts:
        counts.update(split_words(text))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    capacity = max(0, max_size - len(SPECIAL_TOKENS))
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                    key=lambda t: (-counts[t], t))
    return Vocab(ranked[:capacity])


def tokenize_body(text: str, vocab: Vocab) -> list[int]:
    get = vocab.stoi.get
    return [get(w, UNK) for w in split_words(text)]


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    """``[CLS] body [SEP]``, body cut so the total is at most ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    return [CLS] + tokenize_body(text, vocab)[: max_len - 2] + [SEP]


def detokenize(ids: Iterable[int], vocab: Vocab, skip_special: bool = True) -> str:
    return " ".join(vocab.itos[i] for i in ids if not (skip_special and i in SPECIAL_IDS))


# -- masking ------------------------------------------------------------------

@dataclass
class MaskedRow:
    input_ids: list[int]
    labels: list[int]
    mask_positions: list[int]
    empty: bool = False


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def apply_mask(token_ids: Sequence[int], mask_ratio: float, rng: np.random.Generator) -> MaskedRow:
    """Replace ``round(ratio * n_maskable)`` non-special tokens by ``[m]``."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    ids = list(token_ids)
    maskable = [i for i, t in enumerate(ids) if t not in SPECIAL_IDS]
    labels = [IGNORE_INDEX] * len(ids)
    if not maskable:
        return MaskedRow(ids, labels, [], empty=True)
    k = _round_half_up(mask_ratio * len(maskable))
    if k == 0:
        return MaskedRow(ids, labels, [], empty=False)
    chosen = sorted(int(i) for i in rng.choice(maskable, size=k, replace=False))
    for pos in chosen:
        labels[pos] = ids[pos]
        ids[pos] = MASK
    return MaskedRow(ids, labels, chosen)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray       # (B, L) int64, PAD-filled
    labels: np.ndarray          # (B, L) int64, IGNORE_INDEX outside M
    attention_mask: np.ndarray  # (B, L) int64
    mask_positions: list[list[int]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def empty(self) -> bool:
        return not np.any(self.labels != IGNORE_INDEX)


def pad_rows(rows: Sequence[Sequence[int]], fill: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate_masked(rows: Sequence[MaskedRow]) -> MaskedBatch:
    ids = pad_rows([r.input_ids for r in rows], PAD)
    labels = pad_rows([r.labels for r in rows], IGNORE_INDEX)
    attn = pad_rows([[1] * len(r.input_ids) for r in rows], 0)
    return MaskedBatch(ids, labels, attn, [list(r.mask_positions) for r in rows])


def mask_sequences(seqs: Sequence[Sequence[int]], mask_ratio: float, rng: np.random.Generator) -> MaskedBatch:
    return collate_masked([apply_mask(s, mask_ratio, rng) for s in seqs])


def unmasked_batch(seqs: Sequence[Sequence[int]]) -> MaskedBatch:
    return mask_sequences(seqs, 0.0, np.random.default_rng(0))


# -- coarse spans ---------------------------------------------------------------

@dataclass
class SpanPair:
    anchor_ids: list[int]
    context_ids: list[int]
    start: int = 0


class SpanTooShort(DataError):
    pass


def sample_coarse_span(document_ids: Sequence[int], span_len_range: tuple[int, int],
                       rng: np.random.Generator, mode: str = "span", max_len: int | None = None) -> SpanPair:
    """Crop a random span of ``document_ids`` (body tokens, no specials).

    Start is uniform over ``[0, n - lo]``, length uniform over ``[lo, hi]``
    and clipped at the document end. ``mode="self"`` returns the document as
    its own context. ``max_len`` bounds both sides to ``max_len - 2`` tokens.
    """
    doc = list(document_ids)
    cap = len(doc) if max_len is None else max_len - 2
    anchor = doc[:cap]
    if mode == "self":
        return SpanPair(anchor, list(anchor), 0)
    if mode != "span":
        raise ValueError(f"unknown span mode {mode!r}")
    lo, hi = span_len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid span length range {span_len_range}")
    n = len(doc)
    if n < lo:
        raise SpanTooShort(f"document of length {n} shorter than minimum span {lo}")
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, n - lo + 1))
    span = doc[start: min(n, start + length)][:cap]
    return SpanPair(anchor, span, start)


# -- batches for the two paradigms ----------------------------------------------

@dataclass
class ContrastiveBatch:
    passages: MaskedBatch
    contexts: MaskedBatch

    @property
    def negatives_per_row(self) -> int:
        return self.passages.batch_size - 1


def _wrap(body: Sequence[int], max_len: int) -> list[int]:
    return [CLS] + list(body)[: max_len - 2] + [SEP]


def make_contrastive_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], mask_ratio: float,
                           rng: np.random.Generator, max_len: int) -> ContrastiveBatch:
    """Row i of the contexts is the positive for row i of the passages."""
    if len(pairs) < 2:
        raise ValueError("contrastive batches need at least 2 pairs (no in-batch negatives otherwise)")
    passages = mask_sequences([_wrap(p, max_len) for p, _ in pairs], mask_ratio, rng)
    contexts = mask_sequences([_wrap(c, max_len) for _, c in pairs], mask_ratio, rng)
    return ContrastiveBatch(passages, contexts)


@dataclass
class BottleneckBatch:
    encoder: MaskedBatch
    ctx_input_ids: np.ndarray   # (B, N) x_1..x_N, PAD-filled
    ctx_mask: np.ndarray        # (B, N)
    ctx_targets: np.ndarray     # (B, N+1) x_1..x_N [SEP], IGNORE_INDEX-filled


def make_bottleneck_batch(passages: Sequence[Sequence[int]], contexts: Sequence[Sequence[int]],
                          mask_ratio: float, rng: np.random.Generator, max_len: int,
                          decoder_max_len: int | None = None) -> BottleneckBatch:
    """Masked encoder inputs plus unmasked decoder contexts and CLM targets."""
    if len(passages) != len(contexts) or not passages:
        raise ValueError("passages and contexts must be aligned and non-empty")
    dec_len = decoder_max_len or max_len
    enc = mask_sequences([_wrap(p, max_len) for p in passages], mask_ratio, rng)
    bodies = [list(c)[: dec_len - 1] for c in contexts]
    if any(len(b) == 0 for b in bodies):
        raise ValueError("bottleneck contexts must be non-empty")
    ctx = pad_rows(bodies, PAD)
    ctx_mask = pad_rows([[1] * len(b) for b in bodies], 0)
    targets = pad_rows([b + [SEP] for b in bodies], IGNORE_INDEX)
    return BottleneckBatch(enc, ctx, ctx_mask, targets)
