"""Generated topic-model benchmark for desk-scale trend experiments.

Passages mix words from one dominant topic, a second random topic and a
background of function words. Held-out queries are short question-shaped
strings drawn from a topic's word distribution; every passage sharing that
dominant topic is relevant (grade 1), the passage the query was seeded from
gets grade 2.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import Passage
from .train import Triple

_ONSETS = "b c d f g h j k l m n p r s t v w z br dr fl gr kl pr st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "n", "r", "s", "l", "m", "x", "nd", "rk", "st"]

BACKGROUND = ("the of and a to in is was for on that with as by it from at are this be "
              "or an which their has also its more other into can".split())
QUERY_SKELETONS = ("what is {a}", "{a} {b}", "how does {a} relate to {b}", "{a} {b} {c}", "define {a} {b}")


def pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` distinct pronounceable lowercase words."""
    pool = sorted({o + v + c + v2 for o, v, c, v2 in itertools.product(_ONSETS, _VOWELS, _CODAS, ["", "a", "o", "i"])})
    if n > len(pool):
        raise ValueError(f"cannot make {n} distinct words")
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks]


@dataclass
class TopicBenchmark:
    corpus: list[Passage]
    queries: list[Passage]
    qrels: dict
    topics: list[int]
    train_triples: list[Triple] = field(default_factory=list)
    topic_words: list[list[str]] = field(default_factory=list)


@dataclass
class TopicModelSpec:
    n_passages: int = 2000
    n_topics: int = 50
    n_queries: int = 200
    n_train_queries: int = 256
    words_per_topic: int = 30
    shared_words: int = 300
    passage_len: tuple[int, int] = (20, 30)
    p_background: float = 0.3
    p_shared: float = 0.2
    p_secondary: float = 0.15
    zipf: float = 1.0
    seed: int = 0


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def make_topic_benchmark(spec: TopicModelSpec | None = None, **overrides) -> TopicBenchmark:
    spec = spec or TopicModelSpec(**overrides)
    rng = np.random.default_rng([spec.seed, 7])
    words = pseudo_words(spec.n_topics * spec.words_per_topic + spec.shared_words, rng)
    topic_words = [words[t * spec.words_per_topic:(t + 1) * spec.words_per_topic] for t in range(spec.n_topics)]
    shared = words[spec.n_topics * spec.words_per_topic:]
    tw = _zipf(spec.words_per_topic, spec.zipf)
    sw = _zipf(len(shared), spec.zipf)
    bw = _zipf(len(BACKGROUND), 1.0)

    def topic_word(t: int, r) -> str:
        return topic_words[t][r.choice(spec.words_per_topic, p=tw)]

    topics = [int(t) for t in rng.integers(spec.n_topics, size=spec.n_passages)]
    corpus = []
    width = len(str(spec.n_passages))
    for i, t in enumerate(topics):
        second = int(rng.integers(spec.n_topics))
        n = int(rng.integers(spec.passage_len[0], spec.passage_len[1] + 1))
        toks = []
        for u in rng.random(n):
            if u < spec.p_background:
                toks.append(BACKGROUND[rng.choice(len(BACKGROUND), p=bw)])
            elif u < spec.p_background + spec.p_shared:
                toks.append(shared[rng.choice(len(shared), p=sw)])
            elif u < spec.p_background + spec.p_shared + spec.p_secondary:
                toks.append(topic_word(second, rng))
            else:
                toks.append(topic_word(t, rng))
        corpus.append(Passage(f"p{i:0{width}d}", " ".join(toks)))

    by_topic: dict[int, list[str]] = {}
    for p, t in zip(corpus, topics):
        by_topic.setdefault(t, []).append(p.id)

    def make_query(r) -> tuple[int, int, str]:
        src = int(r.integers(spec.n_passages))
        t = topics[src]
        skel = QUERY_SKELETONS[int(r.integers(len(QUERY_SKELETONS)))]
        picks = r.choice(spec.words_per_topic, size=3, replace=False, p=tw)
        text = skel.format(**{k: topic_words[t][j] for k, j in zip("abc", picks)})
        return src, t, text

    qrng = np.random.default_rng([spec.seed, 11])
    queries, qrels = [], {}
    for j in range(spec.n_queries):
        src, t, text = make_query(qrng)
        qid = f"q{j:04d}"
        queries.append(Passage(qid, text))
        judged = {pid: 1 for pid in by_topic[t]}
        judged[corpus[src].id] = 2
        qrels[qid] = judged

    trng = np.random.default_rng([spec.seed, 13])
    triples = []
    for _ in range(spec.n_train_queries):
        src, t, text = make_query(trng)
        negs = []
        while len(negs) < 8:
            c = int(trng.integers(spec.n_passages))
            if topics[c] != t:
                negs.append(corpus[c].id)
        triples.append(Triple(text, corpus[src].id, negs))
    return TopicBenchmark(corpus, queries, qrels, topics, triples, topic_words)
