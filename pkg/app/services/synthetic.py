"""Desk-scale synthetic corpora.

Retrieval: a topic model. Every document draws most of its words from one
latent topic and the rest from a shared background pool; a query keeps a few
of its document's words and adds words from the same topic. STS: sentence
pairs whose gold score is the Jaccard overlap of their token sets scaled to
[0, 5].
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from app.core.errors import ConfigError
from app.core.logging import get_logger
from app.schemas.records import CorpusRecord, QueryRecord, RunQrels, StsPair, TrainPair

logger = get_logger(__name__)

RESERVED_IDS = 2
DEFAULT_TOPICS = 16
DOC_LENGTH = 24
QUERY_KEEP = 5
QUERY_NOISE = 2
TOPIC_SHARE = 0.7
STS_LENGTH = 8


@dataclass
class RetrievalTask:
    corpus: List[CorpusRecord]
    train: List[TrainPair]
    queries: List[QueryRecord]
    qrels: RunQrels
    qrel_rows: List[Tuple[str, str, int]] = field(default_factory=list)


def _word_pools(vocab_size: int, n_topics: int) -> Tuple[List[List[str]], List[str]]:
    usable = vocab_size - RESERVED_IDS
    n_background = usable // 4
    per_topic = (usable - n_background) // n_topics
    if per_topic < 2 or n_background < 1:
        raise ConfigError(
            f"vocab_size={vocab_size} too small for {n_topics} topics plus a background pool"
        )
    topics = [[f"t{t:02d}w{j:03d}" for j in range(per_topic)] for t in range(n_topics)]
    background = [f"bg{j:03d}" for j in range(n_background)]
    return topics, background


def _zipf_weights(n: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1)
    return weights / weights.sum()


def make_retrieval_task(
    n_docs: int,
    n_train: int,
    n_eval: int,
    vocab_size: int,
    seed: int,
    n_topics: int = DEFAULT_TOPICS,
) -> RetrievalTask:
    """Corpus, training pairs, held-out queries and binary qrels for one seed.

    Training and evaluation queries are built from disjoint documents.
    """
    if n_docs < 2 or n_train < 1 or n_eval < 1:
        raise ConfigError("need at least 2 docs, 1 training query and 1 eval query")
    if n_train + n_eval > n_docs:
        raise ConfigError(f"n_train + n_eval = {n_train + n_eval} exceeds n_docs = {n_docs}")

    rng = np.random.default_rng(seed)
    topics, background = _word_pools(vocab_size, n_topics)
    topic_weights = _zipf_weights(len(topics[0]))

    doc_topics = rng.integers(0, n_topics, size=n_docs)
    corpus: List[CorpusRecord] = []
    for i, topic in enumerate(doc_topics):
        from_topic = rng.random(DOC_LENGTH) < TOPIC_SHARE
        words = [
            topics[topic][rng.choice(len(topics[topic]), p=topic_weights)]
            if pick
            else background[rng.integers(len(background))]
            for pick in from_topic
        ]
        corpus.append(CorpusRecord(id=f"d{i:05d}", text=" ".join(words)))

    def make_query(doc_index: int) -> str:
        tokens = corpus[doc_index].text.split()
        keep = rng.choice(len(tokens), size=min(QUERY_KEEP, len(tokens)), replace=False)
        topic_words = topics[doc_topics[doc_index]]
        noise = [topic_words[rng.integers(len(topic_words))] for _ in range(QUERY_NOISE)]
        words = [tokens[j] for j in sorted(keep)] + noise
        rng.shuffle(words)
        return " ".join(words)

    order = rng.permutation(n_docs)
    train = [
        TrainPair(query=make_query(int(d)), positive=corpus[int(d)].text) for d in order[:n_train]
    ]

    queries: List[QueryRecord] = []
    qrels: RunQrels = {}
    rows: List[Tuple[str, str, int]] = []
    for j, d in enumerate(order[n_train : n_train + n_eval]):
        query_id = f"q{j:04d}"
        doc_id = corpus[int(d)].id
        queries.append(QueryRecord(id=query_id, text=make_query(int(d))))
        qrels[query_id] = {doc_id}
        rows.append((query_id, doc_id, 1))

    logger.info(
        "Synthesized retrieval task: %d docs, %d train pairs, %d eval queries (seed=%d)",
        n_docs,
        len(train),
        len(queries),
        seed,
    )
    return RetrievalTask(corpus=corpus, train=train, queries=queries, qrels=qrels, qrel_rows=rows)


def overlap_score(s1: str, s2: str) -> float:
    a, b = set(s1.split()), set(s2.split())
    if not a and not b:
        return 5.0
    return 5.0 * len(a & b) / len(a | b)


def make_sts_task(n_pairs: int, vocab_size: int, seed: int) -> List[StsPair]:
    """Sentence pairs sharing a random fraction of tokens, scored by overlap."""
    if n_pairs < 2:
        raise ConfigError("need at least 2 STS pairs")
    n_words = vocab_size - RESERVED_IDS
    if n_words < 2 * STS_LENGTH:
        raise ConfigError(f"vocab_size={vocab_size} too small for STS sentences")

    rng = np.random.default_rng(seed)
    words = [f"w{j:03d}" for j in range(n_words)]
    pairs: List[StsPair] = []
    for _ in range(n_pairs):
        first = [words[j] for j in rng.choice(n_words, size=STS_LENGTH, replace=False)]
        keep = rng.integers(0, STS_LENGTH + 1)
        second = first[:keep] + [
            words[j] for j in rng.choice(n_words, size=STS_LENGTH - keep, replace=False)
        ]
        rng.shuffle(second)
        s1, s2 = " ".join(first), " ".join(second)
        pairs.append(StsPair(s1=s1, s2=s2, score=round(overlap_score(s1, s2), 6)))
    logger.info("Synthesized %d STS pairs (seed=%d)", len(pairs), seed)
    return pairs


__all__ = [
    "RetrievalTask",
    "make_retrieval_task",
    "make_sts_task",
    "overlap_score",
]
