"""Seeded synthetic corpora for exercising the retriever and generator.

Three families:

* a topical retrieval corpus where each table's knowledge sentences share
  description keywords that never appear verbatim in the table, so lexical
  retrieval is ambiguous while the learned embedding can exploit
  co-occurrence;
* a small memorization set for overfitting checks;
* a knowledge-grounding task whose reference descriptions contain tokens
  that occur only in knowledge sentences, so ablating the knowledge segment
  must hurt.
"""

from __future__ import annotations

import numpy as np

from .data import (
    Cell,
    HighlightSet,
    KnowledgeBase,
    KnowledgeSentence,
    PairRecord,
    Table,
)

_ATTRS = ("metric", "system", "dataset", "score", "size", "setting")
_BACKGROUND = (
    "analysis", "shows", "results", "indicate", "observed", "measured",
    "reported", "overall", "baseline", "improves", "consistent", "across",
)


def _word(prefix: str, *indices: int) -> str:
    """Letter-only synthetic token (digits would split under the tokenizer)."""
    return prefix + "".join(chr(ord("a") + i) for i in indices)


def topic_retrieval_corpus(
    n_tables: int = 20,
    sentences_per_table: int = 20,
    seed: int = 42,
    n_keywords: int = 12,
    n_foreign: int = 3,
) -> list[PairRecord]:
    """Each sentence names one entity of its own table, several entities of
    other tables, and keyword tokens shared only within its topic.

    The single own-entity plus the foreign distractors make bag-of-words
    retrieval ambiguous; the keyword channel is invisible to it entirely but
    learnable from sentence/table co-occurrence."""
    rng = np.random.default_rng(seed)
    numerics = [f"{v / 10:.1f}" for v in range(10, 50)]
    all_entities = {t: [_word("ent", t, k) for k in range(2)] for t in range(n_tables)}
    all_keywords = {t: [_word("kw", t, k) for k in range(n_keywords)] for t in range(n_tables)}
    pairs = []
    for topic in range(n_tables):
        entities = all_entities[topic]
        keywords = all_keywords[topic]
        cells = (
            Cell(0, 0, _ATTRS[0], entities[0]),
            Cell(0, 1, _ATTRS[1], entities[1]),
            Cell(0, 2, _ATTRS[3], numerics[int(rng.integers(len(numerics)))]),
        )
        table = Table(id=f"t{topic:02d}", caption=f"results for {entities[0]}",
                      n_rows=1, n_cols=3, cells=cells)
        highlights = HighlightSet(frozenset({(0, 0)}))
        sentences = []
        for k in range(sentences_per_table):
            words = [entities[int(rng.integers(2))]]
            words += [keywords[j] for j in rng.choice(n_keywords, size=4, replace=False)]
            for _ in range(n_foreign):
                other = int(rng.integers(n_tables))
                words.append(all_entities[other][int(rng.integers(2))])
            words.append(_BACKGROUND[int(rng.integers(len(_BACKGROUND)))])
            words.append(numerics[int(rng.integers(len(numerics)))])
            # Word order is randomized so sentence-internal n-gram structure
            # carries no signal; only the token inventory identifies the topic.
            rng.shuffle(words)
            sentences.append(KnowledgeSentence(id=f"{table.id}-s{k:02d}", text=" ".join(words)))
        pairs.append(
            PairRecord(
                id=table.id,
                table=table,
                highlights=highlights,
                kb=KnowledgeBase(tuple(sentences)),
                description=f"a study of {table.caption}",
                split="train",
            )
        )
    return pairs


def pooled_retrieval_pair(pairs: list[PairRecord], query_index: int) -> PairRecord:
    """The query table paired with the union of every table's sentences."""
    all_sentences = tuple(s for p in pairs for s in p.kb.sentences)
    query = pairs[query_index]
    return PairRecord(
        id=f"{query.id}-pooled",
        table=query.table,
        highlights=query.highlights,
        kb=KnowledgeBase(all_sentences),
        description=query.description,
        split="test",
    )


def memorization_pairs(n: int = 32, seed: int = 7) -> list[PairRecord]:
    """Small distinct-description corpus for overfitting checks."""
    rng = np.random.default_rng(seed)
    systems = [_word("sys", k) for k in range(8)]
    datasets = [_word("data", k) for k in range(8)]
    verbs = ("achieves", "reaches", "obtains", "records")
    pairs = []
    for i in range(n):
        sys_name = systems[i % len(systems)]
        ds = datasets[(i // len(systems)) % len(datasets)]
        value = f"{rng.integers(10, 99)}.{rng.integers(0, 9)}0"
        verb = verbs[int(rng.integers(len(verbs)))]
        cells = (
            Cell(0, 0, "system", sys_name),
            Cell(0, 1, "dataset", ds),
            Cell(0, 2, "score", value),
        )
        table = Table(id=f"m{i:02d}", caption=f"scores on {ds}", n_rows=1, n_cols=3, cells=cells)
        kb = KnowledgeBase((KnowledgeSentence(id=f"m{i:02d}-s0", text=f"{ds} is a benchmark"),))
        pairs.append(
            PairRecord(
                id=table.id,
                table=table,
                highlights=HighlightSet(frozenset({(0, 2)})),
                kb=kb,
                description=f"{sys_name} {verb} {value} on {ds}",
                split="train",
            )
        )
    return pairs


def knowledge_grounded_pairs(
    n_train: int = 160,
    n_test: int = 40,
    n_outcomes: int = 40,
    seed: int = 42,
) -> list[PairRecord]:
    """Descriptions contain an outcome token that appears only in the pair's
    knowledge sentence, never in the table, so the knowledge segment is the
    only path to it."""
    rng = np.random.default_rng(seed)
    metrics = [_word("met", k) for k in range(10)]
    systems = [_word("sysq", k) for k in range(10)]
    datasets = [_word("corp", k) for k in range(10)]
    outcomes = [_word("out", k // 10, k % 10) for k in range(n_outcomes)]
    pairs = []
    for i in range(n_train + n_test):
        metric = metrics[int(rng.integers(len(metrics)))]
        system = systems[int(rng.integers(len(systems)))]
        ds = datasets[int(rng.integers(len(datasets)))]
        outcome = outcomes[int(rng.integers(len(outcomes)))]
        cells = (
            Cell(0, 0, "metric", metric),
            Cell(0, 1, "system", system),
            Cell(0, 2, "dataset", ds),
        )
        table = Table(id=f"g{i:03d}", caption=f"evaluation on {ds}", n_rows=1, n_cols=3, cells=cells)
        kb = KnowledgeBase(
            (KnowledgeSentence(id=f"g{i:03d}-s0", text=f"the analysis indicates {outcome} behaviour"),)
        )
        pairs.append(
            PairRecord(
                id=table.id,
                table=table,
                highlights=HighlightSet(frozenset({(0, 0), (0, 1)})),
                kb=kb,
                description=f"{system} obtains {metric} on {ds} showing {outcome}",
                split="train" if i < n_train else "test",
            )
        )
    return pairs
