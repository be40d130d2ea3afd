import pytest

from ctrltab.data import (
    Cell,
    HighlightSet,
    KnowledgeBase,
    KnowledgeSentence,
    PairRecord,
    Table,
    Vocabulary,
    build_vocabulary,
    tokenize,
)


@pytest.fixture
def small_table() -> Table:
    return Table(
        id="p1",
        caption="main results",
        n_rows=2,
        n_cols=2,
        cells=(
            Cell(0, 0, "metric", "bleu", is_header=True),
            Cell(0, 1, "metric", "meteor", is_header=True),
            Cell(1, 0, "ours", "16.90"),
            Cell(1, 1, "ours", "0.34"),
        ),
    )


@pytest.fixture
def small_pair(small_table) -> PairRecord:
    kb = KnowledgeBase(
        (
            KnowledgeSentence(id="s0", text="bleu measures ngram overlap"),
            KnowledgeSentence(id="s1", text="meteor uses stem matching"),
        )
    )
    return PairRecord(
        id="p1",
        table=small_table,
        highlights=HighlightSet(frozenset({(1, 0)})),
        kb=kb,
        description="our model reaches 16.90 bleu",
        split="train",
    )


@pytest.fixture
def shared_vocab(small_pair) -> Vocabulary:
    streams = [tokenize(small_pair.description)]
    for cell in small_pair.table.cells:
        streams.append(tokenize(cell.attribute) + tokenize(cell.value))
    for s in small_pair.kb.sentences:
        streams.append(tokenize(s.text))
    streams.append([":", "|"])
    return build_vocabulary(streams)
