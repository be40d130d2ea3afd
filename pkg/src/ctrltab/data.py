"""Domain types, tokenization, input linearization, dataset I/O, and corpus statistics.

A task instance couples a table, a set of highlighted cells acting as the
user preference, and a knowledge base of supporting sentences; the target is
a reference description.  Everything here is immutable after construction
and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ValidationError

# Reserved vocabulary slots.  These ids are fixed regardless of corpus.
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_H_ID, SEP_T_ID, SEP_B_ID = range(7)
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<sep_h>", "<sep_t>", "<sep_b>")

SPLITS = ("train", "dev", "test")
KB_STATUSES = ("auto", "accepted", "rejected")

# Numbers stay whole (incl. decimal/thousands groups); letter runs stay whole;
# any other non-space character becomes its own token.
_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)*|[^\W\d_]+|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase and split text into word, number, and punctuation tokens.

    Matching runs on the lowered text so characters whose lowercase form
    expands (e.g. dotted capital I) tokenize the same way before and after."""
    return [m.group(0) for m in _TOKEN_RE.finditer(text.lower())]


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Lowercased tokens with (start, end) character spans into the original text."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Cell:
    """One attribute/value pair at a fixed grid position."""

    row: int
    col: int
    attribute: str
    value: str
    is_header: bool = False

    def validate(self) -> None:
        if self.row < 0 or self.col < 0:
            raise ValidationError(f"cell position ({self.row},{self.col}) must be non-negative")
        if not self.attribute and not self.value:
            raise ValidationError(f"cell ({self.row},{self.col}) has neither attribute nor value")


@dataclass(frozen=True)
class Table:
    id: str
    caption: str
    n_rows: int
    n_cols: int
    cells: tuple[Cell, ...]

    def __post_init__(self):
        # Canonical row-major storage order; makes serialization stable.
        object.__setattr__(self, "cells", tuple(sorted(self.cells, key=lambda c: (c.row, c.col))))

    def validate(self) -> None:
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise ValidationError(f"table {self.id}: grid {self.n_rows}x{self.n_cols} must be positive")
        if len(self.cells) > self.n_rows * self.n_cols:
            raise ValidationError(f"table {self.id}: more cells than grid positions")
        seen = set()
        for cell in self.cells:
            cell.validate()
            if cell.row >= self.n_rows or cell.col >= self.n_cols:
                raise ValidationError(
                    f"table {self.id}: cell ({cell.row},{cell.col}) outside {self.n_rows}x{self.n_cols} grid"
                )
            if (cell.row, cell.col) in seen:
                raise ValidationError(f"table {self.id}: duplicate cell position ({cell.row},{cell.col})")
            seen.add((cell.row, cell.col))

    def cell_at(self, row: int, col: int) -> Cell | None:
        for cell in self.cells:
            if cell.row == row and cell.col == col:
                return cell
        return None


@dataclass(frozen=True)
class HighlightSet:
    """Cell coordinates marked as the user preference.  May be empty."""

    refs: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "refs", frozenset(tuple(r) for r in self.refs))

    def validate(self, table: Table) -> None:
        positions = {(c.row, c.col) for c in table.cells}
        for ref in self.refs:
            if ref not in positions:
                raise ValidationError(f"highlight {ref} does not resolve to a cell of table {table.id}")

    def sorted_refs(self) -> list[tuple[int, int]]:
        return sorted(self.refs)

    def __len__(self) -> int:
        return len(self.refs)

    def __contains__(self, ref: tuple[int, int]) -> bool:
        return tuple(ref) in self.refs


@dataclass(frozen=True)
class KnowledgeSentence:
    id: str
    text: str
    status: str = "auto"
    source_offset: tuple[int, int] | None = None

    def validate(self) -> None:
        if not self.text:
            raise ValidationError(f"knowledge sentence {self.id} has empty text")
        if self.status not in KB_STATUSES:
            raise ValidationError(f"knowledge sentence {self.id} has unknown status {self.status!r}")

    def with_status(self, status: str) -> "KnowledgeSentence":
        """Return a copy with the verdict applied; only auto sentences may transition."""
        if self.status != "auto" and status != self.status:
            raise ValidationError(f"sentence {self.id}: illegal status transition {self.status} -> {status}")
        if status not in ("accepted", "rejected"):
            raise ValidationError(f"sentence {self.id}: target status must be accepted or rejected")
        return replace(self, status=status)


@dataclass(frozen=True)
class KnowledgeBase:
    sentences: tuple[KnowledgeSentence, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))

    def validate(self) -> None:
        ids = [s.id for s in self.sentences]
        if len(ids) != len(set(ids)):
            raise ValidationError("knowledge base has duplicate sentence ids")
        for s in self.sentences:
            s.validate()

    def by_id(self, sentence_id: str) -> KnowledgeSentence | None:
        for s in self.sentences:
            if s.id == sentence_id:
                return s
        return None

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class PairRecord:
    """One task instance: (table, highlights, knowledge) plus its reference description."""

    id: str
    table: Table
    highlights: HighlightSet
    kb: KnowledgeBase
    description: str
    split: str

    def validate(self) -> None:
        try:
            self.table.validate()
            self.highlights.validate(self.table)
            self.kb.validate()
        except ValidationError as exc:
            raise ValidationError(f"pair {self.id}: {exc}") from exc
        if self.split not in SPLITS:
            raise ValidationError(f"pair {self.id}: unknown split {self.split!r}")
        if self.split in ("train", "dev") and not self.description:
            raise ValidationError(f"pair {self.id}: description required for split {self.split}")


@dataclass(frozen=True)
class CorpusStats:
    n_pairs: int
    avg_cells: float
    avg_desc_tokens: float
    highlight_ratio: float
    avg_kb_sentences: float

    def as_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "avg_cells": self.avg_cells,
            "avg_desc_tokens": self.avg_desc_tokens,
            "highlight_ratio": self.highlight_ratio,
            "avg_kb_sentences": self.avg_kb_sentences,
        }


class Vocabulary:
    """Token/id bijection with seven fixed reserved slots."""

    def __init__(self, tokens: Sequence[str]):
        self._token_to_id: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            if tok not in self._token_to_id:
                self._token_to_id[tok] = len(self._token_to_id)
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}

    @property
    def size(self) -> int:
        return len(self._token_to_id)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token.get(token_id, RESERVED_TOKENS[UNK_ID])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]

    def non_reserved_tokens(self) -> list[str]:
        return [self._id_to_token[i] for i in range(len(RESERVED_TOKENS), self.size)]


def build_vocabulary(corpus: Iterable[Sequence[str]], min_freq: int = 1, max_size: int = 8192) -> Vocabulary:
    """Frequency-ordered vocabulary; ties break lexicographically."""
    if max_size <= len(RESERVED_TOKENS):
        raise ConfigError(f"max_size must exceed the {len(RESERVED_TOKENS)} reserved slots, got {max_size}")
    counts: Counter[str] = Counter()
    for seq in corpus:
        counts.update(seq)
    ranked = sorted(
        (tok for tok, n in counts.items() if n >= min_freq and tok not in RESERVED_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(ranked[: max_size - len(RESERVED_TOKENS)])


@dataclass(frozen=True)
class LinearizedInput:
    """Token-id rendering of (highlights, table, knowledge) with segment lengths."""

    token_ids: tuple[int, ...]
    l_h: int
    l_t: int
    l_b: int

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(self.token_ids))
        expected = self.l_h + self.l_t + self.l_b + 3
        if len(self.token_ids) != expected:
            raise ValidationError(
                f"linearized length {len(self.token_ids)} != l_h+l_t+l_b+3 = {expected}"
            )


def cell_tokens(cell: Cell) -> list[str]:
    """Render one cell as `attribute : value |` tokens."""
    return tokenize(cell.attribute) + [":"] + tokenize(cell.value) + ["|"]


def render_cell_text(cell: Cell) -> str:
    return f"{cell.attribute} : {cell.value} |"


def segment_tokens(
    table: Table, highlights: HighlightSet, kb_selected: Sequence[KnowledgeSentence]
) -> tuple[list[str], list[str], list[str]]:
    """Token lists for the highlight, table, and knowledge segments (no separators)."""
    t_toks: list[str] = []
    for cell in table.cells:  # already row-major
        t_toks.extend(cell_tokens(cell))
    h_toks: list[str] = []
    for row, col in highlights.sorted_refs():
        cell = table.cell_at(row, col)
        if cell is not None:
            h_toks.extend(cell_tokens(cell))
    b_toks: list[str] = []
    for sent in kb_selected:
        b_toks.extend(tokenize(sent.text))
        b_toks.append("|")
    return h_toks, t_toks, b_toks


def linearize(
    table: Table,
    highlights: HighlightSet,
    kb_selected: Sequence[KnowledgeSentence],
    order: str,
    vocab: Vocabulary,
) -> LinearizedInput:
    """Assemble the separator-delimited input sequence in HTB or BTH order."""
    highlights.validate(table)
    h, t, b = segment_tokens(table, highlights, kb_selected)
    if order == "HTB":
        ids = [SEP_H_ID, *vocab.encode(h), SEP_T_ID, *vocab.encode(t), SEP_B_ID, *vocab.encode(b)]
    elif order == "BTH":
        ids = [SEP_B_ID, *vocab.encode(b), SEP_T_ID, *vocab.encode(t), SEP_H_ID, *vocab.encode(h)]
    else:
        raise ValidationError(f"unknown linearization order {order!r}")
    return LinearizedInput(tuple(ids), l_h=len(h), l_t=len(t), l_b=len(b))


def split_for_id(pair_id: str) -> str:
    """80/10/10 split assignment by stable hash of the pair id."""
    bucket = int.from_bytes(hashlib.sha256(pair_id.encode("utf-8")).digest()[:8], "big") % 100
    if bucket < 80:
        return "train"
    if bucket < 90:
        return "dev"
    return "test"


# ---------------------------------------------------------------------------
# Pairs file I/O (JSONL, canonical key order, no extra whitespace)
# ---------------------------------------------------------------------------

def pair_to_dict(pair: PairRecord) -> dict:
    return {
        "id": pair.id,
        "table": {
            "caption": pair.table.caption,
            "n_rows": pair.table.n_rows,
            "n_cols": pair.table.n_cols,
            "cells": [
                {
                    "row": c.row,
                    "col": c.col,
                    "attribute": c.attribute,
                    "value": c.value,
                    "is_header": c.is_header,
                }
                for c in pair.table.cells
            ],
        },
        "highlights": [list(ref) for ref in pair.highlights.sorted_refs()],
        "kb": [{"id": s.id, "text": s.text, "status": s.status} for s in pair.kb.sentences],
        "description": pair.description,
        "split": pair.split,
    }


def pair_from_dict(obj: dict) -> PairRecord:
    try:
        table = Table(
            id=obj["id"],
            caption=obj["table"]["caption"],
            n_rows=obj["table"]["n_rows"],
            n_cols=obj["table"]["n_cols"],
            cells=tuple(
                Cell(
                    row=c["row"],
                    col=c["col"],
                    attribute=c["attribute"],
                    value=c["value"],
                    is_header=bool(c.get("is_header", False)),
                )
                for c in obj["table"]["cells"]
            ),
        )
        pair = PairRecord(
            id=obj["id"],
            table=table,
            highlights=HighlightSet(frozenset(tuple(ref) for ref in obj["highlights"])),
            kb=KnowledgeBase(
                tuple(
                    KnowledgeSentence(id=s["id"], text=s["text"], status=s["status"])
                    for s in obj["kb"]
                )
            ),
            description=obj["description"],
            split=obj["split"],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"record {obj.get('id', '?')}: missing or malformed field ({exc})") from exc
    pair.validate()
    return pair


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_pairs(pairs: Sequence[PairRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(_dump_line(pair_to_dict(pair)))
            fh.write("\n")


def read_pairs(path: str | Path) -> list[PairRecord]:
    pairs: list[PairRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            pairs.append(pair_from_dict(obj))
    return pairs


def corpus_stats(dataset: Sequence[PairRecord]) -> CorpusStats:
    """Arithmetic means over the dataset; highlight ratio is cellwise, not pairwise."""
    if not dataset:
        raise ValidationError("corpus_stats requires a non-empty dataset")
    total_cells = sum(len(p.table.cells) for p in dataset)
    total_highlights = sum(len(p.highlights) for p in dataset)
    n = len(dataset)
    return CorpusStats(
        n_pairs=n,
        avg_cells=total_cells / n,
        avg_desc_tokens=sum(len(tokenize(p.description)) for p in dataset) / n,
        highlight_ratio=(total_highlights / total_cells) if total_cells else 0.0,
        avg_kb_sentences=sum(len(p.kb) for p in dataset) / n,
    )
