"""Corpus construction: article XML ingestion, sentence/table alignment,
deduplication against descriptions, automatic cell highlighting, and
inter-annotator agreement.

The pipeline is deterministic: identical inputs produce byte-identical pairs
files regardless of scheduling, because per-article results merge in stable
article/table order.
"""

from __future__ import annotations

import logging
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

from .data import (
    HighlightSet,
    KnowledgeBase,
    KnowledgeSentence,
    PairRecord,
    Table,
    split_for_id,
    tokenize,
    tokenize_with_spans,
)
from .errors import SchemaError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_THETA_OVERLAP = 0.15
DEFAULT_THETA_DUP = 0.8
DEFAULT_CAP = 40

# Sentence boundary: terminal punctuation, whitespace, then an uppercase letter
# or digit.  Common scholarly abbreviations must not end a sentence.
_ABBREVIATIONS = (
    "et al.", "e.g.", "i.e.", "cf.", "vs.", "fig.", "figs.", "eq.", "eqs.",
    "tab.", "sec.", "no.", "vol.", "pp.", "ref.", "refs.", "approx.", "resp.",
    "dr.", "prof.", "mr.", "mrs.", "ms.",
)
_BOUNDARY_RE = re.compile(r"[.?!](?=\s+[A-Z0-9(])")


def _stopwords() -> frozenset[str]:
    text = resources.files("ctrltab.resources").joinpath("stopwords_v1.txt").read_text("utf-8")
    return frozenset(text.split())


STOPWORDS = _stopwords()


@dataclass(frozen=True)
class Article:
    """Sentence-segmented article text plus the table ids it declares."""

    id: str
    sentences: tuple[tuple[int, str, int], ...]  # (index, text, char_offset)
    table_ids: tuple[str, ...] = ()

    def validate(self) -> None:
        for expected, (idx, _, _) in enumerate(self.sentences):
            if idx != expected:
                raise ValidationError(f"article {self.id}: sentence indices not contiguous at {idx}")


@dataclass(frozen=True)
class Mention:
    """A table-cell reference found in a sentence."""

    cell_ref: tuple[int, int]
    span: tuple[int, int]
    kind: str  # value_exact | numeric | attribute


@dataclass(frozen=True)
class AgreementReport:
    n_samples: int
    cell_agreement: float
    kb_agreement: float

    def __post_init__(self):
        for name in ("cell_agreement", "kb_agreement"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}={v} outside [0,1]")


def split_sentences(text: str) -> list[tuple[str, int]]:
    """Rule-based sentence segmentation; returns (sentence, char_offset) pairs."""
    boundaries = []
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end()
        prefix = text[:end].lower()
        if any(prefix.endswith(abbr) for abbr in _ABBREVIATIONS):
            continue
        boundaries.append(end)
    sentences = []
    start = 0
    for cut in boundaries + [len(text)]:
        chunk = text[start:cut]
        stripped = chunk.strip()
        if stripped:
            offset = start + (len(chunk) - len(chunk.lstrip()))
            sentences.append((stripped, offset))
        start = cut
    return sentences


def _byte_offset(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: line - 1]) + column


def parse_article_xml(data: bytes) -> Article:
    """Parse the minimal article schema: <article id> with <sec>/<p> paragraphs
    and <table-wrap id> declarations.  Unknown elements are ignored with a warning."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        offset = max(1, _byte_offset(data, line, column))
        raise SchemaError(f"malformed XML at byte offset {offset}: {exc.msg if hasattr(exc, 'msg') else exc}") from exc
    if root.tag != "article":
        raise SchemaError(f"unknown root element <{root.tag}>, expected <article>")
    article_id = root.get("id", "")

    known = {"article", "sec", "p", "table-wrap", "caption"}
    paragraphs: list[str] = []
    table_ids: list[str] = []

    def walk(elem: ET.Element) -> None:
        for child in elem:
            if child.tag == "p":
                paragraphs.append("".join(child.itertext()).strip())
            elif child.tag == "table-wrap":
                table_ids.append(child.get("id", ""))
            elif child.tag == "sec":
                walk(child)
            else:
                if child.tag not in known:
                    log.warning("article %s: ignoring unknown element <%s>", article_id, child.tag)
                walk(child)

    walk(root)

    sentences: list[tuple[int, str, int]] = []
    offset = 0
    for para in paragraphs:
        for sent, local in split_sentences(para):
            sentences.append((len(sentences), sent, offset + local))
        offset += len(para) + 1  # paragraphs separated by one newline in the text stream
    article = Article(id=article_id, sentences=tuple(sentences), table_ids=tuple(table_ids))
    article.validate()
    return article


def _parse_numeric(text: str) -> float | None:
    cleaned = text.strip().replace(",", "").replace("%", "")
    if not cleaned:
        return None
    try:
        return float(cleaned)
    except ValueError:
        return None


def _find_token_seq(haystack: list[tuple[str, int, int]], needle: list[str]) -> list[tuple[int, int]]:
    """Spans of whole-token subsequence matches of `needle` in the tokenized text."""
    if not needle:
        return []
    spans = []
    toks = [t for t, _, _ in haystack]
    for i in range(len(toks) - len(needle) + 1):
        if toks[i : i + len(needle)] == needle:
            spans.append((haystack[i][1], haystack[i + len(needle) - 1][2]))
    return spans


def detect_entity_mentions(sentence: str, table: Table) -> list[Mention]:
    """Find cell values (exact or numeric) and attributes mentioned in a sentence."""
    toks = tokenize_with_spans(sentence)
    numeric_tokens = [(t, s, e, _parse_numeric(t)) for t, s, e in toks]
    mentions: list[Mention] = []
    for cell in table.cells:
        ref = (cell.row, cell.col)
        value_toks = tokenize(cell.value)
        for span in _find_token_seq(toks, value_toks):
            mentions.append(Mention(ref, span, "value_exact"))
        cell_num = _parse_numeric(cell.value)
        if cell_num is not None:
            target = round(cell_num, 2)
            for tok, s, e, num in numeric_tokens:
                if num is not None and round(num, 2) == target:
                    mentions.append(Mention(ref, (s, e), "numeric"))
        attr_toks = tokenize(cell.attribute)
        for span in _find_token_seq(toks, attr_toks):
            mentions.append(Mention(ref, span, "attribute"))
    mentions.sort(key=lambda m: (m.span, m.cell_ref, m.kind))
    return mentions


def content_tokens(text: str) -> set[str]:
    """Distinct word/number tokens with stopwords and bare punctuation removed."""
    return {
        t for t in tokenize(text)
        if t not in STOPWORDS and any(ch.isalnum() for ch in t)
    }


def table_token_set(table: Table) -> set[str]:
    toks: set[str] = set(tokenize(table.caption))
    for cell in table.cells:
        toks.update(tokenize(cell.attribute))
        toks.update(tokenize(cell.value))
    return toks


def _overlap_score(sentence: str, table_tokens: set[str]) -> float:
    content = content_tokens(sentence)
    if not content:
        return 0.0
    return len(content & table_tokens) / len(content)


def align_tables(
    tables: Sequence[Table],
    article: Article,
    theta_overlap: float = DEFAULT_THETA_OVERLAP,
    cap: int = DEFAULT_CAP,
) -> dict[str, list[KnowledgeSentence]]:
    """Assign article sentences to tables by token overlap.

    Each sentence goes to its single highest-scoring table (ties favor table
    order).  Per table, candidates are processed in descending score (ties in
    document order), kept while score >= theta_overlap and the sentence
    mentions at least one cell, and cut at `cap`.
    """
    if not (0.0 < theta_overlap <= 1.0):
        raise ValidationError(f"theta_overlap {theta_overlap} outside (0,1]")
    if cap < 1:
        raise ValidationError(f"cap must be >= 1, got {cap}")
    token_sets = {t.id: table_token_set(t) for t in tables}
    assigned: dict[str, list[tuple[float, int, str, int]]] = {t.id: [] for t in tables}
    for idx, sent, offset in article.sentences:
        best_table = None
        best_score = 0.0
        for t in tables:
            score = _overlap_score(sent, token_sets[t.id])
            if score > best_score:
                best_score, best_table = score, t
        if best_table is not None:
            assigned[best_table.id].append((best_score, idx, sent, offset))

    result: dict[str, list[KnowledgeSentence]] = {}
    for t in tables:
        kept: list[KnowledgeSentence] = []
        for score, idx, sent, offset in sorted(assigned[t.id], key=lambda x: (-x[0], x[1])):
            if len(kept) >= cap:
                break
            if score < theta_overlap:
                break  # candidates are score-sorted; nothing below passes
            if not detect_entity_mentions(sent, t):
                continue
            kept.append(
                KnowledgeSentence(
                    id=f"{article.id}-s{idx}",
                    text=sent,
                    status="auto",
                    source_offset=(offset, offset + len(sent)),
                )
            )
        result[t.id] = kept
    return result


def greedy_align(
    table: Table,
    article: Article,
    theta_overlap: float = DEFAULT_THETA_OVERLAP,
    cap: int = DEFAULT_CAP,
) -> list[KnowledgeSentence]:
    """Single-table alignment; see :func:`align_tables` for the scoring rule."""
    return align_tables([table], article, theta_overlap, cap)[table.id]


def _token_f1(a: list[str], b: list[str]) -> float:
    if not a or not b:
        return 0.0
    overlap = sum((Counter(a) & Counter(b)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(a)
    recall = overlap / len(b)
    return 2 * precision * recall / (precision + recall)


def _normalize(text: str) -> str:
    return " ".join(tokenize(text))


def dedup_against_description(
    candidates: Sequence[KnowledgeSentence],
    description: str,
    theta_dup: float = DEFAULT_THETA_DUP,
) -> list[KnowledgeSentence]:
    """Drop candidates that restate a description sentence (token F1 >= theta_dup
    or substring containment after normalization); order is preserved."""
    if not (0.0 < theta_dup <= 1.0):
        raise ValidationError(f"theta_dup {theta_dup} outside (0,1]")
    desc_sents = [s for s, _ in split_sentences(description)] or ([description] if description else [])
    desc_tokens = [tokenize(s) for s in desc_sents]
    desc_norm = _normalize(description)
    kept = []
    for cand in candidates:
        cand_toks = tokenize(cand.text)
        cand_norm = _normalize(cand.text)
        duplicate = any(_token_f1(cand_toks, ref) >= theta_dup for ref in desc_tokens)
        if not duplicate and cand_norm and desc_norm:
            duplicate = cand_norm in desc_norm or desc_norm in cand_norm
        if not duplicate:
            kept.append(cand)
    return kept


def auto_highlight(table: Table, description: str) -> HighlightSet:
    """Highlight cells whose value appears in the description.

    Only value matches (exact token sequence or numeric equality) qualify;
    attribute-only matches do not."""
    refs = {
        m.cell_ref
        for m in detect_entity_mentions(description, table)
        if m.kind in ("value_exact", "numeric")
    }
    return HighlightSet(frozenset(refs))


# ---------------------------------------------------------------------------
# Inter-annotator agreement
# ---------------------------------------------------------------------------

# One annotator's decisions for one pair: the highlight set they kept, and a
# keep/drop verdict for every knowledge sentence.
Annotation = tuple[HighlightSet, Mapping[str, bool]]


def compute_agreement(
    tables: Mapping[str, Table],
    a: Mapping[str, Annotation],
    b: Mapping[str, Annotation],
    sample_ids: Sequence[str] | None = None,
) -> AgreementReport:
    """Fraction of per-cell highlight decisions and per-sentence keep/drop
    verdicts on which two annotators coincide, over their common pairs."""
    if set(a) != set(b):
        raise ValidationError(
            f"annotators cover different pairs: {sorted(set(a) ^ set(b))[:5]}"
        )
    ids = list(a) if sample_ids is None else list(sample_ids)
    if not ids:
        raise ValidationError("no common pairs to compare")
    cells_same = cells_total = 0
    kb_same = kb_total = 0
    for pid in ids:
        if pid not in a or pid not in b:
            raise ValidationError(f"pair {pid} missing from one annotator")
        table = tables[pid]
        h_a, kb_a = a[pid]
        h_b, kb_b = b[pid]
        for cell in table.cells:
            ref = (cell.row, cell.col)
            cells_total += 1
            if (ref in h_a) == (ref in h_b):
                cells_same += 1
        if set(kb_a) != set(kb_b):
            raise ValidationError(f"pair {pid}: annotators judged different sentence sets")
        for sid, keep in kb_a.items():
            kb_total += 1
            if keep == kb_b[sid]:
                kb_same += 1
    cell_rate = round(cells_same / cells_total, 3) if cells_total else 1.0
    kb_rate = round(kb_same / kb_total, 3) if kb_total else 1.0
    return AgreementReport(n_samples=len(ids), cell_agreement=cell_rate, kb_agreement=kb_rate)


# ---------------------------------------------------------------------------
# End-to-end pair construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TableSource:
    """One row of the tables input file: a table plus its reference description."""

    table: Table
    article_id: str
    description: str


def build_pairs(
    sources: Sequence[TableSource],
    articles: Mapping[str, Article],
    theta_overlap: float = DEFAULT_THETA_OVERLAP,
    theta_dup: float = DEFAULT_THETA_DUP,
    cap: int = DEFAULT_CAP,
) -> list[PairRecord]:
    """Run alignment, dedup, and auto-highlighting over every source table."""
    by_article: dict[str, list[TableSource]] = {}
    for src in sources:
        by_article.setdefault(src.article_id, []).append(src)

    pairs: list[PairRecord] = []
    for article_id in sorted(by_article):
        group = sorted(by_article[article_id], key=lambda s: s.table.id)
        if article_id not in articles:
            raise ValidationError(f"no article XML found for article id {article_id!r}")
        aligned = align_tables([s.table for s in group], articles[article_id], theta_overlap, cap)
        for src in group:
            kb_sents = dedup_against_description(aligned[src.table.id], src.description, theta_dup)
            pair = PairRecord(
                id=src.table.id,
                table=src.table,
                highlights=auto_highlight(src.table, src.description),
                kb=KnowledgeBase(tuple(kb_sents)),
                description=src.description,
                split=split_for_id(src.table.id),
            )
            pair.validate()
            pairs.append(pair)
    return pairs
