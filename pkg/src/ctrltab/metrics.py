"""Automatic evaluation: corpus BLEU, METEOR (exact + stem matching, no
synonym tables), highlighted-cell recall, human-evaluation sheet export and
ingestion, and a two-sided sign test."""

from __future__ import annotations

import csv
import math
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import detect_entity_mentions
from .data import HighlightSet, PairRecord, Table, render_cell_text, tokenize
from .errors import ValidationError

TokenSeq = Sequence[str]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[TokenSeq], references: Sequence[TokenSeq], max_order: int = 4) -> float:
    """Corpus-level BLEU with uniform weights and clipped n-gram precision.

    Precision counts aggregate over the whole corpus before the geometric
    mean; any empty aggregate precision zeroes the score.  Brevity penalty is
    exp(1 - r/c) when the candidate corpus is shorter than the reference."""
    if not candidates:
        raise ValidationError("bleu requires a non-empty corpus")
    if len(candidates) != len(references):
        raise ValidationError(f"{len(candidates)} candidates vs {len(references)} references")
    clipped = [0] * max_order
    total = [0] * max_order
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if cand_len == 0:
        return 0.0
    # Orders yielding no candidate n-grams at all (corpus shorter than n) are
    # excluded so identical short corpora still score 1.
    orders = [n for n in range(max_order) if total[n] > 0]
    if not orders or any(clipped[n] == 0 for n in orders):
        return 0.0
    log_precision = sum(math.log(clipped[n] / total[n]) for n in orders) / len(orders)
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# Porter stemmer (original 1980 algorithm)
# ---------------------------------------------------------------------------

_VOWELS = "aeiou"


def _is_cons(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of vowel-consonant transitions ([C](VC)^m[V])."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        vowel = not _is_cons(stem, i)
        if prev_vowel and not vowel:
            m += 1
        prev_vowel = vowel
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _ends_double_cons(word: str) -> bool:
    return len(word) >= 2 and word[-1] == word[-2] and _is_cons(word, len(word) - 1)


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    n = len(word)
    return (
        _is_cons(word, n - 3)
        and not _is_cons(word, n - 2)
        and _is_cons(word, n - 1)
        and word[-1] not in "wxy"
    )


def porter_stem(word: str) -> str:
    w = word.lower()
    if len(w) <= 2:
        return w

    # Step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif not w.endswith("ss") and w.endswith("s"):
        w = w[:-1]

    # Step 1b
    flag_1b = False
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    elif w.endswith("ed") and _has_vowel(w[:-2]):
        w = w[:-2]
        flag_1b = True
    elif w.endswith("ing") and _has_vowel(w[:-3]):
        w = w[:-3]
        flag_1b = True
    if flag_1b:
        if w.endswith(("at", "bl", "iz")):
            w += "e"
        elif _ends_double_cons(w) and not w.endswith(("l", "s", "z")):
            w = w[:-1]
        elif _measure(w) == 1 and _ends_cvc(w):
            w += "e"

    # Step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # Step 2
    step2 = (
        ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
        ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
        ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
        ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
        ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
    )
    for suffix, repl in step2:
        if w.endswith(suffix):
            if _measure(w[: -len(suffix)]) > 0:
                w = w[: -len(suffix)] + repl
            break

    # Step 3
    step3 = (
        ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
        ("ical", "ic"), ("ful", ""), ("ness", ""),
    )
    for suffix, repl in step3:
        if w.endswith(suffix):
            if _measure(w[: -len(suffix)]) > 0:
                w = w[: -len(suffix)] + repl
            break

    # Step 4
    step4 = (
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
        "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    )
    for suffix in sorted(step4, key=len, reverse=True):
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 1:
                if suffix == "ion" and not stem.endswith(("s", "t")):
                    continue
                w = stem
            break

    # Step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            w = stem
    # Step 5b
    if _measure(w) > 1 and _ends_double_cons(w) and w.endswith("l"):
        w = w[:-1]
    return w


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------

_METEOR_ALPHA = 0.9
_METEOR_BETA = 3.0
_METEOR_GAMMA = 0.5
_SEARCH_BUDGET = 200_000


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    pairs = sorted(pairs)
    chunks = 1
    for (i1, j1), (i2, j2) in zip(pairs, pairs[1:]):
        if i2 != i1 + 1 or j2 != j1 + 1:
            chunks += 1
    return chunks


def _min_chunk_alignment(cand_stems: list[str], ref_stems: list[str]) -> tuple[int, int]:
    """(matches, chunks) of a maximum matching with the fewest chunks.

    Exhaustive branch-and-bound for small ambiguity; deterministic in-order
    pairing per stem class as a fallback when the search budget runs out."""
    classes: dict[str, tuple[list[int], list[int]]] = {}
    for i, s in enumerate(cand_stems):
        classes.setdefault(s, ([], []))[0].append(i)
    for j, s in enumerate(ref_stems):
        if s in classes:
            classes[s][1].append(j)
    need = {s: min(len(ci), len(rj)) for s, (ci, rj) in classes.items() if ci and rj}
    matches = sum(need.values())
    if matches == 0:
        return 0, 0

    cand_class = {i: s for s, (ci, _) in classes.items() for i in ci if s in need}
    remaining_after: dict[str, list[int]] = {}
    for s in need:
        positions = classes[s][0]
        remaining_after[s] = positions

    best = [matches + 1]
    budget = [_SEARCH_BUDGET]
    matchable = sorted(cand_class)

    def dfs(k: int, used_ref: set, left_need: dict, left_cand: dict, last: tuple[int, int] | None, chunks: int):
        if budget[0] <= 0 or chunks >= best[0]:
            return
        budget[0] -= 1
        if k == len(matchable):
            if all(v == 0 for v in left_need.values()):
                best[0] = min(best[0], chunks)
            return
        i = matchable[k]
        s = cand_class[i]
        options: list[int | None] = []
        if left_need[s] > 0:
            refs = [j for j in classes[s][1] if j not in used_ref]
            if last is not None and last[0] == i - 1 and (last[1] + 1) in refs:
                options.append(last[1] + 1)
                refs = [j for j in refs if j != last[1] + 1]
            options.extend(refs)
        if left_cand[s] - 1 >= left_need[s]:
            options.append(None)  # skip this candidate position
        for j in options:
            if j is None:
                left_cand[s] -= 1
                dfs(k + 1, used_ref, left_need, left_cand, last, chunks)
                left_cand[s] += 1
            else:
                grew = 0 if (last is not None and last == (i - 1, j - 1)) else 1
                used_ref.add(j)
                left_need[s] -= 1
                left_cand[s] -= 1
                dfs(k + 1, used_ref, left_need, left_cand, (i, j), chunks + grew)
                left_cand[s] += 1
                left_need[s] += 1
                used_ref.discard(j)

    dfs(0, set(), dict(need), {s: len(classes[s][0]) for s in need}, None, 0)
    if best[0] <= matches:
        return matches, best[0]

    # Budget exhausted: in-order pairing per class.
    pairs = []
    for s, k in need.items():
        ci, rj = classes[s]
        pairs.extend(zip(ci[:k], rj[:k]))
    return matches, _count_chunks(pairs)


def meteor(candidate: TokenSeq | str, reference: TokenSeq | str) -> float:
    """Unigram F-mean with a fragmentation penalty; matching is exact or
    Porter-stem equality, maximizing matches and then minimizing chunks."""
    cand = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    if not cand or not ref:
        return 0.0
    matches, chunks = _min_chunk_alignment(
        [porter_stem(t) for t in cand], [porter_stem(t) for t in ref]
    )
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = precision * recall / (_METEOR_ALPHA * precision + (1 - _METEOR_ALPHA) * recall)
    penalty = _METEOR_GAMMA * (chunks / matches) ** _METEOR_BETA
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Highlighted-cell recall
# ---------------------------------------------------------------------------

def cell_recall(output: str, highlights: HighlightSet, table: Table) -> float:
    """Fraction of highlighted cells whose value is mentioned in the output.

    Empty highlight sets score 1.0 by convention."""
    if not highlights.refs:
        return 1.0
    mentioned = {
        m.cell_ref
        for m in detect_entity_mentions(output, table)
        if m.kind in ("value_exact", "numeric")
    }
    hit = sum(1 for ref in highlights.refs if ref in mentioned)
    return hit / len(highlights.refs)


# ---------------------------------------------------------------------------
# Score reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreReport:
    bleu: float
    meteor: float
    cell_recall: float
    n_pairs: int
    per_pair: tuple[dict, ...]

    def as_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "meteor": self.meteor,
            "cell_recall": self.cell_recall,
            "n_pairs": self.n_pairs,
            "per_pair": list(self.per_pair),
        }


def score_outputs(outputs: Mapping[str, str], pairs: Sequence[PairRecord]) -> ScoreReport:
    """Corpus BLEU plus mean METEOR and mean highlighted-cell recall."""
    by_id = {p.id: p for p in pairs}
    missing = sorted(set(outputs) - set(by_id))
    if missing:
        raise ValidationError(f"outputs reference unknown pair ids: {missing[:5]}")
    if not outputs:
        raise ValidationError("no outputs to score")
    ordered = [pid for pid in by_id if pid in outputs]
    cands = [tokenize(outputs[pid]) for pid in ordered]
    refs = [tokenize(by_id[pid].description) for pid in ordered]
    per_pair = []
    meteor_sum = 0.0
    recall_sum = 0.0
    # BLEU stays corpus-level only; the breakdown carries the per-pair metrics.
    for pid, cand, ref in zip(ordered, cands, refs):
        pair = by_id[pid]
        m = meteor(cand, ref)
        r = cell_recall(outputs[pid], pair.highlights, pair.table)
        meteor_sum += m
        recall_sum += r
        per_pair.append({"pair_id": pid, "meteor": m, "cell_recall": r})
    return ScoreReport(
        bleu=bleu(cands, refs),
        meteor=meteor_sum / len(ordered),
        cell_recall=recall_sum / len(ordered),
        n_pairs=len(ordered),
        per_pair=tuple(per_pair),
    )


# ---------------------------------------------------------------------------
# Human evaluation sheets
# ---------------------------------------------------------------------------

SHEET_HEADER = [
    "pair_id", "output", "reference", "table", "highlights",
    "fluency", "faithfulness", "recall", "valid_facts",
]


def export_human_eval_sheet(
    outputs: Mapping[str, str],
    pairs: Sequence[PairRecord],
    path: str | Path,
    seed: int = 0,
) -> int:
    """Write a blind-review CSV; rows are shuffled with the returned seed."""
    by_id = {p.id: p for p in pairs}
    rows = []
    for pid in outputs:
        if pid not in by_id:
            raise ValidationError(f"output references unknown pair id {pid!r}")
        pair = by_id[pid]
        highlighted = "; ".join(
            f"{cell.attribute}={cell.value}"
            for row, col in pair.highlights.sorted_refs()
            if (cell := pair.table.cell_at(row, col)) is not None
        )
        table_text = " ".join(render_cell_text(c) for c in pair.table.cells)
        rows.append([pid, outputs[pid], pair.description, table_text, highlighted, "", "", "", ""])
    rows.sort(key=lambda r: r[0])
    random.Random(seed).shuffle(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SHEET_HEADER)
        writer.writerows(rows)
    return seed


def load_human_eval_sheet(path: str | Path) -> list[dict]:
    """Read a filled sheet, validating fluency in 1..5 and fractions in [0,1]."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SHEET_HEADER:
            raise ValidationError(f"unexpected sheet header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            out = dict(row)
            if row["fluency"]:
                try:
                    fluency = int(row["fluency"])
                except ValueError:
                    raise ValidationError(f"line {lineno}: fluency {row['fluency']!r} is not an integer")
                if not 1 <= fluency <= 5:
                    raise ValidationError(f"line {lineno}: fluency {fluency} outside 1..5")
                out["fluency"] = fluency
            for col in ("faithfulness", "recall", "valid_facts"):
                if row[col]:
                    value = float(row[col])
                    if not 0.0 <= value <= 1.0:
                        raise ValidationError(f"line {lineno}: {col} {value} outside [0,1]")
                    out[col] = value
            rows.append(out)
    return rows


def aggregate_human_eval(rows: Sequence[Mapping]) -> dict:
    """Mean of each filled rubric column."""
    result = {}
    for col in ("fluency", "faithfulness", "recall", "valid_facts"):
        values = [float(r[col]) for r in rows if r.get(col) not in ("", None)]
        result[col] = sum(values) / len(values) if values else None
    return result


def sign_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided sign test p-value for paired observations."""
    if len(a) != len(b):
        raise ValidationError("sign_test requires paired samples of equal length")
    wins = sum(1 for x, y in zip(a, b) if x > y)
    losses = sum(1 for x, y in zip(a, b) if x < y)
    n = wins + losses
    if n == 0:
        return 1.0
    k = min(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
    return min(1.0, 2.0 * tail)


def external_score(client_cfg, candidate: str, reference: str) -> float:
    """Pretrained-model similarity score from an external endpoint.

    Same transport contract as the completion adapter: one POST with a JSON
    body, retried with backoff; the response carries a numeric `score`."""
    from .generator import post_json_with_retries

    body = post_json_with_retries(client_cfg, {"candidate": candidate, "reference": reference})
    if "score" not in body:
        raise ValidationError("scoring endpoint response lacks a 'score' field")
    return float(body["score"])
