"""Metric tests.  BLEU expectations come from a brute-force n-gram oracle that
shares no code with the implementation; METEOR fixtures are hand-derived from
the alignment and penalty formulas."""

import csv
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrltab.data import Cell, HighlightSet, KnowledgeBase, PairRecord, Table
from ctrltab.errors import ValidationError
from ctrltab.metrics import (
    SHEET_HEADER,
    aggregate_human_eval,
    bleu,
    cell_recall,
    export_human_eval_sheet,
    load_human_eval_sheet,
    meteor,
    porter_stem,
    score_outputs,
    sign_test,
)


# ---------------------------------------------------------------------------
# Independent BLEU oracle: explicit loops, list-based n-gram counting.
# ---------------------------------------------------------------------------

def oracle_bleu(cands, refs):
    logs = []
    for n in range(1, 5):
        matched = 0
        possible = 0
        for cand, ref in zip(cands, refs):
            cand_grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
            ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            remaining = list(ref_grams)
            for gram in cand_grams:
                if gram in remaining:
                    remaining.remove(gram)
                    matched += 1
            possible += len(cand_grams)
        if possible == 0:
            continue  # order impossible on this corpus; skipped by convention
        if matched == 0:
            return 0.0
        logs.append(math.log(matched / possible))
    if not logs:
        return 0.0
    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(logs) / len(logs))


def random_corpus(rng, n_pairs, vocab=("a", "b", "c", "d", "e", "f")):
    cands, refs = [], []
    for _ in range(n_pairs):
        n_ref = rng.randint(4, 12)
        ref = [rng.choice(vocab) for _ in range(n_ref)]
        cand = list(ref)
        for _ in range(rng.randint(0, 4)):
            pos = rng.randrange(len(cand))
            cand[pos] = rng.choice(vocab)
        if rng.random() < 0.3:
            cand = cand[: rng.randint(2, len(cand))]
        cands.append(cand)
        refs.append(ref)
    return cands, refs


class TestBleu:
    def test_identity(self):
        seqs = [["the", "cat", "sat", "down"], ["another", "test", "case", "here"]]
        assert bleu(seqs, seqs) == pytest.approx(1.0)

    def test_clipped_unigram(self):
        assert bleu([["the"] * 4], [["the", "cat", "sat", "down"]], max_order=1) == pytest.approx(0.25)

    def test_matches_oracle_on_random_pairs(self):
        rng = random.Random(42)
        cands, refs = random_corpus(rng, 50)
        assert bleu(cands, refs) == pytest.approx(oracle_bleu(cands, refs), abs=1e-9)

    def test_zero_when_any_precision_empty(self):
        # No 4-gram overlap anywhere -> aggregate p4 = 0 -> score 0
        assert bleu([["a", "b", "c", "x"]], [["a", "b", "c", "y"]]) == 0.0

    def test_brevity_penalty(self):
        cand = [["a", "b"]]
        ref = [["a", "b", "c", "d"]]
        got = bleu(cand, ref, max_order=2)
        p1, p2 = 2 / 2, 1 / 1
        assert got == pytest.approx(math.exp(1 - 4 / 2) * math.exp(0.5 * (math.log(p1) + math.log(p2))))

    def test_permutation_invariant(self):
        rng = random.Random(7)
        cands, refs = random_corpus(rng, 10)
        direct = bleu(cands, refs)
        order = list(range(10))
        rng.shuffle(order)
        assert bleu([cands[i] for i in order], [refs[i] for i in order]) == pytest.approx(direct)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError):
            bleu([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            bleu([["a"]], [["a"], ["b"]])


class TestPorter:
    @pytest.mark.parametrize("word,stem", [
        ("caresses", "caress"), ("ponies", "poni"), ("cats", "cat"),
        ("agreed", "agre"), ("motoring", "motor"), ("hopping", "hop"),
        ("relational", "relat"), ("triplicate", "triplic"), ("hopeful", "hope"),
        ("adjustment", "adjust"), ("effective", "effect"), ("rate", "rate"),
        ("controll", "control"), ("happy", "happi"), ("sky", "sky"),
    ])
    def test_known_stems(self, word, stem):
        assert porter_stem(word) == stem


class TestMeteor:
    def test_identity_ten_tokens(self):
        # P=R=1, chunks=1, matches=10 -> 1 * (1 - 0.5 * 0.1^3) = 0.9995
        tokens = ["w%d" % i if False else w for i, w in enumerate("a b c d e f g h i j".split())]
        assert meteor(tokens, tokens) == pytest.approx(0.9995, abs=1e-9)

    def test_disjoint(self):
        assert meteor(["xx", "yy"], ["pp", "qq"]) == 0.0

    def test_stem_match_two_tokens(self):
        # stems: cats->cat; 2 matches, 1 chunk, P=R=1 -> Fmean=1
        # penalty = 0.5 * (1/2)^3 = 0.0625 -> 0.9375
        assert meteor("cats sat", "cat sat") == pytest.approx(0.9375, abs=1e-9)

    def test_precision_recall_weighting(self):
        # cand [a b c], ref [a b c d]: m=3, P=1, R=0.75, chunks=1
        # Fmean = P*R/(0.9P + 0.1R) = 0.75/0.975; penalty = 0.5*(1/3)^3
        expected = (0.75 / 0.975) * (1 - 0.5 * (1 / 3) ** 3)
        assert meteor(["a", "b", "c"], ["a", "b", "c", "d"]) == pytest.approx(expected, abs=1e-9)

    def test_two_chunks(self):
        # cand [a b d c], ref [a b c d]: 4 matches; best alignment has 3 chunks
        # ([a b] together, d, c) -> Fmean=1, penalty=0.5*(3/4)^3
        expected = 1 - 0.5 * (3 / 4) ** 3
        assert meteor(["a", "b", "d", "c"], ["a", "b", "c", "d"]) == pytest.approx(expected, abs=1e-9)

    def test_swapped_halves(self):
        # cand [c d a b], ref [a b c d]: 4 matches, 2 chunks
        expected = 1 - 0.5 * (2 / 4) ** 3
        assert meteor(["c", "d", "a", "b"], ["a", "b", "c", "d"]) == pytest.approx(expected, abs=1e-9)

    def test_duplicate_tokens_min_chunks(self):
        # cand [x a x], ref [x a x]: identity, 1 chunk even with duplicates
        assert meteor(["x", "a", "x"], ["x", "a", "x"]) == pytest.approx(1 - 0.5 * (1 / 3) ** 3, abs=1e-9)

    def test_repeated_token_chooses_contiguous(self):
        # cand [b a], ref [a b a]: 2 matches; aligning b->1, a->2 gives 1 chunk
        expected_f = (2 / 2) * (2 / 3) / (0.9 * 1.0 + 0.1 * (2 / 3))
        expected = expected_f * (1 - 0.5 * (1 / 2) ** 3)
        assert meteor(["b", "a"], ["a", "b", "a"]) == pytest.approx(expected, abs=1e-9)

    def test_single_token_match(self):
        # m=1, chunks=1 -> penalty 0.5; P=1, R=1/2; Fmean = 0.5/(0.9+0.05)
        expected = (0.5 / 0.95) * 0.5
        assert meteor(["same"], ["same", "other"]) == pytest.approx(expected, abs=1e-9)

    def test_string_inputs_tokenized(self):
        assert meteor("The cat.", "the cat .") == pytest.approx(1 - 0.5 * (1 / 3) ** 3, abs=1e-9)

    @given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=8))
    @settings(max_examples=40)
    def test_bounded(self, tokens):
        assert 0.0 <= meteor(tokens, tokens) <= 1.0
        assert meteor(tokens, list(reversed(tokens))) <= 1.0

    @given(st.lists(st.sampled_from(["red", "blue", "green", "17.5", "stone"]),
                    min_size=1, max_size=10))
    @settings(max_examples=40)
    def test_identity_laws(self, tokens):
        assert bleu([tokens], [tokens]) == pytest.approx(1.0, abs=1e-12)
        expected = 1 - 0.5 * (1 / len(tokens)) ** 3
        assert meteor(tokens, tokens) == pytest.approx(expected, abs=1e-9)


class TestCellRecall:
    def _table(self):
        return Table(id="t", caption="", n_rows=1, n_cols=3, cells=(
            Cell(0, 0, "metric", "16.90"),
            Cell(0, 1, "model", "ours"),
            Cell(0, 2, "data", "hidden"),
        ))

    def test_all_quoted(self):
        h = HighlightSet(frozenset({(0, 0), (0, 1)}))
        assert cell_recall("ours reaches 16.90", h, self._table()) == 1.0

    def test_half_quoted(self):
        h = HighlightSet(frozenset({(0, 0), (0, 1)}))
        assert cell_recall("the score is 16.90", h, self._table()) == 0.5

    def test_empty_highlights_convention(self):
        assert cell_recall("anything", HighlightSet(), self._table()) == 1.0

    def test_monotone_under_concatenation(self):
        h = HighlightSet(frozenset({(0, 0), (0, 1)}))
        t = self._table()
        first = cell_recall("mentions ours", h, t)
        assert cell_recall("mentions ours and 16.90", h, t) >= first


class TestHumanEvalSheet:
    def _pairs(self):
        table = Table(id="p1", caption="", n_rows=1, n_cols=1, cells=(Cell(0, 0, "m", "v"),))
        return [
            PairRecord(f"p{i}", Table(id=f"p{i}", caption="", n_rows=1, n_cols=1,
                                      cells=(Cell(0, 0, "m", "v"),)),
                       HighlightSet(frozenset({(0, 0)})), KnowledgeBase(), f"ref {i}", "test")
            for i in range(3)
        ]

    def test_export_rows(self, tmp_path):
        path = tmp_path / "sheet.csv"
        outputs = {f"p{i}": f"out {i}" for i in range(3)}
        export_human_eval_sheet(outputs, self._pairs(), path, seed=3)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 4
        assert lines[0] == ",".join(SHEET_HEADER)

    def test_same_seed_same_order(self, tmp_path):
        outputs = {f"p{i}": f"out {i}" for i in range(3)}
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        export_human_eval_sheet(outputs, self._pairs(), a, seed=11)
        export_human_eval_sheet(outputs, self._pairs(), b, seed=11)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_pair_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            export_human_eval_sheet({"zz": "x"}, self._pairs(), tmp_path / "s.csv")

    def test_fluency_validation(self, tmp_path):
        path = tmp_path / "sheet.csv"
        outputs = {"p0": "out"}
        export_human_eval_sheet(outputs, self._pairs(), path)
        rows = list(csv.reader(path.open()))
        rows[1][5] = "6"
        with path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        with pytest.raises(ValidationError, match="fluency"):
            load_human_eval_sheet(path)

    def test_load_and_aggregate(self, tmp_path):
        path = tmp_path / "sheet.csv"
        outputs = {"p0": "out", "p1": "out"}
        export_human_eval_sheet(outputs, self._pairs(), path)
        rows = list(csv.reader(path.open()))
        for r in rows[1:]:
            r[5], r[6], r[7], r[8] = "4", "0.5", "1.0", "0.25"
        with path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        loaded = load_human_eval_sheet(path)
        agg = aggregate_human_eval(loaded)
        assert agg == {"fluency": 4.0, "faithfulness": 0.5, "recall": 1.0, "valid_facts": 0.25}


class TestScoreOutputs:
    def test_report_fields(self):
        table = Table(id="p", caption="", n_rows=1, n_cols=1, cells=(Cell(0, 0, "m", "42.5"),))
        pair = PairRecord("p", table, HighlightSet(frozenset({(0, 0)})), KnowledgeBase(),
                          "the result is 42.5", "test")
        report = score_outputs({"p": "the result is 42.5"}, [pair])
        assert report.bleu == pytest.approx(1.0)
        assert report.cell_recall == 1.0
        assert report.n_pairs == 1
        assert 0.0 <= report.meteor <= 1.0


class TestSignTest:
    def test_identical_samples(self):
        assert sign_test([1, 2, 3], [1, 2, 3]) == 1.0

    def test_clear_difference(self):
        a = [1.0] * 12
        b = [0.0] * 12
        assert sign_test(a, b) == pytest.approx(2 / 2**12)

    def test_symmetric(self):
        a = [1, 0, 1, 1, 0, 1, 1, 1]
        b = [0, 1, 0, 0, 1, 0, 0, 0]
        assert sign_test(a, b) == pytest.approx(sign_test(b, a))
