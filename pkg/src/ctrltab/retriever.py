"""Knowledge retrieval: a conditioned denoising-autoencoder embedding model
plus a TF-IDF baseline.

The embedding model reads a corrupted knowledge sentence together with the
clean table and highlight segments, pools the encoder states into one
vector, and reconstructs the uncorrupted concatenation from that vector
alone.  The pooled vector doubles as the sentence (or, with an empty
knowledge segment, the query) embedding.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import (
    BOS_ID,
    HighlightSet,
    KnowledgeSentence,
    PairRecord,
    Table,
    Vocabulary,
    build_vocabulary,
    segment_tokens,
    tokenize,
)
from .errors import ValidationError
from .nn import (
    AdamHyper,
    AdamState,
    ModelConfig,
    ParameterSet,
    TrainConfig,
    adam_step,
    backward,
    collect_grads,
    cross_entropy,
    decoder_forward,
    encoder_forward,
    init_seq2seq_params,
    load_checkpoint,
    params_from_tensors,
    save_checkpoint,
    tied_logits,
)
from .nn import tensor as T
from .data import PAD_ID, SEP_B_ID, SEP_H_ID, SEP_T_ID

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorruptedInput:
    token_ids: tuple[int, ...]
    deletion_positions: tuple[int, ...]


@dataclass(frozen=True)
class SentenceEmbedding:
    vector: np.ndarray
    sentence_id: str


@dataclass(frozen=True)
class RetrievalResult:
    sentence_id: str
    score: float


def corrupt(tokens: Sequence[int], noise_ratio: float, rng: np.random.Generator) -> CorruptedInput:
    """Delete round(ratio * len) positions uniformly, always leaving a survivor."""
    if not (0.0 <= noise_ratio < 1.0):
        raise ValidationError(f"noise_ratio {noise_ratio} outside [0,1)")
    tokens = list(tokens)
    if not tokens:
        return CorruptedInput((), ())
    n_delete = min(math.floor(noise_ratio * len(tokens) + 0.5), len(tokens) - 1)
    if n_delete == 0:
        return CorruptedInput(tuple(tokens), ())
    positions = sorted(rng.choice(len(tokens), size=n_delete, replace=False).tolist())
    kept = [t for i, t in enumerate(tokens) if i not in set(positions)]
    return CorruptedInput(tuple(kept), tuple(positions))


def _corruption_rng(seed: int, epoch: int, example_idx: int) -> np.random.Generator:
    key = int.from_bytes(
        hashlib.sha256(f"corrupt:{seed}:{epoch}:{example_idx}".encode()).digest()[:16], "little"
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class RetrieverModel:
    config: ModelConfig
    vocab: Vocabulary
    params: ParameterSet
    seed: int
    train_losses: tuple[float, ...] = ()

    def save(self, path) -> None:
        save_checkpoint(path, "retriever", self.config, self.seed, self.params,
                        self.vocab.non_reserved_tokens())

    @classmethod
    def load(cls, path) -> "RetrieverModel":
        kind, config, seed, vocab_tokens, tensors = load_checkpoint(path)
        if kind != "retriever":
            raise ValidationError(f"{path} holds a {kind!r} checkpoint, expected retriever")
        return cls(config, Vocabulary(vocab_tokens), params_from_tensors(tensors, seed), seed)


@dataclass(frozen=True)
class _Example:
    """One training instance: a knowledge sentence with its conditioning context."""

    b_ids: tuple[int, ...]  # uncorrupted knowledge segment (sentence tokens + bar)
    t_ids: tuple[int, ...]
    h_ids: tuple[int, ...]


def _pair_segments(pair: PairRecord, sent: KnowledgeSentence, vocab: Vocabulary) -> _Example:
    h, t, b = segment_tokens(pair.table, pair.highlights, [sent])
    return _Example(tuple(vocab.encode(b)), tuple(vocab.encode(t)), tuple(vocab.encode(h)))


def _assemble(example: _Example, b_ids: Sequence[int]) -> tuple[list[int], list[int]]:
    """Encoder ids (with separators) and reconstruction target (without)."""
    enc = [SEP_B_ID, *b_ids, SEP_T_ID, *example.t_ids, SEP_H_ID, *example.h_ids]
    target = [*example.b_ids, *example.t_ids, *example.h_ids]
    # Reconstruction target length is exactly l_B + l_T + l_H.
    assert len(target) == len(example.b_ids) + len(example.t_ids) + len(example.h_ids)
    return enc, target


def _pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def build_vocab_from_pairs(
    pairs: Sequence[PairRecord], min_freq: int = 1, max_size: int = 8192,
    include_descriptions: bool = True,
) -> Vocabulary:
    def streams() -> Iterable[list[str]]:
        for pair in pairs:
            h, t, b = segment_tokens(pair.table, pair.highlights, list(pair.kb.sentences))
            yield h
            yield t
            yield b
            if include_descriptions:
                yield tokenize(pair.description)

    return build_vocabulary(streams(), min_freq=min_freq, max_size=max_size)


def _truncate_example(ex: _Example, max_input_len: int) -> _Example:
    total = len(ex.b_ids) + len(ex.t_ids) + len(ex.h_ids) + 3
    if total <= max_input_len:
        return ex
    log.warning("input of %d tokens exceeds max_input_len=%d; truncating", total, max_input_len)
    over = total - max_input_len
    b = list(ex.b_ids)
    t = list(ex.t_ids)
    cut_b = min(over, len(b))
    b = b[: len(b) - cut_b]
    over -= cut_b
    if over > 0:
        t = t[: max(0, len(t) - over)]
    return _Example(tuple(b), tuple(t), tuple(ex.h_ids))


def _forward_batch(
    params: ParameterSet,
    cfg: ModelConfig,
    enc_batch: list[list[int]],
    dec_in_batch: list[list[int]],
    target_batch: list[list[int]],
) -> T.Tensor:
    enc_ids, enc_mask = _pad_batch(enc_batch)
    dec_ids, dec_mask = _pad_batch(dec_in_batch)
    targets, _ = _pad_batch(target_batch)
    enc_out = encoder_forward(params, cfg, enc_ids, enc_mask)
    pooled = T.masked_mean(enc_out, enc_mask, axis=1)
    # The decoder sees exactly one context vector: the pooled embedding.
    memory = T.reshape(pooled, (len(enc_batch), 1, cfg.d_model))
    assert memory.shape[1] == 1
    hidden = decoder_forward(params, cfg, dec_ids, memory, np.ones((len(enc_batch), 1), dtype=bool))
    logits = tied_logits(params, hidden)
    return cross_entropy(logits, targets, dec_mask)


def train_retriever(
    pairs: Sequence[PairRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary | None = None,
) -> RetrieverModel:
    """Fit the denoising reconstruction objective on every (sentence, table) pair."""
    train = [p for p in pairs if p.split == "train"]
    if not train:
        raise ValidationError("train_retriever requires a non-empty train split")
    if vocab is None:
        vocab = build_vocab_from_pairs(train, include_descriptions=False)
    cfg = ModelConfig(**{**model_cfg.as_dict(), "vocab_size": vocab.size})
    params = init_seq2seq_params(cfg, train_cfg.seed)

    examples = [
        _truncate_example(_pair_segments(pair, sent, vocab), cfg.max_input_len)
        for pair in train
        for sent in pair.kb.sentences
    ]
    if not examples:
        raise ValidationError("train split contains no knowledge sentences")

    hyper = AdamHyper(learning_rate=train_cfg.learning_rate, grad_clip_norm=train_cfg.grad_clip_norm)
    state = AdamState()
    losses: list[float] = []
    for epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(examples), train_cfg.batch_size):
            batch = examples[start : start + train_cfg.batch_size]
            enc_batch, dec_in_batch, target_batch = [], [], []
            for offset, ex in enumerate(batch):
                rng = _corruption_rng(train_cfg.seed, epoch, start + offset)
                noisy = corrupt(ex.b_ids, train_cfg.noise_ratio, rng)
                enc, target = _assemble(ex, noisy.token_ids)
                enc_batch.append(enc)
                dec_in_batch.append([BOS_ID, *target[:-1]])
                target_batch.append(target)
            params.zero_grads()
            loss = _forward_batch(params, cfg, enc_batch, dec_in_batch, target_batch)
            backward(loss)
            state = adam_step(params, collect_grads(params), state, hyper)
            epoch_loss += float(loss.value)
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return RetrieverModel(cfg, vocab, params, train_cfg.seed, tuple(losses))


def reconstruction_loss(model: RetrieverModel, pairs: Sequence[PairRecord], noise_seed: int = 0) -> float:
    """Mean denoising loss over a dataset with a fixed corruption draw."""
    examples = [
        _truncate_example(_pair_segments(pair, sent, model.vocab), model.config.max_input_len)
        for pair in pairs
        for sent in pair.kb.sentences
    ]
    enc_batch, dec_in_batch, target_batch = [], [], []
    for idx, ex in enumerate(examples):
        rng = _corruption_rng(noise_seed, 0, idx)
        noisy = corrupt(ex.b_ids, 0.6, rng)
        enc, target = _assemble(ex, noisy.token_ids)
        enc_batch.append(enc)
        dec_in_batch.append([BOS_ID, *target[:-1]])
        target_batch.append(target)
    loss = _forward_batch(model.params, model.config, enc_batch, dec_in_batch, target_batch)
    return float(loss.value)


def _encode_pooled(model: RetrieverModel, enc_batch: list[list[int]]) -> np.ndarray:
    enc_ids, enc_mask = _pad_batch(enc_batch)
    enc_out = encoder_forward(model.params, model.config, enc_ids, enc_mask)
    pooled = T.masked_mean(enc_out, enc_mask, axis=1)
    return pooled.value


def embed_sentences(
    model: RetrieverModel,
    sentences: Sequence[KnowledgeSentence],
    table: Table,
    highlights: HighlightSet,
) -> list[SentenceEmbedding]:
    """Embeddings of uncorrupted sentences conditioned on (table, highlights)."""
    h, t, _ = segment_tokens(table, highlights, [])
    h_ids = model.vocab.encode(h)
    t_ids = model.vocab.encode(t)
    enc_batch = []
    for sent in sentences:
        b_ids = model.vocab.encode(tokenize(sent.text) + ["|"])
        ex = _truncate_example(_Example(tuple(b_ids), tuple(t_ids), tuple(h_ids)), model.config.max_input_len)
        enc_batch.append(_assemble(ex, ex.b_ids)[0])
    pooled = _encode_pooled(model, enc_batch)
    return [SentenceEmbedding(pooled[i], s.id) for i, s in enumerate(sentences)]


def embed_sentence(
    model: RetrieverModel, sentence: KnowledgeSentence, table: Table, highlights: HighlightSet
) -> SentenceEmbedding:
    return embed_sentences(model, [sentence], table, highlights)[0]


def embed_query(model: RetrieverModel, table: Table, highlights: HighlightSet) -> SentenceEmbedding:
    """Query embedding: same encoder with an empty knowledge segment."""
    h, t, _ = segment_tokens(table, highlights, [])
    ex = _truncate_example(
        _Example((), tuple(model.vocab.encode(t)), tuple(model.vocab.encode(h))),
        model.config.max_input_len,
    )
    pooled = _encode_pooled(model, [_assemble(ex, ())[0]])
    return SentenceEmbedding(pooled[0], "__query__")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def retrieve_topn(model: RetrieverModel, pair: PairRecord, n: int = 3) -> list[RetrievalResult]:
    """Top-n knowledge sentences by cosine against the table/highlight query."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if not pair.kb.sentences:
        raise ValidationError(f"pair {pair.id} has an empty knowledge base")
    query = embed_query(model, pair.table, pair.highlights)
    embeddings = embed_sentences(model, pair.kb.sentences, pair.table, pair.highlights)
    results = [RetrievalResult(e.sentence_id, cosine(query.vector, e.vector)) for e in embeddings]
    results.sort(key=lambda r: (-r.score, r.sentence_id))
    return results[:n]


# ---------------------------------------------------------------------------
# TF-IDF baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TfidfIndex:
    df: dict[str, int]
    vectors: dict[str, dict[str, float]]
    n_docs: int

    def validate(self) -> None:
        for term, count in self.df.items():
            if count > self.n_docs:
                raise ValidationError(f"df({term})={count} exceeds corpus size {self.n_docs}")


def _tfidf_weights(tokens: Sequence[str], df: dict[str, int], n_docs: int) -> dict[str, float]:
    weights = {}
    for term, tf in Counter(tokens).items():
        idf = math.log((1 + n_docs) / (1 + df.get(term, 0)))
        weights[term] = tf * idf + tf
    return weights


def build_tfidf_index(corpus: Sequence[tuple[str, Sequence[str]]]) -> TfidfIndex:
    """corpus: (sentence_id, tokens) pairs."""
    if not corpus:
        raise ValidationError("cannot index an empty corpus")
    df: Counter[str] = Counter()
    for _, tokens in corpus:
        df.update(set(tokens))
    n_docs = len(corpus)
    vectors = {sid: _tfidf_weights(tokens, df, n_docs) for sid, tokens in corpus}
    index = TfidfIndex(dict(df), vectors, n_docs)
    index.validate()
    return index


def _sparse_cosine(a: dict[str, float], b: dict[str, float]) -> float:
    if not a or not b:
        return 0.0
    dot = sum(w * b[t] for t, w in a.items() if t in b)
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def tfidf_retrieve(
    index_or_corpus: TfidfIndex | Sequence[tuple[str, Sequence[str]]],
    query_tokens: Sequence[str],
    n: int = 3,
) -> list[RetrievalResult]:
    index = index_or_corpus if isinstance(index_or_corpus, TfidfIndex) else build_tfidf_index(index_or_corpus)
    q = _tfidf_weights(query_tokens, index.df, index.n_docs)
    results = [
        RetrievalResult(sid, _sparse_cosine(q, vec)) for sid, vec in index.vectors.items()
    ]
    results.sort(key=lambda r: (-r.score, r.sentence_id))
    return results[:n]
