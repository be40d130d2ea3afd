"""Description generation: a desk-scale encoder-decoder trained with teacher
forcing, greedy/beam decoding, prompt construction for external completion
endpoints, and the HTTP adapter itself."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import requests

from .data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SEP_B_ID,
    SEP_H_ID,
    SEP_T_ID,
    KnowledgeSentence,
    LinearizedInput,
    PairRecord,
    Vocabulary,
    render_cell_text,
    segment_tokens,
    tokenize,
)
from .errors import EmptyOutputError, TemplateError, TransportError, ValidationError
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
from .retriever import RetrieverModel, build_vocab_from_pairs, retrieve_topn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationConfig:
    strategy: str = "greedy"  # greedy | beam
    beam_width: int = 1
    max_output_len: int = 64
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValidationError(f"unknown decode strategy {self.strategy!r}")
        if self.beam_width < 1 or self.max_output_len < 1:
            raise ValidationError("beam_width and max_output_len must be >= 1")


@dataclass
class GeneratorModel:
    config: ModelConfig
    vocab: Vocabulary
    params: ParameterSet
    seed: int
    use_bkg: bool = True
    n_kb: int = 3
    train_losses: tuple[float, ...] = ()

    def save(self, path) -> None:
        cfg = ModelConfig(**self.config.as_dict())
        save_checkpoint(path, f"generator:bkg={int(self.use_bkg)}:n_kb={self.n_kb}",
                        cfg, self.seed, self.params, self.vocab.non_reserved_tokens())

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        kind, config, seed, vocab_tokens, tensors = load_checkpoint(path)
        if not kind.startswith("generator"):
            raise ValidationError(f"{path} holds a {kind!r} checkpoint, expected generator")
        flags = dict(part.split("=") for part in kind.split(":")[1:])
        return cls(
            config,
            Vocabulary(vocab_tokens),
            params_from_tensors(tensors, seed),
            seed,
            use_bkg=bool(int(flags.get("bkg", "1"))),
            n_kb=int(flags.get("n_kb", "3")),
        )


def prepare_input(
    pair: PairRecord,
    kb_selected: Sequence[KnowledgeSentence],
    vocab: Vocabulary,
    max_input_len: int,
) -> LinearizedInput:
    """HTB linearization, truncating the knowledge segment first, then the
    table segment, when the assembled input is too long."""
    h, t, b = segment_tokens(pair.table, pair.highlights, kb_selected)
    total = len(h) + len(t) + len(b) + 3
    if total > max_input_len:
        log.warning("pair %s: input of %d tokens exceeds max_input_len=%d; truncating",
                    pair.id, total, max_input_len)
        over = total - max_input_len
        cut_b = min(over, len(b))
        b = b[: len(b) - cut_b]
        over -= cut_b
        if over > 0:
            t = t[: max(0, len(t) - over)]
    ids = [SEP_H_ID, *vocab.encode(h), SEP_T_ID, *vocab.encode(t), SEP_B_ID, *vocab.encode(b)]
    return LinearizedInput(tuple(ids), l_h=len(h), l_t=len(t), l_b=len(b))


def _select_kb(pair: PairRecord, retriever: RetrieverModel | None, n_kb: int,
               use_bkg: bool) -> list[KnowledgeSentence]:
    if not use_bkg or not pair.kb.sentences:
        return []
    if retriever is None:
        raise ValidationError("a trained retriever is required when use_bkg is set")
    ranked = retrieve_topn(retriever, pair, n=n_kb)
    by_id = {s.id: s for s in pair.kb.sentences}
    return [by_id[r.sentence_id] for r in ranked]


def _pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def train_generator(
    pairs: Sequence[PairRecord],
    retriever: RetrieverModel | None,
    n_kb: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    use_bkg: bool = True,
    vocab: Vocabulary | None = None,
) -> GeneratorModel:
    """Teacher-forced training on reference descriptions.

    With use_bkg=False the knowledge segment is left empty, ablating the
    retrieved sentences while keeping the input grammar fixed.
    """
    train = [p for p in pairs if p.split == "train"]
    if not train:
        raise ValidationError("train_generator requires a non-empty train split")
    if vocab is None:
        vocab = build_vocab_from_pairs(train, include_descriptions=True)
    cfg = ModelConfig(**{**model_cfg.as_dict(), "vocab_size": vocab.size})
    params = init_seq2seq_params(cfg, train_cfg.seed)

    enc_inputs: list[list[int]] = []
    dec_inputs: list[list[int]] = []
    targets: list[list[int]] = []
    for pair in train:
        kb_sel = _select_kb(pair, retriever, n_kb, use_bkg)
        lin = prepare_input(pair, kb_sel, vocab, cfg.max_input_len)
        if use_bkg is False and lin.l_b != 0:
            raise ValidationError("ablated input unexpectedly contains knowledge tokens")
        desc_ids = vocab.encode(tokenize(pair.description))[: cfg.max_output_len - 1]
        enc_inputs.append(list(lin.token_ids))
        dec_inputs.append([BOS_ID, *desc_ids])
        targets.append([*desc_ids, EOS_ID])

    hyper = AdamHyper(learning_rate=train_cfg.learning_rate, grad_clip_norm=train_cfg.grad_clip_norm)
    state = AdamState()
    losses: list[float] = []
    order = list(range(len(enc_inputs)))
    for _epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_cfg.batch_size):
            idxs = order[start : start + train_cfg.batch_size]
            enc_ids, enc_mask = _pad_batch([enc_inputs[i] for i in idxs])
            dec_ids, dec_mask = _pad_batch([dec_inputs[i] for i in idxs])
            tgt_ids, _ = _pad_batch([targets[i] for i in idxs])
            params.zero_grads()
            memory = encoder_forward(params, cfg, enc_ids, enc_mask)
            hidden = decoder_forward(params, cfg, dec_ids, memory, enc_mask)
            logits = tied_logits(params, hidden)
            loss = cross_entropy(logits, tgt_ids, dec_mask)
            backward(loss)
            state = adam_step(params, collect_grads(params), state, hyper)
            epoch_loss += float(loss.value)
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return GeneratorModel(cfg, vocab, params, train_cfg.seed, use_bkg, n_kb, tuple(losses))


def teacher_forced_loss(model: GeneratorModel, pair: PairRecord,
                        kb_selected: Sequence[KnowledgeSentence]) -> float:
    """Per-token cross entropy of the reference under the model."""
    lin = prepare_input(pair, kb_selected, model.vocab, model.config.max_input_len)
    desc_ids = model.vocab.encode(tokenize(pair.description))[: model.config.max_output_len - 1]
    enc_ids, enc_mask = _pad_batch([list(lin.token_ids)])
    dec_ids, dec_mask = _pad_batch([[BOS_ID, *desc_ids]])
    tgt_ids, _ = _pad_batch([[*desc_ids, EOS_ID]])
    memory = encoder_forward(model.params, model.config, enc_ids, enc_mask)
    hidden = decoder_forward(model.params, model.config, dec_ids, memory, enc_mask)
    logits = tied_logits(model.params, hidden)
    return float(cross_entropy(logits, tgt_ids, dec_mask).value)


def _step_log_probs(model: GeneratorModel, memory: T.Tensor, enc_mask: np.ndarray,
                    prefixes: list[list[int]]) -> np.ndarray:
    """Next-token log-probabilities for each prefix; memory is broadcast per row."""
    dec_ids, _ = _pad_batch(prefixes)
    mem_val = memory.value
    if mem_val.shape[0] == 1 and len(prefixes) > 1:
        mem_val = np.repeat(mem_val, len(prefixes), axis=0)
        enc_mask = np.repeat(enc_mask, len(prefixes), axis=0)
    hidden = decoder_forward(model.params, model.config, dec_ids, T.constant(mem_val), enc_mask)
    logits = tied_logits(model.params, hidden).value
    last = np.array([logits[i, len(p) - 1] for i, p in enumerate(prefixes)])
    z = last - last.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _hyp_score(log_prob_sum: float, length: int, penalty: float) -> float:
    return log_prob_sum / (length**penalty) if length > 0 else -np.inf


def decode(model: GeneratorModel, lin: LinearizedInput, cfg: GenerationConfig) -> list[int]:
    """Decode token ids (EOS included when emitted) from a linearized input."""
    enc_ids, enc_mask = _pad_batch([list(lin.token_ids)])
    memory = encoder_forward(model.params, model.config, enc_ids, enc_mask)
    max_len = min(cfg.max_output_len, model.config.max_output_len)

    def greedy() -> tuple[list[int], float]:
        prefix = [BOS_ID]
        log_sum = 0.0
        out: list[int] = []
        for _ in range(max_len):
            lp = _step_log_probs(model, memory, enc_mask, [prefix])[0]
            tok = int(lp.argmax())  # argmax takes the lowest id on exact ties
            log_sum += float(lp[tok])
            out.append(tok)
            prefix.append(tok)
            if tok == EOS_ID:
                break
        return out, log_sum

    greedy_out, greedy_sum = greedy()
    if cfg.strategy == "greedy" or cfg.beam_width == 1:
        return greedy_out

    # Beam search; the greedy hypothesis is kept as a candidate so the returned
    # sequence never scores below it.
    live: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        if not live:
            break
        lps = _step_log_probs(model, memory, enc_mask, [p for p, _ in live])
        candidates: list[tuple[float, list[int], int]] = []
        for (prefix, score), lp in zip(live, lps):
            top = np.argsort(-lp, kind="stable")[: cfg.beam_width]
            for tok in top:
                candidates.append((score + float(lp[tok]), prefix, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, prefix, tok in candidates[: cfg.beam_width]:
            seq = prefix + [tok]
            if tok == EOS_ID or len(seq) - 1 >= max_len:
                finished.append((seq, score))
            else:
                live.append((seq, score))
    finished.extend(live)

    best_out, best_score = greedy_out, _hyp_score(greedy_sum, len(greedy_out), cfg.length_penalty)
    for seq, score in finished:
        out = seq[1:]
        norm = _hyp_score(score, len(out), cfg.length_penalty)
        if norm > best_score or (norm == best_score and out < best_out):
            best_out, best_score = out, norm
    return best_out


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    words = [vocab.token_of(i) for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]
    return " ".join(words)


@dataclass(frozen=True)
class GenerationResult:
    pair_id: str
    text: str
    retrieved_ids: tuple[str, ...]
    strategy: str
    beam_width: int

    def as_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "output": self.text,
            "retrieved": list(self.retrieved_ids),
            "decode": {"strategy": self.strategy, "beam_width": self.beam_width},
        }


def generate_description(
    model: GeneratorModel,
    retriever: RetrieverModel | None,
    pair: PairRecord,
    n_kb: int,
    cfg: GenerationConfig,
) -> GenerationResult:
    kb_sel = _select_kb(pair, retriever, n_kb, model.use_bkg)
    lin = prepare_input(pair, kb_sel, model.vocab, model.config.max_input_len)
    ids = decode(model, lin, cfg)
    return GenerationResult(
        pair_id=pair.id,
        text=detokenize(model.vocab, ids),
        retrieved_ids=tuple(s.id for s in kb_sel),
        strategy=cfg.strategy,
        beam_width=cfg.beam_width,
    )


def generate_many(
    model: GeneratorModel,
    retriever: RetrieverModel | None,
    pairs: Sequence[PairRecord],
    n_kb: int,
    cfg: GenerationConfig,
    threads: int = 1,
) -> list[GenerationResult]:
    """Generate for many pairs; results keep input order regardless of threads."""
    if threads <= 1:
        return [generate_description(model, retriever, p, n_kb, cfg) for p in pairs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: generate_description(model, retriever, p, n_kb, cfg), pairs))


# ---------------------------------------------------------------------------
# External completion endpoint (direct generation baseline)
# ---------------------------------------------------------------------------

PROMPT_TEMPLATES = {
    "default": (
        "Table caption: {caption}\n"
        "Highlighted cells: {highlighted_cells}\n"
        "Table: {table}\n"
        "Knowledge: {knowledge}\n"
        "{instruction}\n"
    ),
}

_INSTRUCTION = (
    "Write a one-sentence analytical description of the table that is "
    "consistent with the highlighted cells and knowledge."
)

_REQUIRED_SLOTS = ("{caption}", "{highlighted_cells}", "{table}", "{knowledge}", "{instruction}")


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str
    auth_env: str = "CTRLTAB_LLM_KEY"
    timeout_s: float = 30.0
    max_retries: int = 3
    template_id: str = "default"

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValidationError("timeout must be > 0")
        if self.template_id not in PROMPT_TEMPLATES:
            raise TemplateError(f"unknown prompt template {self.template_id!r}")

    @classmethod
    def from_env(cls) -> "LlmClientConfig":
        endpoint = os.environ.get("CTRLTAB_LLM_ENDPOINT", "")
        if not endpoint:
            raise ValidationError("CTRLTAB_LLM_ENDPOINT is not set")
        timeout_ms = float(os.environ.get("CTRLTAB_LLM_TIMEOUT_MS", "30000"))
        return cls(endpoint=endpoint, timeout_s=timeout_ms / 1000.0)


def build_prompt(pair: PairRecord, kb_topn: Sequence[KnowledgeSentence], template: str) -> str:
    for slot in _REQUIRED_SLOTS:
        if slot not in template:
            raise TemplateError(f"template is missing required slot {slot}")
    highlighted = ", ".join(
        f"{cell.attribute}={cell.value}"
        for row, col in pair.highlights.sorted_refs()
        if (cell := pair.table.cell_at(row, col)) is not None
    ) or "(none)"
    table_text = " ".join(render_cell_text(c) for c in pair.table.cells)
    knowledge = " ".join(s.text for s in kb_topn) or "(none)"
    return template.format(
        caption=pair.table.caption,
        highlighted_cells=highlighted,
        table=table_text,
        knowledge=knowledge,
        instruction=_INSTRUCTION,
    )


def post_json_with_retries(
    client_cfg: LlmClientConfig,
    body: dict,
    label: str | None = None,
    sleeper: Callable[[float], None] = time.sleep,
    backoff_base_s: float = 0.5,
) -> dict:
    """One POST with exponential backoff; returns the decoded JSON response."""
    if label is None:
        label = hashlib.sha256(
            json.dumps(body, sort_keys=True).encode("utf-8")
        ).hexdigest()[:12]
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(client_cfg.auth_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error: Exception | None = None
    for attempt in range(client_cfg.max_retries + 1):
        if attempt > 0:
            sleeper(backoff_base_s * 2 ** (attempt - 1))
        try:
            log.info("request %s attempt=%d", label, attempt + 1)
            response = requests.post(
                client_cfg.endpoint, json=body, headers=headers, timeout=client_cfg.timeout_s
            )
            response.raise_for_status()
            data = response.json()
            log.info("response %s retries=%d", label, attempt)
            return data
        except (requests.Timeout, requests.ConnectionError, requests.HTTPError, ValueError) as exc:
            last_error = exc
            log.warning("request %s attempt=%d failed: %s", label, attempt + 1, exc)
    raise TransportError(
        f"request {label} failed after {client_cfg.max_retries + 1} attempts: {last_error}"
    )


def llm_generate(
    client_cfg: LlmClientConfig,
    prompt: str,
    max_tokens: int = 256,
    sleeper: Callable[[float], None] = time.sleep,
    backoff_base_s: float = 0.5,
) -> str:
    """Single completion request; the response text is returned verbatim."""
    prompt_hash = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12]
    data = post_json_with_retries(
        client_cfg, {"prompt": prompt, "max_tokens": max_tokens},
        label=f"prompt={prompt_hash}", sleeper=sleeper, backoff_base_s=backoff_base_s,
    )
    text = data.get("text", "")
    log.info("completion prompt=%s chars=%d", prompt_hash, len(text))
    if not text:
        raise EmptyOutputError(f"empty completion for prompt {prompt_hash}")
    return text


def llm_generate_many(
    client_cfg: LlmClientConfig,
    prompts: Sequence[str],
    max_in_flight: int = 4,
    **kwargs,
) -> list[str]:
    """Bounded-concurrency fan-out preserving input order."""
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda p: llm_generate(client_cfg, p, **kwargs), prompts))
