"""Encoder/decoder transformer blocks built on the autodiff tape.

Pre-norm residual blocks, sinusoidal position encodings, GELU feed-forward,
and output logits tied to the input embedding table.  Weight init is a
scaled uniform drawn from a counter-based generator keyed by (seed, tensor
name), so construction order never affects the values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ValidationError
from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers_enc: int = 1
    n_layers_dec: int = 1
    max_input_len: int = 256
    max_output_len: int = 64
    vocab_size: int = 0
    d_ff: int = 0  # defaults to 4*d_model

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("d_model", "n_heads", "n_layers_enc", "n_layers_dec", "max_input_len", "max_output_len"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def as_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers_enc": self.n_layers_enc,
            "n_layers_dec": self.n_layers_dec,
            "max_input_len": self.max_input_len,
            "max_output_len": self.max_output_len,
            "vocab_size": self.vocab_size,
            "d_ff": self.d_ff,
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    grad_clip_norm: float = 1.0
    seed: int = 0
    noise_ratio: float = 0.6  # retriever corruption only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if not (0.0 <= self.noise_ratio < 1.0):
            raise ValidationError("noise_ratio must be in [0,1)")


def _rng_for(seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


class ParameterSet:
    """Named trainable tensors with deterministic per-name initialization."""

    def __init__(self, rng_seed: int):
        self.rng_seed = rng_seed
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "uniform") -> Tensor:
        if name in self.tensors:
            raise ValidationError(f"duplicate parameter name {name}")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "uniform":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            value = _rng_for(self.rng_seed, name).uniform(-bound, bound, size=shape)
        elif init == "embed":
            bound = np.sqrt(1.0 / shape[-1])
            value = _rng_for(self.rng_seed, name).uniform(-bound, bound, size=shape)
        elif init == "logit_gain":
            # Small output gain squashes the tied logits at init, so the
            # starting loss sits at the uniform-softmax value ln(vocab)
            # regardless of model scale; the gain is learned back quickly.
            value = np.full(shape, 0.1)
        else:
            raise ValidationError(f"unknown init {init!r}")
        t = T.parameter(value, name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@lru_cache(maxsize=8)
def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(d_model // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2 * i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def init_seq2seq_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Embedding table + encoder/decoder stacks; logits reuse the embedding."""
    if cfg.vocab_size <= 0:
        raise ValidationError("vocab_size must be set before init")
    params = ParameterSet(seed)
    params.add("embed", (cfg.vocab_size, cfg.d_model), init="embed")

    def add_attn(prefix: str):
        for w in ("wq", "wk", "wv"):
            params.add(f"{prefix}.{w}", (cfg.d_model, cfg.d_model))
        # Zero output projection: residual branches start as identity, so the
        # initial output distribution stays at the uniform-softmax loss.
        params.add(f"{prefix}.wo", (cfg.d_model, cfg.d_model), init="zeros")
        for b in ("bq", "bk", "bv", "bo"):
            params.add(f"{prefix}.{b}", (cfg.d_model,), init="zeros")

    def add_block(prefix: str, cross: bool):
        params.add(f"{prefix}.ln1.g", (cfg.d_model,), init="ones")
        params.add(f"{prefix}.ln1.b", (cfg.d_model,), init="zeros")
        add_attn(f"{prefix}.attn")
        if cross:
            params.add(f"{prefix}.lnc.g", (cfg.d_model,), init="ones")
            params.add(f"{prefix}.lnc.b", (cfg.d_model,), init="zeros")
            add_attn(f"{prefix}.cross")
        params.add(f"{prefix}.ln2.g", (cfg.d_model,), init="ones")
        params.add(f"{prefix}.ln2.b", (cfg.d_model,), init="zeros")
        params.add(f"{prefix}.ffn.w1", (cfg.d_model, cfg.d_ff))
        params.add(f"{prefix}.ffn.b1", (cfg.d_ff,), init="zeros")
        params.add(f"{prefix}.ffn.w2", (cfg.d_ff, cfg.d_model))
        params.add(f"{prefix}.ffn.b2", (cfg.d_model,), init="zeros")

    for i in range(cfg.n_layers_enc):
        add_block(f"enc.l{i}", cross=False)
    params.add("enc.lnf.g", (cfg.d_model,), init="ones")
    params.add("enc.lnf.b", (cfg.d_model,), init="zeros")
    for i in range(cfg.n_layers_dec):
        add_block(f"dec.l{i}", cross=True)
    params.add("dec.lnf.g", (cfg.d_model,), init="logit_gain")
    params.add("dec.lnf.b", (cfg.d_model,), init="zeros")
    return params


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return T.swapaxes(T.reshape(x, (b, l, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, l, h * dh))


def attention(
    params: ParameterSet,
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    bias: np.ndarray,
    n_heads: int,
) -> Tensor:
    """Multi-head scaled dot-product attention; `bias` is added to the scores."""
    q = T.add(T.matmul(x_q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = T.add(T.matmul(x_kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = T.add(T.matmul(x_kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    d_head = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(d_head))
    scores = T.add(scores, T.constant(bias))
    ctx = T.matmul(T.softmax(scores, axis=-1), vh)
    return T.add(T.matmul(_merge_heads(ctx), params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """(B, Lk) boolean key mask -> (B, 1, 1, Lk) additive bias."""
    return np.where(np.asarray(mask, dtype=bool), 0.0, NEG_INF)[:, None, None, :]


def causal_bias(length: int) -> np.ndarray:
    """(1, 1, L, L) additive bias hiding future positions."""
    return np.where(np.tril(np.ones((length, length), dtype=bool)), 0.0, NEG_INF)[None, None, :, :]


def embed_sequence(params: ParameterSet, cfg: ModelConfig, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and ids.max() >= cfg.vocab_size:
        raise ValidationError("token id outside vocabulary in embed_sequence")
    # Embeddings scale by sqrt(d) so token content is not drowned by the
    # position signal; the tied output path is unaffected.
    x = T.scale(T.embedding(params["embed"], ids), np.sqrt(cfg.d_model))
    pe = sinusoidal_positions(max(cfg.max_input_len, cfg.max_output_len, ids.shape[1]), cfg.d_model)
    return T.add(x, T.constant(pe[None, : ids.shape[1], :]))


def encoder_forward(params: ParameterSet, cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """(B, L) ids and boolean mask -> (B, L, d_model) contextual states."""
    x = embed_sequence(params, cfg, ids)
    bias = key_padding_bias(mask)
    for i in range(cfg.n_layers_enc):
        p = f"enc.l{i}"
        normed = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = T.add(x, attention(params, f"{p}.attn", normed, normed, bias, cfg.n_heads))
        normed = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = T.add(x, _ffn(params, f"{p}.ffn", normed))
    return T.layer_norm(x, params["enc.lnf.g"], params["enc.lnf.b"])


def decoder_forward(
    params: ParameterSet,
    cfg: ModelConfig,
    ids: np.ndarray,
    memory: Tensor,
    memory_mask: np.ndarray,
) -> Tensor:
    """Causal decoder over (B, S) ids cross-attending to `memory` (B, M, d)."""
    x = embed_sequence(params, cfg, ids)
    self_bias = causal_bias(ids.shape[1])
    mem_bias = key_padding_bias(memory_mask)
    for i in range(cfg.n_layers_dec):
        p = f"dec.l{i}"
        normed = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = T.add(x, attention(params, f"{p}.attn", normed, normed, self_bias, cfg.n_heads))
        normed = T.layer_norm(x, params[f"{p}.lnc.g"], params[f"{p}.lnc.b"])
        x = T.add(x, attention(params, f"{p}.cross", normed, memory, mem_bias, cfg.n_heads))
        normed = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = T.add(x, _ffn(params, f"{p}.ffn", normed))
    return T.layer_norm(x, params["dec.lnf.g"], params["dec.lnf.b"])


def tied_logits(params: ParameterSet, hidden: Tensor) -> Tensor:
    """Output logits as inner products against the input embedding table."""
    return T.matmul(hidden, T.swapaxes(params["embed"], 0, 1))
